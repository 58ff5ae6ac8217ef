# From scores to verdicts: calibrating a threshold and reading the numbers.
#
# A threshold is picked on ID *validation* data so that a chosen fraction of
# it is accepted. Everything reported afterwards comes from the test splits.
import numpy as np

from oodmon import data, evaluate, monitors, nn
from oodmon.fixtures import FAR_CLUSTER, desk_fixture

fx = desk_fixture(seed=0)
val_trace = nn.forward_batch(fx.net, fx.split.validation.images)

mon = monitors.fit("MDS", None, fx.net, fx.split.fit)
scores = monitors.score_batch(mon, val_trace)
for target in (0.5, 0.7, 0.9, 1.0):
    tau = monitors.fit_threshold(scores, target)
    print(f"target {target:.1f}: tau = {tau:9.3f}, validation coverage = {np.mean(scores >= tau):.3f}")

mon = mon.calibrate(scores, 0.7)
suite = data.build_ood_suite(fx.split, fx.net, {FAR_CLUSTER: fx.far})
rep = evaluate.evaluate_monitor(mon, fx.split, suite)

lo, hi = rep.id_accuracy_ci
print(f"\nID test accuracy {rep.id_accuracy:.3f}  (95% CI {lo:.3f} to {hi:.3f}, n={rep.n_id})")
print("the validation target was 0.70; the test split is a fresh sample, so expect a few points of drift\n")
for cls, cell in rep.per_class.items():
    print(f"{str(cls):28s} accuracy {cell.accuracy:.3f}   AUROC {cell.auroc:.3f} "
          f"[{cell.auroc_ci[0]:.3f}, {cell.auroc_ci[1]:.3f}]")

# the same thing as the files the command line writes
print()
print(evaluate.accuracy_csv([rep]).decode())
