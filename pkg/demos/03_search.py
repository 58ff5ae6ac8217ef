# Tuning a monitor for a specific kind of OOD.
#
# The objective is the accuracy on chosen OOD classes (validation portions),
# subject to keeping at least 70% of the ID validation data. Energy has one
# parameter, so the whole landscape can be drawn on the terminal.
import numpy as np

from oodmon import data, optimize
from oodmon.data import OodClassId
from oodmon.fixtures import FAR_CLUSTER, desk_fixture

fx = desk_fixture(seed=0)
suite = data.build_ood_suite(fx.split, fx.net, {FAR_CLUSTER: fx.far})
noise = OodClassId("Noise", "Gaussian")
ctx = optimize.SearchContext.from_suite(fx.net, fx.split.search_view(), suite, [noise, FAR_CLUSTER])
obj = optimize.Objective((noise,), (1.0,), min_id_accuracy=0.7)

temps = np.geomspace(0.1, 1000, 25)
vals = [optimize.evaluate_objective("Energy", {"temperature": t}, ctx, obj).objective_value for t in temps]
print("Energy, accuracy on Noise/Gaussian vs temperature")
for t, v in zip(temps, vals):
    print(f"  T={t:8.2f}  {v:.3f}  {'#' * int(40 * max(v, 0))}")

# Gradient ascent starts from a seeded random temperature. Started on the flat
# high-temperature plateau, it has nothing to climb and stays put; random and
# grid search cover the whole range.
for method, kw in (("random", {"trials": 50}), ("grid", {"splits": 50}), ("gradient", {"steps": 30})):
    best = optimize.run_method(method, "Energy", ctx, obj, seed=0, **kw).best
    print(f"{method:8s} -> T={best.params['temperature']:8.2f}, objective {best.objective_value:.3f}")

# Two targets at once: sweep the weights and keep the non-dominated results.
two = optimize.Objective((noise, FAR_CLUSTER), (0.5, 0.5), 0.7)
sweep = optimize.multi_objective_sweep("KNN", ctx, two, combos=5, method="grid", splits=50)
front = optimize.pareto_front([p for p, _ in sweep])
print("\nKNN weight sweep (noise weight, far weight) -> accuracies")
for point, cand in sweep:
    mark = "*" if point in front else " "
    print(f" {mark} w={point.weights[0]:.2f},{point.weights[1]:.2f}  k={cand.params['k']:2d}  "
          f"acc={point.accuracies[0]:.3f},{point.accuracies[1]:.3f}")
