# A tour of the monitors on the desk-scale fixture.
#
# Three synthetic image classes, an MLP trained on them, and a dim far-away
# cluster standing in for inputs from a "new world". Every monitor is fitted
# with its default parameters and asked how well it separates the two.
import numpy as np

from oodmon import evaluate, monitors, nn
from oodmon.fixtures import desk_fixture

fx = desk_fixture(seed=0)
acc = np.mean(nn.forward_batch(fx.net, fx.split.test.images).predicted == fx.split.test.labels)
print(f"classifier test accuracy: {acc:.3f}")

fit_trace = nn.forward_batch(fx.net, fx.split.fit.images)
id_trace = nn.forward_batch(fx.net, fx.split.test.images)
far_trace = nn.forward_batch(fx.net, fx.far.images)

# higher score = more ID-like, for every kind
print(f"\n{'monitor':12s} {'mean ID':>10s} {'mean far':>10s} {'AUROC':>7s}")
for kind in monitors.KINDS:
    mon = monitors.fit(kind, None, fx.net, fx.split.fit, trace=fit_trace)
    if kind == "Box":
        # no score, only a verdict: inside some box of the predicted class or not
        inside = monitors.box_inside(mon, id_trace).mean(), monitors.box_inside(mon, far_trace).mean()
        print(f"{kind:12s} {inside[0]:10.3f} {inside[1]:10.3f} {'n/a':>7s}   (fraction inside a box)")
        continue
    s_id = monitors.score_batch(mon, id_trace)
    s_far = monitors.score_batch(mon, far_trace)
    print(f"{kind:12s} {s_id.mean():10.3f} {s_far.mean():10.3f} {evaluate.auroc(s_id, s_far):7.3f}")

# A few monitors are one-parameter generalisations of others.
# ReAct with nothing clipped is Energy; Temperature at T=1 is Softmax.
react = monitors.fit("ReAct", {"percentile": 100.0}, fx.net, fx.split.fit)
energy = monitors.fit("Energy", {"temperature": 1.0}, fx.net, fx.split.fit)
gap = np.abs(monitors.score_batch(react, id_trace) - monitors.score_batch(energy, id_trace)).max()
print(f"\nReAct(100) vs Energy(1), max score gap: {gap:.2e}")
