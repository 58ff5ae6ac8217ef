# What the generated OOD classes look like to the classifier.
#
# Each class is built from the ID images by one transform at a fixed
# intensity. Perturbations mostly keep the predicted class; FGSM is made to
# flip it.
import numpy as np

from oodmon import data, nn
from oodmon.fixtures import desk_fixture

fx = desk_fixture(seed=0)
ds = fx.split.test
base = np.mean(nn.forward_batch(fx.net, ds.images).predicted == ds.labels)
print(f"clean test images: classifier accuracy {base:.3f}\n")

for i, cls in enumerate(data.GENERATED_CLASSES):
    amount = data.DEFAULT_INTENSITIES[cls.variant]
    out = data.generate(cls, ds, fx.net, amount, seed=i)
    acc = np.mean(nn.forward_batch(fx.net, out.images).predicted == ds.labels)
    shift = np.abs(out.images - ds.images).mean()
    print(f"{str(cls):28s} amount {amount:5.2f}   mean |Δpixel| {shift:.3f}   accuracy {acc:.3f}")

# FGSM gets stronger with epsilon; the perturbation never leaves the ε-ball
for eps in (0.05, 0.1, 0.2, 0.3):
    adv = data.fgsm(ds, fx.net, eps)
    acc = np.mean(nn.forward_batch(fx.net, adv.images).predicted == ds.labels)
    print(f"FGSM eps={eps:.2f}: accuracy {acc:.3f}, max |Δ| {np.abs(adv.images - ds.images).max():.4f}")

# Rotation in small steps, a single image printed as characters
img = ds.images[:1]
for deg in (0, 45, 90):
    r = data.rotate_images(img, deg)[0, 0]
    print(f"\nrotated {deg}°")
    for row in r:
        print("  " + "".join(" .:-=+*#%@"[min(int(v * 10), 9)] for v in row))
