"""Datasets, splits, and the OOD taxonomy.

Generated OOD classes are transforms of ID images (perturbations, noise,
FGSM); collected classes are user-supplied datasets whose place in the
taxonomy is declared by the caller.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn

MAGIC = b"MNZD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

FAMILIES = ("Perturbation", "Noise", "WrongPrediction", "UnseenObject", "UnseenEnvironment", "NewWorld")
GENERATED_FAMILIES = frozenset(FAMILIES[:3])


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # n × C × H × W, float32 in [0, 1]
    labels: np.ndarray  # n, int64
    name: str = ""

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be n×C×H×W, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        if images.size and (images.min() < 0.0 or images.max() > 1.0 or not np.all(np.isfinite(images))):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.name if name is None else name)

    def with_images(self, images: np.ndarray, name: str) -> "LabeledDataset":
        return LabeledDataset(images, self.labels, name)


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def dataset_bytes(ds: LabeledDataset) -> bytes:
    n, c, h, w = ds.images.shape
    if n and ds.labels.max() > 255:
        raise DatasetFormatError("labels above 255 do not fit the u8 label field")
    return (_HEADER.pack(MAGIC, VERSION, n, c, h, w) + ds.labels.astype("<u1").tobytes()
            + np.clip(ds.images, 0.0, 1.0).astype("<f4").tobytes())


def load_dataset(path, name: str | None = None) -> LabeledDataset:
    raw = Path(path).read_bytes()
    return parse_dataset(raw, Path(path).stem if name is None else name)


def parse_dataset(raw: bytes, name: str = "") -> LabeledDataset:
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, n, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    expected = _HEADER.size + n + 4 * n * c * h * w
    if len(raw) != expected:
        raise DatasetFormatError(f"payload size mismatch: expected {expected} bytes, got {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u1", count=n, offset=_HEADER.size).astype(np.int64)
    images = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + n).reshape(n, c, h, w)
    if images.size and (images.min() < 0.0 or images.max() > 1.0 or not np.all(np.isfinite(images))):
        raise DatasetFormatError("pixel values outside [0, 1]")
    return LabeledDataset(images.astype(np.float32), labels, name)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SearchSplit:
    """The part of an ID split that optimization may read: no test portion."""
    fit: LabeledDataset
    validation: LabeledDataset


@dataclass(frozen=True)
class SplitDataset:
    fit: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset

    def search_view(self) -> SearchSplit:
        return SearchSplit(self.fit, self.validation)


def _ratio_counts(n: int, ratios) -> list:
    cuts = np.floor(np.cumsum(ratios) / np.sum(ratios) * n + 1e-9).astype(int)
    cuts[-1] = n
    return np.diff(np.concatenate([[0], cuts])).tolist()


def split_dataset(ds: LabeledDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitDataset:
    """Stratified, seeded fit/validation/test split."""
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for c in np.unique(ds.labels):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        start = 0
        for part, count in zip(parts, _ratio_counts(len(idx), ratios)):
            part.append(idx[start:start + count])
            start += count
    fit, val, test = (np.sort(np.concatenate(p)) if p else np.zeros(0, int) for p in parts)
    return SplitDataset(ds.subset(fit, f"{ds.name}/fit"), ds.subset(val, f"{ds.name}/validation"),
                        ds.subset(test, f"{ds.name}/test"))


# ---------------------------------------------------------------- synthetic data

def synth_blobs(classes: int, per_class: int, image=(1, 8, 8), seed: int = 0, separation: float = 1.0,
                noise: float = 0.1, center: float = 0.5, template_offset: int = 0,
                name: str = "blobs") -> LabeledDataset:
    """Class ``c`` images are ``clip(center + 0.5·separation·t_c + noise·N(0,1))``.

    The templates ``t_c`` (uniform in [-1, 1]) depend only on ``c + template_offset``,
    so the same class looks the same for every ``seed``; the seed drives the noise.
    """
    image = tuple(int(s) for s in image)
    templates = np.stack([
        np.random.default_rng([20240527, c + template_offset]).uniform(-1.0, 1.0, image)
        for c in range(classes)]) if classes else np.zeros((0,) + image)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    mu = center + 0.5 * separation * templates[labels] if len(labels) else np.zeros((0,) + image)
    x = mu + noise * rng.standard_normal(mu.shape)
    return LabeledDataset(np.clip(x, 0.0, 1.0).astype(np.float32), labels, name)


# ---------------------------------------------------------------- taxonomy

@dataclass(frozen=True, order=True)
class OodClassId:
    family: str
    variant: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown OOD family {self.family!r}; expected one of {FAMILIES}")

    @property
    def generated(self) -> bool:
        return self.family in GENERATED_FAMILIES

    @property
    def path(self) -> str:
        return f"{self.family}/{self.variant}"

    def __str__(self) -> str:
        return self.path

    @classmethod
    def parse(cls, text: str) -> "OodClassId":
        family, sep, variant = text.partition("/")
        if not sep or not variant:
            raise ValueError(f"OOD class must look like Family/Variant, got {text!r}")
        return cls(family, variant)


GENERATED_CLASSES = (
    OodClassId("Perturbation", "Light"),
    OodClassId("Perturbation", "Contrast"),
    OodClassId("Perturbation", "GaussianBlur"),
    OodClassId("Perturbation", "Invert"),
    OodClassId("Perturbation", "Rotate"),
    OodClassId("Noise", "Gaussian"),
    OodClassId("Noise", "SaltAndPepper"),
    OodClassId("WrongPrediction", "FGSM"),
)

DEFAULT_INTENSITIES = {
    "Light": 0.3, "Contrast": 1.8, "GaussianBlur": 1.0, "Invert": 0.0, "Rotate": 45.0,
    "Gaussian": 0.2, "SaltAndPepper": 0.1, "FGSM": 0.2,
}


def taxonomy_key(cls: OodClassId):
    """Sort key: family order, then the generated-class order, then variant name."""
    gen = GENERATED_CLASSES.index(cls) if cls in GENERATED_CLASSES else len(GENERATED_CLASSES)
    return FAMILIES.index(cls.family), gen, cls.variant


# ---------------------------------------------------------------- transforms

def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(i ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _blur_axis(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="reflect")
    n = x.shape[axis]
    out = np.zeros_like(x)
    for j, wj in enumerate(k):
        out += wj * np.take(xp, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    x = images.astype(np.float64)
    return _blur_axis(_blur_axis(x, k, 2), k, 3)


def rotate_images(images: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise as displayed (rows run downward) about the centre; bilinear, zero fill."""
    n, c, h, w = images.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    sy = cy + math.cos(theta) * dy + math.sin(theta) * dx
    sx = cx - math.sin(theta) * dy + math.cos(theta) * dx
    padded = np.pad(images.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros(images.shape, dtype=np.float64)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            ry = y0 + oy
            rx = x0 + ox
            inside = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
            iy = np.where(inside, ry + 1, 0).astype(int)
            ix = np.where(inside, rx + 1, 0).astype(int)
            out += (wy * wx * inside) * padded[:, :, iy, ix]
    return out


def perturb(ds: LabeledDataset, variant: str, amount: float, seed: int = 0) -> LabeledDataset:
    """Deterministic image perturbations; ``seed`` is accepted for a uniform transform signature."""
    x = ds.images
    if variant == "Light":
        if not -1.0 <= amount <= 1.0:
            raise ValueError(f"Light amount must be in [-1, 1], got {amount}")
        out = x.astype(np.float64) + amount
    elif variant == "Contrast":
        if amount <= 0:
            raise ValueError(f"Contrast amount must be positive, got {amount}")
        out = 0.5 + amount * (x.astype(np.float64) - 0.5)
    elif variant == "GaussianBlur":
        if amount < 0:
            raise ValueError(f"GaussianBlur sigma must be non-negative, got {amount}")
        out = gaussian_blur(x, amount)
    elif variant == "Invert":
        out = 1.0 - x
    elif variant == "Rotate":
        if not math.isfinite(amount):
            raise ValueError("Rotate angle must be finite")
        out = rotate_images(x, amount)
    else:
        raise ValueError(f"unknown perturbation {variant!r}")
    return ds.with_images(np.clip(out, 0.0, 1.0).astype(np.float32), f"{ds.name}+{variant}")


def add_noise(ds: LabeledDataset, variant: str, amount: float, seed: int = 0) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    x = ds.images
    if variant == "Gaussian":
        if amount < 0:
            raise ValueError(f"Gaussian noise std must be non-negative, got {amount}")
        out = np.clip(x + amount * rng.standard_normal(x.shape), 0.0, 1.0)
    elif variant == "SaltAndPepper":
        if not 0.0 <= amount <= 1.0:
            raise ValueError(f"SaltAndPepper probability must be in [0, 1], got {amount}")
        hit = rng.random(x.shape) < amount
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float32), x)
    else:
        raise ValueError(f"unknown noise {variant!r}")
    return ds.with_images(out.astype(np.float32), f"{ds.name}+{variant}")


def fgsm(ds: LabeledDataset, net: nn.Network, epsilon: float) -> LabeledDataset:
    """One signed-gradient step on cross-entropy w.r.t. the network's own prediction."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    x = ds.images
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"dataset images {x.shape[1:]} do not match network input {net.input_shape}")
    if len(x) == 0 or epsilon == 0:
        return ds.with_images(x.copy(), f"{ds.name}+FGSM")
    pred = nn.forward_batch(net, x).predicted
    g = nn.grad_input_batch(net, x, nn.CrossEntropy(pred))
    x64 = x.astype(np.float64)
    adv = np.clip(x64 + epsilon * np.sign(g).astype(np.float64), 0.0, 1.0).astype(np.float32)
    # float32 rounding may overshoot the ε-ball by an ulp; pull those pixels back
    over = np.abs(adv.astype(np.float64) - x64) > epsilon
    adv[over] = np.nextafter(adv[over], x[over])
    return ds.with_images(adv, f"{ds.name}+FGSM")


def generate(cls: OodClassId, ds: LabeledDataset, net: nn.Network, amount: float, seed: int) -> LabeledDataset:
    if cls.family == "Perturbation":
        return perturb(ds, cls.variant, amount, seed)
    if cls.family == "Noise":
        return add_noise(ds, cls.variant, amount, seed)
    if cls == OodClassId("WrongPrediction", "FGSM"):
        return fgsm(ds, net, amount)
    raise ValueError(f"{cls} is not a generated OOD class")


# ---------------------------------------------------------------- suites

@dataclass(frozen=True)
class OodSplit:
    validation: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class OodSuite:
    entries: dict  # OodClassId -> OodSplit
    intensity: dict = field(default_factory=dict)  # OodClassId -> float

    def classes(self) -> list:
        return sorted(self.entries, key=taxonomy_key)

    def __contains__(self, cls) -> bool:
        return cls in self.entries

    def validation(self, cls: OodClassId) -> LabeledDataset:
        return self.entries[cls].validation

    def test(self, cls: OodClassId) -> LabeledDataset:
        return self.entries[cls].test


def split_collected(ds: LabeledDataset, seed: int) -> OodSplit:
    """Seeded half/half validation/test split of a collected OOD dataset."""
    idx = np.random.default_rng(seed).permutation(len(ds))
    half = len(ds) // 2
    return OodSplit(ds.subset(np.sort(idx[:half]), f"{ds.name}/validation"),
                    ds.subset(np.sort(idx[half:]), f"{ds.name}/test"))


def build_ood_suite(split: SplitDataset, net: nn.Network, collected: dict | None = None,
                    intensities: dict | None = None, seed: int = 0) -> OodSuite:
    """Generate every OOD class from the ID validation/test splits and merge collected sets.

    ``intensities`` maps variant names (or ``OodClassId``) to amounts; missing
    entries take the defaults.
    """
    amounts = dict(DEFAULT_INTENSITIES)
    for key, value in (intensities or {}).items():
        amounts[key.variant if isinstance(key, OodClassId) else key] = float(value)
    entries, intensity = {}, {}
    for i, cls in enumerate(GENERATED_CLASSES):
        amount = amounts[cls.variant]
        entries[cls] = OodSplit(generate(cls, split.validation, net, amount, seed * 1000 + 2 * i),
                                generate(cls, split.test, net, amount, seed * 1000 + 2 * i + 1))
        intensity[cls] = amount
    for j, (cls, ds) in enumerate(sorted((collected or {}).items(), key=lambda kv: taxonomy_key(kv[0]))):
        if cls.generated:
            raise ValueError(f"{cls} is a generated class and cannot be supplied as collected data")
        if ds.image_shape != net.input_shape:
            raise ValueError(f"collected {cls} has image shape {ds.image_shape}, network expects {net.input_shape}")
        entries[cls] = split_collected(ds, seed * 1000 + 500 + j)
    return OodSuite(entries, intensity)
