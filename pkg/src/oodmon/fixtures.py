"""Desk-scale fixtures: synthetic ID blobs, a trained MLP, and a far-away cluster."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, nn

FAR_CLUSTER = data.OodClassId("NewWorld", "FarCluster")


@dataclass(frozen=True)
class DeskFixture:
    net: nn.Network
    id_data: data.LabeledDataset
    split: data.SplitDataset
    far: data.LabeledDataset


def far_cluster(n: int = 200, image=(1, 8, 8), seed: int = 1) -> data.LabeledDataset:
    """Dim, low-contrast images nowhere near the ID class templates."""
    return data.synth_blobs(1, n, image, seed=seed, separation=0.1, noise=0.03, center=0.05,
                            template_offset=1000, name="far_cluster")


def desk_fixture(seed: int = 0, classes: int = 3, per_class: int = 200, image=(1, 8, 8),
                 hidden=(100, 100, 100), epochs: int = 20) -> DeskFixture:
    ds = data.synth_blobs(classes, per_class, image, seed=seed, separation=0.6, noise=0.15, name="blobs")
    split = data.split_dataset(ds, seed=seed)
    net = nn.mlp(int(np.prod(image)), list(hidden), classes, seed=seed, input_shape=tuple(image))
    net = nn.train_classifier(split.fit, net, epochs=epochs, lr=0.05, batch=32, seed=seed)
    return DeskFixture(net, ds, split, far_cluster(per_class, image, seed + 1))


CONFIG_TEMPLATE = """\
seed = {seed}
out = "out"
network = "net.json"

[id]
path = "id.mnzd"
split = [0.6, 0.2, 0.2]

[[collected]]
path = "far.mnzd"
class = "NewWorld/FarCluster"

[monitors]
select = "all"
target_id_accuracy = 0.7

[optimize]
method = "random"
targets = ["NewWorld/FarCluster"]
weights = [1.0]
min_id_accuracy = 0.7
trials = 100
"""


def write_fixture(directory, seed: int = 0) -> Path:
    """Write net.json, id.mnzd, far.mnzd and config.toml; returns the config path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    fx = desk_fixture(seed)
    nn.save_network(fx.net, out / "net.json")
    data.save_dataset(fx.id_data, out / "id.mnzd")
    data.save_dataset(fx.far, out / "far.mnzd")
    cfg = out / "config.toml"
    cfg.write_text(CONFIG_TEMPLATE.format(seed=seed), encoding="utf-8")
    return cfg
