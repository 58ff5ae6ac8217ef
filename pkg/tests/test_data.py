import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodmon import data, nn
from oodmon.data import OodClassId
from oodmon.fixtures import FAR_CLUSTER


def small(n=2, shape=(1, 2, 2), seed=0):
    rng = np.random.default_rng(seed)
    return data.LabeledDataset(rng.uniform(0, 1, (n,) + shape).astype(np.float32), rng.integers(0, 3, n))


def test_round_trip_bytes(tmp_path):
    ds = small()
    data.save_dataset(ds, tmp_path / "a.mnzd")
    back = data.load_dataset(tmp_path / "a.mnzd")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    data.save_dataset(back, tmp_path / "b.mnzd")
    assert (tmp_path / "a.mnzd").read_bytes() == (tmp_path / "b.mnzd").read_bytes()


def test_truncated_and_bad_magic():
    raw = data.dataset_bytes(small(3))
    with pytest.raises(data.DatasetFormatError, match=r"expected \d+ bytes, got \d+"):
        data.parse_dataset(raw[:-5])
    with pytest.raises(data.DatasetFormatError, match="magic"):
        data.parse_dataset(b"XXXX" + raw[4:])


def test_pixel_range_enforced():
    raw = bytearray(data.dataset_bytes(small(1)))
    raw[-4:] = np.float32(1.5).tobytes()
    with pytest.raises((data.DatasetFormatError, ValueError)):
        data.parse_dataset(bytes(raw))


def test_fixture_dataset_feeds_network(desk):
    ds = data.parse_dataset(data.dataset_bytes(desk.id_data.subset(np.arange(300))))
    assert len(nn.forward_batch(desk.net, ds.images)) == 300


def test_synth_blobs():
    ds = data.synth_blobs(3, 10, (1, 4, 4), seed=2)
    assert len(ds) == 30 and ds.images.min() >= 0 and ds.images.max() <= 1
    assert len(data.synth_blobs(3, 0)) == 0
    assert data.dataset_bytes(data.synth_blobs(2, 5, seed=9)) == data.dataset_bytes(data.synth_blobs(2, 5, seed=9))


def test_separated_blobs_linearly_classifiable():
    ds = data.synth_blobs(2, 100, (1, 4, 4), seed=0, separation=1.5, noise=0.05)
    x = ds.images.reshape(len(ds), -1)
    mu = np.stack([x[ds.labels == c].mean(axis=0) for c in range(2)])
    w, b = mu[1] - mu[0], -(mu[1] @ mu[1] - mu[0] @ mu[0]) / 2
    assert np.mean((x @ w + b > 0) == (ds.labels == 1)) >= 0.99


def test_split_is_stratified_and_disjoint():
    ds = data.synth_blobs(3, 50, seed=0)
    sp = data.split_dataset(ds, seed=3)
    assert (len(sp.fit), len(sp.validation), len(sp.test)) == (90, 30, 30)
    for part in (sp.fit, sp.validation, sp.test):
        assert np.bincount(part.labels).tolist() == [len(part) // 3] * 3
    assert not hasattr(sp.search_view(), "test")


def test_perturbations():
    ds = small(4, (1, 5, 5))
    twice = data.perturb(data.perturb(ds, "Invert", 0), "Invert", 0)
    assert np.max(np.abs(twice.images - ds.images)) <= 1e-7
    np.testing.assert_allclose(data.perturb(ds, "Rotate", 0).images, ds.images, atol=1e-6)
    np.testing.assert_allclose(data.perturb(ds, "Contrast", 1.0).images, ds.images, atol=1e-6)
    k = data.gaussian_kernel(0.8)
    assert abs(k.sum() - 1) < 1e-6
    impulse = np.zeros((1, 1, 9, 9), np.float32)
    impulse[0, 0, 4, 4] = 1
    assert abs(data.gaussian_blur(impulse, 0.8).sum() - 1) < 1e-6
    with pytest.raises(ValueError):
        data.perturb(ds, "Light", 2.0)
    with pytest.raises(ValueError):
        data.perturb(ds, "Contrast", -1.0)


def test_invert_is_exact_involution_on_representable_pixels():
    imgs = np.random.default_rng(0).integers(0, 256, (3, 1, 4, 4)).astype(np.float32) / 256
    ds = data.LabeledDataset(imgs, np.zeros(3, int))
    assert np.array_equal(data.perturb(data.perturb(ds, "Invert", 0), "Invert", 0).images, imgs)


def test_rotate_quarter_turn_matches_rot90():
    img = np.random.default_rng(2).uniform(0, 1, (1, 1, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(data.rotate_images(img, 90.0), np.rot90(img, 1, axes=(2, 3)), atol=1e-5)


def test_noise():
    ds = small(3, (1, 4, 4))
    for v in ("Gaussian", "SaltAndPepper"):
        assert np.array_equal(data.add_noise(ds, v, 0.0, seed=1).images, ds.images)
    sp = data.add_noise(ds, "SaltAndPepper", 1.0, seed=1).images
    assert set(np.unique(sp)) <= {0.0, 1.0}
    flat = data.LabeledDataset(np.full((10, 1, 32, 32), 0.5, np.float32), np.zeros(10, int))
    std = (data.add_noise(flat, "Gaussian", 0.1, seed=0).images - 0.5).std()
    assert 0.08 <= std <= 0.12
    assert np.array_equal(data.add_noise(ds, "Gaussian", 0.2, 5).images, data.add_noise(ds, "Gaussian", 0.2, 5).images)


def test_fgsm(desk):
    ds = desk.split.test
    assert np.array_equal(data.fgsm(ds, desk.net, 0.0).images, ds.images)
    adv = data.fgsm(ds, desk.net, 0.3)
    assert np.max(np.abs(adv.images.astype(np.float64) - ds.images)) <= 0.3
    acc = lambda d: np.mean(nn.forward_batch(desk.net, d.images).predicted == d.labels)  # noqa: E731
    assert acc(adv) < acc(ds)
    assert np.array_equal(adv.labels, ds.labels)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.5), st.integers(0, 1000))
def test_fgsm_linf_bound(eps, seed):
    net = nn.mlp(4, [5], 2, seed=seed % 7, input_shape=(1, 2, 2))
    ds = small(5, (1, 2, 2), seed)
    adv = data.fgsm(ds, net, eps).images.astype(np.float64)
    assert np.max(np.abs(adv - ds.images)) <= eps


def test_suite(desk):
    suite = data.build_ood_suite(desk.split, desk.net)
    assert suite.classes() == list(data.GENERATED_CLASSES)
    suite = data.build_ood_suite(desk.split, desk.net, {FAR_CLUSTER: desk.far})
    assert suite.classes()[-1] == FAR_CLUSTER and suite.classes()[-1].family == "NewWorld"
    assert len(suite.validation(FAR_CLUSTER)) + len(suite.test(FAR_CLUSTER)) == len(desk.far)
    with pytest.raises(ValueError):
        data.build_ood_suite(desk.split, desk.net, {OodClassId("Noise", "Gaussian"): desk.far})
    wrong = data.LabeledDataset(np.zeros((4, 1, 4, 4), np.float32), np.zeros(4, int))
    with pytest.raises(ValueError):
        data.build_ood_suite(desk.split, desk.net, {FAR_CLUSTER: wrong})
    custom = data.build_ood_suite(desk.split, desk.net, intensities={"Rotate": 10.0})
    assert custom.intensity[OodClassId("Perturbation", "Rotate")] == 10.0


def test_class_id_parse():
    assert str(OodClassId.parse("NewWorld/Moon")) == "NewWorld/Moon"
    with pytest.raises(ValueError):
        OodClassId.parse("Nope/X")
    with pytest.raises(ValueError):
        OodClassId.parse("NewWorld")
