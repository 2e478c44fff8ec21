import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from etm.config import domain_specs, resolve_config
from etm.data import (DomainSpec, _render_labels, batch_iterator, class_histogram,
                      generate_domain, load_directory_dataset, save_directory_dataset)
from etm.losses import segmentation_loss

PALETTE = [(0.4, 0.4, 0.4), (0.9, 0.1, 0.1), (0.1, 0.8, 0.2), (0.1, 0.2, 0.9)]


def spec(**kw):
    base = dict(name="d", role="source", palette=PALETTE, samples=12, val_samples=6)
    base.update(kw)
    return DomainSpec(**base)


def test_generation_is_deterministic():
    a, b = generate_domain(spec(), 3), generate_domain(spec(), 3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = generate_domain(spec(), 4)
    assert not np.array_equal(a.labels, c.labels)


def test_zero_shift_identity():
    s = spec(texture_noise_sigma=0.0, clutter_density=0.0)
    assert np.array_equal(generate_domain(s, 1).images, generate_domain(s, 1).images)


def test_shift_never_changes_labels():
    plain = generate_domain(spec(), 5)
    shifted = generate_domain(spec(palette=[(0.1, 0.1, 0.1)] * 4, texture_noise_sigma=0.3,
                                   blur_radius=2, illumination_gain=1.7, clutter_density=2.0), 5)
    assert np.array_equal(plain.labels, shifted.labels)
    assert not np.array_equal(plain.images, shifted.images)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 0.5), st.floats(0.2, 3.0), st.integers(0, 3), st.floats(0, 3))
def test_pixels_stay_in_unit_range(noise, gain, blur, clutter):
    ds = generate_domain(spec(texture_noise_sigma=noise, illumination_gain=gain, blur_radius=blur,
                              clutter_density=clutter, samples=2), 0)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_shapes_per_image_and_class_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lab = _render_labels(rng, (64, 64), 4)
        assert lab.max() <= 3
        assert (lab > 0).any()


def test_every_class_present_in_default_datasets():
    cfg = resolve_config({})
    source = domain_specs(cfg)[0]
    fractions = []
    for seed in range(3):
        ds = generate_domain(dataclasses.replace(source, samples=200), seed)
        assert (class_histogram(ds) > 0).all()
        present = np.array([[(lab == c).any() for c in range(4)] for lab in ds.labels])
        fractions.append(present.mean(axis=0))
    # with 1-4 shapes of 3 shape classes, a given class is in about 60% of images
    assert np.all(np.array(fractions)[:, 1:] > 0.45)


class _EdgeRng:
    """Always proposes a centre on the canvas border, so every shape overflows."""

    def integers(self, lo, hi):
        return lo

    def uniform(self, lo, hi):
        return lo


def test_shape_placement_gives_up():
    with pytest.raises(RuntimeError, match="could not place"):
        _render_labels(_EdgeRng(), (64, 64), 4)


def test_target_train_split_is_unlabeled():
    t = spec(role="target")
    assert generate_domain(t, 0).labels is None
    assert generate_domain(t, 0, "val").labels is not None
    with pytest.raises(ValueError):
        generate_domain(t, 0, "test")


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(palette=PALETTE[:3])
    with pytest.raises(ValueError):
        spec(role="other")
    with pytest.raises(ValueError):
        spec(illumination_gain=0.0)


def test_directory_round_trip(tmp_path):
    ds = generate_domain(spec(), 2)
    save_directory_dataset(ds, tmp_path / "d")
    back = load_directory_dataset(tmp_path / "d")
    assert np.abs(back.images - ds.images).max() <= 1 / 255 + 1e-7
    assert np.array_equal(back.labels, ds.labels)
    assert (back.name, back.role, back.num_classes) == (ds.name, ds.role, ds.num_classes)


def test_loader_without_labels(tmp_path):
    ds = generate_domain(spec(role="target"), 2)
    save_directory_dataset(ds, tmp_path / "t")
    assert load_directory_dataset(tmp_path / "t").labels is None


def test_loader_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError, match="no images found"):
        load_directory_dataset(tmp_path / "empty")
    ds = generate_domain(spec(samples=2), 0)
    save_directory_dataset(ds, tmp_path / "d")
    Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(tmp_path / "d" / "labels" / "0001.png")
    with pytest.raises(ValueError, match="0001.png"):
        load_directory_dataset(tmp_path / "d")
    (tmp_path / "d" / "images" / "0000.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="0000.png"):
        load_directory_dataset(tmp_path / "d")


def test_out_of_range_label_caught_by_loss(tmp_path):
    ds = generate_domain(spec(samples=1), 0)
    ds.labels[0, 0, 0] = 9
    save_directory_dataset(ds, tmp_path / "d")
    back = load_directory_dataset(tmp_path / "d")
    x, y = next(batch_iterator(back, 1, 0))
    with pytest.raises(ValueError, match="outside"):
        segmentation_loss(torch.zeros(1, 4, 64, 64), y)


def test_batch_iterator_full_batch_is_permutation():
    ds = generate_domain(spec(samples=7), 0)
    x, y = next(batch_iterator(ds, 7, seed=1))
    order = [int(np.flatnonzero((ds.images == xi.numpy()).all(axis=(1, 2, 3)))[0]) for xi in x]
    assert sorted(order) == list(range(7))


def test_batch_iterator_determinism_and_counts():
    ds = generate_domain(spec(samples=7), 0)
    ds.images[:, 0, 0, 0] = np.arange(7) / 10.0   # tag each sample
    a, b = batch_iterator(ds, 3, seed=9), batch_iterator(ds, 3, seed=9)
    counts = np.zeros(7, dtype=int)
    for _ in range(70 // 3):
        xa, ya = next(a)
        xb, yb = next(b)
        assert torch.equal(xa, xb) and torch.equal(ya, yb)
        for v in xa[:, 0, 0, 0]:
            counts[int(round(v.item() * 10))] += 1
    xa, _ = next(a)     # last batch of 70 draws has one element left
    counts[int(round(xa[0, 0, 0, 0].item() * 10))] += 1
    assert (counts == 10).all()


def test_batch_iterator_errors():
    t = generate_domain(spec(role="target", samples=3), 0)
    with pytest.raises(ValueError):
        next(batch_iterator(t, 1, 0, labeled=True))
    x, y = next(batch_iterator(t, 2, 0, labeled=False))
    assert y is None and x.shape == (2, 3, 64, 64)
    with pytest.raises(ValueError):
        next(batch_iterator(t, 4, 0, labeled=False))
