import itertools

import numpy as np
import pytest

from nesh.data_io import DwiDataset, GradientTable
from nesh.encoding import VoxelGrid
from nesh.errors import InvalidArgumentError
from nesh.evaluation import (
    angular_sweep,
    difference_map,
    masked_rmse,
    subsample_directions,
    write_sweep_csv,
)
from nesh.model import TrainingConfig
from nesh.phantom import hemisphere_directions

TINY = TrainingConfig(hidden_dim=16, n_layers=3, epochs=2, batch_size=64, lr=1e-3, lpos=2)


def icosahedron_axes():
    g = (1 + 5**0.5) / 2
    verts = np.array([[0, 1, g], [0, -1, g], [1, g, 0], [-1, g, 0], [g, 0, 1], [-g, 0, 1]], float)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True)


def min_axis_angle(dirs):
    return min(np.arccos(min(1.0, abs(a @ b))) for a, b in itertools.combinations(dirs, 2))


def test_rmse_examples(rng):
    a = rng.normal(size=(3, 3, 2, 4))
    assert masked_rmse(a, a).rmse == 0.0
    assert masked_rmse(a + 0.25, a).rmse == pytest.approx(0.25)
    mask = np.zeros((3, 3, 2), bool)
    mask[1, 2, 0] = True
    one_a, one_b = np.zeros((3, 3, 2, 1)), np.zeros((3, 3, 2, 1))
    one_a[1, 2, 0, 0], one_b[1, 2, 0, 0] = 2.0, 3.0
    rep = masked_rmse(one_a, one_b, mask, arm="shi")
    assert (rep.rmse, rep.n_voxels, rep.n_directions, rep.arm) == (1.0, 1, 1, "shi")
    assert "voxels=1" in rep.line()


def test_rmse_counts_only_masked_voxels():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    b[0, 0, 0] = 1.0
    mask = np.zeros((4, 4, 4), bool)
    mask[:2, 0, 0] = True
    assert masked_rmse(a, b, mask).rmse == pytest.approx(np.sqrt(0.5))


def test_rmse_errors():
    with pytest.raises(InvalidArgumentError):
        masked_rmse(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(InvalidArgumentError):
        masked_rmse(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 2), bool))


def test_difference_map(rng):
    fa = rng.uniform(size=(4, 4, 4))
    assert np.all(difference_map(fa, fa).values == 0)
    other = rng.uniform(size=(4, 4, 4))
    np.testing.assert_array_equal(difference_map(fa, other).values, -difference_map(other, fa).values)
    bumped = fa.copy()
    bumped[1, 2, 3] += 0.1
    d = difference_map(fa, bumped).values
    assert d[1, 2, 3] == pytest.approx(-0.1)
    d[1, 2, 3] = 0
    assert np.all(d == 0)
    with pytest.raises(InvalidArgumentError):
        difference_map(fa, fa[:3])


def test_subsample_identity_and_single():
    dirs = hemisphere_directions(12)
    np.testing.assert_array_equal(subsample_directions(dirs, 12), np.arange(12))
    one = subsample_directions(dirs, 1, seed=4)
    assert one.shape == (1,)
    np.testing.assert_array_equal(one, subsample_directions(dirs, 1, seed=4))
    for bad in (0, 13):
        with pytest.raises(InvalidArgumentError):
            subsample_directions(dirs, bad)


def test_subsample_beats_random_on_icosahedron():
    axes = icosahedron_axes()
    picked = axes[subsample_directions(axes, 3, seed=0)]
    best = min_axis_angle(picked)
    for seed in range(100):
        rnd = np.random.default_rng(seed).choice(6, 3, replace=False)
        assert best >= min_axis_angle(axes[rnd]) - 1e-12


def test_subsample_treats_antipodes_as_equal():
    dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0]], float)
    picked = set(subsample_directions(dirs, 2, seed=0).tolist())
    assert 2 in picked


def test_subsample_deterministic():
    dirs = hemisphere_directions(60)
    np.testing.assert_array_equal(subsample_directions(dirs, 15, 3), subsample_directions(dirs, 15, 3))


@pytest.fixture(scope="module")
def small_dataset():
    rng = np.random.default_rng(0)
    dirs = hemisphere_directions(20)
    data = np.concatenate([np.ones((3, 3, 2, 1)), rng.uniform(0.2, 0.6, (3, 3, 2, 20))], axis=3)
    table = GradientTable(np.vstack([np.zeros(3), dirs]), np.r_[0.0, np.full(20, 1000.0)])
    return DwiDataset(data, VoxelGrid((3, 3, 2)), table)


def test_sweep_rows_and_full_set(small_dataset):
    res = angular_sweep(small_dataset, 1000, [6, 20], ("nesh", "shi"), TINY)
    assert [(r.arm, r.n_directions) for r in res.rows] == [("nesh", 6), ("shi", 6), ("nesh", 20), ("shi", 20)]
    for r in res.for_arm("shi") + res.for_arm("nesh"):
        assert r.error is None
    full = [r for r in res.rows if r.n_directions == 20]
    for r in full:
        assert r.recon.rmse == r.upsample.rmse


def test_sweep_empty_arms(small_dataset):
    assert angular_sweep(small_dataset, 1000, [6], ()).rows == []


def test_sweep_deterministic(small_dataset, tmp_path):
    a = angular_sweep(small_dataset, 1000, [8], ("nesh", "shi"), TINY, seed=2)
    b = angular_sweep(small_dataset, 1000, [8], ("nesh", "shi"), TINY, seed=2)
    write_sweep_csv(a, tmp_path / "a.csv")
    write_sweep_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "arm,n_directions,recon_rmse,upsample_rmse"


def test_sweep_records_failures(small_dataset):
    res = angular_sweep(small_dataset, 1000, [6], ("shi", "bogus"), lb_lambda=0.0)
    by_arm = {r.arm: r for r in res.rows}
    assert by_arm["shi"].error is None
    assert "bogus" in by_arm["bogus"].error
