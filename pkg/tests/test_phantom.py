import math

import numpy as np
import pytest

from nesh import kernels
from nesh.data_io import DwiDataset, GradientTable
from nesh.dti import DiffusionTensor
from nesh.encoding import VoxelGrid
from nesh.errors import InvalidArgumentError, InvalidSpecError
from nesh.phantom import (
    PhantomSpec,
    Region,
    TensorComponent,
    add_rician_noise,
    bundled_spec_path,
    cubic_upsample,
    default_phantom_spec,
    downsample_volume,
    generate_phantom,
    hemisphere_directions,
    load_phantom_spec,
    upsample_array,
)
from oracles import catmull_rom_oracle

PROLATE = (1.7e-3, 0.2e-3, 0.2e-3)


def single_region_spec(components, dirs, shape="box", **geom):
    region = Region(shape, components, **({"lo": (0, 0, 0), "hi": (9, 9, 9)} | geom))
    return PhantomSpec(VoxelGrid((3, 3, 3)), [region], (TensorComponent((3e-3,) * 3),), dirs)


def test_forward_model_hand_value():
    spec = single_region_spec((TensorComponent(PROLATE, (1.0, 0.0, 0.0)),), np.array([[1.0, 0, 0]]))
    ds, truth = generate_phantom(spec)
    np.testing.assert_allclose(ds.data[..., 1], math.exp(-1.7), rtol=1e-12)
    np.testing.assert_allclose(truth.clean[..., 1], 0.1827, atol=1e-4)


def test_b0_equals_s0_and_isotropic_is_flat():
    spec = single_region_spec((TensorComponent((1e-3,) * 3),), hemisphere_directions(12))
    spec.s0 = 3.0
    spec.n_b0 = 2
    ds, truth = generate_phantom(spec)
    assert np.all(ds.data[..., :2] == 3.0)
    dw = truth.clean[..., 2:]
    np.testing.assert_allclose(dw, 3.0 * math.exp(-1.0), rtol=1e-12)
    assert np.all(ds.gradients.bvals[:2] == 0)


def test_two_compartment_truth():
    comps = (TensorComponent(PROLATE, (1, 0, 0), 0.5), TensorComponent(PROLATE, (0, 1, 0), 0.5))
    ds, truth = generate_phantom(single_region_spec(comps, hemisphere_directions(20)))
    np.testing.assert_allclose(truth.fractions[0, 0, 0], [0.5, 0.5])
    mean = 0.5 * (DiffusionTensor.from_eigen(PROLATE, (1, 0, 0)).matrix
                  + DiffusionTensor.from_eigen(PROLATE, (0, 1, 0)).matrix)
    assert truth.md[0, 0, 0] == pytest.approx(np.trace(mean) / 3)


def test_default_phantom_contents(clean_phantom):
    ds, truth = clean_phantom
    assert ds.data.shape == (16, 16, 16, 31)
    assert ds.grid.voxel_size == (1.25, 1.25, 1.25)
    assert 0 < ds.mask.sum() < ds.grid.n_voxels
    # the fibre follows the arc around the z axis: along x where the arc
    # crosses the y axis, along y where it crosses the x axis
    assert ds.mask[2, 9, 7] and ds.mask[9, 2, 7]
    assert abs(truth.principal[2, 9, 7, 0]) > 0.9
    assert abs(truth.principal[9, 2, 7, 1]) > 0.9
    assert truth.fa[~ds.mask].max() < 1e-9


def test_bundled_spec_matches_default():
    spec = load_phantom_spec(bundled_spec_path())
    a, ta = generate_phantom(spec)
    b, tb = generate_phantom(default_phantom_spec())
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.mask, b.mask)


@pytest.mark.parametrize(
    "patch, key",
    [
        (("dims = 16, 16, 16", "dims = 16, 16"), "dims"),
        (("radius = 2.6", "radius = -1"), "radius"),
        (("bvalue = 1000", "bvalue = fast"), "bvalue"),
        (("thickness = 3.5", "thickness = 3.5\nwobble = 2"), "wobble"),
        (("shape = sphere", "shape = cone"), "shape"),
    ],
)
def test_invalid_spec_names_key(tmp_path, patch, key):
    text = open(bundled_spec_path()).read().replace(*patch)
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(InvalidSpecError, match=key):
        load_phantom_spec(p)


def test_degenerate_tensor_rejected():
    with pytest.raises(InvalidSpecError):
        TensorComponent((-1e-3, 1e-3, 1e-3))


def test_rician_sigma_zero_is_identity(rng):
    v = rng.uniform(size=(4, 4))
    out = add_rician_noise(v, 0.0, 1)
    np.testing.assert_array_equal(out, v)


def test_rician_deterministic(rng):
    v = rng.uniform(size=(50,))
    np.testing.assert_array_equal(add_rician_noise(v, 0.1, 5), add_rician_noise(v, 0.1, 5))
    assert not np.array_equal(add_rician_noise(v, 0.1, 5), add_rician_noise(v, 0.1, 6))


def test_rician_rayleigh_mean():
    sigma = 0.05
    out = add_rician_noise(np.zeros(200_000), sigma, 0)
    want = sigma * math.sqrt(math.pi / 2)
    # standard error of the mean: sigma * sqrt((4 - pi) / 2) / sqrt(n)
    se = sigma * math.sqrt((4 - math.pi) / 2) / math.sqrt(out.size)
    assert abs(out.mean() - want) < 5 * se


def test_rician_high_snr_is_gaussian():
    out = add_rician_noise(np.full(100_000, 1.0), 0.01, 3)
    assert out.mean() == pytest.approx(1.0 + 0.01**2 / 2, abs=2e-4)
    assert out.std() == pytest.approx(0.01, rel=0.02)


def grid_dataset(data, mask=None):
    n = data.shape[3]
    table = GradientTable(hemisphere_directions(n), np.full(n, 1000.0))
    return DwiDataset(data, VoxelGrid(data.shape[:3], (1.25,) * 3), table, mask)


def test_downsample_constant_and_shape():
    ds = grid_dataset(np.full((16, 16, 16, 2), 0.3))
    down = downsample_volume(ds, 2)
    assert down.data.shape == (8, 8, 8, 2)
    np.testing.assert_allclose(down.data, 0.3)
    assert down.grid.voxel_size == (2.5, 2.5, 2.5)


def test_downsample_checkerboard():
    board = (np.indices((8, 8, 8)).sum(axis=0) % 2).astype(float)[..., None]
    np.testing.assert_array_equal(downsample_volume(grid_dataset(board), 2).data, 0.5)


def test_downsample_errors_and_crop(caplog):
    ds = grid_dataset(np.ones((5, 4, 4, 1)))
    with pytest.raises(InvalidArgumentError):
        downsample_volume(ds, 0)
    assert downsample_volume(ds, 2).data.shape == (2, 2, 2, 1)
    assert "cropping" in caplog.text


def test_upsample_identity_and_constant():
    data = np.random.default_rng(0).uniform(size=(4, 5, 3, 2))
    ds = grid_dataset(data)
    np.testing.assert_array_equal(cubic_upsample(ds, 1).data, data)
    const = cubic_upsample(grid_dataset(np.full((4, 4, 4, 1), 0.7)), 3).data
    np.testing.assert_allclose(const, 0.7, rtol=0, atol=1e-14)


def test_upsample_reproduces_linear_ramp(backend):
    idx = np.indices((6, 5, 4), dtype=float)
    ramp = (0.3 * idx[0] - 0.2 * idx[1] + 0.1 * idx[2] + 1.0)[..., None]
    up = upsample_array(ramp, 2)
    fine = (np.indices((12, 10, 8), dtype=float) + 0.5) / 2 - 0.5
    want = 0.3 * fine[0] - 0.2 * fine[1] + 0.1 * fine[2] + 1.0
    np.testing.assert_allclose(up[..., 0], want, rtol=0, atol=1e-12)


def test_catmull_rom_oracle(backend, rng):
    lines = rng.normal(size=(7, 9))
    pos = np.concatenate([rng.uniform(-0.5, 8.5, 30), np.arange(9.0), [-0.25, 8.25]])
    got = kernels.catmull_rom_lines(lines, pos)
    want = np.array([[catmull_rom_oracle(list(row), t) for t in pos] for row in lines])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_catmull_rom_backends_agree(rng):
    lines = rng.normal(size=(50, 12))
    pos = (np.arange(36) + 0.5) / 3 - 0.5
    py = kernels.load_backend("python").catmull_rom_lines(lines, pos)
    np.testing.assert_allclose(kernels.catmull_rom_lines(lines, pos), py, rtol=0, atol=1e-13)


def test_upsampled_grid_matches_downsample_inverse(clean_phantom):
    ds, _ = clean_phantom
    down = downsample_volume(ds, 2)
    up = cubic_upsample(down, 2)
    assert up.grid == ds.grid
    assert up.data.shape == ds.data.shape
