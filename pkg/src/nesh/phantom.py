"""Synthetic multi-tensor diffusion phantoms with known ground truth.

A phantom is a voxel grid filled with shape primitives (box, sphere, bent
tube). Each primitive holds one or two tensor compartments; the signal is
the multi-tensor model ``S = S0 * sum_j f_j exp(-b g^T D_j g)``. In a bent
tube the principal axis of a ``tangent`` compartment follows the arc, so
fibre orientation rotates smoothly across voxels.

Specs are usually read from an INI file::

    [grid]
    dims = 16, 16, 16
    voxel_size = 1.25, 1.25, 1.25

    [acquisition]
    bvalue = 1000
    n_directions = 30
    n_b0 = 1
    s0 = 1.0
    noise_sigma = 0.05
    seed = 0

    [background]
    tensor1 = 3e-3 3e-3 3e-3

    [region arc]
    shape = tube
    center = 0, 0, 7.5
    radius = 10
    thickness = 3.5
    tensor1 = 1.7e-3 0.2e-3 0.2e-3 | tangent

Region geometry is given in voxel-index units. Tensor lines read
``eigenvalues [| axis [| fraction]]`` where ``axis`` is a 3-vector or
``tangent`` (tubes only) and defaults to x.
"""

import configparser
from importlib import resources
from dataclasses import dataclass, field
import logging

import numpy as np

from nesh import kernels
from nesh.data_io import DwiDataset, GradientTable
from nesh.dti import design_matrix, fa_from_eigenvalues, md_from_eigenvalues
from nesh.encoding import VoxelGrid
from nesh.errors import InvalidArgumentError, InvalidSpecError

__all__ = [
    "TensorComponent",
    "Region",
    "PhantomSpec",
    "PhantomTruth",
    "hemisphere_directions",
    "default_phantom_spec",
    "load_phantom_spec",
    "bundled_spec_path",
    "generate_phantom",
    "add_rician_noise",
    "downsample_volume",
    "cubic_upsample",
    "upsample_array",
]

log = logging.getLogger(__name__)

_SHAPES = ("box", "sphere", "tube")


@dataclass(frozen=True)
class TensorComponent:
    eigenvalues: tuple
    axis: object = (1.0, 0.0, 0.0)
    fraction: float = 1.0

    def __post_init__(self):
        ev = tuple(float(e) for e in self.eigenvalues)
        if len(ev) != 3 or not all(np.isfinite(ev)) or min(ev) <= 0:
            raise InvalidSpecError(f"tensor eigenvalues must be three positive numbers, got {ev}")
        object.__setattr__(self, "eigenvalues", ev)
        if not isinstance(self.axis, str):
            axis = np.asarray(self.axis, dtype=np.float64)
            if axis.shape != (3,) or not np.linalg.norm(axis) > 0:
                raise InvalidSpecError(f"tensor axis must be a non-zero 3-vector, got {self.axis}")
            object.__setattr__(self, "axis", tuple(axis / np.linalg.norm(axis)))
        elif self.axis != "tangent":
            raise InvalidSpecError(f"tensor axis must be a vector or 'tangent', got {self.axis!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidSpecError(f"volume fraction must lie in [0, 1], got {self.fraction}")


@dataclass(frozen=True)
class Region:
    """Shape primitive in voxel-index coordinates.

    ``box`` uses ``lo``/``hi`` corners (inclusive); ``sphere`` uses ``center``
    and ``radius``; ``tube`` is a torus section: points within ``thickness``
    of the circle of ``radius`` around ``center`` in the plane normal to
    ``normal``.
    """

    shape: str
    components: tuple
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    thickness: float = 1.0
    normal: tuple = (0.0, 0.0, 1.0)
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (0.0, 0.0, 0.0)
    name: str = ""

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise InvalidSpecError(f"region {self.name!r}: shape must be one of {_SHAPES}")
        comps = tuple(self.components)
        if not 1 <= len(comps) <= 2:
            raise InvalidSpecError(f"region {self.name!r}: needs one or two tensors")
        if abs(sum(c.fraction for c in comps) - 1.0) > 1e-9:
            raise InvalidSpecError(f"region {self.name!r}: tensor fractions must sum to 1")
        if self.shape != "tube" and any(c.axis == "tangent" for c in comps):
            raise InvalidSpecError(f"region {self.name!r}: 'tangent' axes are only valid in tubes")
        if self.radius <= 0 or self.thickness <= 0:
            raise InvalidSpecError(f"region {self.name!r}: radius and thickness must be positive")
        object.__setattr__(self, "components", comps)

    def contains(self, idx):
        """Boolean membership for voxel-index points ``(n, 3)``."""
        if self.shape == "box":
            return np.all((idx >= np.asarray(self.lo)) & (idx <= np.asarray(self.hi)), axis=1)
        rel = idx - np.asarray(self.center)
        if self.shape == "sphere":
            return np.linalg.norm(rel, axis=1) <= self.radius
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        height = rel @ n
        in_plane = np.linalg.norm(rel - height[:, None] * n, axis=1)
        return np.hypot(in_plane - self.radius, height) <= self.thickness

    def frames(self, idx, component):
        """Per-point principal and secondary axes for ``component``."""
        n_pts = idx.shape[0]
        if component.axis != "tangent":
            e1 = np.broadcast_to(np.asarray(component.axis), (n_pts, 3))
            return e1, None
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        rel = idx - np.asarray(self.center)
        radial = rel - (rel @ n)[:, None] * n
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        tangent = np.cross(n, radial)
        return tangent, radial


@dataclass
class PhantomSpec:
    grid: VoxelGrid
    regions: list
    background: tuple
    directions: np.ndarray
    bvalue: float = 1000.0
    s0: float = 1.0
    n_b0: int = 1
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.directions, axis=1)
        if self.directions.shape[0] == 0 or np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidSpecError("directions must be a non-empty set of unit vectors")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be >= 0")
        if self.bvalue <= 0 or self.s0 <= 0:
            raise InvalidSpecError("bvalue and s0 must be positive")
        if self.n_b0 < 0:
            raise InvalidSpecError("n_b0 must be >= 0")
        bg = tuple(self.background)
        if not bg or abs(sum(c.fraction for c in bg) - 1.0) > 1e-9:
            raise InvalidSpecError("background needs tensors whose fractions sum to 1")
        if any(c.axis == "tangent" for c in bg):
            raise InvalidSpecError("background tensors cannot use 'tangent' axes")
        self.background = bg


@dataclass
class PhantomTruth:
    """Ground truth behind a generated phantom.

    ``tensors`` is (W, H, D, 2, 6) packed, ``fractions`` (W, H, D, 2); unused
    compartments have zero fraction. ``md``/``fa`` come from the
    fraction-weighted mean tensor. ``clean`` holds the noiseless signal in the
    same volume order as the dataset.
    """

    tensors: np.ndarray
    fractions: np.ndarray
    clean: np.ndarray
    md: np.ndarray
    fa: np.ndarray
    principal: np.ndarray = field(repr=False, default=None)


def hemisphere_directions(n):
    """``n`` well-spread unit vectors on the upper hemisphere (Fibonacci lattice)."""
    if n < 1:
        raise InvalidArgumentError("need at least one direction")
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    rho = np.sqrt(1.0 - z * z)
    ang = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([rho * np.cos(ang), rho * np.sin(ang), z], axis=1)


def default_phantom_spec(n_directions=30, noise_sigma=0.05, seed=0, size=16, bvalue=1000.0):
    """Bent-tube phantom used throughout the tests.

    A quarter-circle fibre bundle sweeping from +x to +y, an isotropic
    sphere, and a straight z-oriented bundle, over a CSF-like background.
    """
    s = size / 16.0
    tube = Region(
        "tube",
        (TensorComponent((1.7e-3, 0.2e-3, 0.2e-3), "tangent"),),
        center=(0.0, 0.0, 7.5 * s),
        radius=10.0 * s,
        thickness=3.5 * s,
        name="arc",
    )
    sphere = Region(
        "sphere",
        (TensorComponent((0.9e-3, 0.9e-3, 0.9e-3)),),
        center=(12.0 * s, 12.0 * s, 3.5 * s),
        radius=2.6 * s,
        name="blob",
    )
    box = Region(
        "box",
        (TensorComponent((1.5e-3, 0.3e-3, 0.3e-3), (0.0, 0.0, 1.0)),),
        lo=(11.0 * s, 11.0 * s, 8.0 * s),
        hi=(14.0 * s, 14.0 * s, 15.0 * s),
        name="column",
    )
    return PhantomSpec(
        grid=VoxelGrid((size, size, size), (1.25, 1.25, 1.25)),
        regions=[tube, sphere, box],
        background=(TensorComponent((3.0e-3, 3.0e-3, 3.0e-3)),),
        directions=hemisphere_directions(n_directions),
        bvalue=bvalue,
        s0=1.0,
        n_b0=1,
        noise_sigma=noise_sigma,
        seed=seed,
    )


def _floats(text, key, count=None):
    try:
        vals = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise InvalidSpecError(f"{key}: expected numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise InvalidSpecError(f"{key}: expected {count} values, got {len(vals)}")
    return vals


def _tensor_line(text, key):
    parts = [p.strip() for p in text.split("|")]
    if not 1 <= len(parts) <= 3:
        raise InvalidSpecError(f"{key}: expected 'eigenvalues [| axis [| fraction]]'")
    ev = _floats(parts[0], key, 3)
    axis = (1.0, 0.0, 0.0)
    if len(parts) > 1 and parts[1]:
        axis = "tangent" if parts[1] == "tangent" else tuple(_floats(parts[1], key, 3))
    fraction = _floats(parts[2], key, 1)[0] if len(parts) > 2 else None
    return ev, axis, fraction


def _components(section, where):
    keys = sorted(k for k in section if k.startswith("tensor"))
    if not keys:
        raise InvalidSpecError(f"[{where}]: needs at least one tensorN key")
    raw = [(_tensor_line(section[k], f"[{where}] {k}")) for k in keys]
    default_frac = 1.0 / len(raw)
    comps = []
    for key, (ev, axis, frac) in zip(keys, raw):
        try:
            comps.append(TensorComponent(ev, axis, default_frac if frac is None else frac))
        except InvalidSpecError as exc:
            raise InvalidSpecError(f"[{where}] {key}: {exc}") from None
    return tuple(comps)


def _check_keys(section, allowed, where):
    for key in section:
        if key not in allowed and not key.startswith("tensor"):
            raise InvalidSpecError(f"[{where}]: unknown key {key!r}")


def bundled_spec_path(name="bent_tube"):
    """Path of a phantom INI shipped with the package (``nesh/data/<name>.ini``)."""
    path = resources.files("nesh") / "data" / f"{name}.ini"
    if not path.is_file():
        raise InvalidSpecError(f"no bundled phantom named {name!r}")
    return str(path)


def load_phantom_spec(path):
    """Parse an INI phantom description (schema in the module docstring)."""
    cfg = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cfg.read_file(fh)
    except configparser.Error as exc:
        raise InvalidSpecError(f"{path}: {exc}") from None
    for required in ("grid", "acquisition", "background"):
        if required not in cfg:
            raise InvalidSpecError(f"missing section [{required}]")

    g = cfg["grid"]
    _check_keys(g, {"dims", "voxel_size", "origin"}, "grid")
    if "dims" not in g:
        raise InvalidSpecError("[grid] dims: required")
    dims = [int(v) for v in _floats(g["dims"], "[grid] dims", 3)]
    vs = _floats(g.get("voxel_size", "1 1 1"), "[grid] voxel_size", 3)
    origin = _floats(g.get("origin", "0 0 0"), "[grid] origin", 3)
    try:
        grid = VoxelGrid(tuple(dims), tuple(vs), tuple(origin))
    except InvalidArgumentError as exc:
        raise InvalidSpecError(f"[grid]: {exc}") from None

    a = cfg["acquisition"]
    _check_keys(a, {"bvalue", "n_directions", "directions_file", "n_b0", "s0", "noise_sigma", "seed"},
                "acquisition")
    if "directions_file" in a:
        dirs = np.loadtxt(a["directions_file"], ndmin=2)
        if dirs.shape[1] != 3:
            dirs = dirs.T
    elif "n_directions" in a:
        dirs = hemisphere_directions(int(_floats(a["n_directions"], "[acquisition] n_directions", 1)[0]))
    else:
        raise InvalidSpecError("[acquisition] n_directions: required (or directions_file)")

    def scalar(key, default):
        return _floats(a[key], f"[acquisition] {key}", 1)[0] if key in a else default

    background = _components(cfg["background"], "background")
    _check_keys(cfg["background"], set(), "background")

    regions = []
    for name in cfg.sections():
        if not name.startswith("region"):
            if name not in ("grid", "acquisition", "background"):
                raise InvalidSpecError(f"unknown section [{name}]")
            continue
        sec = cfg[name]
        _check_keys(sec, {"shape", "center", "radius", "thickness", "normal", "lo", "hi"}, name)
        shape = sec.get("shape", "").strip()
        kwargs = {"name": name[len("region"):].strip() or name}
        for key in ("center", "normal", "lo", "hi"):
            if key in sec:
                kwargs[key] = tuple(_floats(sec[key], f"[{name}] {key}", 3))
        for key in ("radius", "thickness"):
            if key in sec:
                kwargs[key] = _floats(sec[key], f"[{name}] {key}", 1)[0]
        regions.append(Region(shape, _components(sec, name), **kwargs))

    return PhantomSpec(
        grid=grid,
        regions=regions,
        background=background,
        directions=dirs,
        bvalue=scalar("bvalue", 1000.0),
        s0=scalar("s0", 1.0),
        n_b0=int(scalar("n_b0", 1)),
        noise_sigma=scalar("noise_sigma", 0.0),
        seed=int(scalar("seed", 0)),
    )


def _packed_tensors(evals, e1, e2):
    """Packed tensors from eigenvalues and principal/secondary axes per point."""
    n = e1.shape[0]
    e1 = np.asarray(e1, dtype=np.float64)
    if e2 is None:
        helper = np.eye(3)[np.argmin(np.abs(e1), axis=1)]
        e2 = np.cross(e1, helper)
    e2 = e2 - np.sum(e2 * e1, axis=1, keepdims=True) * e1
    e2 /= np.linalg.norm(e2, axis=1, keepdims=True)
    e3 = np.cross(e1, e2)
    mats = (evals[0] * e1[:, :, None] * e1[:, None, :]
            + evals[1] * e2[:, :, None] * e2[:, None, :]
            + evals[2] * e3[:, :, None] * e3[:, None, :])
    out = np.empty((n, 6))
    out[:, 0] = mats[:, 0, 0]
    out[:, 1] = mats[:, 0, 1]
    out[:, 2] = mats[:, 0, 2]
    out[:, 3] = mats[:, 1, 1]
    out[:, 4] = mats[:, 1, 2]
    out[:, 5] = mats[:, 2, 2]
    return out


def generate_phantom(spec):
    """Build the (noisy) dataset and its ground truth.

    Volumes are ordered b=0 first, then one per direction. The mask is the
    union of all regions; where regions overlap, the last one listed wins.
    """
    grid = spec.grid
    idx = np.indices(grid.dims, dtype=np.float64).reshape(3, -1).T
    n_vox = idx.shape[0]
    tensors = np.zeros((n_vox, 2, 6))
    fractions = np.zeros((n_vox, 2))
    mask = np.zeros(n_vox, dtype=bool)

    def assign(sel, components, region=None):
        pts = idx[sel]
        tensors[sel] = 0.0
        fractions[sel] = 0.0
        for j, comp in enumerate(components):
            if region is None:
                e1 = np.broadcast_to(np.asarray(comp.axis), (pts.shape[0], 3))
                e2 = None
            else:
                e1, e2 = region.frames(pts, comp)
            tensors[sel, j] = _packed_tensors(comp.eigenvalues, e1, e2)
            fractions[sel, j] = comp.fraction

    assign(np.ones(n_vox, dtype=bool), spec.background)
    for region in spec.regions:
        sel = region.contains(idx)
        if sel.any():
            assign(sel, region.components, region)
            mask |= sel

    design = design_matrix(spec.directions)
    # (n_vox, 2, n_dirs)
    quad = np.einsum("dk,vck->vcd", design, tensors)
    dw = spec.s0 * np.einsum("vc,vcd->vd", fractions, np.exp(-spec.bvalue * quad))
    clean = np.concatenate([np.full((n_vox, spec.n_b0), spec.s0), dw], axis=1)

    mean_tensor = np.einsum("vc,vck->vk", fractions, tensors)
    evals, evecs = kernels.sym_eig3(mean_tensor)
    dims = grid.dims
    n_vol = clean.shape[1]
    truth = PhantomTruth(
        tensors=tensors.reshape(dims + (2, 6)),
        fractions=fractions.reshape(dims + (2,)),
        clean=clean.reshape(dims + (n_vol,)),
        md=md_from_eigenvalues(evals).reshape(dims),
        fa=fa_from_eigenvalues(evals).reshape(dims),
        principal=evecs[:, :, 0].reshape(dims + (3,)),
    )
    noisy = add_rician_noise(truth.clean, spec.noise_sigma * spec.s0, spec.seed)

    bvecs = np.concatenate([np.zeros((spec.n_b0, 3)), spec.directions])
    bvals = np.concatenate([np.zeros(spec.n_b0), np.full(spec.directions.shape[0], float(spec.bvalue))])
    dataset = DwiDataset(noisy, grid, GradientTable(bvecs, bvals), mask.reshape(dims))
    return dataset, truth


def add_rician_noise(volume, sigma, seed):
    """Magnitude of the signal plus complex Gaussian noise of std ``sigma``."""
    volume = np.asarray(volume, dtype=np.float64)
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    if sigma == 0:
        return volume.copy()
    rng = np.random.default_rng(seed)
    n1 = rng.normal(0.0, sigma, size=volume.shape)
    n2 = rng.normal(0.0, sigma, size=volume.shape)
    return np.sqrt((volume + n1) ** 2 + n2 ** 2)


def downsample_volume(dataset, factor):
    """Block-average ``factor``-cubed voxel blocks.

    Axes not divisible by ``factor`` are cropped (with a warning). The mask is
    kept where at least half of a block was masked.
    """
    f = int(factor)
    if f < 1 or f != factor:
        raise InvalidArgumentError(f"downsampling factor must be a positive integer, got {factor}")
    dims = dataset.grid.dims
    new_dims = tuple(d // f for d in dims)
    if min(new_dims) < 1:
        raise InvalidArgumentError(f"grid {dims} too small for factor {f}")
    if any(d % f for d in dims):
        log.warning("grid %s not divisible by %d; cropping to %s", dims, f, tuple(n * f for n in new_dims))
    crop = tuple(slice(0, n * f) for n in new_dims)
    data = dataset.data[crop]
    n_vol = data.shape[3]
    blocks = data.reshape(new_dims[0], f, new_dims[1], f, new_dims[2], f, n_vol)
    down = blocks.mean(axis=(1, 3, 5))
    mask = None
    if dataset.mask is not None:
        mblocks = dataset.mask[crop].reshape(new_dims[0], f, new_dims[1], f, new_dims[2], f)
        mask = mblocks.mean(axis=(1, 3, 5)) >= 0.5
    grid = dataset.grid.downsampled(f)
    affine = None if dataset.affine is None else dataset.output_affine(grid)
    return DwiDataset(down, grid, dataset.gradients, mask, affine)


def upsample_array(data, factor):
    """Separable Catmull-Rom upsampling of the first three axes of ``data``.

    New samples sit at the centres of the subdivided voxels, i.e. old index
    position ``(j + 0.5) / factor - 0.5``.
    """
    f = int(factor)
    if f < 1 or f != factor:
        raise InvalidArgumentError(f"upsampling factor must be a positive integer, got {factor}")
    out = np.asarray(data, dtype=np.float64)
    if f == 1:
        return out.copy()
    for axis in range(3):
        n_old = out.shape[axis]
        positions = (np.arange(n_old * f) + 0.5) / f - 0.5
        moved = np.moveaxis(out, axis, -1)
        lead = moved.shape[:-1]
        res = kernels.catmull_rom_lines(moved.reshape(-1, n_old), positions)
        out = np.moveaxis(res.reshape(lead + (n_old * f,)), -1, axis)
    return np.ascontiguousarray(out)


def cubic_upsample(dataset, factor):
    """Upsample every volume by ``factor`` with Catmull-Rom interpolation.

    The mask is upsampled by nearest neighbour.
    """
    up = upsample_array(dataset.data, factor)
    f = int(factor)
    mask = None
    if dataset.mask is not None:
        mask = np.repeat(np.repeat(np.repeat(dataset.mask, f, 0), f, 1), f, 2)
    grid = dataset.grid.upsampled(f)
    affine = None if dataset.affine is None else dataset.output_affine(grid)
    return DwiDataset(up, grid, dataset.gradients, mask, affine)
