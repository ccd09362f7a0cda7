"""NeSH: a coordinate MLP whose output parameterizes an SH series per voxel.

Training pairs every masked voxel centre with every direction of one shell.
Coordinates are scaled to [-1, 1] on the training grid and Fourier encoded;
the network predicts SH coefficients, and the series evaluated in the
pair's direction is compared with the measured signal.
"""

from dataclasses import asdict, dataclass, field, fields
import io
import json
import logging
import struct
import zlib

import numpy as np

from nesh import __version__
from nesh.data_io import select_shell
from nesh.encoding import EncodingConfig, VoxelGrid, positional_encode, scale_coords
from nesh.errors import (
    CheckpointCorruptError,
    InvalidArgumentError,
    InvalidInputError,
    TrainingDivergedError,
)
from nesh.mlp import AdamState, LossTerms, MlpParams, adam_step, forward, init_params, loss_and_grad
from nesh.sh_basis import basis_matrix, num_coefficients

__all__ = [
    "TrainingConfig",
    "SamplePair",
    "TrainingSet",
    "NeshModel",
    "default_lmax",
    "build_training_set",
    "fit",
    "sample_point",
    "sample_points",
    "reconstruct",
    "save_model",
    "load_model",
    "write_loss_log",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NESHCKPT"
CHECKPOINT_VERSION = 1


def default_lmax(n_directions):
    """Maximum SH degree used when none is configured: 8, or 2 for <= 10 directions."""
    return 2 if n_directions <= 10 else 8


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters; ``lmax=None`` selects :func:`default_lmax` at fit time."""

    lmax: int = None
    lpos: int = 12
    sigma: float = 4.0
    n_layers: int = 4
    hidden_dim: int = 2048
    lr: float = 1e-4
    lam: float = 1e-5
    epochs: int = 5
    batch_size: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    smooth_l1_beta: float = 1.0
    head_gain: float = 0.01

    def __post_init__(self):
        if self.lmax is not None:
            num_coefficients(self.lmax)
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch_size and epochs must be >= 1")
        if self.lr < 0 or self.lam < 0:
            raise InvalidArgumentError("lr and lam must be >= 0")
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise InvalidArgumentError("n_layers and hidden_dim must be >= 1")
        if not 0 <= self.head_gain <= 1:
            raise InvalidArgumentError("head_gain must lie in [0, 1]")
        if self.smooth_l1_beta <= 0:
            raise InvalidArgumentError("smooth_l1_beta must be positive")
        EncodingConfig(self.lpos, self.sigma)

    def resolved(self, n_directions):
        if self.lmax is not None:
            return self
        return TrainingConfig(**{**asdict(self), "lmax": default_lmax(n_directions)})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def layer_sizes(self, input_width, lmax=None):
        lmax = self.lmax if lmax is None else lmax
        return [input_width] + [self.hidden_dim] * (self.n_layers - 1) + [num_coefficients(lmax)]


@dataclass(frozen=True)
class SamplePair:
    coord: np.ndarray
    direction: np.ndarray
    target: float


@dataclass
class TrainingSet:
    """All (voxel, direction) pairs of one shell, stored as a dense table.

    Pair ``p`` is voxel ``p // n_d`` with direction ``p % n_d``.
    """

    coords: np.ndarray
    voxels: np.ndarray
    directions: np.ndarray
    targets: np.ndarray
    signal_scale: float
    grid: VoxelGrid
    bvalue: float

    def __len__(self):
        return self.targets.size

    @property
    def n_coords(self):
        return self.coords.shape[0]

    @property
    def n_directions(self):
        return self.directions.shape[0]

    def pair(self, p):
        c, d = divmod(int(p), self.n_directions)
        return SamplePair(self.coords[c], self.directions[d], float(self.targets[c, d]))


@dataclass
class NeshModel:
    params: MlpParams
    encoding: EncodingConfig
    lmax: int
    grid: VoxelGrid
    signal_scale: float
    config: TrainingConfig
    bvalue: float
    fit_directions: np.ndarray
    history: list = field(default_factory=list)
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.params.layer_sizes[-1] != num_coefficients(self.lmax):
            raise InvalidArgumentError("network output width does not match lmax")
        if not self.signal_scale > 0:
            raise InvalidArgumentError("signal_scale must be positive")

    @property
    def n_fit_directions(self):
        return self.fit_directions.shape[0]


def _resolve_shell(dataset, shell):
    if shell is None:
        idx = np.flatnonzero(~dataset.gradients.b0_mask)
        if idx.size == 0:
            raise InvalidInputError("dataset has no diffusion-weighted volumes")
        return idx
    if np.ndim(shell) == 0:
        return select_shell(dataset, float(shell))
    idx = np.asarray(shell, dtype=int)
    if idx.size == 0:
        raise InvalidInputError("empty volume selection")
    return idx


def build_training_set(dataset, shell):
    """Pair every masked voxel with every direction of ``shell``.

    ``shell`` is a target b-value, an explicit array of volume indices, or None
    for all diffusion-weighted volumes. Targets are divided by the mean b=0
    intensity inside the mask, or by the 99th percentile of the shell's masked
    intensities when no b=0 volume exists.
    """
    idx = _resolve_shell(dataset, shell)
    if np.any(dataset.gradients.b0_mask[idx]):
        raise InvalidInputError("b=0 volumes cannot be fitted")
    mask = dataset.mask_or_all()
    if not mask.any():
        raise InvalidInputError("mask is empty")
    voxels = np.argwhere(mask)
    signals = dataset.data[mask][:, idx]
    b0 = dataset.b0_indices()
    if b0.size:
        scale = float(dataset.data[mask][:, b0].mean())
    else:
        scale = float(np.percentile(signals, 99))
    if not scale > 0:
        raise InvalidInputError(f"cannot normalize signal: scale {scale}")
    bvals = dataset.gradients.bvals[idx]
    return TrainingSet(
        coords=dataset.grid.index_to_world(voxels),
        voxels=voxels,
        directions=dataset.gradients.bvecs[idx].copy(),
        targets=signals / scale,
        signal_scale=scale,
        grid=dataset.grid,
        bvalue=float(np.mean(bvals)),
    )


def epoch_permutation(n_pairs, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n_pairs)


def fit(dataset, shell, config=TrainingConfig(), on_epoch=None):
    """Train a NeSH model on one shell.

    Pairs are shuffled every epoch with a generator seeded by
    ``(config.seed, epoch)`` and consumed in batches of ``config.batch_size``.
    ``on_epoch(epoch, LossTerms)`` is called after every epoch with the
    batch-size-weighted mean of the batch losses.

    Raises
    ------
    TrainingDivergedError
        If a loss or gradient becomes non-finite.
    """
    ts = build_training_set(dataset, shell)
    model = fit_training_set(ts, config, on_epoch)
    model.affine = dataset.affine
    return model


def fit_training_set(ts, config, on_epoch=None):
    config = config.resolved(ts.n_directions)
    enc = EncodingConfig(config.lpos, config.sigma)
    x_all = positional_encode(scale_coords(ts.coords, ts.grid), enc)
    basis = basis_matrix(ts.directions, config.lmax)
    targets = ts.targets.ravel()
    n_d = ts.n_directions

    params = init_params(config.layer_sizes(enc.width), config.seed, config.head_gain)
    state = AdamState.for_params(params, config.lr, config.beta1, config.beta2, config.eps)
    history = []
    n_pairs = len(ts)
    for epoch in range(config.epochs):
        order = epoch_permutation(n_pairs, config.seed, epoch)
        sums = np.zeros(2)
        for b, start in enumerate(range(0, n_pairs, config.batch_size)):
            batch = order[start:start + config.batch_size]
            vox, dirs = np.divmod(batch, n_d)
            try:
                terms, grads = loss_and_grad(params, x_all[vox], basis[dirs], targets[batch],
                                             config.lam, config.smooth_l1_beta)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), epoch, b) from None
            if not all(np.all(np.isfinite(g)) for g in grads.arrays()):
                raise TrainingDivergedError("non-finite gradient", epoch, b)
            adam_step(params, grads, state, inplace=True)
            sums += batch.size * np.array([terms.data_term, terms.reg_term])
        terms = LossTerms(sums[0] / n_pairs, sums[1] / n_pairs, config.lam)
        history.append(terms)
        log.info("epoch %d: data %.6g reg %.6g total %.6g", epoch + 1, terms.data_term,
                 terms.reg_term, terms.total)
        if on_epoch is not None:
            on_epoch(epoch, terms)

    return NeshModel(params, enc, config.lmax, ts.grid, ts.signal_scale, config,
                     ts.bvalue, ts.directions, history)


_ROW_BLOCK = 64


def coefficients_at(model, world_points, chunk=4096):
    """Normalized SH coefficients at world coordinates ``(n, 3)``.

    Rows go through the network in zero-padded blocks of a fixed height, so
    BLAS sees the same matrix shapes whether one point or a whole volume is
    evaluated and every point's coefficients are bit-identical either way.
    """
    pts = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    chunk = max(_ROW_BLOCK, chunk // _ROW_BLOCK * _ROW_BLOCK)
    out = np.empty((n, num_coefficients(model.lmax)))
    for start in range(0, n, chunk):
        rows = pts[start:start + chunk]
        padded = np.zeros((-(-rows.shape[0] // _ROW_BLOCK) * _ROW_BLOCK, 3))
        padded[:rows.shape[0]] = rows
        x = positional_encode(scale_coords(padded, model.grid), model.encoding)
        coeffs = np.concatenate([forward(model.params, x[b:b + _ROW_BLOCK])
                                 for b in range(0, x.shape[0], _ROW_BLOCK)])
        out[start:start + rows.shape[0]] = coeffs[:rows.shape[0]]
    return out


def _series(coeffs, basis, scale):
    """``scale * sum_r coeffs[..., r] * basis[..., r]`` in a fixed order.

    Both arguments broadcast against each other. Accumulating one coefficient
    at a time keeps the rounding identical whether a point is evaluated alone
    or as part of a whole volume.
    """
    acc = coeffs[..., 0] * basis[..., 0]
    for r in range(1, coeffs.shape[-1]):
        acc += coeffs[..., r] * basis[..., r]
    return scale * acc


def sample_points(model, world_points, directions):
    """Signal at paired world points ``(n, 3)`` and directions ``(n, 3)``."""
    coeffs = coefficients_at(model, world_points)
    basis = basis_matrix(directions, model.lmax)
    return _series(coeffs, basis, model.signal_scale)


def sample_point(model, world_point, direction):
    """Signal estimate at one world coordinate (mm) along one direction."""
    return float(sample_points(model, np.reshape(world_point, (1, 3)),
                               np.reshape(direction, (1, 3)))[0])


def reconstruct(model, out_grid=None, directions=None):
    """Evaluate the model on every voxel of ``out_grid`` for every direction.

    Coefficients are computed once per voxel and reused for all directions.
    Defaults are the training grid and the fitted directions. Returns an
    array of shape ``out_grid.dims + (n_directions,)``.
    """
    out_grid = model.grid if out_grid is None else out_grid
    directions = model.fit_directions if directions is None else np.asarray(directions, dtype=np.float64)
    directions = directions.reshape(-1, 3)
    if directions.shape[0] == 0:
        raise InvalidArgumentError("no directions to reconstruct")
    coeffs = coefficients_at(model, out_grid.centers())
    basis = basis_matrix(directions, model.lmax)
    vol = _series(coeffs[:, None, :], basis[None, :, :], model.signal_scale)
    return vol.reshape(out_grid.dims + (directions.shape[0],))


def _grid_dict(grid):
    return {"dims": list(grid.dims), "voxel_size": list(grid.voxel_size), "origin": list(grid.origin)}


def save_model(model, path):
    """Write a ``.nesh`` checkpoint.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header, then float64 little-endian arrays (fit directions, then each
    weight and bias in layer order), then a CRC32 of everything before it.
    """
    arrays = [model.fit_directions] + model.params.arrays()
    header = {
        "tool_version": __version__,
        "config": model.config.to_dict(),
        "encoding": {"lpos": model.encoding.lpos, "sigma": model.encoding.sigma},
        "lmax": model.lmax,
        "grid": _grid_dict(model.grid),
        "signal_scale": model.signal_scale,
        "bvalue": model.bvalue,
        "shapes": [list(a.shape) for a in arrays],
        "history": [[t.data_term, t.reg_term, t.lam] for t in model.history],
        "affine": None if model.affine is None else np.asarray(model.affine).tolist(),
    }
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    return path


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 16 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"{path}: not a NeSH checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<IQ", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointCorruptError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (truncated or corrupt)")
    pos += 12
    try:
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    pos += head_len
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        if pos + 8 * n > len(blob) - 4:
            raise CheckpointCorruptError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape))
        pos += 8 * n
    if pos != len(blob) - 4:
        raise CheckpointCorruptError(f"{path}: trailing bytes after parameter data")
    fit_dirs, params = arrays[0], arrays[1:]
    cfg = TrainingConfig.from_dict(header["config"])
    history = [LossTerms(d, r, lam) for d, r, lam in header["history"]]
    g = header["grid"]
    return NeshModel(
        params=MlpParams(params[0::2], params[1::2]),
        encoding=EncodingConfig(**header["encoding"]),
        lmax=header["lmax"],
        grid=VoxelGrid(tuple(g["dims"]), tuple(g["voxel_size"]), tuple(g["origin"])),
        signal_scale=header["signal_scale"],
        config=cfg,
        bvalue=header["bvalue"],
        fit_directions=fit_dirs,
        history=history,
        affine=None if header.get("affine") is None else np.asarray(header["affine"]),
    )


def write_loss_log(history, path):
    with open(path, "w") as fh:
        fh.write("epoch,data_term,reg_term,total\n")
        for i, t in enumerate(history, start=1):
            fh.write(f"{i},{t.data_term!r},{t.reg_term!r},{t.total!r}\n")
