"""Masked RMSE, difference maps, direction subsampling and angular sweeps."""

from dataclasses import dataclass
import logging

import numpy as np

from nesh.errors import InvalidArgumentError, NeshError
from nesh.model import TrainingConfig, _resolve_shell, fit, reconstruct
from nesh.shi import DEFAULT_LB_LAMBDA, shi_fit_volume, shi_sample

__all__ = [
    "RmseReport",
    "SweepRow",
    "SweepResult",
    "ARMS",
    "masked_rmse",
    "difference_map",
    "subsample_directions",
    "angular_sweep",
    "write_sweep_csv",
]

log = logging.getLogger(__name__)

ARMS = ("nesh", "shi", "cubic", "raw")


@dataclass(frozen=True)
class RmseReport:
    rmse: float
    n_voxels: int
    n_directions: int
    arm: str = "raw"

    def line(self):
        return f"arm={self.arm} rmse={self.rmse!r} voxels={self.n_voxels} directions={self.n_directions}"


def _as4d(vol):
    vol = np.asarray(vol, dtype=np.float64)
    return vol[..., None] if vol.ndim == 3 else vol


def masked_rmse(volume_a, volume_b, mask=None, arm="raw"):
    """Root mean squared difference over masked voxels and all directions.

    The mean runs over the masked elements only, not the full grid.
    """
    a, b = _as4d(volume_a), _as4d(volume_b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:3], dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != a.shape[:3]:
        raise InvalidArgumentError(f"mask shape {mask.shape} != spatial shape {a.shape[:3]}")
    n_vox = int(mask.sum())
    if n_vox == 0:
        raise InvalidArgumentError("mask is empty")
    diff = a[mask] - b[mask]
    return RmseReport(float(np.sqrt(np.mean(diff * diff))), n_vox, a.shape[3], arm)


@dataclass
class DifferenceMap:
    values: np.ndarray
    reference: str = "b"


def difference_map(map_a, map_b, reference="b"):
    """Signed difference ``a - b``; ``reference`` names the arm subtracted."""
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return DifferenceMap(a - b, reference)


def subsample_directions(directions, n, seed=0):
    """Pick ``n`` well-spread directions by greedy farthest-point sampling.

    Distances are angles between axes (``arccos |u.v|``), so a direction and
    its antipode count as the same. The first pick is drawn with ``seed``; ties
    go to the lowest index. Returns sorted indices into ``directions``.
    """
    dirs = np.asarray(getattr(directions, "bvecs", directions), dtype=np.float64).reshape(-1, 3)
    total = dirs.shape[0]
    if not 1 <= n <= total:
        raise InvalidArgumentError(f"cannot pick {n} of {total} directions")
    if n == total:
        return np.arange(total)
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    cos = np.clip(np.abs(unit @ unit.T), 0.0, 1.0)
    ang = np.arccos(cos)
    first = int(np.random.default_rng(seed).integers(total))
    chosen = [first]
    nearest = ang[first].copy()
    for _ in range(n - 1):
        nearest[chosen] = -1.0
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, ang[nxt])
    return np.sort(np.asarray(chosen))


@dataclass
class SweepRow:
    arm: str
    n_directions: int
    recon: RmseReport = None
    upsample: RmseReport = None
    error: str = None


@dataclass
class SweepResult:
    rows: list

    def for_arm(self, arm):
        return [r for r in self.rows if r.arm == arm]


def angular_sweep(dataset, shell, n_list, arms=("nesh", "shi"), nesh_config=TrainingConfig(),
                  lb_lambda=DEFAULT_LB_LAMBDA, seed=0, reference=None):
    """Fit each arm on subsets of a shell and score reconstruction and upsampling.

    For each ``n``: choose ``n`` directions with :func:`subsample_directions`,
    fit the arm, then report RMSE against the fitted volumes (reconstruction)
    and against all shell directions (upsampling). ``reference`` optionally
    replaces the dataset's shell volumes as the upsampling target, e.g. a
    noiseless ground truth with shape ``dims + (n_shell,)``. Errors in one arm
    are recorded on its row and do not stop the others.
    """
    full = _resolve_shell(dataset, shell)
    dirs = dataset.gradients.bvecs[full]
    mask = dataset.mask_or_all()
    target_full = dataset.data[..., full] if reference is None else np.asarray(reference)
    if target_full.shape != dataset.grid.dims + (full.size,):
        raise InvalidArgumentError("reference must cover every shell direction")
    rows = []
    for n in sorted(set(int(v) for v in n_list)):
        sub = subsample_directions(dirs, n, seed)
        fit_idx = full[sub]
        for arm in arms:
            try:
                if arm == "nesh":
                    model = fit(dataset, fit_idx, nesh_config)
                    recon = reconstruct(model, dataset.grid, dirs[sub])
                    up = reconstruct(model, dataset.grid, dirs)
                elif arm == "shi":
                    vol = shi_fit_volume(dataset, fit_idx, lb_lambda=lb_lambda)
                    recon = shi_sample(vol, dirs[sub])
                    up = shi_sample(vol, dirs)
                else:
                    raise InvalidArgumentError(f"arm {arm!r} cannot be swept")
                rows.append(SweepRow(
                    arm, n,
                    masked_rmse(recon, dataset.data[..., fit_idx], mask, arm),
                    masked_rmse(up, target_full, mask, arm),
                ))
            except NeshError as exc:
                log.error("sweep arm %s with %d directions failed: %s", arm, n, exc)
                rows.append(SweepRow(arm, n, error=str(exc)))
    return SweepResult(rows)


def write_sweep_csv(result, path):
    with open(path, "w") as fh:
        fh.write("arm,n_directions,recon_rmse,upsample_rmse\n")
        for r in result.rows:
            rec = "nan" if r.recon is None else repr(r.recon.rmse)
            up = "nan" if r.upsample is None else repr(r.upsample.rmse)
            fh.write(f"{r.arm},{r.n_directions},{rec},{up}\n")
