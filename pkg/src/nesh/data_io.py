"""NIfTI-1 volumes, FSL gradient tables and the dataset container.

NIfTI parsing is delegated to nibabel. Before handing a file over we check
the fixed-layout header fields ourselves, so malformed files fail with a
:class:`ParseError` that names the bad field.
"""

from dataclasses import dataclass, field
import gzip
import struct

import nibabel as nib
import numpy as np

from nesh.encoding import VoxelGrid
from nesh.errors import EmptyShellError, InvalidArgumentError, ParseError

__all__ = [
    "GradientTable",
    "DwiDataset",
    "B0_THRESHOLD",
    "read_nifti",
    "write_nifti",
    "read_gradients",
    "write_gradients",
    "select_shell",
    "load_dataset",
    "resample_affine",
    "save_dataset",
]

B0_THRESHOLD = 50.0

_SUPPORTED_DTYPES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64"}


@dataclass
class GradientTable:
    """Per-volume unit directions ``(n, 3)`` and b-values ``(n,)`` in s/mm^2.

    b=0 rows (b below 50 s/mm^2) keep whatever direction was given, usually zeros.
    """

    bvecs: np.ndarray
    bvals: np.ndarray

    def __post_init__(self):
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        self.bvals = np.asarray(self.bvals, dtype=np.float64).ravel()
        if self.bvecs.shape[0] != self.bvals.shape[0]:
            raise InvalidArgumentError(
                f"{self.bvecs.shape[0]} directions but {self.bvals.shape[0]} b-values"
            )
        if np.any(self.bvals < 0):
            raise InvalidArgumentError("b-values must be non-negative")
        norms = np.linalg.norm(self.bvecs[~self.b0_mask], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise InvalidArgumentError("diffusion-weighted directions must be unit vectors")

    def __len__(self):
        return self.bvals.shape[0]

    @property
    def b0_mask(self):
        return self.bvals < B0_THRESHOLD

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return GradientTable(self.bvecs[indices], self.bvals[indices])


@dataclass
class DwiDataset:
    """4D diffusion data over a voxel grid.

    ``data`` has shape (W, H, D, n_volumes) and ``mask`` (W, H, D), or is None
    meaning every voxel. ``affine`` is the 4x4 voxel-to-world matrix read from
    file, kept so outputs can carry the same orientation.
    """

    data: np.ndarray
    grid: VoxelGrid
    gradients: GradientTable
    mask: np.ndarray = None
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise InvalidArgumentError(f"expected a 4D volume, got shape {self.data.shape}")
        if self.data.shape[:3] != self.grid.dims:
            raise InvalidArgumentError(f"data dims {self.data.shape[:3]} != grid dims {self.grid.dims}")
        if self.data.shape[3] != len(self.gradients):
            raise InvalidArgumentError(
                f"{self.data.shape[3]} volumes but {len(self.gradients)} gradient rows"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.grid.dims:
                raise InvalidArgumentError(f"mask dims {self.mask.shape} != grid dims {self.grid.dims}")

    def mask_or_all(self):
        if self.mask is None:
            return np.ones(self.grid.dims, dtype=bool)
        return self.mask

    def b0_indices(self):
        return np.flatnonzero(self.gradients.b0_mask)

    def select_volumes(self, indices):
        """Dataset restricted to the given volumes (b=0 rows are not added)."""
        indices = np.asarray(indices, dtype=int)
        return DwiDataset(self.data[..., indices], self.grid, self.gradients.subset(indices),
                          self.mask, self.affine)

    def output_affine(self, grid=None):
        """Affine for writing a volume on ``grid`` (default: this dataset's grid)."""
        return resample_affine(self.affine, self.grid, self.grid if grid is None else grid)


def resample_affine(affine, grid_from, grid_to):
    """Carry ``affine`` (defined on ``grid_from``) over to a resampled ``grid_to``.

    Orientation is kept; columns are rescaled and the translation moved to the
    new first voxel centre. With no source affine, ``grid_to.affine()`` is used.
    """
    if affine is None:
        return grid_to.affine()
    affine = np.asarray(affine, dtype=np.float64)
    if grid_to == grid_from:
        return affine
    aff = affine.copy()
    scale = np.asarray(grid_to.voxel_size) / np.asarray(grid_from.voxel_size)
    aff[:3, :3] = affine[:3, :3] * scale
    shift = (np.asarray(grid_to.origin) - np.asarray(grid_from.origin)) / np.asarray(grid_from.voxel_size)
    aff[:3, 3] = affine[:3, :3] @ shift + affine[:3, 3]
    return aff


def _open_raw(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _check_header(path):
    try:
        with _open_raw(path) as fh:
            raw = fh.read(352)
    except (OSError, EOFError) as exc:
        raise ParseError(f"{path}: cannot read header ({exc})") from exc
    if len(raw) < 348:
        raise ParseError(f"{path}: sizeof_hdr: file shorter than 348-byte header")
    for endian in "<>":
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[:4])
        if sizeof_hdr == 348:
            break
    else:
        raise ParseError(f"{path}: sizeof_hdr: expected 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ParseError(f"{path}: magic: expected 'n+1' or 'ni1', got {magic!r}")
    (datatype,) = struct.unpack(endian + "h", raw[70:72])
    if datatype not in _SUPPORTED_DTYPES:
        raise ParseError(f"{path}: datatype: unsupported code {datatype}")
    dims = struct.unpack(endian + "8h", raw[40:56])
    if not 3 <= dims[0] <= 4:
        raise ParseError(f"{path}: dim[0]: only 3D and 4D volumes are supported, got {dims[0]}")


def read_nifti(path, with_affine=False):
    """Read a 3D or 4D NIfTI-1 volume as float64.

    Returns ``(data, grid)`` or ``(data, grid, affine)``. Values are scaled by
    scl_slope / scl_inter when set; voxel sizes come from pixdim and the grid
    origin from the affine translation.
    """
    _check_header(path)
    try:
        img = nib.Nifti1Image.load(str(path))
        data = np.asarray(img.get_fdata(dtype=np.float64))
    except (EOFError, ValueError, OSError, nib.filebasedimages.ImageFileError) as exc:
        raise ParseError(f"{path}: data: {exc}") from exc
    hdr = img.header
    zooms = hdr.get_zooms()[:3]
    affine = img.affine
    grid = VoxelGrid(data.shape[:3], tuple(float(z) for z in zooms), tuple(affine[:3, 3]))
    if with_affine:
        return data, grid, affine
    return data, grid


def write_nifti(volume, grid, path, affine=None, dtype=np.float32):
    """Write a 3D/4D volume as NIfTI-1 (float32 by default); gzip if ``path`` ends in .gz."""
    volume = np.asarray(volume)
    if volume.shape[:3] != grid.dims:
        raise InvalidArgumentError(f"volume dims {volume.shape[:3]} != grid dims {grid.dims}")
    if np.issubdtype(volume.dtype, np.floating) and not np.all(np.isfinite(volume)):
        raise InvalidArgumentError("volume contains non-finite values")
    if affine is None:
        affine = grid.affine()
    img = nib.Nifti1Image(volume.astype(dtype), affine)
    hdr = img.header
    zooms = list(grid.voxel_size) + [1.0] * (volume.ndim - 3)
    hdr.set_zooms(zooms)
    hdr.set_xyzt_units("mm", "sec")
    hdr.set_qform(affine, code=1)
    hdr.set_sform(affine, code=1)
    nib.save(img, str(path))
    return path


def read_gradients(bvecs_path, bvals_path):
    """Read FSL-style ``bvecs`` (3 rows) and ``bvals`` (1 row) text files."""
    try:
        bvecs = np.loadtxt(bvecs_path, dtype=np.float64, ndmin=2)
        bvals = np.loadtxt(bvals_path, dtype=np.float64, ndmin=1).ravel()
    except ValueError as exc:
        raise ParseError(f"cannot parse gradient files: {exc}") from exc
    if bvecs.shape[0] != 3 and bvecs.shape[1] == 3:
        bvecs = bvecs.T
    if bvecs.shape[0] != 3:
        raise ParseError(f"{bvecs_path}: expected 3 rows, got shape {bvecs.shape}")
    if bvecs.shape[1] != bvals.shape[0]:
        raise ParseError(
            f"{bvecs.shape[1]} gradient directions in {bvecs_path} but {bvals.shape[0]} b-values in {bvals_path}"
        )
    vecs = bvecs.T.copy()
    dw = bvals >= B0_THRESHOLD
    norms = np.linalg.norm(vecs[dw], axis=1)
    if np.any(norms == 0):
        raise ParseError(f"{bvecs_path}: zero direction for a diffusion-weighted volume")
    # leave rows that are already unit length (to rounding) untouched so that
    # written tables read back bit-identically
    fix = np.flatnonzero(dw)[np.abs(norms - 1.0) > 1e-12]
    vecs[fix] /= np.linalg.norm(vecs[fix], axis=1, keepdims=True)
    return GradientTable(vecs, bvals)


def write_gradients(table, bvecs_path, bvals_path):
    np.savetxt(bvecs_path, table.bvecs.T, fmt="%.17g")
    np.savetxt(bvals_path, table.bvals[None, :], fmt="%.17g")


def select_shell(source, target_b, tolerance=100.0):
    """Indices of volumes whose b-value is within ``tolerance`` of ``target_b``.

    ``source`` is a :class:`DwiDataset` or :class:`GradientTable`. b=0 rows are
    never selected.
    """
    table = source.gradients if isinstance(source, DwiDataset) else source
    if tolerance < 0:
        raise InvalidArgumentError("tolerance must be >= 0")
    hit = (np.abs(table.bvals - target_b) <= tolerance) & ~table.b0_mask
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        raise EmptyShellError(f"no volumes with b = {target_b} +/- {tolerance} s/mm^2")
    return idx


def load_dataset(dwi_path, bvecs_path, bvals_path, mask_path=None):
    data, grid, affine = read_nifti(dwi_path, with_affine=True)
    gradients = read_gradients(bvecs_path, bvals_path)
    mask = None
    if mask_path is not None:
        mask_data, mask_grid = read_nifti(mask_path)
        if mask_data.ndim == 4:
            mask_data = mask_data[..., 0]
        mask = mask_data > 0
    return DwiDataset(data, grid, gradients, mask, affine)


def save_dataset(dataset, prefix):
    """Write ``<prefix>dwi.nii.gz``, ``bvecs``, ``bvals`` and (if set) ``mask.nii.gz``."""
    prefix = str(prefix)
    paths = {
        "dwi": prefix + "dwi.nii.gz",
        "bvecs": prefix + "bvecs",
        "bvals": prefix + "bvals",
    }
    affine = dataset.output_affine()
    write_nifti(dataset.data, dataset.grid, paths["dwi"], affine)
    write_gradients(dataset.gradients, paths["bvecs"], paths["bvals"])
    if dataset.mask is not None:
        paths["mask"] = prefix + "mask.nii.gz"
        write_nifti(dataset.mask.astype(np.uint8), dataset.grid, paths["mask"], affine, dtype=np.uint8)
    return paths
