"""Neural spherical harmonics: a continuous representation of diffusion MRI data."""

__version__ = "0.1.0"

from nesh.kernels import BACKEND  # noqa: E402
