"""Real-space grids over an orthorhombic unit cell.

Grids are plain numpy arrays of shape ``(N1, N2, N3)`` in C order, so the
flat index of voxel ``(i, j, k)`` is ``i*N2*N3 + j*N3 + k``.  Maps are kept
in float32; the DFT oracle and anything that needs headroom works in float64.

Fourier convention: the forward transform is unnormalized and the inverse
divides by ``N1*N2*N3`` (numpy's default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

MAP_DTYPE = np.float32
ORACLE_MAX_DIM = 16


@dataclass(frozen=True)
class UnitCell:
    """Orthorhombic cell with edges in Angstrom (all angles 90 degrees)."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        for name in ("a", "b", "c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"cell edge {name} must be positive, got {v!r}")

    @property
    def edges(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.a * self.b * self.c


def check_grid(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim != 3 or min(g.shape) < 1:
        raise ValueError(f"expected a non-empty 3D grid, got shape {g.shape}")
    return g


def fft3(g: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3D DFT, ``F[h] = sum_n g[n] exp(-2 pi i h.n/N)``."""
    return np.fft.fftn(check_grid(g))


def ifft3(G: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft3`; divides by the voxel count."""
    return np.fft.ifftn(check_grid(G))


def dft3_reference(g: np.ndarray, *, jit: bool | None = None) -> np.ndarray:
    """Exact triple-sum DFT with the same convention as :func:`fft3`.

    Quadratic in the voxel count, so it refuses axes longer than 16.
    """
    g = check_grid(g)
    if max(g.shape) > ORACLE_MAX_DIM:
        raise ValueError(f"dft3_reference is limited to {ORACLE_MAX_DIM} voxels per axis, got {g.shape}")
    if np.iscomplexobj(g):
        raise TypeError("dft3_reference expects a real grid")
    return kernels.dft3_bruteforce(g, jit=jit)


def inverse_shift(g: np.ndarray) -> np.ndarray:
    """``out[i,j,k] = g[-i % N1, -j % N2, -k % N3]``; an involution."""
    g = check_grid(g)
    return np.roll(g[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))


def normalize_unit_range(g: np.ndarray) -> np.ndarray:
    """Scale by the largest absolute value so the grid lies in [-1, 1].

    Zero stays zero; an all-zero grid comes back unchanged.
    """
    g = np.asarray(g)
    peak = np.max(np.abs(g)) if g.size else 0
    if peak == 0:
        return g.copy()
    return g / peak


def d_spacing(h: int, k: int, l: int, cell: UnitCell) -> float:
    if h == 0 and k == 0 and l == 0:
        raise ValueError("reflection (0,0,0) has no d-spacing")
    inv_d2 = (h / cell.a) ** 2 + (k / cell.b) ** 2 + (l / cell.c) ** 2
    return 1.0 / math.sqrt(inv_d2)


def d_spacings(hkl: np.ndarray, cell: UnitCell) -> np.ndarray:
    """Vectorized d-spacing; the (0,0,0) row maps to ``inf``."""
    hkl = np.asarray(hkl, dtype=np.float64)
    inv_d2 = ((hkl / cell.edges) ** 2).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return 1.0 / np.sqrt(inv_d2)


def grid_indices(dims) -> np.ndarray:
    """Signed Miller index of every voxel of a Fourier grid, shape ``(*dims, 3)``."""
    axes = [np.fft.fftfreq(n, 1.0 / n).round().astype(np.int64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def grid_dims(cell: UnitCell, d_min: float, oversampling: float = 3.0, multiple: int = 4) -> tuple[int, int, int]:
    """Grid size with spacing at most ``d_min / oversampling``.

    Each axis is rounded up to a multiple of ``multiple`` so 4^3 patches tile
    the map exactly.
    """
    spacing = d_min / oversampling
    dims = []
    for edge in cell.edges:
        # guard against 12.0/0.5 = 24.000000000000004
        n = math.ceil(edge / spacing - 1e-9)
        n = multiple * math.ceil(n / multiple)
        dims.append(max(n, multiple))
    return tuple(dims)
