"""Structure factors, electron density and Patterson synthesis.

Atoms are point scatterers carrying their electron count, smeared by an
isotropic temperature factor: ``f_j(s) = Z_j exp(-B_j s^2 / 4)`` with
``s = 1/d``.  Hydrogens are never modelled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grid import MAP_DTYPE, UnitCell, d_spacings, fft3, ifft3, inverse_shift

ELECTRONS = {"C": 6, "N": 7, "O": 8, "S": 16}
DEFAULT_B = 20.0


@dataclass(frozen=True)
class Atom:
    element: str
    xyz: tuple[float, float, float]
    """Cartesian position in Angstrom; fractional = xyz / cell edges."""
    b_iso: float = DEFAULT_B

    def __post_init__(self):
        if self.element not in ELECTRONS:
            raise ValueError(f"unsupported element {self.element!r}")
        if self.b_iso < 0:
            raise ValueError("b_iso must be non-negative")


@dataclass(frozen=True)
class Molecule:
    """Atoms plus the residue spans ``(template_id, start, end)`` partitioning them."""

    atoms: tuple[Atom, ...]
    residue_spans: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("molecule has no atoms")
        spans = self.residue_spans
        if spans:
            pos = 0
            for _, start, end in spans:
                if start != pos or end <= start:
                    raise ValueError(f"residue spans do not partition the atoms: {spans}")
                pos = end
            if pos != len(self.atoms):
                raise ValueError(f"residue spans cover {pos} of {len(self.atoms)} atoms")

    @classmethod
    def from_arrays(cls, elements, xyz, b_iso=DEFAULT_B, residue_spans=()):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        b = np.broadcast_to(np.asarray(b_iso, dtype=np.float64), (len(xyz),))
        atoms = tuple(Atom(e, tuple(float(v) for v in p), float(bb)) for e, p, bb in zip(elements, xyz, b))
        return cls(atoms, tuple(tuple(int(v) for v in s) for s in residue_spans))

    @property
    def xyz(self) -> np.ndarray:
        return np.array([a.xyz for a in self.atoms], dtype=np.float64)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def electrons(self) -> np.ndarray:
        return np.array([ELECTRONS[a.element] for a in self.atoms], dtype=np.float64)

    @property
    def b_iso(self) -> np.ndarray:
        return np.array([a.b_iso for a in self.atoms], dtype=np.float64)

    def frac(self, cell: UnitCell) -> np.ndarray:
        """Fractional coordinates wrapped into [0, 1)."""
        f = self.xyz / cell.edges
        f = f - np.floor(f)
        f[f >= 1.0] = 0.0
        return f

    def with_xyz(self, xyz) -> "Molecule":
        return Molecule.from_arrays(self.elements, xyz, self.b_iso, self.residue_spans)

    def translated(self, shift_frac, cell: UnitCell) -> "Molecule":
        """Shift every atom by a fractional vector, wrapping into the cell."""
        f = self.frac(cell) + np.asarray(shift_frac, dtype=np.float64)
        f = f - np.floor(f)
        return self.with_xyz(f * cell.edges)

    def inverted(self, cell: UnitCell) -> "Molecule":
        """Centrosymmetric image, fractional x -> 1 - x."""
        f = 1.0 - self.frac(cell)
        f = f - np.floor(f)
        return self.with_xyz(f * cell.edges)

    def __len__(self):
        return len(self.atoms)


@dataclass
class StructureFactorSet:
    """Complex structure factors on the reflections with d >= d_min, plus F(000)."""

    cell: UnitCell
    d_min: float
    hkl: np.ndarray
    F: np.ndarray
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __len__(self):
        return len(self.hkl)

    def __getitem__(self, hkl) -> complex:
        if self._index is None:
            self._index = {tuple(int(v) for v in row): i for i, row in enumerate(self.hkl)}
        return complex(self.F[self._index[tuple(int(v) for v in hkl)]])

    def as_dict(self) -> dict[tuple[int, int, int], complex]:
        return {tuple(int(v) for v in row): complex(f) for row, f in zip(self.hkl, self.F)}

    @property
    def amplitudes(self) -> np.ndarray:
        return np.abs(self.F)

    @property
    def phases(self) -> np.ndarray:
        return np.angle(self.F)

    def max_index(self) -> np.ndarray:
        return np.abs(self.hkl).max(axis=0) if len(self.hkl) else np.zeros(3, dtype=np.int64)


def reflection_indices(cell: UnitCell, d_min: float) -> np.ndarray:
    """All (h,k,l) with d >= d_min, including (0,0,0); ties at d_min are kept."""
    if not d_min > 0:
        raise ValueError("d_min must be positive")
    hmax, kmax, lmax = (int(math.floor(e / d_min + 1e-9)) for e in cell.edges)
    h, k, l = np.meshgrid(
        np.arange(-hmax, hmax + 1), np.arange(-kmax, kmax + 1), np.arange(-lmax, lmax + 1), indexing="ij"
    )
    hkl = np.stack([h.ravel(), k.ravel(), l.ravel()], axis=1).astype(np.int64)
    d = d_spacings(hkl, cell)
    keep = d >= d_min * (1.0 - 1e-12)
    return hkl[keep]


def structure_factors(mol: Molecule, cell: UnitCell, d_min: float, *, jit: bool | None = None) -> StructureFactorSet:
    if mol is None or len(mol) == 0:
        raise ValueError("cannot compute structure factors of an empty molecule")
    hkl = reflection_indices(cell, d_min)
    inv_d2 = ((hkl / cell.edges) ** 2).sum(axis=1)
    F = kernels.structure_factor_sum(hkl, mol.frac(cell), mol.electrons, mol.b_iso, inv_d2 / 4.0, jit=jit)
    return StructureFactorSet(cell=cell, d_min=float(d_min), hkl=hkl, F=F)


def _check_fits(sf: StructureFactorSet, dims) -> None:
    need = 2 * sf.max_index() + 1
    if any(n < m for n, m in zip(dims, need)):
        raise ValueError(f"grid {tuple(dims)} too small for reflections up to {tuple(sf.max_index())}")


def _scatter(sf: StructureFactorSet, values: np.ndarray, dims) -> np.ndarray:
    # F(h) goes to index -h so the inverse FFT produces exp(-2 pi i h.x)
    _check_fits(sf, dims)
    grid = np.zeros(dims, dtype=np.complex128)
    idx = (-sf.hkl) % np.asarray(dims)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = values
    return grid


def _synthesize(sf: StructureFactorSet, values: np.ndarray, dims) -> np.ndarray:
    dims = tuple(int(n) for n in dims)
    n_vox = dims[0] * dims[1] * dims[2]
    rho = ifft3(_scatter(sf, values, dims)) * (n_vox / sf.cell.volume)
    peak = np.abs(rho.real).max()
    if peak > 0 and np.abs(rho.imag).max() > 1e-5 * peak:
        raise ArithmeticError("synthesized map is not real; reflection set is not Hermitian")
    return rho.real


def density_from_sf(sf: StructureFactorSet, dims) -> np.ndarray:
    """rho(x) = (1/V) sum_h |F| exp(-2 pi i (h.x - phi)) sampled on ``dims``."""
    return _synthesize(sf, sf.F, dims).astype(MAP_DTYPE)


def patterson_from_sf(sf: StructureFactorSet, dims) -> np.ndarray:
    """p(u) = (1/V) sum_h |F|^2 exp(-2 pi i h.u); phases discarded."""
    return _synthesize(sf, np.abs(sf.F) ** 2, dims).astype(MAP_DTYPE)


def sf_from_density(rho: np.ndarray, sf_like: StructureFactorSet) -> np.ndarray:
    """Recover F on the reflections of ``sf_like`` from a synthesized map."""
    dims = np.asarray(rho.shape)
    coeffs = fft3(np.asarray(rho, dtype=np.float64)) * (sf_like.cell.volume / dims.prod())
    idx = (-sf_like.hkl) % dims
    return coeffs[idx[:, 0], idx[:, 1], idx[:, 2]]


def patterson_from_density(e: np.ndarray) -> np.ndarray:
    """Autocorrelation of a map: Re(ifft(fft(e) * fft(inverse_shift(e))))."""
    e64 = np.asarray(e, dtype=np.float64)
    p = ifft3(fft3(e64) * fft3(inverse_shift(e64))).real
    return p.astype(MAP_DTYPE)
