"""Procedural peptide-like fragments and their maps.

A fixed library of eight small residue templates stands in for amino acids.
Molecules are short chains of randomly rotated templates; each example gets
a minimal contact-respecting orthorhombic cell, is centred and reindexed,
and is rendered to a Patterson map, an electron density map and one
partial-structure map per residue.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .dataset import Example
from .grid import UnitCell, grid_dims, normalize_unit_range
from .seeding import subseed
from .xtal import DEFAULT_B, Molecule, density_from_sf, patterson_from_sf, structure_factors

log = logging.getLogger(__name__)

D_MIN = 1.5
MIN_CONTACT = 2.75
OVERSAMPLING = 3.0
CELL_STEP = 0.5
RESIDUE_CONTACT = 2.0
CENTROID_SPACING = (3.0, 4.5)
MAX_RETRIES = 100


class GenerationError(RuntimeError):
    """An example could not be produced; callers skip it."""


@dataclass(frozen=True)
class ResidueTemplate:
    id: int
    name: str
    elements: tuple[str, ...]
    offsets: np.ndarray  # (n, 3) Angstrom, centroid at the origin

    @classmethod
    def centred(cls, id, name, atoms):
        elements = tuple(a[0] for a in atoms)
        xyz = np.array([a[1:] for a in atoms], dtype=np.float64)
        return cls(id, name, elements, xyz - xyz.mean(axis=0))

    def min_distance(self) -> float:
        d = np.linalg.norm(self.offsets[:, None] - self.offsets[None, :], axis=-1)
        d[np.diag_indices(len(d))] = np.inf
        return float(d.min()) if len(d) > 1 else np.inf


# Loosely modelled on backbone and side-chain fragments; bond lengths 1.2-1.8 A.
TEMPLATES: dict[int, ResidueTemplate] = {
    t.id: t
    for t in [
        ResidueTemplate.centred(0, "gly", [("N", 0, 0, 0), ("C", 1.46, 0, 0), ("C", 2.0, 1.42, 0), ("O", 1.25, 2.39, 0)]),
        ResidueTemplate.centred(
            1, "ala", [("N", 0, 0, 0), ("C", 1.46, 0, 0), ("C", 2.0, 1.42, 0), ("O", 1.25, 2.39, 0), ("C", 2.0, -0.77, 1.21)]
        ),
        ResidueTemplate.centred(
            2,
            "ser",
            [("N", 0, 0, 0), ("C", 1.46, 0, 0), ("C", 2.0, 1.42, 0), ("O", 1.25, 2.39, 0), ("C", 2.0, -0.77, 1.21), ("O", 3.43, -0.77, 1.21)],
        ),
        ResidueTemplate.centred(
            3,
            "cys",
            [("N", 0, 0, 0), ("C", 1.46, 0, 0), ("C", 2.0, 1.42, 0), ("O", 1.25, 2.39, 0), ("C", 2.0, -0.77, 1.21), ("S", 2.6, -0.77, 2.92)],
        ),
        ResidueTemplate.centred(
            4,
            "thr",
            [
                ("N", 0, 0, 0),
                ("C", 1.46, 0, 0),
                ("C", 2.0, 1.42, 0),
                ("O", 1.25, 2.39, 0),
                ("C", 2.0, -0.77, 1.21),
                ("O", 3.43, -0.77, 1.21),
                ("C", 1.5, -2.2, 1.4),
            ],
        ),
        ResidueTemplate.centred(5, "amide", [("C", 0, 0, 0), ("N", 1.33, 0, 0), ("O", -0.62, 1.08, 0)]),
        ResidueTemplate.centred(6, "thioether", [("C", 0, 0, 0), ("S", 1.81, 0, 0), ("C", 2.4, 1.7, 0)]),
        ResidueTemplate.centred(
            7, "carboxyl", [("C", 0, 0, 0), ("C", 1.53, 0, 0), ("C", 2.1, 1.4, 0), ("O", 1.4, 2.4, 0), ("O", 3.35, 1.5, 0)]
        ),
    ]
}


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _min_cross_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1).min())


def sample_molecule(rng_seed: int, templates: dict[int, ResidueTemplate] | None = None, J: int = 2) -> Molecule:
    """Chain of ``J`` randomly rotated templates.

    Consecutive centroids are 3.0-4.5 A apart; a residue whose atoms come
    within 2.0 A of an earlier residue is re-drawn, at most 100 times.
    """
    templates = TEMPLATES if templates is None else templates
    if J < 1:
        raise ValueError("J must be at least 1")
    if not templates:
        raise ValueError("template library is empty")
    rng = np.random.default_rng(rng_seed)
    ids = sorted(templates)

    elements: list[str] = []
    placed: list[np.ndarray] = []
    spans = []
    centroid = np.zeros(3)
    for r in range(J):
        tpl = templates[ids[int(rng.integers(len(ids)))]]
        for _ in range(MAX_RETRIES):
            rot = Rotation.random(random_state=rng)
            if r == 0:
                c = np.zeros(3)
            else:
                c = centroid + _random_unit(rng) * rng.uniform(*CENTROID_SPACING)
            xyz = rot.apply(tpl.offsets) + c
            if all(_min_cross_distance(xyz, other) >= RESIDUE_CONTACT for other in placed):
                break
        else:
            raise GenerationError(f"seed {rng_seed}: could not place residue {r} after {MAX_RETRIES} tries")
        start = len(elements)
        elements.extend(tpl.elements)
        placed.append(xyz)
        spans.append((tpl.id, start, len(elements)))
        centroid = c
    return Molecule.from_arrays(elements, np.concatenate(placed), DEFAULT_B, spans)


def _mass_centroid(mol: Molecule) -> np.ndarray:
    w = mol.electrons
    return (mol.xyz * w[:, None]).sum(axis=0) / w.sum()


def cell_floor(mol: Molecule) -> np.ndarray:
    """Smallest edges the cell search may use.

    The raw max-min extent, widened where needed so the molecule still fits
    once its mass centroid is moved to the cell centre.
    """
    xyz = mol.xyz
    extent = xyz.max(axis=0) - xyz.min(axis=0)
    half = np.abs(xyz - _mass_centroid(mol)).max(axis=0)
    return np.maximum(extent, 2.0 * half)


def contacts_ok(mol: Molecule, edges, min_contact: float) -> bool:
    d, _ = kernels.image_contacts(mol.xyz, np.asarray(edges, dtype=np.float64), min_contact)
    return d >= min_contact


def fit_unit_cell(mol: Molecule, min_contact: float = MIN_CONTACT, step: float = CELL_STEP) -> UnitCell:
    """Grow the cell from the molecule's extent until image contacts are >= ``min_contact``.

    Axes involved in a violating image pair grow by ``step``; afterwards any
    axis that can lose a step without breaking the contact rule is shrunk, so
    the result is minimal on the ``floor + k*step`` lattice.
    """
    if not min_contact > 0:
        raise ValueError("min_contact must be positive")
    xyz = mol.xyz
    floor = cell_floor(mol)
    steps = np.zeros(3, dtype=np.int64)

    def edges_for(s):
        return floor + step * s

    while True:
        d, axes = kernels.image_contacts(xyz, edges_for(steps), min_contact)
        if d >= min_contact:
            break
        steps += axes.astype(np.int64)

    changed = True
    while changed:
        changed = False
        for a in range(3):
            while steps[a] > 0:
                trial = steps.copy()
                trial[a] -= 1
                if kernels.image_contacts(xyz, edges_for(trial), min_contact)[0] >= min_contact:
                    steps = trial
                    changed = True
                else:
                    break
    a, b, c = edges_for(steps)
    return UnitCell(float(a), float(b), float(c))


def canonicalize(mol: Molecule, cell: UnitCell) -> tuple[Molecule, UnitCell]:
    """Put the electron-weighted centroid at the cell centre; order edges a >= b >= c."""
    xyz = mol.xyz - _mass_centroid(mol) + cell.edges / 2.0
    order = np.argsort(-cell.edges, kind="stable")
    new_cell = UnitCell(*(float(e) for e in cell.edges[order]))
    return mol.with_xyz(xyz[:, order]), new_cell


def template_molecule(template: ResidueTemplate, cell: UnitCell) -> Molecule:
    xyz = template.offsets + cell.edges / 2.0
    return Molecule.from_arrays(template.elements, xyz, DEFAULT_B, [(template.id, 0, len(xyz))])


@lru_cache(maxsize=4096)
def _render_partial_cached(template_id, cell, dims, d_min, library_key):
    templates = _LIBRARIES[library_key]
    mol = template_molecule(templates[template_id], cell)
    rho = density_from_sf(structure_factors(mol, cell, d_min), dims)
    out = normalize_unit_range(rho)
    out.setflags(write=False)
    return out


_LIBRARIES: dict[int, dict[int, ResidueTemplate]] = {}


def render_partial(
    template_id: int,
    cell: UnitCell,
    dims,
    d_min: float = D_MIN,
    templates: dict[int, ResidueTemplate] | None = None,
) -> np.ndarray:
    """Normalized density of one template in its reference pose at the cell centre."""
    templates = TEMPLATES if templates is None else templates
    if template_id not in templates:
        raise KeyError(f"unknown template id {template_id}")
    key = id(templates)
    _LIBRARIES[key] = templates
    return _render_partial_cached(int(template_id), cell, tuple(int(n) for n in dims), float(d_min), key).copy()


def build_example(
    rng_seed: int,
    J: int = 2,
    d_min: float = D_MIN,
    min_contact: float = MIN_CONTACT,
    oversampling: float = OVERSAMPLING,
    *,
    fixed_cell: UnitCell | None = None,
    templates: dict[int, ResidueTemplate] | None = None,
    example_id: str | None = None,
) -> Example:
    mol = sample_molecule(rng_seed, templates, J)
    if fixed_cell is None:
        cell = fit_unit_cell(mol, min_contact)
    else:
        cell = fixed_cell
    mol, cell = canonicalize(mol, cell)
    if fixed_cell is not None and not contacts_ok(mol, cell.edges, min_contact):
        raise GenerationError(f"seed {rng_seed}: contacts below {min_contact} A in the fixed cell")
    dims = grid_dims(cell, d_min, oversampling)
    sf = structure_factors(mol, cell, d_min)
    density = normalize_unit_range(density_from_sf(sf, dims))
    patterson = normalize_unit_range(patterson_from_sf(sf, dims))
    tids = [span[0] for span in mol.residue_spans]
    partials = [render_partial(t, cell, dims, d_min, templates) for t in tids]
    return Example(
        id=example_id or f"toy-{rng_seed:010d}",
        patterson=patterson,
        density=density,
        partials=partials,
        cell=cell,
        template_ids=tids,
    )


def generate_examples(
    n: int,
    seed: int,
    J: int = 2,
    d_min: float = D_MIN,
    min_contact: float = MIN_CONTACT,
    oversampling: float = OVERSAMPLING,
    *,
    fixed_cell: UnitCell | None = None,
    max_attempts: int | None = None,
) -> list[Example]:
    """``n`` examples as a pure function of ``seed``; failed draws are skipped."""
    max_attempts = 20 * n + 20 if max_attempts is None else max_attempts
    out = []
    attempt = 0
    while len(out) < n and attempt < max_attempts:
        ex_seed = subseed(seed, "datagen", attempt)
        try:
            out.append(
                build_example(
                    ex_seed,
                    J,
                    d_min,
                    min_contact,
                    oversampling,
                    fixed_cell=fixed_cell,
                    example_id=f"s{seed}-{attempt:06d}",
                )
            )
        except GenerationError as exc:
            log.debug("skipping draw %d: %s", attempt, exc)
        attempt += 1
    if len(out) < n:
        raise GenerationError(f"only {len(out)} of {n} examples after {attempt} draws")
    return out
