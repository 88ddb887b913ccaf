import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crysforge.grid import UnitCell, fft3, grid_indices, ifft3
from crysforge.metrics import (
    DEFAULT_SHELLS,
    fraction_below,
    mean_phase_error,
    mean_shell_errors,
    pearson,
    phase_error_by_shell,
    recombine,
)

CELL = UnitCell(8.0, 8.0, 8.0)


@pytest.fixture
def density(small_examples):
    ex = small_examples[0]
    return ex.density.astype(np.float64), ex.cell


def test_pearson_identities(rng):
    e = rng.normal(size=(6, 6, 6))
    assert pearson(e, e) == pytest.approx(1.0, abs=1e-9)
    assert pearson(e, -e) == pytest.approx(-1.0, abs=1e-9)
    assert pearson(e, 2 * e + 3) == pytest.approx(1.0, abs=1e-9)
    assert pearson(e, np.zeros_like(e)) == 0.0
    with pytest.raises(ValueError):
        pearson(e, e[:5])


finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4, 4), elements=finite), arrays(np.float64, (4, 4, 4), elements=finite),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_properties(a, b, scale, shift):
    r = pearson(a, b)
    assert -1 <= r <= 1
    assert r == pytest.approx(pearson(b, a), abs=1e-12)
    if ((a - a.mean()) ** 2).sum() > 1e-2 and ((b - b.mean()) ** 2).sum() > 1e-2:
        assert pearson(a * scale + shift, b) == pytest.approx(r, abs=1e-6)


def test_phase_error_identity_and_negation(density):
    e, cell = density
    assert mean_phase_error(e, e, cell) == 0.0
    assert mean_phase_error(e, -e, cell) == pytest.approx(180.0, abs=1e-9)
    assert mean_phase_error(e, 3.5 * e, cell) == pytest.approx(0.0, abs=1e-9)
    assert mean_phase_error(2 * e, e, cell) == pytest.approx(0.0, abs=1e-9)


def test_phase_error_random_noise_is_ninety(density):
    e, cell = density
    rng = np.random.default_rng(5)
    errs = [mean_phase_error(e, rng.normal(size=e.shape), cell) for _ in range(100)]
    assert abs(np.mean(errs) - 90.0) <= 5.0
    assert all(0 <= x <= 180 for x in errs)


def test_zero_prediction_scores_ninety(density):
    e, cell = density
    assert mean_phase_error(e, np.zeros_like(e), cell) == 90.0


def test_phase_error_errors(density):
    e, cell = density
    with pytest.raises(ValueError):
        mean_phase_error(e, e[:-2], cell)
    with pytest.raises(ValueError):
        mean_phase_error(e, e, cell, d_min=100.0)


def test_phase_error_uses_only_half_set_within_resolution(density):
    """Oracle: explicit loop over one Friedel half within d_min."""
    e, cell = density
    rng = np.random.default_rng(0)
    p = e + 0.3 * rng.normal(size=e.shape)
    Ft, Fp = fft3(e), fft3(p)
    hkl = grid_indices(e.shape)
    dims = e.shape
    num = den = 0.0
    seen = set()
    for idx in np.ndindex(*dims):
        h = tuple(int(v) for v in hkl[idx])
        if h == (0, 0, 0) or any(n % 2 == 0 and abs(v) == n // 2 for v, n in zip(h, dims)):
            continue
        mate = tuple(-v for v in h)
        if mate in seen:
            continue
        s2 = sum((v / a) ** 2 for v, a in zip(h, cell.edges))
        if 1 / math.sqrt(s2) < 1.5:
            continue
        seen.add(h)
        dphi = abs(math.degrees(np.angle(Fp[idx] / Ft[idx])))
        num += abs(Ft[idx]) * dphi
        den += abs(Ft[idx])
    assert mean_phase_error(e, p, cell) == pytest.approx(num / den, rel=1e-9)


def test_shells_identity_and_recombination(density, rng):
    e, cell = density
    same = phase_error_by_shell(e, e, cell)
    assert [s.mean_error for s in same.shells if s.count] == [0.0] * sum(s.count > 0 for s in same.shells)
    noisy = e + 0.5 * rng.normal(size=e.shape)
    rep = phase_error_by_shell(e, noisy, cell)
    assert rep.layout == DEFAULT_SHELLS
    assert recombine(rep) == pytest.approx(mean_phase_error(e, noisy, cell), rel=1e-6)
    assert rep.overall == pytest.approx(mean_phase_error(e, noisy, cell), rel=1e-12)
    n_total = (grid_indices(e.shape) != 0).any(-1).sum()
    assert 0 < rep.total_count < n_total
    for s in rep.shells:
        assert s.count == 0 or 0 <= s.mean_error <= 180


def test_high_frequency_perturbation_hits_last_shell_only(density, rng):
    e, cell = density
    hkl = grid_indices(e.shape)
    d = np.full(e.shape, np.inf)
    nz = (hkl != 0).any(-1)
    s = np.sqrt(((hkl / np.array(cell.edges)) ** 2).sum(-1))
    d[nz] = 1 / s[nz]
    F = fft3(e)
    band = (d >= 1.5) & (d <= 1.75)
    F[band] *= np.exp(1j * rng.uniform(0.5, 2.5, size=band.sum()))
    # restore Hermitian symmetry so the perturbed map stays real
    F_mate = np.conj(np.roll(F[::-1, ::-1, ::-1], 1, axis=(0, 1, 2)))
    F = np.where(band, 0.5 * (F + F_mate), F)
    p = ifft3(F).real
    rep = phase_error_by_shell(e, p, cell)
    for stats in rep.shells[:-1]:
        assert stats.count == 0 or stats.mean_error < 1e-4
    assert rep.shells[-1].mean_error > 10


def test_empty_shell_is_tolerated(density):
    e, cell = density
    rep = phase_error_by_shell(e, e, cell, shells=[(100.0, 50.0), (50.0, 1.5)])
    assert rep.shells[0].count == 0 and math.isnan(rep.shells[0].mean_error)
    assert math.isnan(rep.below()[0])


def test_bad_shells_rejected(density):
    e, cell = density
    with pytest.raises(ValueError):
        phase_error_by_shell(e, e, cell, shells=[(4.0, 3.0), (2.5, 2.0)])
    with pytest.raises(ValueError):
        phase_error_by_shell(e, e, cell, shells=[(3.0, 4.0)])


def test_fraction_below_counting(small_examples):
    reps = []
    for k, ex in enumerate(small_examples[:5]):
        sign = 1 if k < 3 else -1
        reps.append(phase_error_by_shell(ex.density, sign * ex.density, ex.cell))
    fr = fraction_below(reps, 60.0)
    for f, col in zip(fr, zip(*[r.shells for r in reps])):
        counted = [s for s in col if s.count]
        if counted:
            want = sum(1 for s in col[:3] if s.count) / len(counted)
            assert f == pytest.approx(want)
    assert fraction_below(reps[:3]) == [1.0 if not math.isnan(x) else x for x in fraction_below(reps[:3])]
    assert all(x == 0.0 for x in fraction_below(reps[3:]) if not math.isnan(x))
    errs = mean_shell_errors(reps[3:])
    assert all(x == pytest.approx(180.0) for x in errs if not math.isnan(x))


def test_fraction_below_layout_mismatch(density):
    e, cell = density
    a = phase_error_by_shell(e, e, cell)
    b = phase_error_by_shell(e, e, cell, shells=[(math.inf, 3.0), (3.0, 1.5)])
    with pytest.raises(ValueError):
        fraction_below([a, b])
    with pytest.raises(ValueError):
        fraction_below([])
