"""Hot numeric loops, each with a numba and a numpy implementation.

The ``*_loop`` functions are compiled by numba (see :mod:`crysforge._jit`);
the ``*_numpy`` functions are the vectorized fallback.  Callers use the
undecorated dispatch names, which honour ``CRYSFORGE_JIT``.
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import JIT_ENABLED, njit

TWO_PI = 2.0 * math.pi

# 26 neighbouring cell translations, origin excluded
NEIGHBOR_SHIFTS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)],
    dtype=np.int64,
)


# --------------------------------------------------------------------------
# structure factor direct summation


@njit(cache=True, fastmath=False)
def _structure_factor_loop(hkl, frac, f0, b_iso, stol2):
    m = hkl.shape[0]
    n = frac.shape[0]
    out = np.empty(m, dtype=np.complex128)
    for r in range(m):
        h = hkl[r, 0]
        k = hkl[r, 1]
        l = hkl[r, 2]
        re = 0.0
        im = 0.0
        for j in range(n):
            amp = f0[j] * math.exp(-b_iso[j] * stol2[r])
            arg = TWO_PI * (h * frac[j, 0] + k * frac[j, 1] + l * frac[j, 2])
            re += amp * math.cos(arg)
            im += amp * math.sin(arg)
        out[r] = complex(re, im)
    return out


def _structure_factor_numpy(hkl, frac, f0, b_iso, stol2):
    amp = f0[None, :] * np.exp(-stol2[:, None] * b_iso[None, :])
    arg = TWO_PI * (hkl.astype(np.float64) @ frac.T)
    return (amp * np.exp(1j * arg)).sum(axis=1)


def structure_factor_sum(hkl, frac, f0, b_iso, stol2, *, jit: bool | None = None) -> np.ndarray:
    """F(hkl) = sum_j f_j exp(-B_j s^2/4) exp(2 pi i hkl . x_j).

    ``stol2`` holds (sin theta / lambda)^2 = s^2/4 per reflection.
    """
    hkl = np.ascontiguousarray(hkl, dtype=np.int64)
    frac = np.ascontiguousarray(frac, dtype=np.float64)
    f0 = np.ascontiguousarray(f0, dtype=np.float64)
    b_iso = np.ascontiguousarray(b_iso, dtype=np.float64)
    stol2 = np.ascontiguousarray(stol2, dtype=np.float64)
    use_jit = JIT_ENABLED if jit is None else jit
    if use_jit:
        return _structure_factor_loop(hkl, frac, f0, b_iso, stol2)
    return _structure_factor_numpy(hkl, frac, f0, b_iso, stol2)


# --------------------------------------------------------------------------
# periodic image contacts


@njit(cache=True)
def _image_contacts_loop(xyz, edges, min_contact, shifts):
    n = xyz.shape[0]
    best = np.inf
    axes = np.zeros(3, dtype=np.bool_)
    for s in range(shifts.shape[0]):
        tx = shifts[s, 0] * edges[0]
        ty = shifts[s, 1] * edges[1]
        tz = shifts[s, 2] * edges[2]
        for i in range(n):
            for j in range(n):
                dx = xyz[j, 0] + tx - xyz[i, 0]
                dy = xyz[j, 1] + ty - xyz[i, 1]
                dz = xyz[j, 2] + tz - xyz[i, 2]
                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                if d < best:
                    best = d
                if d < min_contact:
                    for a in range(3):
                        if shifts[s, a] != 0:
                            axes[a] = True
    return best, axes


def _image_contacts_numpy(xyz, edges, min_contact, shifts):
    trans = shifts * edges[None, :]
    diff = xyz[None, None, :, :] + trans[:, None, None, :] - xyz[None, :, None, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    bad = (dist < min_contact).any(axis=(1, 2))
    axes = (shifts[bad] != 0).any(axis=0) if bad.any() else np.zeros(3, dtype=bool)
    return float(dist.min()), axes


def image_contacts(xyz, edges, min_contact: float = 0.0, *, jit: bool | None = None):
    """Closest approach between any atom and any atom of the 26 neighbour cells.

    Returns ``(min_distance, axes)`` where ``axes[a]`` is True when some
    pair closer than ``min_contact`` involves a translation along axis ``a``.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    edges = np.ascontiguousarray(edges, dtype=np.float64)
    use_jit = JIT_ENABLED if jit is None else jit
    if use_jit:
        best, axes = _image_contacts_loop(xyz, edges, float(min_contact), NEIGHBOR_SHIFTS)
        return float(best), np.asarray(axes)
    return _image_contacts_numpy(xyz, edges, float(min_contact), NEIGHBOR_SHIFTS)


# --------------------------------------------------------------------------
# brute-force DFT oracle


@njit(cache=True)
def _dft3_loop(g):
    n1, n2, n3 = g.shape
    out = np.empty((n1, n2, n3), dtype=np.complex128)
    for h in range(n1):
        for k in range(n2):
            for l in range(n3):
                re = 0.0
                im = 0.0
                for i in range(n1):
                    for j in range(n2):
                        for m in range(n3):
                            arg = -TWO_PI * (h * i / n1 + k * j / n2 + l * m / n3)
                            v = g[i, j, m]
                            re += v * math.cos(arg)
                            im += v * math.sin(arg)
                out[h, k, l] = complex(re, im)
    return out


def _dft3_numpy(g):
    n1, n2, n3 = g.shape
    i, j, m = np.meshgrid(np.arange(n1), np.arange(n2), np.arange(n3), indexing="ij")
    i = i.ravel() / n1
    j = j.ravel() / n2
    m = m.ravel() / n3
    flat = g.ravel()
    out = np.empty((n1, n2, n3), dtype=np.complex128)
    kk, ll = np.meshgrid(np.arange(n2), np.arange(n3), indexing="ij")
    kk = kk.ravel()
    ll = ll.ravel()
    for h in range(n1):
        arg = -TWO_PI * (h * i[None, :] + kk[:, None] * j[None, :] + ll[:, None] * m[None, :])
        out[h] = (np.exp(1j * arg) @ flat).reshape(n2, n3)
    return out


def dft3_bruteforce(g, *, jit: bool | None = None) -> np.ndarray:
    g = np.ascontiguousarray(g, dtype=np.float64)
    use_jit = JIT_ENABLED if jit is None else jit
    if use_jit:
        return _dft3_loop(g)
    return _dft3_numpy(g)
