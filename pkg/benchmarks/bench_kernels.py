"""Time each numba kernel against its numpy twin, then dataset generation under both settings.

    python benchmarks/bench_kernels.py [--repeat 5]

End-to-end timings run in subprocesses so ``CRYSFORGE_JIT`` takes effect at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from crysforge import kernels
from crysforge.datagen import sample_molecule
from crysforge.grid import UnitCell, d_spacings
from crysforge.xtal import reflection_indices


def kernel_cases():
    rng = np.random.default_rng(0)
    mol = sample_molecule(7, J=5)
    cell = UnitCell(14.0, 12.0, 11.0)
    hkl = reflection_indices(cell, 1.5)
    stol2 = np.zeros(len(hkl))
    nz = (hkl != 0).any(1)
    stol2[nz] = 1 / d_spacings(hkl[nz], cell) ** 2 / 4
    sf_args = (hkl, mol.frac(cell), mol.electrons, mol.b_iso, stol2)
    grid = rng.normal(size=(8, 8, 8))
    return [
        (f"structure_factor_sum ({len(hkl)} refl x {len(mol)} atoms)", kernels.structure_factor_sum, sf_args),
        (f"image_contacts ({len(mol)} atoms x 26 images)", kernels.image_contacts, (mol.xyz, cell.edges, 2.75)),
        ("dft3_bruteforce (8^3)", kernels.dft3_bruteforce, (grid,)),
    ]


def time_call(fn, args, jit, repeat):
    fn(*args, jit=jit)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args, jit=jit), number=1, repeat=repeat))


def end_to_end(jit: bool, n: int) -> float:
    code = (
        "import time; from crysforge.datagen import generate_examples; "
        f"generate_examples(2, seed=1); t=time.perf_counter(); generate_examples({n}, seed=2); "
        "print(time.perf_counter()-t)"
    )
    env = dict(os.environ, CRYSFORGE_JIT="1" if jit else "0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=32, help="examples for the end-to-end timing")
    args = ap.parse_args()
    print(f"{'kernel':52s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}")
    for name, fn, fargs in kernel_cases():
        a = time_call(fn, fargs, True, args.repeat)
        b = time_call(fn, fargs, False, args.repeat)
        print(f"{name:52s} {a:10.5f} {b:10.5f} {b / a:8.2f}")
    a, b = end_to_end(True, args.n), end_to_end(False, args.n)
    print(f"{f'generate_examples({args.n})':52s} {a:10.3f} {b:10.3f} {b / a:8.2f}")


if __name__ == "__main__":
    main()
