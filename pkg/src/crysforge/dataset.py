"""Training examples and the on-disk dataset format.

A dataset directory holds ``manifest.json`` and one ``bin_<N1>x<N2>x<N3>.crys``
file per grid shape.  Bin files are little-endian::

    b"CRYS"  u32 version  u32 N1 N2 N3  u32 J  u32 count
    repeated count times:
        u32 id_len, id bytes (utf-8)
        J x u32 template ids
        3 x f64 cell edges (a, b, c)
        f32[N1*N2*N3] patterson, density, then J partial maps (row-major)
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import MAP_DTYPE, UnitCell

MAGIC = b"CRYS"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetFormatError(ValueError):
    """A dataset file or manifest could not be parsed."""


@dataclass
class Example:
    id: str
    patterson: np.ndarray
    density: np.ndarray
    partials: list[np.ndarray]
    cell: UnitCell
    template_ids: list[int]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.density.shape)

    @property
    def J(self) -> int:
        return len(self.partials)

    def __post_init__(self):
        dims = self.patterson.shape
        if self.density.shape != dims or any(u.shape != dims for u in self.partials):
            raise ValueError(f"example {self.id}: map shapes disagree")
        if len(self.template_ids) != len(self.partials):
            raise ValueError(f"example {self.id}: {len(self.template_ids)} template ids for {len(self.partials)} partials")


@dataclass
class BinInfo:
    dims: tuple[int, int, int]
    count: int
    file: str


@dataclass
class DatasetManifest:
    version: int
    d_min: float
    oversampling: float
    min_contact: float
    seed: int
    J: int
    bins: list[BinInfo] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def spacing(self) -> float:
        return self.d_min / self.oversampling

    @property
    def n_examples(self) -> int:
        return sum(b.count for b in self.bins)

    def to_json(self) -> dict:
        d = asdict(self)
        d["spacing"] = self.spacing
        d["bins"] = [{"dims": list(b.dims), "count": b.count, "file": b.file} for b in self.bins]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        try:
            bins = [BinInfo(tuple(int(n) for n in b["dims"]), int(b["count"]), str(b["file"])) for b in d["bins"]]
            return cls(
                version=int(d["version"]),
                d_min=float(d["d_min"]),
                oversampling=float(d["oversampling"]),
                min_contact=float(d["min_contact"]),
                seed=int(d["seed"]),
                J=int(d["J"]),
                bins=bins,
                extra=dict(d.get("extra", {})),
            )
        except KeyError as exc:
            raise DatasetFormatError(f"manifest is missing field {exc.args[0]!r}") from None


def bin_filename(dims) -> str:
    return "bin_{}x{}x{}.crys".format(*dims)


def group_by_dims(examples) -> dict[tuple[int, int, int], list[Example]]:
    bins = defaultdict(list)
    for ex in examples:
        bins[ex.dims].append(ex)
    return dict(sorted(bins.items()))


def _write_bin(path: Path, dims, J: int, examples) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, *dims, J, len(examples)))
        for ex in examples:
            raw_id = ex.id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack(f"<{J}I", *ex.template_ids))
            fh.write(struct.pack("<3d", ex.cell.a, ex.cell.b, ex.cell.c))
            for m in (ex.patterson, ex.density, *ex.partials):
                fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"{self.path.name}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_bin(path) -> list[Example]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise DatasetFormatError(f"{path.name}: bad magic, expected {MAGIC!r}")
    version, n1, n2, n3, J, count = r.unpack("<6I", "header")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path.name}: unsupported version {version}")
    dims = (n1, n2, n3)
    n_vox = n1 * n2 * n3
    out = []
    for i in range(count):
        (id_len,) = r.unpack("<I", f"id length of example {i}")
        try:
            ex_id = r.take(id_len, f"id of example {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise DatasetFormatError(f"{path.name}: id of example {i} is not utf-8") from None
        tids = list(r.unpack(f"<{J}I", f"template ids of {ex_id}"))
        a, b, c = r.unpack("<3d", f"cell of {ex_id}")
        maps = []
        for name in ["patterson", "density"] + [f"partial {j}" for j in range(J)]:
            raw = r.take(4 * n_vox, f"{name} of {ex_id}")
            maps.append(np.frombuffer(raw, dtype="<f4").astype(MAP_DTYPE).reshape(dims))
        out.append(Example(ex_id, maps[0], maps[1], maps[2:], UnitCell(a, b, c), tids))
    if r.pos != len(r.buf):
        raise DatasetFormatError(f"{path.name}: {len(r.buf) - r.pos} trailing bytes after {count} examples")
    return out


def write_dataset(
    examples,
    directory,
    *,
    d_min: float,
    oversampling: float,
    min_contact: float,
    seed: int,
    min_batch: int = 1,
    extra: dict | None = None,
) -> DatasetManifest:
    """Write examples grouped into shape bins; bins below ``min_batch`` are dropped."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    examples = list(examples)
    J = examples[0].J if examples else 0
    if any(ex.J != J for ex in examples):
        raise ValueError("all examples in a dataset must have the same number of partial structures")
    manifest = DatasetManifest(FORMAT_VERSION, d_min, oversampling, min_contact, seed, J, [], dict(extra or {}))
    dropped = 0
    for dims, group in group_by_dims(examples).items():
        if len(group) < min_batch:
            dropped += len(group)
            continue
        name = bin_filename(dims)
        _write_bin(directory / name, dims, J, group)
        manifest.bins.append(BinInfo(dims, len(group), name))
    manifest.extra.setdefault("min_batch", min_batch)
    manifest.extra["dropped"] = dropped
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc.msg})") from None
    return DatasetManifest.from_json(raw)


def read_dataset(directory) -> tuple[DatasetManifest, list[Example]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    examples = []
    for b in manifest.bins:
        got = read_bin(directory / b.file)
        if len(got) != b.count or any(ex.dims != b.dims for ex in got):
            raise DatasetFormatError(f"{b.file}: contents disagree with manifest entry {b.dims} x {b.count}")
        if any(ex.J != manifest.J for ex in got):
            raise DatasetFormatError(f"{b.file}: J differs from manifest J={manifest.J}")
        examples.extend(got)
    return manifest, examples


def is_test_id(example_id: str, test_fraction: float = 0.1) -> bool:
    digest = hashlib.sha256(example_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2**64 < test_fraction


def split_examples(examples, test_fraction: float = 0.1) -> tuple[list[Example], list[Example]]:
    """Hash-based train/test split on the example id, stable across runs."""
    train, test = [], []
    for ex in examples:
        (test if is_test_id(ex.id, test_fraction) else train).append(ex)
    return train, test
