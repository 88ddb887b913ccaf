"""Command line: ``crysforge {gen,train,eval,report,replay}``.

Exit codes: 0 success, 1 IO failure, 2 usage or validation error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
RUN_MANIFEST = "run_manifest.json"
CHECKPOINT_NAME = "model.crys"
HISTORY_NAME = "history.csv"
PER_EXAMPLE_NAME = "per_example.csv"
SHELLS_NAME = "shells.csv"
REPORT_SHELLS_NAME = "report_shells.csv"
REPORT_TABLE_NAME = "report_table.csv"

log = logging.getLogger("crysforge")


class UsageError(Exception):
    """Invalid flags or inputs that do not fit together."""


# --------------------------------------------------------------------------
# helpers


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".10g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, argv, started: str, outputs, **extra):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": config.get("seed"),
        "version": _version(),
        "started": started,
        "finished": _now(),
        "outputs": [str(p) for p in outputs],
        **extra,
    }
    with open(out_dir / RUN_MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def read_run_manifest(run_dir: Path) -> dict:
    path = Path(run_dir) / RUN_MANIFEST
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc.msg})") from None


def _parse_cell(text: str):
    from .grid import UnitCell

    try:
        a, b, c = (float(v) for v in text.split(","))
        return UnitCell(a, b, c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A,B,C with three positive numbers, got {text!r}") from None


def _parse_shells(text: str):
    try:
        edges = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shell edges {text!r}") from None
    bounds = [math.inf] + edges
    return tuple(zip(bounds[:-1], bounds[1:]))


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _arch_config(arch: str, text: str | None):
    from .model import ModelConfig
    from .unet import UnetConfig

    if not text:
        return None
    try:
        raw = json.loads(Path(text[1:]).read_text(encoding="utf-8")) if text.startswith("@") else json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--arch-config is not valid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise UsageError("--arch-config must be a JSON object")
    base = ModelConfig() if arch == "crysformer" else UnetConfig()
    for key in ("patch", "enc_channels"):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        return replace(base, **raw)
    except TypeError as exc:
        raise UsageError(f"--arch-config: {exc}") from None


def _check_compatible(bundle, manifest) -> None:
    """Raise UsageError if the dataset's grids or J cannot be fed to ``bundle``."""
    if bundle.partials and bundle.J != manifest.J:
        raise UsageError(f"model expects J={bundle.J} partial structures, dataset has J={manifest.J}")
    cfg = bundle.config
    for b in manifest.bins:
        if bundle.arch == "crysformer":
            try:
                tokens = cfg.tokens(b.dims)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            if tokens > cfg.max_tokens:
                raise UsageError(f"grid {b.dims} needs {tokens} tokens, model allows {cfg.max_tokens}")
        elif any(n % 2 for n in b.dims):
            raise UsageError(f"grid {b.dims} has an odd dimension; the U-Net needs even dims")
    if bundle.prior is not None:
        _check_compatible(bundle.prior, manifest)


def _select(examples, split: str):
    from .dataset import split_examples

    if split == "all":
        return list(examples)
    train, test = split_examples(examples)
    return train if split == "train" else test


# --------------------------------------------------------------------------
# commands


def cmd_gen(args, argv) -> int:
    from .datagen import GenerationError, generate_examples
    from .dataset import write_dataset

    started = _now()
    out = Path(args.out)
    try:
        examples = generate_examples(
            args.n,
            args.seed,
            J=args.residues,
            d_min=args.dmin,
            min_contact=args.min_contact,
            oversampling=args.oversample,
            fixed_cell=args.fixed_cell,
        )
    except (GenerationError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    extra = {"fixed_cell": list(args.fixed_cell.edges) if args.fixed_cell else None}
    manifest = write_dataset(
        examples,
        out,
        d_min=args.dmin,
        oversampling=args.oversample,
        min_contact=args.min_contact,
        seed=args.seed,
        min_batch=args.min_batch,
        extra=extra,
    )
    print(f"{manifest.n_examples} examples in {len(manifest.bins)} bins (spacing {manifest.spacing:g} A)")
    for b in manifest.bins:
        print(f"  {b.dims[0]}x{b.dims[1]}x{b.dims[2]}: {b.count}")
    if manifest.extra.get("dropped"):
        print(f"  dropped {manifest.extra['dropped']} examples in bins smaller than {args.min_batch}")
    write_run_manifest(out, "gen", args, argv, started, [out / "manifest.json"] + [out / b.file for b in manifest.bins])
    return EXIT_OK


def cmd_train(args, argv) -> int:
    import torch

    from .checkpoint import load_checkpoint, save_checkpoint
    from .dataset import read_dataset
    from .train import TrainConfig, configure_threads, new_bundle, predict, refine, train

    started = _now()
    configure_threads()
    torch.use_deterministic_algorithms(True)
    manifest, examples = read_dataset(args.data)
    train_set = _select(examples, args.split)
    test_set = _select(examples, "test") if args.split == "train" else []
    if not train_set:
        raise UsageError(f"no training examples in split {args.split!r}")
    partials = args.ps if args.ps is not None else args.model == "crysformer"
    try:
        config = TrainConfig(
            arch=args.model,
            partials=partials,
            refine=args.refine is not None,
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=args.seed,
            model_config=_arch_config(args.model, args.arch_config),
            eval_every=args.eval_every,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    # validate shapes before spending time on training
    _check_compatible(new_bundle(config, manifest.J), manifest)
    prior = None
    if args.refine is not None:
        prior = load_checkpoint(args.refine)
        _check_compatible(prior, manifest)

    def progress(epoch, hist):
        print(f"epoch {epoch + 1}/{config.epochs} loss {hist.train_loss[-1]:.6g} "
              f"test_pearson {_fmt(hist.test_pearson[-1])} ({hist.seconds[-1]:.1f}s)", flush=True)

    if prior is None:
        bundle, hist = train(config, train_set, test_set, on_epoch=progress)
    else:
        priors = predict(prior, train_set + test_set)
        bundle, hist = refine(config, train_set, prior, test_set, prior_predictions=priors, on_epoch=progress)
    bundle.meta["dataset"] = {"path": str(args.data), "J": manifest.J, "split": args.split}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, out / CHECKPOINT_NAME)
    hist.write_csv(out / HISTORY_NAME, timings=not args.deterministic)
    n_params = sum(p.numel() for p in bundle.module.parameters())
    print(f"{bundle.kind}: {n_params} parameters, final loss {hist.train_loss[-1]:.6g}")
    write_run_manifest(
        out,
        "train",
        args,
        argv,
        started,
        [out / CHECKPOINT_NAME, out / HISTORY_NAME],
        model_kind=bundle.kind,
        parameters=n_params,
        epoch_seconds=hist.seconds,
        n_train=len(train_set),
        n_test=len(test_set),
    )
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import read_dataset
    from .train import configure_threads, evaluate, evaluate_predictions

    started = _now()
    configure_threads()
    if args.checkpoint is None and not args.truth:
        raise UsageError("--checkpoint is required unless --truth is given")
    manifest, examples = read_dataset(args.data)
    selected = _select(examples, args.split)
    if not selected:
        raise UsageError(f"no examples in split {args.split!r}")
    extra = {}
    if args.truth:
        result = evaluate_predictions({ex.id: ex.density for ex in selected}, selected, args.shells)
        extra["model_kind"] = "ground-truth"
    else:
        bundle = load_checkpoint(args.checkpoint)
        _check_compatible(bundle, manifest)
        result = evaluate(bundle, selected, args.shells)
        extra["model_kind"] = bundle.kind
        extra["model"] = bundle.describe()
        train_manifest = Path(args.checkpoint).parent / RUN_MANIFEST
        if train_manifest.exists():
            tm = read_run_manifest(train_manifest.parent)
            secs = tm.get("epoch_seconds") or []
            extra["epochs"] = len(secs)
            extra["seconds_per_epoch"] = float(np.mean(secs)) if secs else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / PER_EXAMPLE_NAME,
        ["id", "pearson", "mean_phase_error"],
        [[r.id, _fmt(r.pearson), _fmt(r.mean_phase_error)] for r in result.rows],
    )
    _write_csv(
        out / SHELLS_NAME,
        ["d_hi", "d_lo", "mean_error", "count", "fraction_below_60"],
        [[_fmt(s["d_hi"]), _fmt(s["d_lo"]), _fmt(s["mean_error"]), s["count"], _fmt(s["fraction_below_60"])]
         for s in result.shell_rows()],
    )
    print(f"mean pearson {result.mean_pearson:.4f}")
    print(f"mean phase error {result.mean_phase_error:.2f} deg")
    label = args.label or (extra["model_kind"] if args.truth else Path(args.checkpoint).parent.name)
    write_run_manifest(
        out,
        "eval",
        args,
        argv,
        started,
        [out / PER_EXAMPLE_NAME, out / SHELLS_NAME],
        label=label,
        n_examples=len(result.rows),
        mean_pearson=result.mean_pearson,
        mean_phase_error=result.mean_phase_error,
        percentiles=result.percentiles(),
        **extra,
    )
    return EXIT_OK


def cmd_report(args, argv) -> int:
    started = _now()
    runs = [Path(r) for r in args.runs]
    labels = args.labels.split(",") if args.labels else None
    if labels is not None and len(labels) != len(runs):
        raise UsageError(f"{len(labels)} labels given for {len(runs)} runs")
    long_rows, table_rows = [], []
    layout = None
    for i, run in enumerate(runs):
        man = read_run_manifest(run)
        if man.get("command") != "eval":
            raise UsageError(f"{run} is not an eval run directory")
        label = labels[i] if labels else man["label"]
        shells = _read_csv(run / SHELLS_NAME)
        this_layout = [(r["d_hi"], r["d_lo"]) for r in shells]
        if layout is None:
            layout = this_layout
        elif this_layout != layout:
            raise UsageError(f"{run}: shell layout differs from {runs[0]}")
        for k, r in enumerate(shells):
            long_rows.append([label, k, r["d_hi"], r["d_lo"], r["mean_error"], r["fraction_below_60"], r["count"]])
        table_rows.append([
            label,
            man.get("model_kind", ""),
            man.get("epochs", ""),
            _fmt(man["mean_pearson"]),
            _fmt(man["mean_phase_error"]),
            "" if man.get("seconds_per_epoch") is None else f"{man['seconds_per_epoch']:.2f}",
            man["n_examples"],
        ])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / REPORT_SHELLS_NAME,
        ["run", "shell", "d_hi", "d_lo", "mean_error", "fraction_below_60", "count"],
        long_rows,
    )
    header = ["run", "model", "epochs", "mean_pearson", "mean_phase_error", "seconds_per_epoch", "n_examples"]
    _write_csv(out / REPORT_TABLE_NAME, header, table_rows)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *table_rows)]
    for row in [header, *table_rows]:
        print("  ".join(str(x).ljust(w) for x, w in zip(row, widths)))
    write_run_manifest(out, "report", args, argv, started, [out / REPORT_SHELLS_NAME, out / REPORT_TABLE_NAME])
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    man = read_run_manifest(Path(args.manifest).parent if Path(args.manifest).is_file() else Path(args.manifest))
    replayed = man.get("argv")
    if not replayed or replayed[0] == "replay":
        raise UsageError("manifest does not record a replayable command")
    print("replaying: crysforge " + " ".join(replayed))
    return main(replayed)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crysforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--n", type=_positive_int, required=True, help="number of examples")
    g.add_argument("--residues", type=int, default=2, help="residues per molecule (J)")
    g.add_argument("--dmin", type=_positive_float, default=1.5, help="resolution limit in A")
    g.add_argument("--min-contact", type=_positive_float, default=2.75, help="minimum image contact in A")
    g.add_argument("--oversample", type=_positive_float, default=3.0, help="grid oversampling factor")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-batch", type=_positive_int, default=1, help="drop shape bins with fewer examples")
    g.add_argument("--fixed-cell", type=_parse_cell, default=None, metavar="A,B,C", help="use one cell for all")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--model", choices=("crysformer", "unet"), default="crysformer")
    t.add_argument("--ps", dest="ps", action="store_true", default=None, help="feed partial structures")
    t.add_argument("--no-ps", dest="ps", action="store_false", help="do not feed partial structures")
    t.add_argument("--refine", metavar="CKPT", default=None, help="prior checkpoint for a refining run")
    t.add_argument("--epochs", type=_positive_int, default=10)
    t.add_argument("--batch", type=_positive_int, default=2)
    t.add_argument("--lr", type=_positive_float, default=3e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split", choices=("train", "all"), default="train", help="examples to train on")
    t.add_argument("--eval-every", type=_positive_int, default=1, help="epochs between test evaluations")
    t.add_argument("--arch-config", default=None, help="JSON overrides for the model config, or @file")
    t.add_argument("--deterministic", action="store_true", help="omit wall-clock times from the history CSV")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--label", default=None, help="run label used by report")
    e.add_argument("--shells", type=_parse_shells, default=None, metavar="D1,D2,...",
                   help="descending shell edges in A; the first shell starts at infinity")
    e.add_argument("--truth", action="store_true", help="score the true densities as predictions (test hook)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge eval runs into plot-ready CSVs")
    r.add_argument("runs", nargs="+", help="eval run directories")
    r.add_argument("--out", required=True)
    r.add_argument("--labels", default=None, help="comma-separated labels overriding the run manifests")
    r.set_defaults(func=cmd_report)

    rp = sub.add_parser("replay", help="rerun a command from its run manifest")
    rp.add_argument("manifest", help="run directory or run_manifest.json")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .dataset import DatasetFormatError
    from .metrics import DEFAULT_SHELLS
    from .train import NumericalAbort

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "shells", "absent") is None:
        args.shells = DEFAULT_SHELLS
    try:
        return args.func(args, argv)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, (CheckpointError, DatasetFormatError)) else EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
