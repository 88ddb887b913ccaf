"""Training, refining and evaluation for both architectures.

Batches never mix grid shapes: examples are grouped into shape bins,
shuffled inside each bin every epoch, and the bins' batches are taken
round-robin.  All randomness comes from named sub-streams of ``seed``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .checkpoint import ModelBundle, build_module
from .dataset import Example, group_by_dims
from .metrics import DEFAULT_SHELLS, PhaseErrorReport, fraction_below, mean_shell_errors, pearson, phase_error_by_shell
from .model import ModelConfig
from .seeding import subseed, substream
from .unet import UnetConfig, unet_channels

log = logging.getLogger(__name__)

ARCHS = ("crysformer", "unet")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    arch: str = "crysformer"
    partials: bool | None = None  # None: on for CrysFormer, off for the U-Net
    refine: bool = False
    epochs: int = 10
    batch_size: int = 2
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    model_config: ModelConfig | UnetConfig | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.partials is None:
            self.partials = self.arch == "crysformer"

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "partials": self.partials,
            "refine": self.refine,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "optimizer": "adam",
        }


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    test_pearson: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path, *, timings: bool = True) -> None:
        """With ``timings=False`` the seconds column is left empty so reruns compare byte for byte."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_pearson", "seconds"])
            for i, (loss, pc, sec) in enumerate(zip(self.train_loss, self.test_pearson, self.seconds), start=1):
                w.writerow([i, repr(float(loss)), repr(float(pc)), f"{sec:.3f}" if timings else ""])


def mse_loss(pred, target):
    """Mean squared voxel difference; works on numpy arrays and torch tensors."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def configure_threads() -> None:
    n = os.environ.get("CRYSFORGE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))
        from ._jit import set_threads

        set_threads(int(n))


# --------------------------------------------------------------------------
# batching


def epoch_batches(examples, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Index batches for one epoch: shuffled within shape bins, bins interleaved round-robin."""
    bins: dict[tuple, list[int]] = {}
    for i, ex in enumerate(examples):
        bins.setdefault(ex.dims, []).append(i)
    per_bin = []
    for dims in sorted(bins):
        idx = np.asarray(bins[dims])
        idx = idx[rng.permutation(len(idx))]
        per_bin.append([idx[s : s + batch_size].tolist() for s in range(0, len(idx), batch_size)])
    out = []
    for r in range(max((len(b) for b in per_bin), default=0)):
        for b in per_bin:
            if r < len(b):
                out.append(b[r])
    return out


def _stack(maps, dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(maps).astype(np.float32, copy=False)).to(dtype)


def model_inputs(bundle: ModelBundle, batch: list[Example], priors: dict | None = None, dtype=torch.float32):
    """Tensors for one homogeneous batch, as a kwargs dict for :func:`run_model`."""
    p = _stack([ex.patterson for ex in batch], dtype)
    u = None
    if bundle.partials and bundle.J:
        if any(ex.J != bundle.J for ex in batch):
            raise ValueError(f"model expects J={bundle.J} partial structures")
        u = torch.stack([_stack(ex.partials, dtype) for ex in batch])
    prior = _stack([priors[ex.id] for ex in batch], dtype) if bundle.refine else None
    return {"p": p, "u": u, "prior": prior}


def run_model(bundle: ModelBundle, p, u=None, prior=None) -> torch.Tensor:
    if bundle.arch == "crysformer":
        return bundle.module(p, u if bundle.partials else None, prior)
    chans = [p.unsqueeze(1)]
    if bundle.partials and u is not None:
        chans.append(u)
    if bundle.refine:
        chans.append(prior.unsqueeze(1))
    return bundle.module(torch.cat(chans, dim=1))


# --------------------------------------------------------------------------
# model construction


def new_bundle(config: TrainConfig, J: int, seed: int | None = None) -> ModelBundle:
    seed = config.seed if seed is None else seed
    torch.manual_seed(subseed(seed, "init"))
    J_used = J if config.partials else 0
    if config.arch == "crysformer":
        base = config.model_config if isinstance(config.model_config, ModelConfig) else ModelConfig()
        cfg = replace(base, in_channels=1 + int(config.refine), J_max=max(base.J_max, J_used))
    else:
        base = config.model_config if isinstance(config.model_config, UnetConfig) else UnetConfig()
        cfg = replace(base, in_channels=unet_channels(J_used, config.refine))
    return ModelBundle(config.arch, build_module(config.arch, cfg), J_used, bool(config.partials), config.refine)


def _dataset_J(examples) -> int:
    Js = {ex.J for ex in examples}
    if len(Js) > 1:
        raise ValueError(f"examples disagree on J: {sorted(Js)}")
    return Js.pop() if Js else 0


# --------------------------------------------------------------------------
# prediction and evaluation


@torch.no_grad()
def predict(bundle: ModelBundle, examples, batch_size: int = 8, priors: dict | None = None) -> dict[str, np.ndarray]:
    """Evaluation-mode predictions keyed by example id."""
    examples = list(examples)
    if bundle.refine and priors is None:
        if bundle.prior is None:
            raise ValueError("refined model has no prior to generate its extra channel")
        priors = predict(bundle.prior, examples, batch_size)
    was_training = bundle.module.training
    bundle.module.eval()
    out = {}
    try:
        for group in group_by_dims(examples).values():
            for s in range(0, len(group), batch_size):
                batch = group[s : s + batch_size]
                dtype = next(bundle.module.parameters()).dtype
                pred = run_model(bundle, **model_inputs(bundle, batch, priors, dtype))
                for ex, m in zip(batch, pred.cpu().numpy().astype(np.float32)):
                    out[ex.id] = m
    finally:
        bundle.module.train(was_training)
    return out


@dataclass
class EvalRow:
    id: str
    pearson: float
    mean_phase_error: float
    mean_phase_error_unweighted: float


@dataclass
class EvalResult:
    rows: list[EvalRow]
    reports: list[PhaseErrorReport]

    @property
    def mean_pearson(self) -> float:
        return float(np.mean([r.pearson for r in self.rows]))

    @property
    def mean_phase_error(self) -> float:
        return float(np.mean([r.mean_phase_error for r in self.rows]))

    def percentiles(self, q=(10, 50, 90)) -> dict:
        pc = np.array([r.pearson for r in self.rows])
        pe = np.array([r.mean_phase_error for r in self.rows])
        return {f"pearson_p{p}": float(np.percentile(pc, p)) for p in q} | {
            f"phase_error_p{p}": float(np.percentile(pe, p)) for p in q
        }

    def shell_rows(self, threshold: float = 60.0) -> list[dict]:
        layout = self.reports[0].layout
        fracs = fraction_below(self.reports, threshold)
        errs = mean_shell_errors(self.reports)
        counts = [sum(r.shells[i].count for r in self.reports) for i in range(len(layout))]
        return [
            {"d_hi": hi, "d_lo": lo, "mean_error": e, "count": n, "fraction_below_60": f}
            for (hi, lo), e, n, f in zip(layout, errs, counts, fracs)
        ]


def evaluate_predictions(predictions: dict, examples, shells=DEFAULT_SHELLS) -> EvalResult:
    rows, reports = [], []
    for ex in examples:
        pred = predictions[ex.id]
        rep = phase_error_by_shell(ex.density, pred, ex.cell, shells)
        rows.append(EvalRow(ex.id, pearson(ex.density, pred), rep.overall, rep.overall_unweighted))
        reports.append(rep)
    return EvalResult(rows, reports)


def evaluate(bundle: ModelBundle, examples, shells=DEFAULT_SHELLS, batch_size: int = 8) -> EvalResult:
    examples = list(examples)
    return evaluate_predictions(predict(bundle, examples, batch_size), examples, shells)


def mean_pearson(predictions: dict, examples) -> float:
    return float(np.mean([pearson(ex.density, predictions[ex.id]) for ex in examples]))


# --------------------------------------------------------------------------
# training


def fit(
    bundle: ModelBundle,
    config: TrainConfig,
    train_set,
    test_set=None,
    *,
    priors: dict | None = None,
    on_epoch=None,
) -> History:
    """Adam on the mean squared error; updates ``bundle.module`` in place."""
    train_set = list(train_set)
    test_set = list(test_set or [])
    if not train_set:
        raise ValueError("training set is empty")
    module = bundle.module
    dtype = next(module.parameters()).dtype
    opt = torch.optim.Adam(module.parameters(), lr=config.lr, betas=tuple(config.betas), eps=config.adam_eps)
    hist = History()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        module.train()
        rng = substream(config.seed, "shuffle", epoch)
        total, count = 0.0, 0
        for idx in epoch_batches(train_set, config.batch_size, rng):
            batch = [train_set[i] for i in idx]
            inputs = model_inputs(bundle, batch, priors, dtype)
            target = _stack([ex.density for ex in batch], dtype)
            loss = mse_loss(run_model(bundle, **inputs), target)
            if not torch.isfinite(loss):
                raise NumericalAbort(f"non-finite loss at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        hist.train_loss.append(total / count)
        if test_set and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            hist.test_pearson.append(mean_pearson(predict(bundle, test_set, priors=priors), test_set))
        else:
            hist.test_pearson.append(math.nan)
        hist.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.6f test pearson %.4f", epoch + 1, hist.train_loss[-1], hist.test_pearson[-1])
        if on_epoch is not None:
            on_epoch(epoch, hist)
    module.eval()
    return hist


def train(config: TrainConfig, train_set, test_set=None, *, on_epoch=None) -> tuple[ModelBundle, History]:
    """Fresh model trained on ``train_set``; deterministic given ``config.seed``."""
    if config.refine:
        raise ValueError("use refine() to train a model with a prior channel")
    train_set = list(train_set)
    bundle = new_bundle(config, _dataset_J(train_set))
    bundle.meta["train"] = config.to_dict()
    return bundle, fit(bundle, config, train_set, test_set, on_epoch=on_epoch)


def refine(
    config: TrainConfig,
    train_set,
    prior: ModelBundle,
    test_set=None,
    *,
    prior_predictions: dict | None = None,
    on_epoch=None,
) -> tuple[ModelBundle, History]:
    """Train a fresh model whose input gains one channel: the frozen prior's prediction.

    ``prior_predictions`` replaces the prior's output (id -> map); intended
    for tests that inject a known prior.
    """
    train_set = list(train_set)
    test_set = list(test_set or [])
    config = replace(config, refine=True)
    if prior_predictions is None:
        prior_predictions = predict(prior, train_set + test_set)
    bundle = new_bundle(config, _dataset_J(train_set))
    bundle.prior = prior
    bundle.meta["train"] = config.to_dict()
    hist = fit(bundle, config, train_set, test_set, priors=prior_predictions, on_epoch=on_epoch)
    return bundle, hist
