import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from crysforge.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from crysforge.datagen import generate_examples
from crysforge.model import ModelConfig
from crysforge.train import (
    History,
    NumericalAbort,
    TrainConfig,
    epoch_batches,
    evaluate,
    evaluate_predictions,
    mean_pearson,
    mse_loss,
    predict,
    refine,
    train,
)
from crysforge.unet import UnetConfig

SMALL_CF = ModelConfig(d_t=32, heads=2, d_h=16, layers=1)
SMALL_UNET = UnetConfig(enc_channels=(4, 6), res_blocks=1, dec_channels=4)


@pytest.fixture(scope="module")
def overfit_set():
    return generate_examples(32, seed=11)


def test_mse_examples(rng):
    t = torch.randn(4, 4, 4)
    assert mse_loss(t, t).item() == 0.0
    assert mse_loss(t + 0.1, t).item() == pytest.approx(0.01, rel=1e-5)
    a, b = rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4))
    brute = sum((a[i, j, k] - b[i, j, k]) ** 2 for i in range(4) for j in range(4) for k in range(4)) / 64
    assert mse_loss(a, b) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        mse_loss(a, b[:3])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(arch="mlp")
    assert TrainConfig().partials is True
    assert TrainConfig(arch="unet").partials is False


@pytest.mark.parametrize("batch", [1, 2, 3, 5])
def test_batches_are_homogeneous_and_counted_per_bin(small_examples, batch):
    rng = np.random.default_rng(0)
    batches = epoch_batches(small_examples, batch, rng)
    sizes = {}
    for ex in small_examples:
        sizes[ex.dims] = sizes.get(ex.dims, 0) + 1
    assert len(batches) == sum(math.ceil(n / batch) for n in sizes.values())
    assert sorted(i for b in batches for i in b) == list(range(len(small_examples)))
    for b in batches:
        assert len({small_examples[i].dims for i in b}) == 1
        assert len(b) <= batch


def test_update_count_matches_batches(small_examples, monkeypatch):
    steps = []
    orig = torch.optim.Adam.step
    monkeypatch.setattr(torch.optim.Adam, "step", lambda self, *a, **k: steps.append(1) or orig(self, *a, **k))
    cfg = TrainConfig(epochs=2, batch_size=3, model_config=SMALL_CF)
    train(cfg, small_examples)
    per_epoch = len(epoch_batches(small_examples, 3, np.random.default_rng(0)))
    assert len(steps) == 2 * per_epoch


def test_same_seed_same_history(small_examples):
    cfg = TrainConfig(epochs=2, batch_size=2, model_config=SMALL_CF, seed=5)
    _, h1 = train(cfg, small_examples[:8], small_examples[8:])
    _, h2 = train(cfg, small_examples[:8], small_examples[8:])
    assert h1.train_loss == h2.train_loss
    assert h1.test_pearson == h2.test_pearson
    assert len(h1) == 2 and len(h1.seconds) == 2
    _, h3 = train(replace(cfg, seed=6), small_examples[:8])
    assert h3.train_loss != h1.train_loss


def test_history_csv(tmp_path):
    h = History([0.5, 0.25], [math.nan, 0.1], [1.0, 2.0])
    h.write_csv(tmp_path / "a.csv")
    h.write_csv(tmp_path / "b.csv", timings=False)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_pearson,seconds"
    assert lines[1] == "1,0.5,nan,1.000"
    assert (tmp_path / "b.csv").read_text().splitlines()[2] == "2,0.25,0.1,"


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1, model_config=SMALL_CF), [])


def test_non_finite_loss_aborts(small_examples, monkeypatch):
    import crysforge.train as tr

    monkeypatch.setattr(tr, "mse_loss", lambda p, t: (p.sum() * float("nan")))
    with pytest.raises(NumericalAbort):
        train(TrainConfig(epochs=1, model_config=SMALL_CF), small_examples[:2])


def test_evaluate_truth_and_zero(small_examples):
    truth = {ex.id: ex.density for ex in small_examples}
    res = evaluate_predictions(truth, small_examples)
    assert res.mean_pearson == pytest.approx(1.0, abs=1e-6)
    assert res.mean_phase_error == 0.0
    assert len(res.rows) == len(small_examples)
    assert all(r["fraction_below_60"] == 1.0 for r in res.shell_rows() if r["count"])
    zero = {ex.id: np.zeros_like(ex.density) for ex in small_examples}
    res0 = evaluate_predictions(zero, small_examples)
    assert res0.mean_pearson == 0.0
    assert res0.mean_phase_error == 90.0
    pct = res.percentiles()
    assert pct["pearson_p50"] == pytest.approx(1.0, abs=1e-6)


def test_unet_variants_train_and_predict(small_examples):
    for partials in (False, True):
        cfg = TrainConfig(arch="unet", partials=partials, epochs=1, model_config=SMALL_UNET)
        bundle, hist = train(cfg, small_examples[:4])
        assert bundle.module.cfg.in_channels == (3 if partials else 1)
        preds = predict(bundle, small_examples[:4])
        assert all(preds[ex.id].shape == ex.dims for ex in small_examples[:4])
        assert np.isfinite(hist.train_loss).all()


@pytest.mark.parametrize("arch,cfg", [("crysformer", SMALL_CF), ("unet", SMALL_UNET)])
def test_refine_adds_one_channel_and_freezes_prior(small_examples, arch, cfg):
    tc = TrainConfig(arch=arch, epochs=1, model_config=cfg)
    prior, _ = train(tc, small_examples[:4])
    before = {k: v.clone() for k, v in prior.module.state_dict().items()}
    bundle, _ = refine(tc, small_examples[:4], prior)
    base_in = prior.module.cfg.in_channels
    assert bundle.module.cfg.in_channels == base_in + 1
    assert bundle.kind == prior.kind + "+r"
    for k, v in prior.module.state_dict().items():
        assert torch.equal(v, before[k])
    assert bundle.prior is prior
    assert set(predict(bundle, small_examples[:4])) == {ex.id for ex in small_examples[:4]}


def test_refine_with_perfect_prior(overfit_set):
    cfg = TrainConfig(epochs=1, batch_size=1, seed=0)
    prior, _ = train(cfg, overfit_set[:2])
    truth = {ex.id: ex.density for ex in overfit_set}
    bundle, hist = refine(replace(cfg, epochs=50), overfit_set, prior, prior_predictions=truth)
    assert len(hist) == 50
    pc = mean_pearson(predict(bundle, overfit_set, priors=truth), overfit_set)
    print(f"perfect-prior refine: train pearson {pc:.4f}")
    assert pc >= 0.99


def test_checkpoint_round_trip(tmp_path, small_examples):
    for arch, cfg in [("crysformer", SMALL_CF), ("unet", SMALL_UNET)]:
        tc = TrainConfig(arch=arch, partials=True, epochs=1, model_config=cfg)
        prior, _ = train(tc, small_examples[:4])
        bundle, _ = refine(tc, small_examples[:4], prior)
        path = tmp_path / f"{arch}.crys"
        save_checkpoint(bundle, path)
        assert path.read_bytes()[:4] == (b"CRYP" if arch == "crysformer" else b"CRYU")
        loaded = load_checkpoint(path)
        assert loaded.kind == bundle.kind and loaded.J == bundle.J
        assert loaded.prior is not None and loaded.prior.kind == prior.kind
        a = predict(bundle, small_examples[:4])
        b = predict(loaded, small_examples[:4])
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        assert loaded.describe()["config"] == bundle.describe()["config"]


def test_checkpoint_errors(tmp_path, small_examples):
    bundle, _ = train(TrainConfig(epochs=1, model_config=SMALL_CF), small_examples[:2])
    path = tmp_path / "m.crys"
    save_checkpoint(bundle, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.crys").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.crys")
    (tmp_path / "magic.crys").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.crys")
    (tmp_path / "swap.crys").write_bytes(b"CRYU" + raw[4:])
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "swap.crys")


def test_evaluate_matches_predict(small_examples):
    bundle, _ = train(TrainConfig(epochs=1, model_config=SMALL_CF), small_examples[:4])
    res = evaluate(bundle, small_examples[:4])
    preds = predict(bundle, small_examples[:4])
    assert res.mean_pearson == pytest.approx(mean_pearson(preds, small_examples[:4]))
