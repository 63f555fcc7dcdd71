import json
import math

import numpy as np
import pytest

from msnmt import tensor as T
from msnmt import training
from msnmt.decoding import translate_pairs
from msnmt.data import SyntheticSpec, build_vocab, generate_synthetic_dataset, make_batches
from msnmt.model import ModelConfig, init_params, teacher_forced_logits
from msnmt.policy import Policy
from msnmt.tensor import Tensor
from msnmt.training import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    clip_gradients,
    dev_bleu,
    prefix_loss,
    save_report,
    train_msnmt_pipeline,
    train_stage,
)

from oracles import adam_1d_quadratic


# -------------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_times_sign():
    p = {"w": Tensor(np.array([0.0, 0.0]))}
    adam_step(p, {"w": np.array([3.0, -0.5])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01], rtol=1e-6)


def test_adam_quadratic_matches_scalar_oracle():
    x = {"x": Tensor(np.array([5.0]))}
    state = AdamState()
    for _ in range(300):
        adam_step(x, {"x": 2 * (x["x"].data - 1.5)}, state, lr=0.05)
    expected = adam_1d_quadratic(1.5, 5.0, 0.05, 300)
    assert abs(x["x"].data[0] - expected) <= 1e-6
    assert abs(expected - 1.5) < 0.05


def test_adam_skips_missing_gradients():
    p = {"a": Tensor(np.ones(1)), "b": Tensor(np.ones(1))}
    adam_step(p, {"a": np.ones(1), "b": None}, AdamState(), lr=0.1)
    assert p["b"].data[0] == 1.0 and p["a"].data[0] < 1.0


def test_adam_non_finite_names_parameter():
    p = {"dec1.W": Tensor(np.ones(2))}
    with pytest.raises(TrainingDiverged, match="dec1.W"):
        adam_step(p, {"dec1.W": np.array([1.0, np.nan])}, AdamState(), lr=0.1)
    assert p["dec1.W"].data.tolist() == [1.0, 1.0]


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    clipped = clip_gradients(g, 1.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    assert clip_gradients(g, 10.0)["a"][0] == 3.0


# ---------------------------------------------------------- early stopping


def test_early_stopping_patience_two():
    stop = EarlyStopping(2)
    for epoch, score in enumerate([10, 12, 11, 11], 1):
        stop.update(epoch, score)
        assert stop.should_stop == (epoch == 4)
    assert stop.best_epoch == 2 and stop.best == 12


def test_early_stopping_needs_strict_improvement():
    stop = EarlyStopping(1)
    stop.update(1, 5.0)
    assert not stop.update(2, 5.0)
    assert stop.should_stop


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(policy="eventually")
    assert TrainConfig(policy="3").wait == Policy.wait(3)
    assert (training.PRETRAIN_DEFAULTS.patience, training.FINETUNE_DEFAULTS.batch_size) == (10, 32)


# ------------------------------------------------------------- prefix loss


def small_setup(multimodal=False, size=40, seed=0, **model_kw):
    ds = generate_synthetic_dataset(SyntheticSpec(size=size, feature_dim=16), seed=seed)
    vocab = build_vocab([p.src for p in ds.pairs] + [p.tgt for p in ds.pairs])
    kw = dict(vocab_size=len(vocab), emb_dim=16, hidden_dim=32, feature_dim=16, multimodal=multimodal,
              dropout_emb=0.0, dropout_enc=0.0, dropout_out=0.0)
    kw.update(model_kw)
    return ds, vocab, init_params(ModelConfig(**kw))


def test_prefix_loss_full_equals_unmasked():
    ds, vocab, p = small_setup(precision="wide")
    (batch,) = make_batches(ds.pairs[:8], vocab, 8, seed=0)
    loss = prefix_loss(p, batch, Policy.full()).item()
    logits = teacher_forced_logits(p, batch.src, batch.src_len, batch.tgt_in, Policy.wait(99)).data
    flat_targets = batch.tgt_out.T.reshape(-1)
    keep = flat_targets != 0
    logp = logits - logits.max(axis=1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
    manual = -logp[np.arange(len(flat_targets)), flat_targets][keep].mean()
    assert abs(loss - manual) <= 1e-6


def test_uniform_model_loss_is_log_vocab():
    ds, vocab, p = small_setup()
    p["out.W"].data[:] = 0
    p["out.bias"].data[:] = 0
    (batch,) = make_batches(ds.pairs[:5], vocab, 5, seed=0)
    assert abs(prefix_loss(p, batch, Policy.wait(2)).item() - math.log(len(vocab))) < 1e-5


def test_dropout_changes_loss_only_with_rng():
    ds, vocab, p = small_setup(dropout_emb=0.4, dropout_enc=0.5, dropout_out=0.5)
    (batch,) = make_batches(ds.pairs[:8], vocab, 8, seed=0)
    rng = np.random.default_rng(0)
    draws = {round(prefix_loss(p, batch, Policy.wait(1), rng).item(), 9) for _ in range(20)}
    assert len(draws) > 1
    assert prefix_loss(p, batch, Policy.wait(1)).item() == prefix_loss(p, batch, Policy.wait(1)).item()


def test_prefix_loss_gradient():
    ds, vocab, p = small_setup(precision="wide", emb_dim=3, hidden_dim=4)
    (batch,) = make_batches(ds.pairs[:2], vocab, 2, seed=0)
    assert T.grad_check(lambda *_: prefix_loss(p, batch, Policy.wait(1)), list(p)) <= 1e-4


# --------------------------------------------------------------- training


def test_overfit_ten_pairs():
    ds, vocab, p = small_setup(size=10, seed=4)
    cfg = TrainConfig(lr=0.01, batch_size=5, patience=30, policy="3", max_epochs=150)
    best, report = train_stage(p, ds.pairs, ds.pairs, vocab, cfg)
    assert report.best_bleu >= 90
    assert dev_bleu(best, vocab, ds.pairs, Policy.wait(3), "none", None) == report.best_bleu
    hyps = translate_pairs(best, vocab, ds.pairs, Policy.wait(3), "none")
    assert [vocab.decode(h.tokens) for h in hyps] == [p.tgt for p in ds.pairs]


def test_train_stage_does_not_touch_input():
    ds, vocab, p = small_setup(size=10)
    before = p["emb"].data.copy()
    train_stage(p, ds.pairs, ds.pairs[:3], vocab, TrainConfig(lr=0.01, batch_size=5, max_epochs=2))
    np.testing.assert_array_equal(p["emb"].data, before)


def test_train_stage_reports_and_stops():
    ds, vocab, p = small_setup(size=10)
    _, report = train_stage(p, ds.pairs, ds.pairs[:3], vocab, TrainConfig(lr=1e-6, batch_size=5, patience=1, max_epochs=10))
    assert report.stop_reason in {"patience", "max_epochs"}
    assert [r.epoch for r in report.epochs] == list(range(1, len(report.epochs) + 1))
    with pytest.raises(ValueError):
        train_stage(p, ds.pairs, [], vocab, TrainConfig())


def test_training_is_reproducible():
    ds, vocab, p = small_setup(size=12, dropout_out=0.3)
    cfg = TrainConfig(lr=0.01, batch_size=4, max_epochs=3, policy="2")
    a, _ = train_stage(p, ds.pairs, ds.pairs[:4], vocab, cfg)
    b, _ = train_stage(p, ds.pairs, ds.pairs[:4], vocab, cfg)
    for name in a.tensors:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_zero_mode_never_reads_store():
    class Exploding(dict):
        def __getitem__(self, key):
            raise AssertionError("store was read")

        def get(self, key, default=None):
            raise AssertionError("store was read")

    ds, vocab, p = small_setup(multimodal=True, size=8)
    train_stage(p, ds.pairs, ds.pairs[:2], vocab, TrainConfig(lr=0.01, batch_size=4, max_epochs=1), "zeros", Exploding())


def test_multimodal_needs_feature_mode():
    ds, vocab, p = small_setup(multimodal=True, size=8)
    with pytest.raises(ValueError):
        train_stage(p, ds.pairs, ds.pairs[:2], vocab, TrainConfig(max_epochs=1))


def test_pipeline_warm_start_and_zero_image_weights():
    ds, vocab, p = small_setup(multimodal=True, size=30)
    pre = TrainConfig(lr=0.01, batch_size=10, patience=3, policy="1", max_epochs=6)
    fine = TrainConfig(lr=0.005, batch_size=10, patience=2, policy="1", max_epochs=3)
    stage1, r1 = train_stage(p, ds.pairs, ds.pairs[:10], vocab, pre, "zeros")
    # zero features give the image projection no gradient, so it is still exactly zero
    assert not stage1["img_proj.W"].data.any()
    start = dev_bleu(stage1, vocab, ds.pairs[:10], Policy.wait(1), "real", ds.features)
    assert start >= r1.best_bleu - 2
    final, r1b, r2 = train_msnmt_pipeline(p, ds.pairs, ds.pairs[:10], vocab, ds.features, pre, fine)
    assert r1b.best_bleu == r1.best_bleu
    assert r2.epochs and final.config.multimodal


def test_divergence_carries_last_good(monkeypatch):
    ds, vocab, p = small_setup(size=10)
    calls = {"n": 0}
    real = training.prefix_loss

    def flaky(*args, **kw):
        calls["n"] += 1
        loss = real(*args, **kw)
        if calls["n"] == 5:
            loss.data = loss.data * np.nan
        return loss

    monkeypatch.setattr(training, "prefix_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train_stage(p, ds.pairs, ds.pairs[:3], vocab, TrainConfig(lr=0.01, batch_size=5, max_epochs=5))
    err = info.value
    assert err.last_good is not None and err.report.stop_reason == "diverged"
    assert len(err.report.epochs) == 2
    assert all(np.all(np.isfinite(t.data)) for t in err.last_good)


def test_report_jsonl(tmp_path):
    rep = training.TrainReport([training.EpochRecord(1, 2.5, 10.0)], 1, 10.0, "max_epochs")
    save_report([("pretrain", rep), ("finetune", rep)], tmp_path / "r.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in rows] == ["pretrain", "finetune"]
    assert rows[0] == {"epoch": 1, "loss": 2.5, "dev_bleu": 10.0, "stage": "pretrain"}
