"""Schedules, clipping, the optimizer, gradient accumulation, and train()."""

import json
import math

import numpy as np
import pytest

from kdlab import data as D
from kdlab import tensor as T
from kdlab.errors import ConfigError, TokenizerMismatchError, TrainingDivergedError
from kdlab.losses import build_layer_map
from kdlab.model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from kdlab.trainer import (
    AdamW,
    FrozenModel,
    TrainConfig,
    _run_step,
    clip_gradients,
    lr_at,
    train,
)

TINY = dict(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=99, max_seq_len=64)


def _cfg(**kw):
    base = dict(student_config=TINY, micro_batch=4, global_batch=4, max_steps=2,
                eval_every=0, peak_lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _corpus(tmp_path, n=80, seed=0, noise=0.0, families=None, name="c.jsonl"):
    samples = D.generate_corpus(families or D.GENERAL_FAMILIES, n, seed=seed, noise_rate=noise)
    path = tmp_path / name
    D.write_corpus(path, samples)
    return path


# ---------------------------------------------------------------- config


def test_config_validation_negatives():
    cases = [
        (dict(loss_mode="kld"), "loss_mode"),
        (dict(schedule="linear"), "schedule"),
        (dict(warmup_frac=1.0), "warmup_frac"),
        (dict(max_steps=0), "max_steps"),
        (dict(peak_lr=0.0), "peak_lr"),
        (dict(epochs=0.0), "epochs"),
        (dict(micro_batch=3, global_batch=8), "multiple"),
        (dict(ce_mask="prompt"), "ce_mask"),
        (dict(temperature=-1.0), "temperature"),
        (dict(loss_mode="kd_full"), "teacher_ckpt"),
        (dict(loss_mode="dae"), "expert_ckpt"),
        (dict(student_config=None), "exactly one"),
        (dict(init_ckpt="x.ckpt"), "exactly one"),
    ]
    for overrides, needle in cases:
        with pytest.raises(ConfigError, match=needle):
            _cfg(**overrides).validate()


def test_config_from_dict_rejects_unknown_key():
    with pytest.raises(ConfigError, match="peek_lr"):
        TrainConfig.from_dict({"peek_lr": 1e-3, "student_config": TINY})


def test_config_round_trips_through_dict():
    cfg = _cfg(loss_mode="sft", temperature=2.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -------------------------------------------------------------- schedule


def test_lr_warmup_is_linear_to_peak():
    cfg = _cfg(peak_lr=4e-3, warmup_frac=0.1)
    total = 100
    assert lr_at(cfg, 0, total) == 0.0
    assert lr_at(cfg, 5, total) == pytest.approx(2e-3)
    assert lr_at(cfg, 10, total) == pytest.approx(4e-3)  # warmup end hits peak


def test_lr_cosine_pinned_points():
    cfg = _cfg(peak_lr=1e-3, warmup_frac=0.1)
    total = 100
    assert lr_at(cfg, 55, total) == pytest.approx(5e-4)  # halfway through decay
    assert lr_at(cfg, 100, total) == pytest.approx(0.0, abs=1e-18)


def test_lr_constant_after_warmup():
    cfg = _cfg(peak_lr=1e-3, warmup_frac=0.1, schedule="constant")
    for step in (10, 40, 100):
        assert lr_at(cfg, step, 100) == 1e-3


def test_lr_zero_warmup_starts_at_peak():
    cfg = _cfg(peak_lr=1e-3, warmup_frac=0.0)
    assert lr_at(cfg, 0, 10) == pytest.approx(1e-3)


def test_lr_rejects_out_of_range_step():
    with pytest.raises(ConfigError):
        lr_at(_cfg(), 11, 10)
    with pytest.raises(ConfigError):
        lr_at(_cfg(), -1, 10)


# -------------------------------------------------------------- clipping


def test_clip_rescales_to_max_norm():
    a = T.Tensor(np.zeros(2, np.float32))
    b = T.Tensor(np.zeros(1, np.float32))
    a.grad = np.array([3.0, 0.0], np.float32)
    b.grad = np.array([4.0], np.float32)
    scale = clip_gradients([a, b], max_norm=1.0)
    assert scale == pytest.approx(0.2)
    total = math.sqrt(float(np.vdot(a.grad, a.grad)) + float(np.vdot(b.grad, b.grad)))
    assert total == pytest.approx(1.0)


def test_clip_leaves_small_gradients_alone():
    a = T.Tensor(np.zeros(2, np.float32))
    a.grad = np.array([0.3, 0.4], np.float32)
    before = a.grad.copy()
    assert clip_gradients([a], max_norm=1.0) == 1.0
    assert (a.grad == before).all()


def test_clip_rejects_bad_norm():
    with pytest.raises(ConfigError):
        clip_gradients([], max_norm=0.0)


# ------------------------------------------------------------- optimizer


def test_adamw_first_step_matches_hand_formula():
    p = T.Tensor(np.zeros(3, np.float32))
    p.grad = np.array([2.0, -1.0, 0.5], np.float32)
    cfg = _cfg(weight_decay=0.0)
    opt = AdamW([("p", p)], cfg)
    opt.step(lr=1e-2)
    # bias-corrected m = g, v = g^2, so the update is g / (|g| + eps)
    expect = -1e-2 * p.grad / (np.abs(p.grad) + cfg.adam_eps)
    assert np.allclose(p.data, expect, rtol=1e-6)


def test_adamw_decay_applies_to_matrices_only():
    w = T.Tensor(np.full((2, 2), 2.0, np.float32))
    g = T.Tensor(np.full(2, 2.0, np.float32))
    w.grad = np.zeros((2, 2), np.float32)
    g.grad = np.zeros(2, np.float32)
    cfg = _cfg(weight_decay=0.1)
    AdamW([("w", w), ("g", g)], cfg).step(lr=1e-2)
    assert np.allclose(w.data, 2.0 - 1e-2 * 0.1 * 2.0)
    assert (g.data == 2.0).all()  # gains and biases are not decayed


# -------------------------------------------------- accumulation = 1 pass


def _packed_rows(seed, n=80, families=None, seq_len=64):
    samples = D.generate_corpus(families or list(D.FAMILIES), n, seed=seed, noise_rate=0.0)
    batch = D.pack(samples, seq_len, seed=seed)
    return batch.select(np.arange(8))


def _grads_for(mode, micro, tmp_path, seed=3):
    rows = _packed_rows(seed)
    student = init_model(ModelConfig.from_dict(TINY), seed=seed)
    student.set_trainable(True)

    teacher = expert = reference = None
    layer_map = None
    cfg = TrainConfig(loss_mode=mode, student_config=TINY, micro_batch=micro, global_batch=8,
                      temperature=2.0, lambda_pred=0.7, lambda_attn=0.3)
    if mode in ("kd_pred", "kd_attn", "kd_full"):
        tm = init_model(ModelConfig.from_dict(dict(TINY, n_layers=4)), seed=seed + 1)
        tm.set_trainable(False)
        layer_map = build_layer_map(2, 4, 2, 2)
        teacher = FrozenModel(tm, layer_map)
        cfg.teacher_ckpt = "unused"
    elif mode == "dae":
        em = init_model(ModelConfig.from_dict(TINY), seed=seed + 2)
        rm = init_model(ModelConfig.from_dict(TINY), seed=seed + 3)
        em.set_trainable(False)
        rm.set_trainable(False)
        expert, reference = FrozenModel(em), FrozenModel(rm)

    student.zero_grads()
    acc = _run_step(student, rows, cfg, teacher, expert, reference, layer_map)
    grads = {name: p.grad.copy() for name, p in student.parameters()}
    return grads, acc.sums


@pytest.mark.parametrize("mode", ["sft", "kd_full", "dae"])
def test_micro_batching_matches_single_pass(mode, tmp_path):
    """Gradient accumulation over micro-batches equals the one-shot gradient."""
    whole, sums_w = _grads_for(mode, micro=8, tmp_path=tmp_path)
    split, sums_s = _grads_for(mode, micro=2, tmp_path=tmp_path)
    for name in whole:
        a, b = whole[name], split[name]
        assert np.allclose(a, b, rtol=1e-4, atol=1e-9), name
    for key in sums_w:
        assert sums_w[key] == pytest.approx(sums_s[key], rel=1e-5, abs=1e-9)


def test_frozen_roles_stay_bitwise_identical():
    rows = _packed_rows(17)
    student = init_model(ModelConfig.from_dict(TINY), seed=17)
    student.set_trainable(True)
    tm = init_model(ModelConfig.from_dict(dict(TINY, n_layers=4)), seed=18)
    em = init_model(ModelConfig.from_dict(TINY), seed=19)
    rm = init_model(ModelConfig.from_dict(TINY), seed=20)
    for m in (tm, em, rm):
        m.set_trainable(False)
    sums = {m: m.checksum() for m in (tm, em, rm)}
    lmap = build_layer_map(2, 4, 2, 2)
    cfg = TrainConfig(loss_mode="kd_full", student_config=TINY, micro_batch=4,
                      global_batch=8, teacher_ckpt="unused")
    student.zero_grads()
    _run_step(student, rows, cfg, FrozenModel(tm, lmap), None, None, lmap)
    dae = TrainConfig(loss_mode="dae", student_config=TINY, micro_batch=4,
                      global_batch=8, expert_ckpt="unused", reference_ckpt="unused")
    student.zero_grads()
    _run_step(student, rows, dae, None, FrozenModel(em), FrozenModel(rm), None)
    for m, before in sums.items():
        assert m.checksum() == before


@pytest.mark.parametrize("mode", ["sft", "kd_pred", "kd_attn", "kd_full", "dae"])
def test_loss_decreases_on_clean_data(mode, tmp_path):
    """Trailing-mean training loss ends below its starting level, every mode."""
    families = list(D.FAMILIES) if mode == "dae" else None
    corpus = _corpus(tmp_path, n=160, families=families)
    kw = dict(loss_mode=mode, max_steps=40, peak_lr=3e-3, micro_batch=8, global_batch=8)
    if mode.startswith("kd"):
        teacher = init_model(ModelConfig.from_dict(dict(TINY, n_layers=4)), seed=5)
        t_path = tmp_path / "t.ckpt"
        save_checkpoint(teacher, t_path)
        kw["teacher_ckpt"] = str(t_path)
    elif mode == "dae":
        for name, seed in (("e", 6), ("r", 7)):
            save_checkpoint(init_model(ModelConfig.from_dict(TINY), seed=seed), tmp_path / f"{name}.ckpt")
        kw["expert_ckpt"] = str(tmp_path / "e.ckpt")
        kw["reference_ckpt"] = str(tmp_path / "r.ckpt")
    train(_cfg(**kw), corpus, tmp_path / f"run_{mode}")
    vals = [json.loads(l)["l_total"] for l in (tmp_path / f"run_{mode}" / "metrics.jsonl").read_text().splitlines()
            if "l_total" in json.loads(l)]
    assert np.mean(vals[-5:]) < np.mean(vals[:5])


# ------------------------------------------------------------- train()


def test_train_sft_writes_artifacts_and_steps(tmp_path):
    corpus = _corpus(tmp_path)
    res = train(_cfg(max_steps=3), corpus, tmp_path / "run")
    assert res["steps"] == 3
    lines = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    step_recs = [l for l in lines if "l_ce" in l]
    assert [l["step"] for l in step_recs] == [1, 2, 3]
    assert all(math.isfinite(l["l_total"]) and l["l_total"] > 0 for l in step_recs)
    assert (tmp_path / "run" / "final.ckpt").exists()
    assert (tmp_path / "run" / "config.json").exists()
    assert (tmp_path / "run" / "timings.jsonl").exists()


def test_train_is_deterministic(tmp_path):
    corpus = _corpus(tmp_path)
    train(_cfg(max_steps=3), corpus, tmp_path / "a")
    train(_cfg(max_steps=3), corpus, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_train_seed_changes_trajectory(tmp_path):
    corpus = _corpus(tmp_path)
    train(_cfg(max_steps=3, seed=0), corpus, tmp_path / "a")
    train(_cfg(max_steps=3, seed=1), corpus, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_train_epochs_derive_step_count(tmp_path):
    corpus = _corpus(tmp_path, n=80)
    res = train(_cfg(max_steps=None, epochs=2.0, global_batch=4, micro_batch=4),
                corpus, tmp_path / "run")
    packed_rows = D.pack(D.read_corpus(corpus), 64, seed=0).n_rows
    assert res["steps"] == 2 * (packed_rows // 4)


def test_train_rejects_undersized_corpus(tmp_path):
    corpus = _corpus(tmp_path, n=4)
    with pytest.raises(ConfigError, match="fewer than global_batch"):
        train(_cfg(global_batch=64, micro_batch=64), corpus, tmp_path / "run")


def test_train_kd_modes_record_their_losses(tmp_path):
    corpus = _corpus(tmp_path)
    teacher = init_model(ModelConfig.from_dict(dict(TINY, n_layers=4)), seed=9)
    t_path = tmp_path / "teacher.ckpt"
    save_checkpoint(teacher, t_path)
    for mode, keys in [("kd_pred", {"l_pred"}), ("kd_attn", {"l_attn"}), ("kd_full", {"l_pred", "l_attn"})]:
        res = train(_cfg(loss_mode=mode, teacher_ckpt=str(t_path), max_steps=2),
                    corpus, tmp_path / mode)
        rec = json.loads((tmp_path / mode / "metrics.jsonl").read_text().splitlines()[0])
        assert keys <= set(rec) and "l_kd" in rec and "l_ce" not in rec
        assert res["steps"] == 2


def test_train_self_distillation_starts_at_zero(tmp_path):
    """A student distilling from its own initialization sees exactly zero
    KLD on both channels at the first step, and its weights barely move."""
    corpus = _corpus(tmp_path)
    student = init_model(ModelConfig.from_dict(TINY), seed=0)
    ckpt = tmp_path / "init.ckpt"
    save_checkpoint(student, ckpt)
    train(_cfg(loss_mode="kd_full", student_config=None, init_ckpt=str(ckpt),
               teacher_ckpt=str(ckpt), max_steps=1), corpus, tmp_path / "run")
    rec = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["l_pred"] == 0.0
    assert rec["l_attn"] == 0.0
    assert rec["l_total"] == 0.0
    after = load_checkpoint(tmp_path / "run" / "final.ckpt")
    drift = max(np.abs(p.data - q.data).max()
                for (_, p), (_, q) in zip(student.parameters(), after.parameters()))
    assert drift < 1e-4


def test_train_dae_zero_point(tmp_path):
    """Student == expert == reference makes the alignment loss exactly zero."""
    corpus = _corpus(tmp_path, families=list(D.FAMILIES))
    student = init_model(ModelConfig.from_dict(TINY), seed=0)
    ckpt = tmp_path / "init.ckpt"
    save_checkpoint(student, ckpt)
    train(_cfg(loss_mode="dae", student_config=None, init_ckpt=str(ckpt),
               expert_ckpt=str(ckpt), reference_ckpt=str(ckpt), max_steps=1),
          corpus, tmp_path / "run")
    rec = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["l_dae"] == 0.0
    assert rec["l_d"] == 0.0
    assert rec["l_nd"] == 0.0


def test_train_teacher_cache_is_transparent(tmp_path):
    """A warm cross-run teacher cache yields byte-identical metrics."""
    corpus = _corpus(tmp_path)
    teacher = init_model(ModelConfig.from_dict(dict(TINY, n_layers=4)), seed=9)
    t_path = tmp_path / "teacher.ckpt"
    save_checkpoint(teacher, t_path)
    cache = {}
    cfg = dict(loss_mode="kd_full", teacher_ckpt=str(t_path), max_steps=2)
    train(_cfg(**cfg), corpus, tmp_path / "cold", teacher_cache=cache)
    assert cache  # first run populated it
    train(_cfg(**cfg), corpus, tmp_path / "warm", teacher_cache=cache)
    assert (tmp_path / "cold" / "metrics.jsonl").read_bytes() == (tmp_path / "warm" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "cold" / "final.ckpt").read_bytes() == (tmp_path / "warm" / "final.ckpt").read_bytes()


def test_train_rejects_tokenizer_mismatch(tmp_path):
    corpus = _corpus(tmp_path)
    alien = init_model(ModelConfig.from_dict(dict(TINY, vocab_size=50)), seed=1)
    t_path = tmp_path / "alien.ckpt"
    save_checkpoint(alien, t_path)
    with pytest.raises(TokenizerMismatchError):
        train(_cfg(loss_mode="kd_pred", teacher_ckpt=str(t_path)), corpus, tmp_path / "run")


def test_train_aborts_on_non_finite_loss(tmp_path):
    corpus = _corpus(tmp_path)
    student = init_model(ModelConfig.from_dict(TINY), seed=0)
    dict(student.parameters())["embed"].data[0, 0] = np.nan
    ckpt = tmp_path / "poisoned.ckpt"
    save_checkpoint(student, ckpt)
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train(_cfg(student_config=None, init_ckpt=str(ckpt)), corpus, tmp_path / "run")


def test_train_periodic_eval_and_early_stop(tmp_path):
    corpus = _corpus(tmp_path)
    suite = _corpus(tmp_path, n=20, seed=99, name="suite.jsonl")
    res = train(_cfg(max_steps=10, eval_every=2, eval_suite=str(suite),
                     eval_max_new=4, early_stop_score=-1.0),
                corpus, tmp_path / "run")
    assert res["steps"] == 2  # first periodic eval already clears the bar
    lines = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    evals = [l for l in lines if "eval_general" in l]
    assert evals and evals[0]["step"] == 2
    assert (tmp_path / "run" / "best.ckpt").exists()
    assert res["best_step"] == 2


def test_train_final_eval_sets_best(tmp_path):
    corpus = _corpus(tmp_path)
    suite = _corpus(tmp_path, n=20, seed=99, name="suite.jsonl")
    res = train(_cfg(max_steps=3, eval_every=0, eval_suite=str(suite), eval_max_new=4),
                corpus, tmp_path / "run")
    assert res["best_step"] == 3  # only the end-of-training eval ran
    assert res["best_score"] is not None
