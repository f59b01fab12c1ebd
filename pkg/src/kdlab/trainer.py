"""Training loop for every loss mode: supervised fine-tuning, the three
distillation variants, and domain alignment.

One optimizer step accumulates gradients over global_batch packed rows in
micro_batch chunks; each loss term is weighted by its micro-batch's share of
the step's active positions, so the accumulated gradient equals the gradient
of the loss computed over the whole step in one pass. Teacher, expert, and
reference models run under no_grad and are never mutated.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .data import PackedBatch, pack, read_corpus
from .errors import ConfigError, TokenizerMismatchError, TrainingDivergedError
from .losses import LayerHeadMap, attn_kld, build_layer_map, ce_loss, pred_kld
from .model import AttentionTrace, ModelConfig, TransformerModel, init_model, load_checkpoint, save_checkpoint

LOSS_MODES = ("sft", "kd_pred", "kd_attn", "kd_full", "dae")


@dataclass
class TrainConfig:
    loss_mode: str = "sft"
    peak_lr: float = 1e-3
    schedule: str = "cosine_to_zero"
    warmup_frac: float = 0.1
    epochs: float = 1.0
    max_steps: int | None = None  # overrides the epoch-derived step count
    micro_batch: int = 16
    global_batch: int = 16
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    temperature: float = 1.0
    lambda_pred: float = 1.0
    lambda_attn: float = 1.0
    seed: int = 0
    # student source: fresh init from student_config/seed, or a checkpoint
    student_config: dict | None = None
    init_ckpt: str | None = None
    teacher_ckpt: str | None = None
    expert_ckpt: str | None = None
    reference_ckpt: str | None = None
    # positions used by each objective: "response" tokens only (instruction
    # tuning practice) or "all" real tokens (plain language modeling)
    ce_mask: str = "response"
    kd_mask: str = "response"
    packing: str = "greedy"  # "single" keeps one sample per row
    eval_suite: str | None = None
    eval_every: int = 200
    eval_max_new: int = 16
    eval_items: int = 0  # 0 = whole suite
    early_stop_score: float | None = None  # stop once a periodic eval reaches this
    cache_teacher: bool = True

    def validate(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.schedule not in ("cosine_to_zero", "constant"):
            raise ConfigError(f"schedule must be cosine_to_zero or constant, got {self.schedule!r}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.micro_batch <= 0 or self.global_batch <= 0:
            raise ConfigError("micro_batch and global_batch must be positive")
        if self.global_batch % self.micro_batch != 0:
            raise ConfigError(
                f"global_batch ({self.global_batch}) must be a multiple of micro_batch ({self.micro_batch})"
            )
        for f in ("ce_mask", "kd_mask"):
            if getattr(self, f) not in ("response", "all"):
                raise ConfigError(f"{f} must be response or all, got {getattr(self, f)!r}")
        if self.packing not in ("greedy", "single"):
            raise ConfigError(f"packing must be greedy or single, got {self.packing!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.loss_mode in ("kd_pred", "kd_attn", "kd_full") and not self.teacher_ckpt:
            raise ConfigError(f"loss_mode {self.loss_mode} requires teacher_ckpt")
        if self.loss_mode == "dae" and not (self.expert_ckpt and self.reference_ckpt):
            raise ConfigError("loss_mode dae requires expert_ckpt and reference_ckpt")
        if (self.student_config is None) == (self.init_ckpt is None):
            raise ConfigError("exactly one of student_config or init_ckpt must be set")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d).validate()


def lr_at(config: TrainConfig, step, total_steps) -> float:
    """Learning rate at an optimizer step in [0, total_steps]."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = config.warmup_frac * total_steps
    if step < warm:
        return config.peak_lr * step / warm
    if config.schedule == "constant":
        return config.peak_lr
    span = total_steps - warm
    progress = (step - warm) / span if span > 0 else 1.0
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params, max_norm) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad))
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            np.multiply(p.grad, np.asarray(scale, dtype=p.grad.dtype), out=p.grad)
    return scale


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices, not gains."""

    def __init__(self, params, config: TrainConfig):
        self.params = list(params)  # (name, Tensor)
        self.cfg = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + eps)
            if self.cfg.weight_decay and p.data.ndim >= 2:
                update = update + self.cfg.weight_decay * p.data
            p.data -= np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype, copy=False)


class FrozenModel:
    """Read-only wrapper whose per-row outputs can be cached.

    Cache entries hold the float32 logits row and (optionally) the mapped,
    head-reduced attention trace rows; cached values are bitwise identical
    to a fresh forward, so caching never changes results.
    """

    def __init__(self, model: TransformerModel, layer_map: LayerHeadMap | None = None, cache: dict | None = None):
        self.model = model
        self.layer_map = layer_map
        self.cache = cache if cache is not None else {}
        self.tag = model.checksum()[:16]

    def student_view_map(self, n_student_layers) -> LayerHeadMap:
        """Map to use against the pre-reduced traces this wrapper returns."""
        policy = self.layer_map.head_policy if self.layer_map else "identity"
        return LayerHeadMap(list(range(n_student_layers)), policy)

    def forward(self, tokens, need_traces=False):
        keys = [(self.tag, need_traces and self.layer_map is not None, row.tobytes()) for row in tokens]
        missing = [i for i, k in enumerate(keys) if k not in self.cache]
        if missing:
            with T.no_grad():
                out = self.model.forward(tokens[missing], need_traces=need_traces)
            reduced = None
            if need_traces:
                if self.layer_map is None:
                    raise ConfigError("FrozenModel needs a layer_map to serve attention traces")
                reduced = []
                for ti in self.layer_map.layer_map:
                    layer = out.traces.layers[ti].data
                    if self.layer_map.head_policy == "average_heads":
                        h = layer.shape[1]
                        layer = np.sum(layer, axis=1, keepdims=True) * np.asarray(1.0 / h, dtype=layer.dtype)
                    reduced.append(layer)
            for j, i in enumerate(missing):
                entry = {"logits": out.logits.data[j]}
                if reduced is not None:
                    entry["traces"] = [layer[j] for layer in reduced]
                self.cache[keys[i]] = entry

        entries = [self.cache[k] for k in keys]
        logits = T.Tensor(np.stack([e["logits"] for e in entries]))
        traces = None
        if need_traces:
            n_layers = len(entries[0]["traces"])
            layers = [T.Tensor(np.stack([e["traces"][li] for e in entries])) for li in range(n_layers)]
            traces = AttentionTrace(layers, layers[0].shape[1])
        return logits, traces


def _shift_left(mask):
    out = np.zeros_like(mask)
    out[:, :-1] = mask[:, 1:]
    return out


def _load_role_model(path, student_cfg: ModelConfig, role):
    model = load_checkpoint(path)
    if model.config.tokenizer_id != student_cfg.tokenizer_id:
        raise TokenizerMismatchError(
            f"{role} tokenizer {model.config.tokenizer_id!r} differs from student "
            f"{student_cfg.tokenizer_id!r}; distillation requires one shared tokenizer"
        )
    if model.config.vocab_size != student_cfg.vocab_size:
        raise TokenizerMismatchError(
            f"{role} vocabulary size {model.config.vocab_size} differs from student {student_cfg.vocab_size}"
        )
    model.set_trainable(False)
    return model


@dataclass
class _StepAccumulator:
    """Weighted sums of per-micro-batch loss terms for one optimizer step."""

    sums: dict = field(default_factory=dict)

    def add(self, name, value, weight):
        self.sums[name] = self.sums.get(name, 0.0) + weight * float(value)

    def get(self, name):
        return self.sums.get(name)


def train(config: TrainConfig, corpus_path, out_dir, teacher_cache: dict | None = None) -> dict:
    """Run one training job; writes checkpoints, metrics, and config echo."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)

    if config.init_ckpt:
        student = load_checkpoint(config.init_ckpt)
    else:
        mc = ModelConfig.from_dict(config.student_config)
        student = init_model(mc, seed=config.seed)
    student.set_trainable(True)
    s_cfg = student.config

    teacher = expert = reference = None
    layer_map = None
    if config.loss_mode in ("kd_pred", "kd_attn", "kd_full"):
        tm = _load_role_model(config.teacher_ckpt, s_cfg, "teacher")
        layer_map = build_layer_map(s_cfg.n_layers, tm.config.n_layers, s_cfg.n_heads, tm.config.n_heads)
        teacher = FrozenModel(tm, layer_map, teacher_cache if config.cache_teacher else {})
    elif config.loss_mode == "dae":
        expert = FrozenModel(_load_role_model(config.expert_ckpt, s_cfg, "expert"))
        reference = FrozenModel(_load_role_model(config.reference_ckpt, s_cfg, "reference"))

    samples = read_corpus(corpus_path)
    packed = pack(samples, s_cfg.max_seq_len, seed=config.seed, one_per_row=config.packing == "single")
    if packed.n_rows < config.global_batch:
        raise ConfigError(
            f"corpus packs to {packed.n_rows} rows, fewer than global_batch {config.global_batch}"
        )
    steps_per_epoch = packed.n_rows // config.global_batch
    if config.max_steps:
        total_steps = config.max_steps
    else:
        total_steps = max(1, round(config.epochs * steps_per_epoch))

    rng = np.random.default_rng(config.seed)
    opt = AdamW(student.parameters(), config)
    params = [p for _, p in student.parameters()]

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    timings_path = os.path.join(out_dir, "timings.jsonl")
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(
            {
                "train": config.to_dict(),
                "model": s_cfg.to_dict(),
                "corpus": str(corpus_path),
                "packed_rows": packed.n_rows,
                "pad_fraction": round(packed.pad_fraction, 6),
            },
            f,
            indent=2,
        )

    best_score = None
    best_step = None
    mf = open(metrics_path, "w")
    tf = open(timings_path, "w")

    def maybe_eval(step):
        nonlocal best_score, best_step
        if not config.eval_suite:
            return
        from .evaluate import evaluate  # local import to avoid a cycle

        report = evaluate(
            student, config.eval_suite, max_new=config.eval_max_new, items_limit=config.eval_items or None
        )
        score = report["general_score"]
        if score is None:  # domain-only suite (expert training)
            score = report["domain_score"]
        mf.write(
            json.dumps(
                {
                    "step": step,
                    "eval_general": report["general_score"],
                    "eval_domain": report["domain_score"],
                }
            )
            + "\n"
        )
        mf.flush()
        if best_score is None or score > best_score:
            best_score, best_step = score, step
            save_checkpoint(student, os.path.join(out_dir, "best.ckpt"))
        return config.early_stop_score is not None and score >= config.early_stop_score

    step = 0
    stop = False
    try:
        while step < total_steps and not stop:
            order = rng.permutation(packed.n_rows)
            for s0 in range(0, steps_per_epoch * config.global_batch, config.global_batch):
                if step >= total_steps or stop:
                    break
                step += 1
                t_start = time.perf_counter()
                rows = packed.select(order[s0 : s0 + config.global_batch])
                lr = lr_at(config, step, total_steps)
                student.zero_grads()
                acc = _run_step(student, rows, config, teacher, expert, reference, layer_map)

                grad_scale = clip_gradients(params, config.grad_clip_norm)
                sq = sum(float(np.vdot(p.grad, p.grad)) for p in params)
                grad_norm = math.sqrt(sq) / max(grad_scale, 1e-30)
                opt.step(lr)

                record = {"step": step, "epoch": round(step / steps_per_epoch, 4), "lr": lr}
                record.update({k: acc.get(k) for k in sorted(acc.sums)})
                record["grad_norm"] = grad_norm
                record["tokens"] = int(rows.row_mask.sum())
                record["rows"] = int(rows.n_rows)
                if not all(math.isfinite(v) for v in record.values() if isinstance(v, float)):
                    raise TrainingDivergedError(
                        f"non-finite value at step {step}: "
                        + ", ".join(f"{k}={v}" for k, v in record.items() if isinstance(v, float))
                    )
                mf.write(json.dumps(record) + "\n")
                tf.write(json.dumps({"step": step, "wall_ms": round(1e3 * (time.perf_counter() - t_start), 3)}) + "\n")
                if config.eval_every and step % config.eval_every == 0 and step < total_steps:
                    stop = maybe_eval(step)
        if not stop:
            maybe_eval(step)
    finally:
        mf.close()
        tf.close()

    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(student, final_path)
    best_path = os.path.join(out_dir, "best.ckpt")
    if not os.path.exists(best_path):
        best_path = final_path
    return {
        "out_dir": str(out_dir),
        "final_ckpt": final_path,
        "best_ckpt": best_path,
        "steps": step,
        "best_score": best_score,
        "best_step": best_step,
    }


def _run_step(student, rows: PackedBatch, config: TrainConfig, teacher, expert, reference, layer_map):
    """Accumulate gradients for one optimizer step; returns the loss sums."""
    mode = config.loss_mode
    n_micro = config.global_batch // config.micro_batch
    chunks = [slice(i * config.micro_batch, (i + 1) * config.micro_batch) for i in range(n_micro)]

    targets_all = np.roll(rows.tokens, -1, axis=1)
    ce_mask_all = _shift_left(rows.row_mask if config.ce_mask == "all" else rows.loss_mask)
    kd_mask_all = _shift_left(rows.row_mask if config.kd_mask == "all" else rows.loss_mask)
    row_mask_all = rows.row_mask

    ce_total = float(ce_mask_all.sum())
    kd_total = float(kd_mask_all.sum())
    attn_total = float(row_mask_all.sum())
    flags_all = rows.domain_flags
    d_total = float((kd_mask_all * flags_all[:, None]).sum())
    nd_total = float((kd_mask_all * (~flags_all)[:, None]).sum())

    acc = _StepAccumulator()
    if mode == "dae":
        # a side with no rows in this step still reports its exact-zero term
        for key in ("l_d", "l_nd", "l_dae", "l_total"):
            acc.add(key, 0.0, 0.0)
    need_traces = mode in ("kd_pred", "kd_attn", "kd_full")
    for sl in chunks:
        tokens = rows.tokens[sl]
        graph = T.Graph()
        with graph:
            out = student.forward(tokens, need_traces=need_traces)

            to_backward = []
            if mode == "sft":
                w = float(ce_mask_all[sl].sum()) / ce_total if ce_total else 0.0
                if w > 0:
                    l_ce = ce_loss(out.logits, targets_all[sl], ce_mask_all[sl])
                    to_backward.append((l_ce, w))
                    acc.add("l_ce", l_ce.item(), w)
                    acc.add("l_total", l_ce.item(), w)
            elif mode in ("kd_pred", "kd_attn", "kd_full"):
                lam_p = {"kd_pred": config.lambda_pred, "kd_attn": 0.0, "kd_full": config.lambda_pred}[mode]
                lam_a = {"kd_pred": 0.0, "kd_attn": config.lambda_attn, "kd_full": config.lambda_attn}[mode]
                t_logits, t_traces = teacher.forward(tokens, need_traces=True)
                view_map = teacher.student_view_map(student.config.n_layers)

                w_p = float(kd_mask_all[sl].sum()) / kd_total if kd_total else 0.0
                w_a = float(row_mask_all[sl].sum()) / attn_total if attn_total else 0.0

                if lam_p != 0.0 and w_p > 0:
                    l_pred = pred_kld(out.logits, t_logits, kd_mask_all[sl], config.temperature)
                    to_backward.append((l_pred, lam_p * w_p))
                else:
                    with T.no_grad():
                        l_pred = pred_kld(out.logits.detach(), t_logits, kd_mask_all[sl], config.temperature)
                if lam_a != 0.0 and w_a > 0:
                    l_attn = attn_kld(out.traces, t_traces, view_map, row_mask_all[sl])
                    to_backward.append((l_attn, lam_a * w_a))
                else:
                    with T.no_grad():
                        l_attn = attn_kld(_detached_traces(out.traces), t_traces, view_map, row_mask_all[sl])

                acc.add("l_pred", l_pred.item(), w_p)
                acc.add("l_attn", l_attn.item(), w_a)
                acc.add("l_kd", lam_p * l_pred.item(), w_p)
                acc.add("l_kd", lam_a * l_attn.item(), w_a)
                acc.add("l_total", lam_p * l_pred.item(), w_p)
                acc.add("l_total", lam_a * l_attn.item(), w_a)
            else:  # dae
                flags = flags_all[sl]
                kd_mask = kd_mask_all[sl]
                d_mask = kd_mask * flags[:, None]
                nd_mask = kd_mask * (~flags)[:, None]
                if d_mask.any():
                    e_logits, _ = expert.forward(tokens)
                    l_d = pred_kld(out.logits, e_logits, d_mask, config.temperature)
                    w = float(d_mask.sum()) / d_total
                    to_backward.append((l_d, w))
                    acc.add("l_d", l_d.item(), w)
                    acc.add("l_dae", l_d.item(), w)
                    acc.add("l_total", l_d.item(), w)
                if nd_mask.any():
                    r_logits, _ = reference.forward(tokens)
                    l_nd = pred_kld(out.logits, r_logits, nd_mask, config.temperature)
                    w = float(nd_mask.sum()) / nd_total
                    to_backward.append((l_nd, w))
                    acc.add("l_nd", l_nd.item(), w)
                    acc.add("l_dae", l_nd.item(), w)
                    acc.add("l_total", l_nd.item(), w)

        if to_backward:
            total = None
            for term, weight in to_backward:
                with graph:
                    scaled = T.scale(term, weight)
                    total = scaled if total is None else T.add(total, scaled)
            graph.backward(total)

    if "l_total" not in acc.sums:
        acc.add("l_total", 0.0, 1.0)
    return acc


def _detached_traces(traces: AttentionTrace) -> AttentionTrace:
    return AttentionTrace([t.detach() for t in traces.layers], traces.n_heads)


def corpus_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
