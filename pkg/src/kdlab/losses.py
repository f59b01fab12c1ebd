"""Training objectives: token cross-entropy, prediction-layer KLD,
attention-map KLD with layer/head mapping, their weighted combination, and
the two-sided domain-alignment loss.

All losses are pure functions returning scalar Tensors; the teacher /
expert / reference side is always treated as constant (run those forwards
under no_grad). Distributions are compared through one shared code path so
that bitwise-identical inputs give an exactly-zero loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    EmptyLossError,
    MappingError,
    ShapeError,
    TokenizerMismatchError,
)


@dataclass
class LossBundle:
    """Scalar loss terms populated per mode, plus bookkeeping counts."""

    l_ce: T.Tensor | None = None
    l_pred: T.Tensor | None = None
    l_attn: T.Tensor | None = None
    l_kd: T.Tensor | None = None
    l_d: T.Tensor | None = None
    l_nd: T.Tensor | None = None
    l_dae: T.Tensor | None = None
    tokens_counted: int = 0
    rows_counted: int = 0

    def floats(self):
        out = {}
        for name in ("l_ce", "l_pred", "l_attn", "l_kd", "l_d", "l_nd", "l_dae"):
            t = getattr(self, name)
            if t is not None:
                out[name] = float(t.item())
        return out


@dataclass
class LayerHeadMap:
    """Student layer i reads teacher layer layer_map[i]; head_policy is
    "identity" (equal head counts) or "average_heads" (average attention
    rows across heads on both sides before comparing)."""

    layer_map: list[int]
    head_policy: str

    def __post_init__(self):
        if self.head_policy not in ("identity", "average_heads"):
            raise ConfigError(f"unknown head_policy {self.head_policy!r}")
        if any(b < a for a, b in zip(self.layer_map, self.layer_map[1:])):
            raise MappingError(f"layer_map must be monotone non-decreasing, got {self.layer_map}")


def build_layer_map(student_layers, teacher_layers, student_heads, teacher_heads) -> LayerHeadMap:
    if student_layers > teacher_layers:
        raise MappingError(
            f"student has more layers ({student_layers}) than teacher ({teacher_layers}); "
            "deeper-than-teacher mapping is unsupported"
        )
    layer_map = [((i + 1) * teacher_layers) // student_layers - 1 for i in range(student_layers)]
    policy = "identity" if student_heads == teacher_heads else "average_heads"
    return LayerHeadMap(layer_map=layer_map, head_policy=policy)


def _as_mask(mask, shape, name):
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise ShapeError(f"{name} shape {mask.shape} does not match expected {shape}")
    return mask


def _masked_mean(per_pos: T.Tensor, mask, name):
    """Mean of per_pos over mask==1 entries; mask is plain data."""
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError(f"{name}: loss mask selects no positions")
    total = T.sum_(T.mul_const(per_pos, mask.astype(per_pos.dtype)))
    return T.scale(total, 1.0 / count), count


def ce_loss(logits: T.Tensor, targets, loss_mask) -> T.Tensor:
    """Mean negative log-likelihood of targets over mask-active positions."""
    b, t, _ = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = _as_mask(loss_mask, (b, t), "loss_mask")
    if targets.shape != (b, t):
        raise ShapeError(f"targets shape {targets.shape} does not match logits batch {(b, t)}")
    probs = T.softmax(logits)
    picked = T.reshape(T.gather_last(probs, targets), (b, t))
    nll = T.scale(T.log(picked), -1.0)
    loss, _ = _masked_mean(nll, mask, "ce_loss")
    return loss


def _kld_positions(p: T.Tensor, q: T.Tensor) -> T.Tensor:
    """Sum over the last axis of p * (log p - log q), with floored logs.

    Entries where p is exactly zero contribute exactly zero, so summing a
    full causal row equals summing its allowed prefix.
    """
    return T.sum_(T.mul(p, T.sub(T.log(p), T.log(q))), axis=-1)


def pred_kld(student_logits: T.Tensor, teacher_logits: T.Tensor, loss_mask, temperature: float = 1.0) -> T.Tensor:
    """Masked mean KLD softmax(teacher/tau) || softmax(student/tau)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        if student_logits.shape[:-1] == teacher_logits.shape[:-1]:
            raise TokenizerMismatchError(
                f"vocabulary size mismatch: student {student_logits.shape[-1]} "
                f"vs teacher {teacher_logits.shape[-1]}; models must share one tokenizer"
            )
        raise ShapeError(
            f"logit shapes disagree: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    b, t, _ = student_logits.shape
    mask = _as_mask(loss_mask, (b, t), "loss_mask")
    inv_tau = 1.0 / temperature
    p = T.softmax(T.scale(teacher_logits.detach(), inv_tau))
    q = T.softmax(T.scale(student_logits, inv_tau))
    loss, _ = _masked_mean(_kld_positions(p, q), mask, "pred_kld")
    return loss


def attn_kld(student_traces, teacher_traces, map: LayerHeadMap, row_mask) -> T.Tensor:
    """Mean KLD between mapped teacher and student attention rows.

    Averages over every (batch, layer, head, active row) contribution; rows
    belonging to padding are excluded via row_mask.
    """
    s_layers = student_traces.layers
    t_layers = teacher_traces.layers
    if len(map.layer_map) != len(s_layers):
        raise MappingError(
            f"layer_map covers {len(map.layer_map)} student layers but traces have {len(s_layers)}"
        )
    if map.head_policy == "identity" and student_traces.n_heads != teacher_traces.n_heads:
        raise MappingError(
            f"identity head policy needs equal head counts, got "
            f"{student_traces.n_heads} vs {teacher_traces.n_heads}"
        )

    b, _, t, _ = s_layers[0].shape
    mask = _as_mask(row_mask, (b, t), "row_mask")
    active_rows = int(mask.sum())
    if active_rows == 0:
        raise EmptyLossError("attn_kld: row mask selects no rows")

    total = None
    heads_per_layer = None
    for si, ti in enumerate(map.layer_map):
        if ti >= len(t_layers):
            raise MappingError(f"student layer {si} maps to missing teacher layer {ti}")
        s = s_layers[si]
        tt = t_layers[ti].detach()
        if s.shape[0] != tt.shape[0] or s.shape[2:] != tt.shape[2:]:
            raise ShapeError(f"trace shapes disagree: {tuple(s.shape)} vs {tuple(tt.shape)}")
        if map.head_policy == "average_heads":
            s = T.mean_(s, axis=1, keepdims=True)
            tt = T.mean_(tt, axis=1, keepdims=True)
        heads_per_layer = s.shape[1]
        row_kld = _kld_positions(tt, s)  # (B, H', T)
        masked = T.sum_(T.mul_const(row_kld, mask[:, None, :].astype(row_kld.dtype)))
        total = masked if total is None else T.add(total, masked)

    denom = len(s_layers) * heads_per_layer * active_rows
    return T.scale(total, 1.0 / denom)


def kd_loss(
    student_out,
    teacher_out,
    loss_mask,
    row_mask,
    map: LayerHeadMap,
    lambda_pred: float = 1.0,
    lambda_attn: float = 1.0,
    temperature: float = 1.0,
) -> LossBundle:
    """Combined distillation: l_kd = lambda_pred*l_pred + lambda_attn*l_attn."""
    l_pred = pred_kld(student_out.logits, teacher_out.logits, loss_mask, temperature)
    l_attn = None
    if student_out.traces is not None and teacher_out.traces is not None:
        l_attn = attn_kld(student_out.traces, teacher_out.traces, map, row_mask)
    elif lambda_attn != 0.0:
        raise ShapeError("kd_loss: lambda_attn != 0 requires attention traces from both models")

    if l_attn is None:
        l_kd = T.scale(l_pred, lambda_pred)
    else:
        l_kd = T.add(T.scale(l_pred, lambda_pred), T.scale(l_attn, lambda_attn))
    return LossBundle(
        l_pred=l_pred,
        l_attn=l_attn,
        l_kd=l_kd,
        tokens_counted=int(np.asarray(loss_mask).sum()),
        rows_counted=int(np.asarray(row_mask).sum()),
    )


def dae_loss(
    student_logits: T.Tensor,
    expert_logits: T.Tensor,
    ref_logits: T.Tensor,
    domain_flags,
    loss_mask,
    temperature: float = 1.0,
) -> LossBundle:
    """Two-sided alignment: domain rows follow the expert, the rest follow
    the reference; each side is averaged over its own active token count and
    an empty side contributes exactly zero."""
    b, t, _ = student_logits.shape
    flags = np.asarray(domain_flags, dtype=bool)
    if flags.shape != (b,):
        raise ShapeError(f"domain_flags shape {flags.shape} does not match batch size {b}")
    mask = _as_mask(loss_mask, (b, t), "loss_mask")
    d_mask = mask * flags[:, None]
    nd_mask = mask * (~flags)[:, None]

    zero = T.constant(0.0, dtype=student_logits.dtype)
    l_d = pred_kld(student_logits, expert_logits, d_mask, temperature) if d_mask.any() else zero
    l_nd = pred_kld(student_logits, ref_logits, nd_mask, temperature) if nd_mask.any() else zero
    return LossBundle(
        l_d=l_d,
        l_nd=l_nd,
        l_dae=T.add(l_d, l_nd),
        tokens_counted=int(d_mask.sum() + nd_mask.sum()),
        rows_counted=b,
    )
