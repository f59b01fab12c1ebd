"""Finite-difference validation of every training loss through a small model.

Each loss is differentiated end to end through a 2-layer, 2-head toy
transformer in float64 and compared against central differences over every
parameter element. Teacher-side inputs are precomputed once under no_grad,
exactly as the trainer treats them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import attn_kld, build_layer_map, ce_loss, dae_loss, kd_loss, pred_kld
from .model import AttentionTrace, ForwardOutput, ModelConfig, init_model

TOY_CONFIG = dict(
    n_layers=2,
    n_heads=2,
    d_model=8,
    d_ff=16,
    vocab_size=13,
    max_seq_len=8,
)

LOSS_NAMES = ("ce_loss", "pred_kld", "attn_kld", "kd_loss", "dae_loss")


def _toy_model(seed: int, param_scale: float = 10.0):
    """Small float64 model with inflated weights.

    At the usual 0.02 init every softmax is near uniform, so losses and their
    gradients sit at the central-difference rounding floor and relative error
    is meaningless; scaling the non-norm weights moves the check onto a
    well-conditioned point.
    """
    model = init_model(ModelConfig(**TOY_CONFIG), seed=seed).astype(np.float64)
    for name, p in model.params.items():
        if "norm" not in name:
            p.data *= param_scale
    return model


def _frozen_forward(model, tokens):
    with T.no_grad():
        out = model.forward(tokens, need_traces=True)
    traces = AttentionTrace(
        [T.Tensor(a.data.copy()) for a in out.traces.layers], out.traces.n_heads
    )
    return ForwardOutput(T.Tensor(out.logits.data.copy()), traces)


def run_gradcheck(eps: float = 1e-5, seed: int = 0):
    """Return {loss name: max relative error} over every model parameter."""
    rng = np.random.default_rng(seed)
    student = _toy_model(seed + 1)
    teacher = _toy_model(seed + 2)
    expert = _toy_model(seed + 3)
    reference = _toy_model(seed + 4)

    v = TOY_CONFIG["vocab_size"]
    b, t = 2, TOY_CONFIG["max_seq_len"]
    tokens = rng.integers(4, v, size=(b, t))
    targets = np.roll(tokens, -1, axis=1)
    targets[:, -1] = 2
    loss_mask = (rng.random((b, t)) < 0.7).astype(np.float64)
    loss_mask[:, 1] = 1.0  # keep every row represented
    row_mask = np.ones((b, t))
    domain_flags = np.array([True, False])

    teacher_out = _frozen_forward(teacher, tokens)
    expert_out = _frozen_forward(expert, tokens)
    reference_out = _frozen_forward(reference, tokens)
    lmap = build_layer_map(
        TOY_CONFIG["n_layers"],
        TOY_CONFIG["n_layers"],
        TOY_CONFIG["n_heads"],
        TOY_CONFIG["n_heads"],
    )

    def f_ce(*_):
        return ce_loss(student.forward(tokens).logits, targets, loss_mask)

    def f_pred(*_):
        return pred_kld(student.forward(tokens).logits, teacher_out.logits, loss_mask, 2.0)

    def f_attn(*_):
        out = student.forward(tokens, need_traces=True)
        return attn_kld(out.traces, teacher_out.traces, lmap, row_mask)

    def f_kd(*_):
        out = student.forward(tokens, need_traces=True)
        return kd_loss(out, teacher_out, loss_mask, row_mask, lmap, 0.7, 0.3, 2.0).l_kd

    def f_dae(*_):
        logits = student.forward(tokens).logits
        return dae_loss(logits, expert_out.logits, reference_out.logits, domain_flags, loss_mask).l_dae

    funcs = {
        "ce_loss": f_ce,
        "pred_kld": f_pred,
        "attn_kld": f_attn,
        "kd_loss": f_kd,
        "dae_loss": f_dae,
    }
    params = [student.params[name] for name in sorted(student.params)]
    return {name: T.grad_check(fn, params, eps=eps) for name, fn in funcs.items()}
