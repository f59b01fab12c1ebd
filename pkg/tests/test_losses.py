"""Loss formulas against independent float64 oracles and exactness claims."""

import numpy as np
import pytest

from kdlab import tensor as T
from kdlab.errors import (
    ConfigError,
    EmptyLossError,
    MappingError,
    ShapeError,
    TokenizerMismatchError,
)
from kdlab.losses import (
    LayerHeadMap,
    attn_kld,
    build_layer_map,
    ce_loss,
    dae_loss,
    kd_loss,
    pred_kld,
)
from kdlab.model import AttentionTrace, ForwardOutput


# ------------------------------------------------------- numpy oracles


def _softmax_np(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def _kld_np(p, q, floor=1e-9):
    logp = np.log(np.maximum(p, floor))
    logq = np.log(np.maximum(q, floor))
    return (p * (logp - logq)).sum(-1)


def _ce_oracle(logits, targets, mask):
    p = _softmax_np(np.asarray(logits, np.float64))
    b, t = targets.shape
    picked = p[np.arange(b)[:, None], np.arange(t)[None, :], targets]
    nll = -np.log(np.maximum(picked, 1e-9))
    return (nll * mask).sum() / mask.sum()


def _pred_kld_oracle(s_logits, t_logits, mask, tau=1.0):
    p = _softmax_np(np.asarray(t_logits, np.float64) / tau)
    q = _softmax_np(np.asarray(s_logits, np.float64) / tau)
    return (_kld_np(p, q) * mask).sum() / mask.sum()


def _rand_case(rng, b=2, t=5, v=7):
    s = T.Tensor(rng.standard_normal((b, t, v)).astype(np.float32))
    tt = T.Tensor(rng.standard_normal((b, t, v)).astype(np.float32))
    targets = rng.integers(0, v, size=(b, t))
    mask = (rng.random((b, t)) < 0.6).astype(np.float64)
    mask[:, 0] = 1.0
    return s, tt, targets, mask


def _rand_trace(rng, b, h, t, n_layers):
    layers = []
    for _ in range(n_layers):
        x = rng.random((b, h, t, t)).astype(np.float32) + 0.1
        x = np.tril(x)
        x /= x.sum(-1, keepdims=True)
        layers.append(T.Tensor(x))
    return AttentionTrace(layers, h)


# ------------------------------------------------------------------- CE


def test_ce_uniform_logits_is_log_vocab():
    v = 11
    logits = T.Tensor(np.zeros((1, 3, v), np.float32))
    loss = ce_loss(logits, np.array([[1, 2, 3]]), np.ones((1, 3)))
    assert loss.item() == pytest.approx(np.log(v), rel=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_ce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    s, _, targets, mask = _rand_case(rng)
    assert ce_loss(s, targets, mask).item() == pytest.approx(
        _ce_oracle(s.data, targets, mask), rel=1e-5
    )


def test_ce_ignores_masked_positions():
    rng = np.random.default_rng(99)
    s, _, targets, mask = _rand_case(rng)
    noisy = T.Tensor(s.data.copy())
    noisy.data[mask == 0] += 50.0  # loss must not see these positions
    a = ce_loss(s, targets, mask).item()
    b = ce_loss(noisy, targets, mask).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_ce_empty_mask_raises():
    s = T.Tensor(np.zeros((1, 2, 5), np.float32))
    with pytest.raises(EmptyLossError):
        ce_loss(s, np.zeros((1, 2), np.int64), np.zeros((1, 2)))


# ------------------------------------------------------------- pred KLD


def test_pred_kld_zero_iff_same_inputs():
    rng = np.random.default_rng(0)
    s, t, _, mask = _rand_case(rng)
    same = pred_kld(s, T.Tensor(s.data.copy()), mask)
    assert same.item() == 0.0  # exact: both sides run one shared code path
    diff = pred_kld(s, t, mask)
    assert diff.item() > 0.0


@pytest.mark.parametrize("seed", range(20))
def test_pred_kld_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    s, t, _, mask = _rand_case(rng)
    for tau in (1.0, 2.0, 4.0):
        assert pred_kld(s, t, mask, tau).item() == pytest.approx(
            _pred_kld_oracle(s.data, t.data, mask, tau), rel=1e-4, abs=1e-6
        )


def test_pred_kld_pinned_value():
    # p = softmax([ln4, ln1]) = [.8, .2]; q = softmax([0, 0]) = [.5, .5]
    # KL = .8 ln(1.6) + .2 ln(.4) = 0.19274475
    t = T.Tensor(np.log(np.array([[[4.0, 1.0]]], np.float32)))
    s = T.Tensor(np.zeros((1, 1, 2), np.float32))
    val = pred_kld(s, t, np.ones((1, 1))).item()
    assert val == pytest.approx(0.8 * np.log(1.6) + 0.2 * np.log(0.4), rel=1e-5)
    assert val == pytest.approx(0.19274475, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_pred_kld_nonnegative(seed):
    rng = np.random.default_rng(1000 + seed)
    s, t, _, mask = _rand_case(rng, b=3, t=4, v=9)
    assert pred_kld(s, t, mask).item() >= 0.0


def test_pred_kld_teacher_gets_no_gradient():
    rng = np.random.default_rng(5)
    s, t, _, mask = _rand_case(rng)
    s.requires_grad = True
    t.requires_grad = True
    g = T.Graph()
    with g:
        loss = pred_kld(s, t, mask)
    g.backward(loss)
    assert s.grad is not None and np.abs(s.grad).sum() > 0
    assert t.grad is None or not t.grad.any()


def test_pred_kld_vocab_mismatch_is_tokenizer_error():
    s = T.Tensor(np.zeros((1, 2, 5), np.float32))
    t = T.Tensor(np.zeros((1, 2, 7), np.float32))
    with pytest.raises(TokenizerMismatchError):
        pred_kld(s, t, np.ones((1, 2)))


def test_pred_kld_rejects_bad_temperature():
    s = T.Tensor(np.zeros((1, 1, 4), np.float32))
    with pytest.raises(ConfigError):
        pred_kld(s, s, np.ones((1, 1)), temperature=0.0)


# ------------------------------------------------------------- attn KLD


def test_layer_map_pinned_examples():
    assert build_layer_map(4, 8, 4, 4).layer_map == [1, 3, 5, 7]
    assert build_layer_map(2, 4, 2, 2).layer_map == [1, 3]
    assert build_layer_map(4, 4, 4, 4).layer_map == [0, 1, 2, 3]
    assert build_layer_map(1, 6, 2, 2).layer_map == [5]


def test_layer_map_head_policy():
    assert build_layer_map(2, 2, 4, 4).head_policy == "identity"
    assert build_layer_map(2, 2, 4, 8).head_policy == "average_heads"


def test_layer_map_rejects_deeper_student():
    with pytest.raises(MappingError, match="more layers"):
        build_layer_map(4, 2, 2, 2)


def test_layer_map_rejects_decreasing():
    with pytest.raises(MappingError):
        LayerHeadMap([2, 1], "identity")


def test_attn_kld_zero_iff_identical():
    rng = np.random.default_rng(2)
    tr = _rand_trace(rng, b=2, h=2, t=5, n_layers=2)
    twin = AttentionTrace([T.Tensor(l.data.copy()) for l in tr.layers], tr.n_heads)
    lmap = build_layer_map(2, 2, 2, 2)
    mask = np.ones((2, 5))
    assert attn_kld(tr, twin, lmap, mask).item() == 0.0
    other = _rand_trace(rng, b=2, h=2, t=5, n_layers=2)
    assert attn_kld(tr, other, lmap, mask).item() > 0.0


@pytest.mark.parametrize("seed", range(20))
def test_attn_kld_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    b, h, t = 2, 2, 5
    s_tr = _rand_trace(rng, b, h, t, 2)
    t_tr = _rand_trace(rng, b, h, t, 4)
    mask = (rng.random((b, t)) < 0.7).astype(np.float64)
    mask[:, 0] = 1.0
    lmap = build_layer_map(2, 4, h, h)
    got = attn_kld(s_tr, t_tr, lmap, mask).item()

    expect = 0.0
    for si, ti in enumerate(lmap.layer_map):
        kld = _kld_np(t_tr.layers[ti].data.astype(np.float64), s_tr.layers[si].data.astype(np.float64))
        expect += (kld * mask[:, None, :]).sum()
    expect /= 2 * h * mask.sum()
    assert got == pytest.approx(expect, rel=1e-4, abs=1e-7)


def test_attn_kld_average_heads_matches_oracle():
    rng = np.random.default_rng(3)
    b, t = 2, 4
    s_tr = _rand_trace(rng, b, 2, t, 1)
    t_tr = _rand_trace(rng, b, 4, t, 1)
    mask = np.ones((b, t))
    lmap = build_layer_map(1, 1, 2, 4)
    got = attn_kld(s_tr, t_tr, lmap, mask).item()
    ps = s_tr.layers[0].data.astype(np.float64).mean(1)
    pt = t_tr.layers[0].data.astype(np.float64).mean(1)
    expect = _kld_np(pt, ps).sum() / (1 * 1 * mask.sum())
    assert got == pytest.approx(expect, rel=1e-4)


def test_attn_kld_padding_invariance():
    """Adding masked-out rows must not move the loss (beyond float noise)."""
    rng = np.random.default_rng(4)
    b, h, t = 2, 2, 5
    s_tr = _rand_trace(rng, b, h, t, 2)
    t_tr = _rand_trace(rng, b, h, t, 2)
    mask = np.ones((b, t))
    base = attn_kld(s_tr, t_tr, build_layer_map(2, 2, h, h), mask).item()

    def pad_trace(tr, extra):
        out = []
        for l in tr.layers:
            big = np.zeros((b, h, t + extra, t + extra), np.float32)
            big[..., :t, :t] = l.data
            big[..., t:, 0] = 1.0  # arbitrary valid rows in the padded area
            out.append(T.Tensor(big))
        return AttentionTrace(out, h)

    mask_p = np.concatenate([mask, np.zeros((b, 3))], axis=1)
    padded = attn_kld(pad_trace(s_tr, 3), pad_trace(t_tr, 3), build_layer_map(2, 2, h, h), mask_p).item()
    assert padded == pytest.approx(base, abs=1e-7)


def test_attn_kld_trace_count_mismatch():
    rng = np.random.default_rng(5)
    s_tr = _rand_trace(rng, 1, 2, 4, 3)
    t_tr = _rand_trace(rng, 1, 2, 4, 4)
    with pytest.raises(MappingError):
        attn_kld(s_tr, t_tr, build_layer_map(2, 4, 2, 2), np.ones((1, 4)))


def test_attn_kld_empty_mask_raises():
    rng = np.random.default_rng(6)
    tr = _rand_trace(rng, 1, 2, 4, 2)
    with pytest.raises(EmptyLossError):
        attn_kld(tr, tr, build_layer_map(2, 2, 2, 2), np.zeros((1, 4)))


def test_attn_kld_teacher_side_constant():
    rng = np.random.default_rng(7)
    s_tr = _rand_trace(rng, 1, 2, 4, 2)
    t_tr = _rand_trace(rng, 1, 2, 4, 2)
    for l in s_tr.layers + t_tr.layers:
        l.requires_grad = True
    g = T.Graph()
    with g:
        loss = attn_kld(s_tr, t_tr, build_layer_map(2, 2, 2, 2), np.ones((1, 4)))
    g.backward(loss)
    assert all(l.grad is not None and np.abs(l.grad).sum() > 0 for l in s_tr.layers)
    assert all(l.grad is None or not l.grad.any() for l in t_tr.layers)


# ------------------------------------------------------------- combined


def _outputs(rng, b=2, t=5, v=7, h=2, n_layers=2, with_traces=True):
    logits = T.Tensor(rng.standard_normal((b, t, v)).astype(np.float32))
    traces = _rand_trace(rng, b, h, t, n_layers) if with_traces else None
    return ForwardOutput(logits, traces)


def test_kd_loss_is_exact_weighted_sum():
    rng = np.random.default_rng(8)
    s_out, t_out = _outputs(rng), _outputs(rng)
    mask = np.ones((2, 5))
    lmap = build_layer_map(2, 2, 2, 2)
    lam_p, lam_a, tau = 0.7, 0.3, 2.0
    bundle = kd_loss(s_out, t_out, mask, mask, lmap, lam_p, lam_a, tau)
    # mirror of the composition arithmetic, same float32 operations
    expect = np.float32(np.float32(bundle.l_pred.item()) * np.float32(lam_p)) + np.float32(
        np.float32(bundle.l_attn.item()) * np.float32(lam_a)
    )
    assert np.float32(bundle.l_kd.item()) == expect


def test_kd_loss_components_match_direct_calls():
    rng = np.random.default_rng(9)
    s_out, t_out = _outputs(rng), _outputs(rng)
    loss_mask = np.array([[1, 1, 0, 1, 0], [1, 0, 1, 1, 1]], np.float64)
    row_mask = np.ones((2, 5))
    lmap = build_layer_map(2, 2, 2, 2)
    bundle = kd_loss(s_out, t_out, loss_mask, row_mask, lmap, temperature=2.0)
    assert bundle.l_pred.item() == pytest.approx(
        pred_kld(s_out.logits, t_out.logits, loss_mask, 2.0).item(), rel=1e-7
    )
    assert bundle.l_attn.item() == pytest.approx(
        attn_kld(s_out.traces, t_out.traces, lmap, row_mask).item(), rel=1e-7
    )


def test_kd_loss_without_traces_requires_zero_attn_weight():
    rng = np.random.default_rng(10)
    s_out = _outputs(rng, with_traces=False)
    t_out = _outputs(rng, with_traces=False)
    mask = np.ones((2, 5))
    lmap = build_layer_map(2, 2, 2, 2)
    with pytest.raises(ShapeError):
        kd_loss(s_out, t_out, mask, mask, lmap, 1.0, 0.5)
    bundle = kd_loss(s_out, t_out, mask, mask, lmap, 1.0, 0.0)
    assert bundle.l_attn is None
    assert bundle.l_kd.item() == pytest.approx(bundle.l_pred.item(), rel=1e-7)


# ------------------------------------------------------------------ DAE


def test_dae_loss_is_exact_sum_of_sides():
    rng = np.random.default_rng(11)
    s = T.Tensor(rng.standard_normal((4, 5, 7)).astype(np.float32))
    e = T.Tensor(rng.standard_normal((4, 5, 7)).astype(np.float32))
    r = T.Tensor(rng.standard_normal((4, 5, 7)).astype(np.float32))
    flags = np.array([True, False, True, False])
    mask = np.ones((4, 5))
    bundle = dae_loss(s, e, r, flags, mask)
    assert np.float32(bundle.l_dae.item()) == np.float32(
        np.float32(bundle.l_d.item()) + np.float32(bundle.l_nd.item())
    )


def test_dae_is_zero_when_student_matches_both_teachers():
    rng = np.random.default_rng(12)
    s = T.Tensor(rng.standard_normal((2, 4, 6)).astype(np.float32))
    bundle = dae_loss(s, T.Tensor(s.data.copy()), T.Tensor(s.data.copy()),
                      np.array([True, False]), np.ones((2, 4)))
    assert bundle.l_dae.item() == 0.0


def test_dae_all_domain_batch_has_zero_nondomain_side():
    rng = np.random.default_rng(13)
    s = T.Tensor(rng.standard_normal((2, 4, 6)).astype(np.float32))
    e = T.Tensor(rng.standard_normal((2, 4, 6)).astype(np.float32))
    r = T.Tensor(rng.standard_normal((2, 4, 6)).astype(np.float32))
    bundle = dae_loss(s, e, r, np.array([True, True]), np.ones((2, 4)))
    assert bundle.l_nd.item() == 0.0
    assert bundle.l_dae.item() == bundle.l_d.item()


def test_dae_sides_route_to_the_right_teacher():
    """Domain rows compare against the expert only: making the reference
    disagree on domain rows must not move l_d."""
    rng = np.random.default_rng(14)
    s = T.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    e = T.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    r1 = T.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    r2 = T.Tensor(r1.data.copy())
    r2.data[0] += 100.0  # row 0 is the domain row
    flags = np.array([True, False])
    mask = np.ones((2, 3))
    b1 = dae_loss(s, e, r1, flags, mask)
    b2 = dae_loss(s, e, r2, flags, mask)
    assert b1.l_d.item() == b2.l_d.item()
    assert b1.l_nd.item() == b2.l_nd.item()  # reference row 1 unchanged


def test_dae_per_side_normalization():
    """Each side averages over its own token count (separate, not joint)."""
    rng = np.random.default_rng(15)
    s = T.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    e = T.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    r = T.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    flags = np.array([True, False])
    mask = np.ones((2, 3))
    bundle = dae_loss(s, e, r, flags, mask)
    d_mask = mask * flags[:, None]
    nd_mask = mask * (~flags)[:, None]
    expect_d = _pred_kld_oracle(s.data, e.data, d_mask)
    expect_nd = _pred_kld_oracle(s.data, r.data, nd_mask)
    assert bundle.l_d.item() == pytest.approx(expect_d, rel=1e-4)
    assert bundle.l_nd.item() == pytest.approx(expect_nd, rel=1e-4)


def test_dae_rejects_bad_flag_shape():
    s = T.Tensor(np.zeros((2, 3, 5), np.float32))
    with pytest.raises(ShapeError):
        dae_loss(s, s, s, np.array([True]), np.ones((2, 3)))
