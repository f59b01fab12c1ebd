"""Tiny decoder-only transformer: RMSNorm, rotary positions, causal
multi-head attention, gated MLP, optional mixture-of-experts MLP.

Per-head attention probabilities can be returned alongside logits so that
attention-map distillation can match them between models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError, VocabularyError

CHECKPOINT_MAGIC = b"KDCKPT1\x00"


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    vocab_size: int = 99
    max_seq_len: int = 128
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5
    n_experts: int = 0
    experts_top_k: int = 0
    tokenizer_id: str = "kdlab-char-v1"

    def validate(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        head_dim = self.d_model // self.n_heads
        if head_dim % 2 != 0:
            raise ConfigError(f"head dimension ({head_dim}) must be even for rotary positions")
        if self.n_experts < 0:
            raise ConfigError(f"n_experts must be >= 0, got {self.n_experts}")
        if self.n_experts > 0:
            if not (1 <= self.experts_top_k <= self.n_experts):
                raise ConfigError(
                    f"experts_top_k ({self.experts_top_k}) must be in [1, n_experts={self.n_experts}]"
                )
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d).validate()


class AttentionTrace:
    """Per-layer, per-head attention probability matrices.

    Holds one (B, H, T, T) tensor per layer; ``len`` counts (layer, head)
    pairs. Row t of each head matrix is a probability distribution over
    positions <= t, with exact zeros above the diagonal.
    """

    def __init__(self, layer_tensors, n_heads):
        self.layers = layer_tensors
        self.n_heads = n_heads

    def __len__(self):
        return len(self.layers) * self.n_heads

    def head(self, layer, head):
        """Numpy view of shape (B, T, T) for one attention head."""
        return self.layers[layer].data[:, head]


@dataclass
class ForwardOutput:
    logits: T.Tensor
    traces: AttentionTrace | None = None


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params
        self._rope_cache = {}
        self._mask_cache = {}

    def parameters(self):
        return list(self.params.items())

    def param_count(self):
        return sum(int(p.data.size) for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def astype(self, dtype):
        """Copy of this model with parameters cast to dtype (for gradcheck)."""
        params = {k: T.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return TransformerModel(self.config, params)

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def _rope_tables(self, t, dtype):
        key = (t, np.dtype(dtype).name)
        if key not in self._rope_cache:
            cfg = self.config
            half = (cfg.d_model // cfg.n_heads) // 2
            inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) / half)
            angles = np.outer(np.arange(t, dtype=np.float64), inv_freq)
            self._rope_cache[key] = (np.cos(angles).astype(dtype), np.sin(angles).astype(dtype))
        return self._rope_cache[key]

    def _causal_mask(self, t, dtype):
        key = (t, np.dtype(dtype).name)
        if key not in self._mask_cache:
            mask = np.triu(np.full((t, t), T.NEG_INF, dtype=dtype), k=1)
            self._mask_cache[key] = mask
        return self._mask_cache[key]

    def forward(self, tokens, need_traces: bool = False) -> ForwardOutput:
        """Run the decoder over an int token matrix of shape (B, T)."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        bsz, seq = tokens.shape
        if seq > cfg.max_seq_len:
            raise ShapeError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        bad = (tokens < 0) | (tokens >= cfg.vocab_size)
        if bad.any():
            b, t = np.argwhere(bad)[0]
            raise VocabularyError(
                f"token id {int(tokens[b, t])} at batch {int(b)} position {int(t)} "
                f"is outside vocabulary of size {cfg.vocab_size}"
            )

        p = self.params
        dtype = p["embed"].data.dtype
        n_heads = cfg.n_heads
        head_dim = cfg.d_model // n_heads
        cos, sin = self._rope_tables(seq, dtype)
        mask = self._causal_mask(seq, dtype)

        x = T.embedding(p["embed"], tokens)  # (B, T, d)
        trace_layers = []
        for li in range(cfg.n_layers):
            pre = f"layers.{li}."
            h = T.rms_norm(x, p[pre + "attn_norm"], cfg.rmsnorm_eps)
            h2d = T.reshape(h, (bsz * seq, cfg.d_model))

            def heads(w):
                y = T.matmul(h2d, w)
                y = T.reshape(y, (bsz, seq, n_heads, head_dim))
                return T.transpose(y, (0, 2, 1, 3))  # (B, H, T, dh)

            q = T.rotary(heads(p[pre + "wq"]), cos, sin)
            k = T.rotary(heads(p[pre + "wk"]), cos, sin)
            v = heads(p[pre + "wv"])

            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
            scores = T.scale(scores, 1.0 / np.sqrt(head_dim))
            probs = T.masked_softmax(scores, mask)  # (B, H, T, T)
            if need_traces:
                trace_layers.append(probs)

            ctx = T.matmul(probs, v)  # (B, H, T, dh)
            ctx = T.transpose(ctx, (0, 2, 1, 3))
            ctx = T.reshape(ctx, (bsz * seq, cfg.d_model))
            attn_out = T.reshape(T.matmul(ctx, p[pre + "wo"]), (bsz, seq, cfg.d_model))
            x = T.add(x, attn_out)

            h = T.rms_norm(x, p[pre + "mlp_norm"], cfg.rmsnorm_eps)
            h2d = T.reshape(h, (bsz * seq, cfg.d_model))
            if cfg.n_experts > 0:
                mlp_out = moe_mlp(
                    h2d,
                    p[pre + "moe_gate"],
                    [
                        (p[f"{pre}experts.{e}.w_gate"], p[f"{pre}experts.{e}.w_up"], p[f"{pre}experts.{e}.w_down"])
                        for e in range(cfg.n_experts)
                    ],
                    cfg.experts_top_k,
                )
            else:
                mlp_out = _gated_mlp(h2d, p[pre + "w_gate"], p[pre + "w_up"], p[pre + "w_down"])
            x = T.add(x, T.reshape(mlp_out, (bsz, seq, cfg.d_model)))

        h = T.rms_norm(x, p["final_norm"], cfg.rmsnorm_eps)
        logits = T.matmul(T.reshape(h, (bsz * seq, cfg.d_model)), p["unembed"])
        logits = T.reshape(logits, (bsz, seq, cfg.vocab_size))

        traces = AttentionTrace(trace_layers, n_heads) if need_traces else None
        return ForwardOutput(logits=logits, traces=traces)


def _gated_mlp(x2d, w_gate, w_up, w_down):
    gated = T.mul(T.silu(T.matmul(x2d, w_gate)), T.matmul(x2d, w_up))
    return T.matmul(gated, w_down)


def moe_mlp(x2d, gate_w, experts, top_k):
    """Mixture-of-experts MLP over token rows.

    Routes each row through its top-k gate choices, renormalizing the
    selected softmax gate weights so they sum to one. Ties in the gate break
    toward the lower expert index.
    """
    n_experts = len(experts)
    if n_experts < 2:
        raise ConfigError(f"moe_mlp needs at least 2 experts, got {n_experts}")
    gate_logits = T.matmul(x2d, gate_w)  # (N, E)
    gate_probs = T.softmax(gate_logits)

    order = np.argsort(-gate_probs.data, axis=-1, kind="stable")
    keep = np.zeros_like(gate_probs.data)
    np.put_along_axis(keep, order[:, :top_k], 1.0, axis=-1)

    selected = T.mul_const(gate_probs, keep)
    denom = T.sum_(selected, axis=-1, keepdims=True)
    weights = T.div(selected, denom)  # (N, E), zero outside top-k

    out = None
    for e, (w_gate, w_up, w_down) in enumerate(experts):
        y = _gated_mlp(x2d, w_gate, w_up, w_down)
        y = T.bmul(y, T.slice_(weights, (slice(None), slice(e, e + 1))))
        out = y if out is None else T.add(out, y)
    return out


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> TransformerModel:
    """Seeded init: normal(0, 0.02) weights, unit norm gains.

    The same (config, seed) always produces bitwise-identical parameters.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def w(*shape):
        return T.Tensor((rng.normal(0.0, 0.02, shape)).astype(dtype), requires_grad=True)

    def gain(n):
        return T.Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    params: dict[str, T.Tensor] = {"embed": w(v, d)}
    for li in range(config.n_layers):
        pre = f"layers.{li}."
        params[pre + "attn_norm"] = gain(d)
        params[pre + "wq"] = w(d, d)
        params[pre + "wk"] = w(d, d)
        params[pre + "wv"] = w(d, d)
        params[pre + "wo"] = w(d, d)
        params[pre + "mlp_norm"] = gain(d)
        if config.n_experts > 0:
            params[pre + "moe_gate"] = w(d, config.n_experts)
            for e in range(config.n_experts):
                params[f"{pre}experts.{e}.w_gate"] = w(d, dff)
                params[f"{pre}experts.{e}.w_up"] = w(d, dff)
                params[f"{pre}experts.{e}.w_down"] = w(dff, d)
        else:
            params[pre + "w_gate"] = w(d, dff)
            params[pre + "w_up"] = w(d, dff)
            params[pre + "w_down"] = w(dff, d)
    params["final_norm"] = gain(d)
    params["unembed"] = w(d, v)
    return TransformerModel(config, params)


def save_checkpoint(model: TransformerModel, path):
    """Binary checkpoint: magic, u32 header length, JSON header, f32 payload."""
    entries = []
    blobs = []
    offset = 0
    for name, p in model.params.items():
        data = np.ascontiguousarray(p.data.astype(np.float32))
        if data.dtype.byteorder == ">":  # enforce little-endian payload
            data = data.astype("<f4")
        blob = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "len": int(data.size)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> TransformerModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a kdlab checkpoint")
    (header_len,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    header_start = len(CHECKPOINT_MAGIC) + 4
    if len(raw) < header_start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    config = ModelConfig.from_dict(header["config"])
    payload = raw[header_start + header_len :]

    params: dict[str, T.Tensor] = {}
    for entry in header["tensors"]:
        nbytes = entry["len"] * 4
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: truncated payload for tensor {entry['name']!r} "
                f"(need {entry['len']} floats, file ends early)"
            )
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) != entry["len"]:
            raise CheckpointError(
                f"{path}: tensor {entry['name']!r} header shape {shape} "
                f"does not match declared length {entry['len']}"
            )
        data = np.frombuffer(payload, dtype="<f4", count=entry["len"], offset=start)
        params[entry["name"]] = T.Tensor(data.reshape(shape).copy(), requires_grad=True)

    expected = set(init_model(config, seed=0).params.keys())
    got = set(params.keys())
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, ref in init_model(config, seed=0).params.items():
        if params[name].shape != ref.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {tuple(params[name].shape)} "
                f"does not match config-derived shape {tuple(ref.shape)}"
            )
    return TransformerModel(config, params)


def greedy_decode(model: TransformerModel, prompt_tokens, max_new: int, stop_token: int):
    """Argmax decoding; ties break toward the lowest token id.

    Returns only the newly generated tokens (including the stop token if it
    was produced). Deterministic by construction.
    """
    prompt_tokens = list(int(t) for t in prompt_tokens)
    if not prompt_tokens:
        raise ShapeError("greedy_decode requires a non-empty prompt")
    seq = list(prompt_tokens)
    out = []
    with T.no_grad():
        for _ in range(max_new):
            logits = model.forward(np.asarray([seq], dtype=np.int64)).logits
            nxt = int(np.argmax(logits.data[0, -1]))
            out.append(nxt)
            seq.append(nxt)
            if nxt == stop_token:
                break
    return out
