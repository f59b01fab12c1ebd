"""Exact-match evaluation over held-out suites, plus run comparison.

A suite is an ordinary corpus file; each item is greedy-decoded and the
generated tokens (trimmed at the first end marker) must equal the reference
response exactly. Scores are family-accuracy means scaled to [0, 10].
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EOS_ID, FAMILIES, PAD_ID, pack, read_corpus
from .errors import ComparabilityError, ConfigError, TokenizerMismatchError
from .losses import ce_loss
from .trainer import corpus_digest, _shift_left

_DECODE_BATCH = 128


def _decode_batch(model, prompts, max_new):
    """Greedy-decode a batch of prompts; returns per-prompt new tokens.

    Rows are right-padded; each row reads its own last real position, so the
    result matches one-at-a-time decoding exactly.
    """
    seqs = [list(p) for p in prompts]
    new_tokens = [[] for _ in prompts]
    active = list(range(len(prompts)))
    with T.no_grad():
        while active:
            width = max(len(seqs[i]) for i in active)
            arr = np.full((len(active), width), PAD_ID, dtype=np.int64)
            for j, i in enumerate(active):
                arr[j, : len(seqs[i])] = seqs[i]
            logits = model.forward(arr).logits.data
            still = []
            for j, i in enumerate(active):
                nxt = int(np.argmax(logits[j, len(seqs[i]) - 1]))
                seqs[i].append(nxt)
                new_tokens[i].append(nxt)
                if nxt != EOS_ID and len(new_tokens[i]) < max_new:
                    still.append(i)
            active = still
    return new_tokens


def _trim(tokens):
    out = []
    for t in tokens:
        if t == EOS_ID:
            break
        out.append(t)
    return out


def evaluate(model, suite_path, max_new=16, seed=0, items_limit=None) -> dict:
    """Score a model on a suite corpus; never mutates the model."""
    if model.config.vocab_size < max(id for id in [PAD_ID, EOS_ID]) + 1:
        raise TokenizerMismatchError("model vocabulary too small for the suite tokenizer")
    samples = read_corpus(suite_path)
    if not samples:
        raise ConfigError(f"suite {suite_path} is empty")
    if items_limit:
        per_family = {}
        kept = []
        for s in samples:
            per_family.setdefault(s.family, 0)
            if per_family[s.family] < items_limit:
                per_family[s.family] += 1
                kept.append(s)
        samples = kept

    by_family = {}
    for s in samples:
        by_family.setdefault(s.family, []).append(s)

    families = {}
    for family, items in sorted(by_family.items()):
        hits = 0
        for i in range(0, len(items), _DECODE_BATCH):
            chunk = items[i : i + _DECODE_BATCH]
            outs = _decode_batch(model, [s.prompt for s in chunk], max_new)
            for s, out in zip(chunk, outs):
                if _trim(out) == _trim(s.response):
                    hits += 1
        families[family] = {"accuracy": hits / len(items), "n_items": len(items)}

    def score_over(names):
        accs = [families[f]["accuracy"] for f in names if f in families]
        return round(10.0 * float(np.mean(accs)), 6) if accs else None

    general = score_over([f.name for f in FAMILIES.values() if not f.domain])
    domain = score_over([f.name for f in FAMILIES.values() if f.domain])

    packed = pack(samples, model.config.max_seq_len)
    targets = np.roll(packed.tokens, -1, axis=1)
    mask = _shift_left(packed.loss_mask)
    nll_sum, n_pos = 0.0, 0
    with T.no_grad():
        for i in range(0, packed.n_rows, 64):
            sl = slice(i, min(i + 64, packed.n_rows))
            if not mask[sl].any():
                continue
            logits = model.forward(packed.tokens[sl]).logits
            l = ce_loss(logits, targets[sl], mask[sl])
            n = int(mask[sl].sum())
            nll_sum += l.item() * n
            n_pos += n
    perplexity = float(np.exp(nll_sum / n_pos)) if n_pos else float("nan")

    return {
        "families": families,
        "general_score": general,
        "domain_score": domain,
        "perplexity": round(perplexity, 6),
        "checkpoint": model.checksum()[:16],
        "seed": seed,
        "suite": str(suite_path),
        "suite_digest": corpus_digest(suite_path),
        "max_new": max_new,
    }


@dataclass
class ConditionStats:
    n: int
    general_mean: float
    general_std: float
    domain_mean: float | None
    domain_std: float | None


@dataclass
class CompareResult:
    stats: dict  # condition -> ConditionStats
    pairwise: dict  # (a, b) -> general mean difference a - b
    verdicts: list  # dicts: check, value, threshold, passed


# Expected orderings among the standard ablation conditions. Each entry is
# (name, metric expression, threshold); value >= threshold passes.
_ORDERING_CHECKS = [
    ("kd_full >= kd_pred", lambda s: s["kd_full"].general_mean - s["kd_pred"].general_mean, 0.0),
    ("kd_pred >= sft_noisy", lambda s: s["kd_pred"].general_mean - s["sft_noisy"].general_mean, 0.0),
    ("kd_attn >= sft_noisy", lambda s: s["kd_attn"].general_mean - s["sft_noisy"].general_mean, 0.0),
    ("kd_full - sft_noisy >= 1.0", lambda s: s["kd_full"].general_mean - s["sft_noisy"].general_mean, 1.0),
    ("std(kd_full) <= std(sft_noisy)", lambda s: s["sft_noisy"].general_std - s["kd_full"].general_std, 0.0),
    ("kd_full >= kd_full_small - 0.3", lambda s: s["kd_full"].general_mean - s["kd_full_small"].general_mean, -0.3),
]


def compare_runs(reports_by_condition: dict, n_seeds: int = 3) -> CompareResult:
    """Aggregate per-condition scores and judge the expected orderings."""
    if n_seeds < 3:
        raise ConfigError(f"need at least 3 seeds per condition, got {n_seeds}")
    digests = set()
    stats = {}
    for cond, reports in reports_by_condition.items():
        if len(reports) < n_seeds:
            raise ConfigError(f"condition {cond!r} has {len(reports)} reports, need {n_seeds}")
        for r in reports:
            digests.add(r["suite_digest"])
        gen = np.array([r["general_score"] for r in reports], dtype=np.float64)
        dom = [r["domain_score"] for r in reports]
        has_dom = all(d is not None for d in dom)
        stats[cond] = ConditionStats(
            n=len(reports),
            general_mean=float(gen.mean()),
            general_std=float(gen.std()),
            domain_mean=float(np.mean(dom)) if has_dom else None,
            domain_std=float(np.std(dom)) if has_dom else None,
        )
    if len(digests) > 1:
        raise ComparabilityError(f"reports were produced on {len(digests)} different suites; cannot compare")

    pairwise = {}
    conds = sorted(stats)
    for a in conds:
        for b in conds:
            if a != b:
                pairwise[(a, b)] = stats[a].general_mean - stats[b].general_mean

    verdicts = []
    for name, expr, threshold in _ORDERING_CHECKS:
        try:
            value = expr(stats)
        except KeyError:
            continue
        verdicts.append(
            {"check": name, "value": round(value, 4), "threshold": threshold, "passed": bool(value >= threshold)}
        )
    return CompareResult(stats=stats, pairwise=pairwise, verdicts=verdicts)


def write_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
