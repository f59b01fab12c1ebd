"""Render figures and a summary table from an ablation root directory.

Reads summary.json plus the per-run metrics streams and writes PNG charts
alongside a TSV of the same numbers, so results can be read without any
plotting environment.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError


def _read_metrics(run_dir):
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        return []
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _loss_curves(summary, root, out_dir):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    drew = False
    for cond in sorted(summary["conditions"]):
        runs = summary["conditions"][cond]["runs"]
        if not runs:
            continue
        recs = [r for r in _read_metrics(os.path.join(root, runs[0]["out_dir"])) if "l_total" in r]
        if not recs:
            recs = [r for r in _read_metrics(runs[0]["out_dir"]) if "l_total" in r]
        if not recs:
            continue
        ax.plot([r["step"] for r in recs], [r["l_total"] for r in recs], label=cond, linewidth=1.2)
        drew = True
    if not drew:
        plt.close(fig)
        return None
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.set_title("Training loss per condition (seed 0)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _score_bars(summary, out_dir):
    conds = sorted(summary["conditions"])
    if not conds:
        return None
    means = [summary["conditions"][c]["general_mean"] for c in conds]
    stds = [summary["conditions"][c]["general_std"] for c in conds]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.arange(len(conds))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4878b0")
    for xi, m in zip(x, means):
        ax.text(xi, m + 0.12, f"{m:.2f}", ha="center", fontsize=8)
    ax.set_xticks(x)
    ax.set_xticklabels(conds, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("general score (0-10)")
    ax.set_ylim(0, 10.5)
    ax.set_title(f"Held-out score, mean over {summary['settings']['seeds']} seeds")
    fig.tight_layout()
    path = os.path.join(out_dir, "ablation_scores.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _attn_trend(summary, root, out_dir):
    """Measured attention KLD during a prediction-only run."""
    cond = summary["conditions"].get("kd_pred")
    if not cond or not cond["runs"]:
        return None
    run_dir = cond["runs"][0]["out_dir"]
    if not os.path.isabs(run_dir):
        run_dir = os.path.join(root, run_dir)
    recs = [r for r in _read_metrics(run_dir) if r.get("l_attn") is not None]
    if len(recs) < 10:
        return None
    steps = np.array([r["step"] for r in recs])
    vals = np.array([r["l_attn"] for r in recs])
    k = max(1, len(recs) // 10)
    first, last = float(vals[:k].mean()), float(vals[-k:].mean())
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, vals, linewidth=1.0, color="#b04848", label="attention KLD (not trained on)")
    ax.axhline(first, linestyle="--", color="gray", linewidth=1, label=f"first 10% mean {first:.4f}")
    ax.axhline(last, linestyle=":", color="black", linewidth=1, label=f"last 10% mean {last:.4f}")
    ax.set_xlabel("step")
    ax.set_ylabel("attention KLD")
    ax.set_title("Attention alignment while distilling predictions only")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "kd_pred_attention_trend.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _dae_effect(summary, out_dir):
    dae = summary.get("dae")
    if not dae:
        return None
    runs = dae["runs"]
    labels = ["domain before", "domain after", "general before", "general after"]
    keys = ["domain_before", "domain_after", "general_before", "general_after"]
    means = [float(np.mean([r[k] for r in runs])) for k in keys]
    stds = [float(np.std([r[k] for r in runs])) for k in keys]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=4, color=["#b08948", "#b08948", "#4878b0", "#4878b0"])
    for xi, m in zip(x, means):
        ax.text(xi, m + 0.12, f"{m:.2f}", ha="center", fontsize=8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("score (0-10)")
    ax.set_ylim(0, 10.5)
    ax.set_title("Domain alignment: before vs after")
    fig.tight_layout()
    path = os.path.join(out_dir, "dae_effect.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _table(summary, out_dir):
    path = os.path.join(out_dir, "report.tsv")
    with open(path, "w") as f:
        f.write("condition\tn\tgeneral_mean\tgeneral_std\n")
        for cond in sorted(summary["conditions"]):
            c = summary["conditions"][cond]
            f.write(f"{cond}\t{len(c['runs'])}\t{c['general_mean']:.4f}\t{c['general_std']:.4f}\n")
        f.write("\ncheck\tvalue\tthreshold\tverdict\n")
        for v in summary["verdicts"]:
            f.write(f"{v['check']}\t{v['value']}\t{v['threshold']}\t{'PASS' if v['passed'] else 'FAIL'}\n")
        dae = summary.get("dae")
        if dae:
            f.write(
                f"\ndae_domain_gain_mean\t{dae['domain_gain_mean']}\n"
                f"dae_general_drop_mean\t{dae['general_drop_mean']}\n"
            )
    return path


def render_report(root, out_dir=None) -> list:
    """Write charts + TSV for an ablation root; returns the created paths."""
    summary_path = os.path.join(root, "summary.json")
    if not os.path.exists(summary_path):
        raise ConfigError(f"{root} has no summary.json; run the ablation first")
    with open(summary_path) as f:
        summary = json.load(f)
    out_dir = out_dir or os.path.join(root, "report")
    os.makedirs(out_dir, exist_ok=True)
    outputs = [
        _table(summary, out_dir),
        _score_bars(summary, out_dir),
        _loss_curves(summary, root, out_dir),
        _attn_trend(summary, root, out_dir),
        _dae_effect(summary, out_dir),
    ]
    return [p for p in outputs if p]
