"""Experiment harness: trains the teachers once, then runs the distillation
condition matrix over several seeds and judges the expected orderings.

Layout under the ablation root:
    corpora/      generated training corpora and eval suites
    teachers/     large teacher, small teacher, warm-start base, domain expert
    runs/<condition>/seed<k>/   one training run directory each
    dae/seed<k>/  domain-alignment phase (opt-in)
    summary.json, verdict.tsv
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

from . import data as D
from .errors import ConfigError
from .evaluate import compare_runs, evaluate, write_report
from .model import load_checkpoint
from .trainer import TrainConfig, train

# Table-2-analog condition set; kd_full distills from the large teacher.
DEFAULT_CONDITIONS = ("sft_clean", "sft_noisy", "kd_attn", "kd_pred", "kd_full_small", "kd_full")
KD_MODE = {"kd_attn": "kd_attn", "kd_pred": "kd_pred", "kd_full": "kd_full", "kd_full_small": "kd_full"}
# mode ablations distill from the student-shaped teacher (identity layer and
# head mapping); only kd_full upgrades to the large teacher
KD_TEACHER = {"kd_attn": "small", "kd_pred": "small", "kd_full_small": "small", "kd_full": "large"}


@dataclass
class AblationSettings:
    """Every knob of the experiment recipe, with desk-scale defaults.

    The defaults are sized for a single CPU core: the large teacher trains
    until its held-out score clears ``teacher_stop_score`` and every
    condition gets a short fixed budget from a shared warm-start base.
    """

    seeds: int = 3
    conditions: list | None = None
    with_dae: bool = False
    quick: bool = False

    student: dict = field(default_factory=lambda: dict(
        n_layers=4, n_heads=4, d_model=128, d_ff=256,
        vocab_size=D.VOCAB_SIZE, max_seq_len=64))
    teacher_large: dict = field(default_factory=lambda: dict(
        n_layers=8, n_heads=4, d_model=256, d_ff=256,
        vocab_size=D.VOCAB_SIZE, max_seq_len=64))

    # corpora; the teacher mix up-weights the families that need the most
    # data to generalize rather than memorize
    teacher_families: list = field(default_factory=lambda: (
        ["copy"] * 2 + ["reverse"] * 3 + ["sort-letters"] * 3
        + ["modular-addition"] * 1 + ["parenthesis-balance"] * 3))
    teacher_corpus_n: int = 20000
    teacher_corpus_seed: int = 7001
    cond_corpus_n: int = 3000
    cond_corpus_seed0: int = 7100
    noise_rate: float = 0.2
    domain_corpus_n: int = 3000
    domain_corpus_seed: int = 7201
    dae_general_n: int = 2700
    dae_general_seed: int = 7301
    general_suite_n: int = 500
    general_suite_seed: int = 9001
    domain_suite_n: int = 300
    domain_suite_seed: int = 9002

    # teacher / base / expert training
    teacher_batch: int = 48
    teacher_lr: float = 2.5e-3
    teacher_max_steps: int = 900
    teacher_stop_score: float = 9.6
    teacher_eval_every: int = 60
    teacher_eval_items: int = 150
    small_teacher_max_steps: int = 600
    base_steps: int = 350
    base_lr: float = 1.5e-3
    expert_steps: int = 250
    expert_lr: float = 2e-3

    # condition runs
    cond_steps: int = 220
    cond_batch: int = 32
    cond_lr: float = 1.2e-3
    temperature: float = 2.0
    lambda_pred: float = 1.0
    lambda_attn: float = 0.5

    # domain alignment phase
    dae_steps: int = 100
    dae_lr: float = 5e-4
    dae_domain_frac: float = 0.10
    eval_max_new: int = 8

    def __post_init__(self):
        if self.conditions is None:
            self.conditions = list(DEFAULT_CONDITIONS)
        unknown = [c for c in self.conditions if c not in DEFAULT_CONDITIONS]
        if unknown:
            raise ConfigError(f"unknown condition(s) {unknown}; known: {list(DEFAULT_CONDITIONS)}")
        if self.seeds < 1:
            raise ConfigError(f"seeds must be positive, got {self.seeds}")
        if self.quick:
            self.teacher_corpus_n = 1200
            self.cond_corpus_n = 500
            self.domain_corpus_n = 500
            self.dae_general_n = 450
            self.general_suite_n = 60
            self.domain_suite_n = 45
            self.teacher_max_steps = 30
            self.teacher_eval_every = 0
            self.small_teacher_max_steps = 20
            self.base_steps = 10
            self.expert_steps = 15
            self.cond_steps = 12
            self.dae_steps = 8


def _freshdir(*parts):
    path = os.path.join(*parts)
    os.makedirs(path, exist_ok=True)
    return path


def prepare_corpora(root, s: AblationSettings) -> dict:
    """Generate every corpus and suite; returns {name: path}."""
    cdir = _freshdir(root, "corpora")
    paths = {}

    def gen(name, families, n, seed, noise=0.0, split="train"):
        path = os.path.join(cdir, f"{name}.jsonl")
        D.write_corpus(path, D.generate_corpus(families, n, seed=seed, noise_rate=noise, split=split))
        paths[name] = path
        return path

    gen("teacher_train", s.teacher_families, s.teacher_corpus_n, s.teacher_corpus_seed)
    gen("general_suite", D.GENERAL_FAMILIES, s.general_suite_n, s.general_suite_seed, split="eval")
    for k in range(s.seeds):
        gen(f"cond_noisy_seed{k}", D.GENERAL_FAMILIES, s.cond_corpus_n, s.cond_corpus_seed0 + k, noise=s.noise_rate)
        if "sft_clean" in s.conditions:
            gen(f"cond_clean_seed{k}", D.GENERAL_FAMILIES, s.cond_corpus_n, s.cond_corpus_seed0 + k)
    if s.with_dae:
        gen("domain_train", D.DOMAIN_FAMILIES, s.domain_corpus_n, s.domain_corpus_seed)
        gen("domain_suite", D.DOMAIN_FAMILIES, s.domain_suite_n, s.domain_suite_seed, split="eval")
        gen("dae_general", D.GENERAL_FAMILIES, s.dae_general_n, s.dae_general_seed)
    return paths


def train_teachers(root, s: AblationSettings, paths: dict) -> dict:
    """Large teacher, small (student-shaped) teacher, and warm-start base."""
    info = {}

    def fit(name, model_cfg, eval_suite=None, **kw):
        out = os.path.join(root, "teachers", name)
        cfg = TrainConfig(loss_mode="sft", student_config=dict(model_cfg), seed=0,
                          eval_suite=eval_suite, eval_max_new=s.eval_max_new, **kw)
        res = train(cfg, kw_data.pop(name), out)
        info[name] = {"ckpt": res["final_ckpt"], "best_ckpt": res["best_ckpt"],
                      "steps": res["steps"], "best_score": res["best_score"]}
        return info[name]

    kw_data = {"large": paths["teacher_train"], "small": paths["teacher_train"],
               "base": paths["teacher_train"], "expert": paths.get("domain_train")}

    need_large = any(KD_TEACHER.get(c) == "large" for c in s.conditions)
    need_small = any(KD_TEACHER.get(c) == "small" for c in s.conditions)
    if need_large:
        fit("large", s.teacher_large, eval_suite=paths["general_suite"],
            micro_batch=s.teacher_batch, global_batch=s.teacher_batch,
            peak_lr=s.teacher_lr, warmup_frac=0.06, max_steps=s.teacher_max_steps,
            eval_every=s.teacher_eval_every, eval_items=s.teacher_eval_items,
            early_stop_score=s.teacher_stop_score)
        # distillation reads the best-scoring checkpoint, not the last step
        info["large"]["ckpt"] = info["large"]["best_ckpt"]
        report = evaluate(
            load_checkpoint(info["large"]["ckpt"]), paths["general_suite"], max_new=s.eval_max_new
        )
        info["large"]["clean_score"] = report["general_score"]
        write_report(report, os.path.join(root, "teachers", "large", "eval.json"))
    if need_small:
        fit("small", s.student, eval_suite=paths["general_suite"],
            micro_batch=s.cond_batch, global_batch=s.cond_batch,
            peak_lr=s.teacher_lr, warmup_frac=0.06, max_steps=s.small_teacher_max_steps,
            eval_every=s.teacher_eval_every, eval_items=s.teacher_eval_items,
            early_stop_score=s.teacher_stop_score)
        info["small"]["ckpt"] = info["small"]["best_ckpt"]
    fit("base", s.student,
        micro_batch=s.cond_batch, global_batch=s.cond_batch,
        peak_lr=s.base_lr, schedule="constant", warmup_frac=0.1,
        max_steps=s.base_steps, eval_every=0)
    if s.with_dae:
        fit("expert", s.student,
            micro_batch=s.cond_batch, global_batch=s.cond_batch,
            peak_lr=s.expert_lr, warmup_frac=0.1, max_steps=s.expert_steps, eval_every=0)
    return info


def run_condition(root, s: AblationSettings, paths, teachers, cond, seed, cache) -> dict:
    """Train one (condition, seed) cell and score it on the general suite."""
    out = os.path.join(root, "runs", cond, f"seed{seed}")
    data = paths[f"cond_clean_seed{seed}" if cond == "sft_clean" else f"cond_noisy_seed{seed}"]
    kw = dict(loss_mode="sft")
    if cond in KD_MODE:
        kw = dict(
            loss_mode=KD_MODE[cond],
            teacher_ckpt=teachers[KD_TEACHER[cond]]["ckpt"],
            temperature=s.temperature,
            lambda_pred=s.lambda_pred,
            lambda_attn=s.lambda_attn,
        )
    cfg = TrainConfig(
        init_ckpt=teachers["base"]["ckpt"],
        seed=seed,
        micro_batch=s.cond_batch,
        global_batch=s.cond_batch,
        peak_lr=s.cond_lr,
        warmup_frac=0.1,
        max_steps=s.cond_steps,
        eval_every=0,
        **kw,
    )
    res = train(cfg, data, out, teacher_cache=cache)
    model = load_checkpoint(res["final_ckpt"])
    report = evaluate(model, paths["general_suite"], max_new=s.eval_max_new, seed=seed)
    write_report(report, os.path.join(out, "eval.json"))
    return {"seed": seed, "out_dir": out, "ckpt": res["final_ckpt"], "report": report}


def run_matrix(root, s: AblationSettings, paths, teachers) -> dict:
    """All conditions x seeds; returns per-condition runs and reports."""
    runs = {cond: [] for cond in s.conditions}
    for seed in range(s.seeds):
        cache = {}  # shared per seed: every kd condition reuses the teacher forwards
        for cond in s.conditions:
            runs[cond].append(run_condition(root, s, paths, teachers, cond, seed, cache))
    return runs


def run_dae_phase(root, s: AblationSettings, paths, teachers, kd_runs) -> dict:
    """Domain alignment from the expert, starting at each kd_full student."""
    out_runs = []
    for run in kd_runs:
        seed = run["seed"]
        out = os.path.join(root, "dae", f"seed{seed}")
        os.makedirs(out, exist_ok=True)
        mixed = D.mix_corpora(
            D.read_corpus(paths["dae_general"]),
            D.read_corpus(paths["domain_train"]),
            s.dae_domain_frac,
            seed=seed,
        )
        mix_path = os.path.join(out, "mix.jsonl")
        D.write_corpus(mix_path, mixed)
        cfg = TrainConfig(
            loss_mode="dae",
            init_ckpt=run["ckpt"],
            reference_ckpt=run["ckpt"],
            expert_ckpt=teachers["expert"]["ckpt"],
            seed=seed,
            micro_batch=s.cond_batch,
            global_batch=s.cond_batch,
            peak_lr=s.dae_lr,
            schedule="constant",
            warmup_frac=0.0,
            max_steps=s.dae_steps,
            eval_every=0,
        )
        res = train(cfg, mix_path, out)
        before_dom = evaluate(load_checkpoint(run["ckpt"]), paths["domain_suite"], max_new=s.eval_max_new)
        after = load_checkpoint(res["final_ckpt"])
        after_dom = evaluate(after, paths["domain_suite"], max_new=s.eval_max_new)
        after_gen = evaluate(after, paths["general_suite"], max_new=s.eval_max_new)
        write_report(after_dom, os.path.join(out, "eval_domain.json"))
        write_report(after_gen, os.path.join(out, "eval_general.json"))
        out_runs.append(
            {
                "seed": seed,
                "out_dir": os.path.relpath(out, root),
                "general_before": run["report"]["general_score"],
                "general_after": after_gen["general_score"],
                "domain_before": before_dom["domain_score"],
                "domain_after": after_dom["domain_score"],
            }
        )

    def mean(key):
        return sum(r[key] for r in out_runs) / len(out_runs)

    domain_gain = mean("domain_after") - mean("domain_before")
    general_drop = mean("general_before") - mean("general_after")
    return {
        "runs": out_runs,
        "domain_gain_mean": round(domain_gain, 4),
        "general_drop_mean": round(general_drop, 4),
        "verdicts": [
            {"check": "dae domain gain >= 1.0", "value": round(domain_gain, 4),
             "threshold": 1.0, "passed": bool(domain_gain >= 1.0)},
            {"check": "dae general drop < 0.5", "value": round(general_drop, 4),
             "threshold": 0.5, "passed": bool(general_drop < 0.5)},
        ],
    }


def _verdict_table(stats, verdicts) -> str:
    lines = [f"{'condition':<16} {'n':>2} {'general mean':>13} {'std':>7}"]
    for cond in sorted(stats):
        st = stats[cond]
        lines.append(f"{cond:<16} {st.n:>2} {st.general_mean:>13.3f} {st.general_std:>7.3f}")
    lines.append("")
    lines.append(f"{'check':<34} {'value':>8} {'threshold':>10} verdict")
    for v in verdicts:
        lines.append(
            f"{v['check']:<34} {v['value']:>8.3f} {v['threshold']:>10.3f} "
            f"{'PASS' if v['passed'] else 'FAIL'}"
        )
    return "\n".join(lines)


def run_ablation(root, settings: AblationSettings | None = None) -> dict:
    """Full pipeline: corpora, teachers, matrix, optional DAE, verdicts."""
    s = settings or AblationSettings()
    started = time.time()
    os.makedirs(root, exist_ok=True)
    timings = {}

    t0 = time.time()
    paths = prepare_corpora(root, s)
    timings["corpora_s"] = round(time.time() - t0, 1)

    t0 = time.time()
    teachers = train_teachers(root, s, paths)
    timings["teachers_s"] = round(time.time() - t0, 1)

    t0 = time.time()
    runs = run_matrix(root, s, paths, teachers)
    timings["matrix_s"] = round(time.time() - t0, 1)

    result = compare_runs({c: [r["report"] for r in rs] for c, rs in runs.items()}, n_seeds=s.seeds)
    dae = None
    if s.with_dae:
        if "kd_full" not in runs:
            raise ConfigError("the DAE phase starts from kd_full students; add kd_full to conditions")
        t0 = time.time()
        dae = run_dae_phase(root, s, paths, teachers, runs["kd_full"])
        timings["dae_s"] = round(time.time() - t0, 1)

    verdicts = result.verdicts + (dae["verdicts"] if dae else [])
    table = _verdict_table(result.stats, verdicts)
    summary = {
        "settings": asdict(s),
        "teachers": teachers,
        "conditions": {
            cond: {
                "runs": [
                    {"seed": r["seed"], "out_dir": os.path.relpath(r["out_dir"], root),
                     "general_score": r["report"]["general_score"]}
                    for r in rs
                ],
                "general_mean": result.stats[cond].general_mean,
                "general_std": result.stats[cond].general_std,
            }
            for cond, rs in runs.items()
        },
        "pairwise": {f"{a}-{b}": round(v, 4) for (a, b), v in result.pairwise.items()},
        "verdicts": verdicts,
        "dae": dae,
        "timings": timings,
        "wall_s": round(time.time() - started, 1),
        "verdict_table": table,
    }
    with open(os.path.join(root, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    with open(os.path.join(root, "verdict.tsv"), "w") as f:
        f.write("condition\tn\tgeneral_mean\tgeneral_std\n")
        for cond in sorted(result.stats):
            st = result.stats[cond]
            f.write(f"{cond}\t{st.n}\t{st.general_mean:.4f}\t{st.general_std:.4f}\n")
        f.write("\ncheck\tvalue\tthreshold\tverdict\n")
        for v in verdicts:
            f.write(f"{v['check']}\t{v['value']}\t{v['threshold']}\t{'PASS' if v['passed'] else 'FAIL'}\n")
    return summary
