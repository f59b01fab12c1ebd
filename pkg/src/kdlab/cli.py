"""Command-line entry point covering the full workflow: corpus generation,
teacher/student training, distillation, domain alignment, evaluation,
gradient checking, the ablation matrix, and report rendering.

Exit codes: 0 success, 1 usage error (bad flags, missing files, config
violations), 2 runtime failure (divergence, numerical trouble).
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import hashlib
import json
import os
import sys
import time

from . import __version__
from . import data as D
from .errors import ConfigError, KdlabError, UsageError
from .evaluate import evaluate, write_report
from .gradcheck import run_gradcheck
from .model import ModelConfig, load_checkpoint
from .trainer import TrainConfig, train

GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------- plumbing


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def write_manifest(path, subcommand, config, inputs, outputs, seed, started):
    """Run manifest: resolved config, input digests, outputs, version, wall time."""
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": {str(p): _sha256_file(p) for p in inputs if p and os.path.exists(p)},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "version": __version__,
        "wall_s": round(time.time() - started, 3),
    }
    atomic_write_json(path, manifest)
    return manifest


def _resolve_out(path):
    """Relative output paths land under $KD_OUT_DIR when it is set."""
    root = os.environ.get("KD_OUT_DIR")
    if path and root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings may be given unquoted


def _reject_unknown(key, valid, where):
    if key in valid:
        return
    hint = difflib.get_close_matches(key, sorted(valid), n=1)
    suffix = f"; did you mean {hint[0]!r}?" if hint else ""
    raise ConfigError(f"unknown {where} key {key!r}{suffix}")


def load_config(path, overrides=()):
    """Resolve a flat JSON train config plus --key=value overrides.

    File values lose to overrides. Keys must name TrainConfig fields;
    dotted keys (student_config.n_layers) reach into the model config.
    """
    merged = {}
    if path:
        try:
            with open(path) as f:
                merged = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
        if not isinstance(merged, dict):
            raise ConfigError(f"config {path} must hold a JSON object")

    train_fields = set(TrainConfig.__dataclass_fields__)
    model_fields = set(ModelConfig.__dataclass_fields__)
    for key in merged:
        _reject_unknown(key, train_fields, "train config")

    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unknown flag {item!r} (overrides look like --key=value)")
        key, _, raw = item[2:].partition("=")
        value = _coerce(raw)
        if "." in key:
            head, _, sub = key.partition(".")
            if head != "student_config":
                raise ConfigError(f"only student_config.* dotted keys are supported, got {key!r}")
            _reject_unknown(sub, model_fields, "model config")
            merged.setdefault("student_config", {})
            if not isinstance(merged["student_config"], dict):
                raise ConfigError("student_config must be an object to take dotted overrides")
            merged["student_config"][sub] = value
        else:
            _reject_unknown(key, train_fields, "train config")
            merged[key] = value

    if isinstance(merged.get("student_config"), dict):
        for key in merged["student_config"]:
            _reject_unknown(key, model_fields, "model config")
    return merged


def _finish_training(args, overrides, subcommand, forced: dict):
    started = time.time()
    merged = load_config(getattr(args, "config", None), overrides)
    merged.update({k: v for k, v in forced.items() if v is not None})
    if args.seed is not None:
        merged["seed"] = args.seed
    cfg = TrainConfig.from_dict(merged)
    result = train(cfg, args.data, args.out)
    inputs = [args.data, getattr(args, "config", None), cfg.init_ckpt,
              cfg.teacher_ckpt, cfg.expert_ckpt, cfg.reference_ckpt, cfg.eval_suite]
    write_manifest(
        os.path.join(args.out, "manifest.json"),
        subcommand,
        cfg.to_dict(),
        inputs,
        [result["final_ckpt"], result["best_ckpt"], os.path.join(args.out, "metrics.jsonl")],
        cfg.seed,
        started,
    )
    print(f"trained {result['steps']} steps -> {result['final_ckpt']}")
    if result["best_score"] is not None:
        print(f"best eval score {result['best_score']:.3f} at step {result['best_step']}")
    return 0


def _load_model_config(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"model config {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"model config {path} must hold a JSON object")
    return ModelConfig.from_dict(doc).to_dict()


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args, overrides):
    _no_overrides(overrides)
    started = time.time()
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    samples = D.generate_corpus(
        families, args.n, seed=args.seed, noise_rate=args.noise_rate, split=args.split
    )
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    kinds = {D.FAMILIES[f].domain for f in families}
    outputs = []
    if len(kinds) == 2:  # mixed request: one file per suite kind
        stem = args.out[: -len(".jsonl")] if args.out.endswith(".jsonl") else args.out
        for tag, want in (("general", False), ("domain", True)):
            part = [s for s in samples if D.FAMILIES[s.family].domain is want]
            path = f"{stem}.{tag}.jsonl"
            D.write_corpus(path, part)
            outputs.append(path)
    else:
        D.write_corpus(args.out, samples)
        outputs.append(args.out)
    config = {
        "families": families,
        "n": args.n,
        "noise_rate": args.noise_rate,
        "split": args.split,
    }
    write_manifest(f"{outputs[0]}.manifest.json", "gen-data", config, [], outputs, args.seed, started)
    for path in outputs:
        print(path)
    return 0


def cmd_train(args, overrides):
    return _finish_training(args, overrides, "train", {"loss_mode": "sft", "eval_suite": args.eval_suite})


def cmd_distill(args, overrides):
    forced = {
        "loss_mode": args.mode,
        "teacher_ckpt": args.teacher,
        "eval_suite": args.eval_suite,
        "init_ckpt": args.init,
        "student_config": _load_model_config(args.student_config) if args.student_config else None,
    }
    return _finish_training(args, overrides, "distill", forced)


def cmd_dae(args, overrides):
    general = D.read_corpus(args.general)
    domain = D.read_corpus(args.domain)
    mixed = D.mix_corpora(general, domain, args.domain_frac, seed=args.seed or 0)
    os.makedirs(args.out, exist_ok=True)
    mix_path = os.path.join(args.out, "mix.jsonl")
    D.write_corpus(mix_path, mixed)
    args.data = mix_path
    forced = {
        "loss_mode": "dae",
        "init_ckpt": args.init,
        "expert_ckpt": args.expert,
        "reference_ckpt": args.reference or args.init,
        "eval_suite": args.eval_suite,
    }
    return _finish_training(args, overrides, "dae", forced)


def cmd_eval(args, overrides):
    _no_overrides(overrides)
    model = load_checkpoint(args.ckpt)
    report = evaluate(model, args.suite, max_new=args.max_new)
    out = args.out or f"{os.path.splitext(args.ckpt)[0]}.eval.json"
    write_report(report, out)
    gen = "-" if report["general_score"] is None else f"{report['general_score']:.3f}"
    dom = "-" if report["domain_score"] is None else f"{report['domain_score']:.3f}"
    print(f"general {gen} domain {dom} perplexity {report['perplexity']:.4f}")
    for name in sorted(report["families"]):
        fam = report["families"][name]
        print(f"  {name}: {fam['accuracy']:.3f} ({fam['n_items']} items)")
    print(out)
    return 0


def cmd_gradcheck(args, overrides):
    _no_overrides(overrides)
    results = run_gradcheck(eps=args.eps, seed=args.seed or 0)
    failed = []
    for name, err in results.items():
        ok = err < GRADCHECK_TOL
        print(f"{name}: max rel err {err:.3e} {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_ablation(args, overrides):
    _no_overrides(overrides)
    from .ablation import AblationSettings, run_ablation

    settings = AblationSettings(
        seeds=args.seeds,
        conditions=[c.strip() for c in args.conditions.split(",")] if args.conditions else None,
        with_dae=args.with_dae,
        quick=args.quick,
    )
    summary = run_ablation(args.out, settings)
    print(summary["verdict_table"])
    print(os.path.join(args.out, "summary.json"))
    return 0


def cmd_report(args, overrides):
    _no_overrides(overrides)
    from .report import render_report

    outputs = render_report(args.root, args.out)
    for path in outputs:
        print(path)
    return 0


def _no_overrides(overrides):
    if overrides:
        raise UsageError(f"unknown flag {overrides[0]!r}")


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    """Usage problems exit 1 (not argparse's default 2) without a stack dump."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def build_parser():
    parser = _Parser(prog="kdlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kdlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    def add(name, func, help_, train_like=False):
        p = sub.add_parser(name, help=help_, prog=f"kdlab {name}")
        p.set_defaults(func=func, accepts_overrides=train_like)
        if train_like:
            p.add_argument("--data", required=(name != "dae"), help="training corpus (jsonl)")
            p.add_argument("--out", required=True, help="run directory")
            p.add_argument("--config", help="JSON train config; flags override it")
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--eval-suite", default=None, help="suite for periodic eval + best checkpoint")
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic corpus")
    p.add_argument("--families", required=True, help="comma-separated family names")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)

    add("train", cmd_train, "supervised training (students, teachers, experts)", train_like=True)

    p = add("distill", cmd_distill, "knowledge distillation against a frozen teacher", train_like=True)
    p.add_argument("--mode", required=True, choices=("kd_pred", "kd_attn", "kd_full"))
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--student-config", help="JSON model config for a fresh student")
    p.add_argument("--init", help="checkpoint to initialize the student from")

    p = add("dae", cmd_dae, "domain alignment from an expert", train_like=True)
    p.add_argument("--init", required=True, help="student checkpoint to start from")
    p.add_argument("--expert", required=True, help="domain expert checkpoint")
    p.add_argument("--reference", help="frozen reference checkpoint (default: --init)")
    p.add_argument("--general", required=True, help="general corpus (jsonl)")
    p.add_argument("--domain", required=True, help="domain corpus (jsonl)")
    p.add_argument("--domain-frac", type=float, default=0.10)

    p = add("eval", cmd_eval, "score a checkpoint on a suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--out", help="report JSON path")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)

    p = add("ablation", cmd_ablation, "train teachers and run the ablation matrix")
    p.add_argument("--out", required=True, help="ablation root directory")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--conditions", help="comma-separated subset of conditions")
    p.add_argument("--with-dae", action="store_true", help="also run the domain-alignment phase")
    p.add_argument("--quick", action="store_true", help="reduced steps for smoke runs")

    p = add("report", cmd_report, "render figures and tables from an ablation root")
    p.add_argument("--root", required=True, help="ablation root (from kdlab ablation)")
    p.add_argument("--out", help="output directory (default <root>/report)")

    return parser


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        if rest and not args.accepts_overrides:
            raise UsageError(f"unknown flag {rest[0]!r}")
        if getattr(args, "out", None):
            args.out = _resolve_out(args.out)
        return args.func(args, rest)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KdlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
