"""Command-line front end: train, guide, oracle, evaluate, reproduce.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure,
3 acceptance-criteria failure in reproduce.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

OUT_ROOT_ENV = "CONSTRAINEDGEN_OUT"


def _out_dir(args, default_name):
    if args.out:
        return args.out
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return os.path.join(root, default_name)


def _load_config(path):
    from .experiments import ExperimentConfig

    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def _apply_flag_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.train["seed"] = args.seed
        cfg.sampler["rng_seed"] = args.seed
        cfg.oracle["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        cfg.constraint["k"] = args.k
    if getattr(args, "lam", None) is not None:
        cfg.constraint["lambda"] = args.lam
    if getattr(args, "schedule", None):
        cfg.schedule = args.schedule
    if getattr(args, "langevin_steps", None) is not None:
        cfg.sampler["langevin_steps"] = args.langevin_steps
    if getattr(args, "constraint", None):
        with open(args.constraint, encoding="utf-8") as fh:
            cfg.constraint["text"] = fh.read()
    return cfg


def cmd_train(args):
    from .experiments import build_dataset, train_from_config
    from .scorenet import TrainConfig, save_checkpoint

    cfg = _load_config(args.config)
    cfg = _apply_flag_overrides(cfg, args)
    out = _out_dir(args, f"{cfg.name}-train")
    os.makedirs(out, exist_ok=True)
    dataset, _ = build_dataset(cfg, wine_csv=args.wine_csv)
    print(f"dataset: {dataset.n_rows} rows, model width {dataset.schema.width}")
    model, norm, trace = train_from_config(cfg, dataset, log_every=1000)
    ckpt = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt, model, norm, dataset.schema, TrainConfig.from_dict(cfg.train),
                    extra={"experiment": cfg.name})
    with open(os.path.join(out, "loss_trace.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v}\n")
    with open(os.path.join(out, "config_resolved.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
    print(f"checkpoint written to {ckpt}")
    return 0


def _load_guide_inputs(args):
    from .scorenet import load_checkpoint

    cfg = _load_config(args.config)
    cfg = _apply_flag_overrides(cfg, args)
    model, schema, norm, _ = load_checkpoint(args.checkpoint)
    return cfg, model, schema, norm


def cmd_guide(args):
    from .experiments import _write_sample_csv, run_guidance
    from .logic import parse
    from .metrics import build_report

    cfg, model, schema, norm = _load_guide_inputs(args)
    out = _out_dir(args, f"{cfg.name}-guide")
    os.makedirs(out, exist_ok=True)
    instances = cfg.constraint.get("instances", 1)
    guided, diags = run_guidance(cfg, model, schema, norm)
    _write_sample_csv(os.path.join(out, "guided_samples.csv"), guided, schema, norm, instances)
    np.save(os.path.join(out, "guided_samples_model_space.npy"), guided)
    with open(os.path.join(out, "diagnostics.csv"), "w", encoding="utf-8") as fh:
        fh.write("log_weight,hard_satisfied\n")
        for lw, ok in zip(diags.log_weights, diags.hard_satisfied):
            fh.write(f"{lw},{int(ok)}\n")
    summary = {
        "n_samples": int(len(guided)),
        "hard_satisfaction": float(np.mean(diags.hard_satisfied)),
        "mean_log_weight": float(np.mean(diags.log_weights)),
    }
    if args.reference:
        reference = np.load(args.reference) if args.reference.endswith(".npy") else None
        if reference is None:
            raise SystemExit("reference must be a .npy model-space matrix from the oracle command")
        formula = parse(cfg.constraint["text"], schema=schema, instances=instances)
        report = build_report(guided, reference, bins=cfg.bins, formula=formula,
                              schema=schema, normalization=norm, instances=instances)
        report.save(os.path.join(out, "report.json"))
        summary["l1_median"] = report.l1_median
        summary["l1_max"] = report.l1_max
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_oracle(args):
    from .experiments import _write_sample_csv, run_oracle

    cfg, model, schema, norm = _load_guide_inputs(args)
    out = _out_dir(args, f"{cfg.name}-oracle")
    os.makedirs(out, exist_ok=True)
    res = run_oracle(cfg, model, schema, norm)
    instances = cfg.constraint.get("instances", 1)
    _write_sample_csv(os.path.join(out, "oracle_samples.csv"), res.samples, schema, norm, instances)
    np.save(os.path.join(out, "oracle_samples_model_space.npy"), res.samples)
    summary = {
        "accepted": res.accepted,
        "proposed": res.proposed,
        "acceptance_rate": res.acceptance_rate,
        "complete": res.complete,
        "envelope_log_bound": res.envelope_log_bound,
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0 if res.complete else 2


def cmd_evaluate(args):
    from .metrics import build_report

    samples = np.load(args.samples)
    reference = np.load(args.reference)
    report = build_report(samples, reference, bins=args.bins)
    out = args.out or "report.json"
    report.save(out)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_reproduce(args):
    from .experiments import EXPERIMENTS, run_experiment

    if args.experiment not in EXPERIMENTS:
        print(f"unknown experiment {args.experiment!r}; choose from: {', '.join(EXPERIMENTS)}",
              file=sys.stderr)
        return 1
    out = _out_dir(args, f"reproduce-{args.experiment}")
    try:
        result = run_experiment(args.experiment, out_dir=out, wine_csv=args.wine_csv)
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    print(f"outputs in {out}")
    return 0 if result.passed else 3


def build_parser():
    p = argparse.ArgumentParser(
        prog="constrainedgen",
        description="Train score-based generative models and sample under logical constraints.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--constraint", help="constraint text file overriding the config")
        sp.add_argument("--out", help=f"output directory (default under ${OUT_ROOT_ENV} or ./runs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--k", type=float, help="constraint hardness")
        sp.add_argument("--lambda", dest="lam", type=float, help="constraint scale")
        sp.add_argument("--schedule", choices=["linear", "snr"])
        sp.add_argument("--langevin-steps", type=int)
        sp.add_argument("--wine-csv", help="path to the UCI white-wine CSV")

    sp = sub.add_parser("train", help="train an unconditional score model")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("guide", help="constraint-guided sampling from a checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--reference", help=".npy oracle samples for a full metric report")
    sp.set_defaults(fn=cmd_guide)

    sp = sub.add_parser("oracle", help="rejection sampling baseline")
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("evaluate", help="compare two sample files")
    sp.add_argument("--samples", required=True, help=".npy guided samples (model space)")
    sp.add_argument("--reference", required=True, help=".npy oracle samples (model space)")
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("reproduce", help="one-command experiment reproduction")
    sp.add_argument("experiment", help="toy | esirs_bridging | esirs_inequality | wine_complex | wine_multi")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--wine-csv")
    sp.set_defaults(fn=cmd_reproduce)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
