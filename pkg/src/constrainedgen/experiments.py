"""End-to-end experiment presets: train, oracle, guide, evaluate.

Each preset carries every knob needed to reproduce a run bit-for-bit;
the resolved config is echoed into the output directory. The wine presets
use the UCI white-wine CSV when a path is supplied, otherwise a seeded
synthetic correlated-Gaussian table with the same column names.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Column,
    Dataset,
    ESIRSParams,
    Normalization,
    TableSchema,
    decoded_matrix,
    esirs_dataset,
    esirs_simulate,
    ingest_csv,
    raw_matrix,
)
from .diffusion import DiffusionSpec, SamplerConfig
from .guidance import GuidanceSchedule, GuidedSampleJob, constrained_sample
from .logic import compile_constraint, parse
from .metrics import build_report, satisfaction_rate
from .oracle import RejectionJob, model_base_sampler, rejection_sample, simulator_base_sampler
from .scorenet import ScoreModel, TrainConfig, save_checkpoint, train

EXPERIMENTS = ("toy", "esirs_bridging", "esirs_inequality", "wine_complex", "wine_multi")

ESIRS_CONSISTENCY = "(forall t in 0..30: S[t] >= 0 and I[t] >= 0 and S[t] + I[t] <= 100) {k=1}"
ESIRS_BRIDGING = "(S[0] = 95 and I[0] = 5 and S[25] = 30) {k=7} and " + ESIRS_CONSISTENCY
ESIRS_INEQUALITY = "(forall t in 0..30: I[t] <= 20) {k=25} and " + ESIRS_CONSISTENCY

WINE_COMPLEX = (
    "(fixed_acidity in [5.0, 6.0] or fixed_acidity in [8.0, 9.0]) "
    "and alcohol >= 11.0 "
    "and (residual_sugar <= 5.0 -> citric_acid >= 0.5)"
)
WINE_MULTI = "alcohol_1 > alcohol_2 + 1"

WINE_COLUMNS = (
    "fixed_acidity",
    "volatile_acidity",
    "citric_acid",
    "residual_sugar",
    "chlorides",
    "free_sulfur_dioxide",
    "total_sulfur_dioxide",
    "density",
    "pH",
    "sulphates",
    "alcohol",
)

# marginal means/stds for the synthetic fallback table (white-wine-like)
_WINE_MEAN = np.array([6.85, 0.28, 0.334, 6.39, 0.046, 35.3, 138.4, 0.994, 3.19, 0.49, 10.51])
_WINE_STD = np.array([0.84, 0.10, 0.121, 5.07, 0.022, 17.0, 42.5, 0.003, 0.151, 0.114, 1.23])


def _wine_correlation():
    c = np.eye(11)

    def put(i, j, v):
        c[i, j] = c[j, i] = v

    put(3, 7, 0.84)   # residual_sugar ~ density
    put(7, 10, -0.78)  # density ~ alcohol
    put(3, 10, -0.45)  # residual_sugar ~ alcohol
    put(5, 6, 0.62)   # free ~ total sulfur dioxide
    put(6, 7, 0.53)   # total SO2 ~ density
    put(5, 3, 0.30)
    put(6, 3, 0.40)
    put(0, 8, -0.43)  # fixed_acidity ~ pH
    put(0, 2, 0.29)
    put(1, 2, -0.15)
    put(6, 10, -0.45)
    put(5, 10, -0.25)
    # project to the nearest positive-definite correlation matrix
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 1e-3, None)
    c = v @ np.diag(w) @ v.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def synthetic_wine_table(n_rows=4898, seed=1234):
    rng = np.random.default_rng(seed)
    corr = _wine_correlation()
    z = rng.standard_normal((n_rows, 11)) @ np.linalg.cholesky(corr).T
    values = _WINE_MEAN + z * _WINE_STD
    schema = TableSchema([Column(c, "real") for c in WINE_COLUMNS])
    return Dataset(schema=schema, data={c: values[:, j].copy() for j, c in enumerate(WINE_COLUMNS)})


def mixture_1d_sample(n, seed):
    """Equal-weight mixture N(-3, 0.5^2) + N(4, 1^2)."""
    rng = np.random.default_rng(seed)
    comp = rng.random(n) < 0.5
    return np.where(comp, rng.normal(-3.0, 0.5, n), rng.normal(4.0, 1.0, n))


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    diffusion: dict
    model: dict
    train: dict
    constraint: dict
    schedule: str
    sampler: dict
    oracle: dict
    count: int
    bins: int = 50

    def to_dict(self):
        return copy.deepcopy(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))


def preset(name, **overrides):
    """Experiment configuration with every default recorded explicitly."""
    if name == "toy":
        cfg = ExperimentConfig(
            name="toy",
            dataset={"kind": "mixture_1d", "n": 20000, "seed": 101},
            diffusion={"kind": "ve", "sigma_min": 0.01, "sigma_max": 5.0,
                       "beta_min": 0.1, "beta_max": 20.0},
            model={"hidden": [64, 64], "activation": "silu", "embed_dim": 16,
                   "embed_scale": 1.0, "scale_cap": 10.0, "seed": 7},
            train={"batch_size": 512, "accumulation": 1, "steps": 8000,
                   "lr": 1e-3, "optimizer": "adam", "seed": 11},
            constraint={"text": "x >= 0", "k": 50.0, "lambda": 1.0, "instances": 1},
            schedule="snr",
            sampler={"predictor_steps": 1000, "corrector_steps_per_t": 1, "snr": 0.16,
                     "langevin_steps": 200, "langevin_snr": 0.16, "rng_seed": 21},
            oracle={"base": "model", "target": 5000, "budget": 48000, "seed": 31,
                    "batch_size": 12000, "use_envelope": False},
            count=5000,
        )
    elif name in ("esirs_bridging", "esirs_inequality"):
        bridging = name == "esirs_bridging"
        cfg = ExperimentConfig(
            name=name,
            dataset={"kind": "esirs", "n": 50000, "seed": 202,
                     "params": ESIRSParams().to_dict()},
            diffusion={"kind": "ve", "sigma_min": 0.01, "sigma_max": 16.0,
                       "beta_min": 0.1, "beta_max": 20.0},
            model={"hidden": [256, 256, 256, 256], "activation": "silu", "embed_dim": 32,
                   "embed_scale": 1.0, "scale_cap": 10.0, "seed": 8},
            train={"batch_size": 512, "accumulation": 1, "steps": 10000,
                   "lr": 1e-3, "optimizer": "adam", "seed": 12},
            constraint={
                "text": ESIRS_BRIDGING if bridging else ESIRS_INEQUALITY,
                "k": 1.0, "lambda": 1.0, "instances": 1,
            },
            schedule="snr",
            sampler={"predictor_steps": 500, "corrector_steps_per_t": 1, "snr": 0.16,
                     "langevin_steps": 2000 if bridging else 2500,
                     "langevin_snr": 0.16, "rng_seed": 22},
            oracle={"base": "simulator", "target": 50000, "budget": 80_000_000,
                    "seed": 32, "batch_size": 200000, "use_envelope": True,
                    "staged": True},
            count=5000 if bridging else 1000,
        )
    elif name in ("wine_complex", "wine_multi"):
        multi = name == "wine_multi"
        cfg = ExperimentConfig(
            name=name,
            dataset={"kind": "wine", "csv": None, "synthetic_rows": 4898, "seed": 303},
            diffusion={"kind": "ve", "sigma_min": 0.01, "sigma_max": 12.0,
                       "beta_min": 0.1, "beta_max": 20.0},
            model={"hidden": [128, 128, 128], "activation": "silu", "embed_dim": 32,
                   "embed_scale": 1.0, "scale_cap": 10.0, "seed": 9},
            train={"batch_size": 512, "accumulation": 1, "steps": 12000,
                   "lr": 1e-3, "optimizer": "adam", "seed": 13},
            constraint={
                "text": WINE_MULTI if multi else WINE_COMPLEX,
                "k": 50.0 if multi else 30.0, "lambda": 1.0,
                "instances": 2 if multi else 1,
            },
            schedule="snr",
            sampler={"predictor_steps": 300, "corrector_steps_per_t": 1, "snr": 0.16,
                     "langevin_steps": 4000 if multi else 2000,
                     "langevin_snr": 0.16, "rng_seed": 23},
            oracle={"base": "model", "target": 5000,
                    "budget": 60000 if multi else 400000,
                    "seed": 33, "batch_size": 20000 if multi else 50000,
                    "use_envelope": False},
            count=5000,
        )
    else:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg


# --- pipeline stages -----------------------------------------------------------


def build_dataset(cfg: ExperimentConfig, wine_csv=None):
    """Materialize the dataset named by the config. Returns (Dataset, extra)."""
    d = cfg.dataset
    if d["kind"] == "mixture_1d":
        values = mixture_1d_sample(d["n"], d["seed"])
        schema = TableSchema([Column("x", "real")])
        return Dataset(schema=schema, data={"x": values}), {}
    if d["kind"] == "esirs":
        params = ESIRSParams.from_dict(d["params"])
        traj = esirs_simulate(params, d["n"], d["seed"])
        return esirs_dataset(traj), {"params": params}
    if d["kind"] == "wine":
        path = wine_csv or d.get("csv")
        if path and os.path.exists(path):
            ds = ingest_csv(path, drop=("quality",))
            return ds, {"source": str(path)}
        ds = synthetic_wine_table(d["synthetic_rows"], d["seed"])
        return ds, {"source": "synthetic"}
    if d["kind"] == "csv":
        schema = None
        if d.get("schema"):
            from .data import load_schema

            schema = load_schema(d["schema"])
        ds = ingest_csv(d["path"], schema=schema, drop=tuple(d.get("drop", ())))
        return ds, {"source": d["path"]}
    raise ValueError(f"unknown dataset kind {d['kind']!r}")


def train_from_config(cfg: ExperimentConfig, dataset: Dataset, log_every=0):
    spec = DiffusionSpec.from_dict(cfg.diffusion)
    raw = raw_matrix(dataset)
    norm = Normalization.fit(raw, dataset.schema)
    encoded = norm.apply(raw)
    model = ScoreModel(
        dim=dataset.schema.width,
        spec=spec,
        hidden=tuple(cfg.model["hidden"]),
        activation=cfg.model["activation"],
        embed_dim=cfg.model["embed_dim"],
        embed_scale=cfg.model["embed_scale"],
        scale_cap=cfg.model["scale_cap"],
        seed=cfg.model["seed"],
    )
    tc = TrainConfig.from_dict(cfg.train)
    trace = train(model, spec, encoded, tc, log_every=log_every)
    return model, norm, trace


def compiled_constraint(cfg: ExperimentConfig, schema, norm):
    c = cfg.constraint
    return compile_constraint(
        c["text"], schema, k=c["k"], lam=c.get("lambda", 1.0),
        normalization=norm, instances=c.get("instances", 1),
    )


def run_oracle(cfg: ExperimentConfig, model, schema, norm, extra=None):
    cc = compiled_constraint(cfg, schema, norm)
    o = cfg.oracle
    instances = cfg.constraint.get("instances", 1)
    if o["base"] == "simulator":
        params = (extra or {}).get("params") or ESIRSParams.from_dict(cfg.dataset["params"])
        base = simulator_base_sampler(params, norm)
    else:
        base = model_base_sampler(model, SamplerConfig.from_dict(cfg.sampler), instances)
    job = RejectionJob(
        base_sampler=base,
        constraint=cc,
        target_count=o["target"],
        max_proposals=o["budget"],
        seed=o["seed"],
        batch_size=o.get("batch_size", 20000),
        use_envelope=o.get("use_envelope", False),
        staged=o.get("staged", False),
    )
    return rejection_sample(job)


def run_guidance(cfg: ExperimentConfig, model, schema, norm):
    cc = compiled_constraint(cfg, schema, norm)
    job = GuidedSampleJob(
        model=model,
        constraint=cc,
        schedule=GuidanceSchedule(cfg.schedule),
        config=SamplerConfig.from_dict(cfg.sampler),
        instances=cfg.constraint.get("instances", 1),
        count=cfg.count,
    )
    return constrained_sample(job)


# --- acceptance checks ------------------------------------------------------------


@dataclass
class CriterionCheck:
    name: str
    value: float
    threshold: str
    passed: bool
    required: bool = True  # informational checks never gate the run

    def line(self):
        flag = "PASS" if self.passed else ("FAIL" if self.required else "info")
        return f"[{flag}] {self.name}: {self.value:.4g} (target {self.threshold})"


@dataclass
class ExperimentResult:
    name: str
    config: dict
    checks: list = field(default_factory=list)
    report: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks if c.required)

    def summary_lines(self):
        return [c.line() for c in self.checks]


def _decoded(samples, schema, norm, instances=1):
    width = schema.width
    blocks = [
        decoded_matrix(samples[:, i * width : (i + 1) * width], schema, norm)
        for i in range(instances)
    ]
    return np.hstack(blocks)


def run_experiment(name, out_dir=None, wine_csv=None, overrides=None, log=print, shared=None):
    """Full train -> oracle -> guide -> evaluate pipeline for one preset.

    ``shared`` may carry {"model", "norm", "schema", "dataset", "extra"} from a
    previous run with identical dataset/model/train config (the two eSIRS
    experiments share one checkpoint). Returns ExperimentResult.
    """
    cfg = preset(name, **(overrides or {}))
    timings = {}
    t0 = time.time()

    if shared is not None:
        dataset, extra = shared["dataset"], shared["extra"]
        model, norm = shared["model"], shared["norm"]
    else:
        dataset, extra = build_dataset(cfg, wine_csv)
        log(f"[{name}] dataset ready: {dataset.n_rows} rows, width {dataset.schema.width}")
        t1 = time.time()
        model, norm, trace = train_from_config(cfg, dataset, log_every=2000 if log is print else 0)
        timings["train_s"] = time.time() - t1
        log(f"[{name}] trained in {timings['train_s']:.0f}s, final loss {np.mean(trace[-200:]):.4f}")
    schema = dataset.schema

    t1 = time.time()
    rs = run_oracle(cfg, model, schema, norm, extra)
    timings["oracle_s"] = time.time() - t1
    log(
        f"[{name}] oracle: {rs.accepted}/{rs.proposed} accepted "
        f"(rate {rs.acceptance_rate:.4g}, complete={rs.complete}) in {timings['oracle_s']:.0f}s"
    )

    t1 = time.time()
    guided, diags = run_guidance(cfg, model, schema, norm)
    timings["guide_s"] = time.time() - t1
    log(f"[{name}] guided {len(guided)} samples in {timings['guide_s']:.0f}s")

    instances = cfg.constraint.get("instances", 1)
    formula = parse(cfg.constraint["text"], schema=schema, instances=instances)
    report = build_report(
        guided,
        rs.samples,
        bins=cfg.bins,
        formula=formula,
        schema=schema,
        normalization=norm,
        instances=instances,
        rs_acceptance_rate=rs.acceptance_rate,
    )
    checks = _criteria(name, cfg, report, guided, rs, diags, schema, norm, extra)
    result = ExperimentResult(
        name=name,
        config=cfg.to_dict(),
        checks=checks,
        report=report.to_dict(),
        timings={**timings, "total_s": time.time() - t0},
    )
    if out_dir:
        _write_outputs(out_dir, cfg, result, guided, rs, diags, schema, norm)
    for line in result.summary_lines():
        log(f"[{name}] {line}")
    return result


def _criteria(name, cfg, report, guided, rs, diags, schema, norm, extra=None):
    checks = []
    synthetic_table = (extra or {}).get("source") == "synthetic"
    if name == "toy":
        checks.append(CriterionCheck("l1 histogram distance vs RS", report.l1_max, "<= 0.07",
                                     report.l1_max <= 0.07))
        checks.append(CriterionCheck("hard satisfaction", report.satisfaction_rate, ">= 0.98",
                                     report.satisfaction_rate >= 0.98))
        # analytic mixture CDF: mass of x >= 0 is ~0.5, soft-trimmed at the edge
        rate_ok = 0.40 <= rs.acceptance_rate <= 0.60
        checks.append(CriterionCheck("RS acceptance ~ p(x >= 0)", rs.acceptance_rate,
                                     "in [0.40, 0.60]", rate_ok))
    elif name == "esirs_bridging":
        orig = _decoded(guided, schema, norm)
        mad = np.mean([
            np.mean(np.abs(orig[:, schema.series_slot("S", 0)] - 95.0)),
            np.mean(np.abs(orig[:, schema.series_slot("I", 0)] - 5.0)),
            np.mean(np.abs(orig[:, schema.series_slot("S", 25)] - 30.0)),
        ])
        checks.append(CriterionCheck("mean abs deviation from bridging targets", mad, "<= 0.5",
                                     mad <= 0.5))
        checks.append(CriterionCheck("median per-time-step l1 vs simulator RS", report.l1_median,
                                     "<= 0.20", report.l1_median <= 0.20))
        cons = parse(ESIRS_CONSISTENCY, schema=schema)
        cons_rate = satisfaction_rate(cons, _decoded(guided, schema, norm), schema)
        checks.append(CriterionCheck("consistency hard satisfaction", cons_rate, ">= 0.99",
                                     cons_rate >= 0.99))
    elif name == "esirs_inequality":
        ineq = parse("forall t in 0..30: I[t] <= 20", schema=schema)
        rate = satisfaction_rate(ineq, _decoded(guided, schema, norm), schema)
        checks.append(CriterionCheck("inequality hard satisfaction", rate, ">= 0.95",
                                     rate >= 0.95))
    elif name == "wine_complex":
        # with the UCI table the numeric bands gate the run; on the synthetic
        # fallback table they are reported but only the property suites gate
        req = not synthetic_table
        checks.append(CriterionCheck("median marginal l1 vs RS", report.l1_median, "<= 0.15",
                                     report.l1_median <= 0.15, required=req))
        checks.append(CriterionCheck("max marginal l1 vs RS", report.l1_max, "<= 0.25",
                                     report.l1_max <= 0.25, required=req))
        sat_ok = 0.80 <= report.satisfaction_rate <= 0.95
        checks.append(CriterionCheck("hard satisfaction", report.satisfaction_rate,
                                     "in [0.80, 0.95]", sat_ok, required=req))
        rate_ok = 0.005 <= rs.acceptance_rate <= 0.04
        checks.append(CriterionCheck("RS acceptance rate", rs.acceptance_rate,
                                     "in [0.5%, 4%]", rate_ok, required=req))
        checks.append(CriterionCheck("oracle completed", float(rs.complete), "== 1",
                                     bool(rs.complete)))
    elif name == "wine_multi":
        checks.append(CriterionCheck("hard satisfaction", report.satisfaction_rate, ">= 0.95",
                                     report.satisfaction_rate >= 0.95))
        per_instance = np.array(report.l1_distances).reshape(2, -1).mean(axis=1)
        worst = float(per_instance.max())
        checks.append(CriterionCheck("per-instance average marginal l1", worst, "<= 0.10",
                                     worst <= 0.10))
    return checks


def _write_outputs(out_dir, cfg, result, guided, rs, diags, schema, norm):
    import csv as _csv

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
    with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "experiment": result.name,
                "passed": result.passed,
                "checks": [c.__dict__ for c in result.checks],
                "report": result.report,
                "timings": result.timings,
            },
            fh,
            indent=2,
        )
    instances = cfg.constraint.get("instances", 1)
    _write_sample_csv(os.path.join(out_dir, "guided_samples.csv"), guided, schema, norm, instances)
    _write_sample_csv(os.path.join(out_dir, "oracle_samples.csv"), rs.samples, schema, norm, instances)
    if len(rs.samples):
        from .metrics import write_histogram_csv

        hist_dir = os.path.join(out_dir, "histograms")
        os.makedirs(hist_dir, exist_ok=True)
        names = schema.slot_names()
        if instances > 1:
            names = [f"{n}_{i+1}" for i in range(instances) for n in names]
        for j, slot in enumerate(names):
            safe = "".join(ch if ch.isalnum() else "_" for ch in slot)
            write_histogram_csv(
                os.path.join(hist_dir, f"{j:03d}_{safe}.csv"),
                guided[:, j],
                rs.samples[:, j],
                bins=cfg.bins,
                labels=("guided", "oracle"),
            )
    with open(os.path.join(out_dir, "diagnostics.csv"), "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(["log_weight", "hard_satisfied"])
        for lw, ok in zip(diags.log_weights, diags.hard_satisfied):
            w.writerow([lw, int(ok)])


def _write_sample_csv(path, samples, schema, norm, instances=1):
    import csv as _csv

    orig = _decoded(np.atleast_2d(samples), schema, norm, instances) if len(samples) else np.empty((0, schema.width * instances))
    names = schema.slot_names()
    if instances > 1:
        names = [f"{n}_{i+1}" for i in range(instances) for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(names)
        for row in orig:
            w.writerow([f"{v:.10g}" for v in row])


def train_and_checkpoint(name, out_path, wine_csv=None, overrides=None, log=print):
    """Train a preset's model and persist it; returns the shared bundle."""
    cfg = preset(name, **(overrides or {}))
    dataset, extra = build_dataset(cfg, wine_csv)
    model, norm, trace = train_from_config(cfg, dataset, log_every=2000 if log is print else 0)
    if out_path:
        save_checkpoint(out_path, model, norm, dataset.schema,
                        TrainConfig.from_dict(cfg.train), extra={"experiment": name})
    return {"model": model, "norm": norm, "schema": dataset.schema,
            "dataset": dataset, "extra": extra, "trace": trace, "config": cfg}
