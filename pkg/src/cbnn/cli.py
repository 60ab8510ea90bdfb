"""Benchmark command line.

Subcommands:

    bench generate  --config cfg.json
    bench train     --model {bnn|bcpnn} --config cfg.json --out ckpt.json
    bench evaluate  --ckpt ckpt.json --data data.csv --out outdir [--config cfg.json]
    bench decompose --ckpt ckpt.json --data data.csv --out outdir [--config cfg.json]

Exit codes: 0 success, 1 user/config error, 2 numerical failure.
All outputs are UTF-8 CSV/JSON; identical seeds give byte-identical
files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from . import objective, synthdata, uncertainty
from .errors import CbnnError, ConditioningError, ConfigError, TrainingError
from .model import NetworkArchitecture, init_variational


# ---------------------------------------------------------------- config

_EVAL_DEFAULTS = {
    "n_samples": 10000,
    "seed": 0,
    "level": 0.95,
    "violation_points": 500,
    "max_violation_rows": 50000,
    "chunk": 64,
}


def _section(cfg: dict, name: str, required: bool = True) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing config section '{name}'")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return sec


def _get(sec: dict, section: str, key: str, cast, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"missing config key '{section}.{key}'")
        return default
    try:
        return cast(sec[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for config key '{section}.{key}': {exc}") from exc


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def surrogate_spec_from_config(cfg: dict) -> synthdata.SurrogateSpec:
    data = _section(cfg, "data")
    try:
        return synthdata.SurrogateSpec(
            currents=tuple(data.get("currents", synthdata.DEFAULT_CURRENTS)),
            temperatures=tuple(data.get("temperatures", synthdata.DEFAULT_TEMPERATURES)),
            soc_points=_get(data, "data", "soc_points", int, 500),
            voltage_noise=_get(data, "data", "voltage_noise", float, 0.003),
            thermal_noise=_get(data, "data", "thermal_noise", float, 0.04),
            seed=_get(data, "data", "seed", int, _get(cfg, "", "seed", int, 0)),
        )
    except CbnnError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'data' section: {exc}") from exc


def data_paths_from_config(cfg: dict):
    data = _section(cfg, "data")
    csv_path = _get(data, "data", "csv", str, required=True)
    meta_path = _get(data, "data", "meta", str, default=_default_meta_path(csv_path))
    return csv_path, meta_path


def _default_meta_path(csv_path: str) -> str:
    stem, _ = os.path.splitext(csv_path)
    return stem + ".json"


def arch_from_config(cfg: dict) -> NetworkArchitecture:
    sec = _section(cfg, "model", required=False)
    return NetworkArchitecture(
        input_dim=3,
        output_dim=8,
        hidden_layers=tuple(sec.get("hidden_layers", [64, 64])),
        activation=_get(sec, "model", "activation", str, "tanh"),
    )


def train_config_from_config(cfg: dict) -> objective.TrainConfig:
    sec = _section(cfg, "train", required=False)
    return objective.TrainConfig(
        epochs=_get(sec, "train", "epochs", int, 100),
        batch_size=_get(sec, "train", "batch_size", int, 256),
        learning_rate=_get(sec, "train", "learning_rate", float, 1e-3),
        mc_samples_per_step=_get(sec, "train", "mc_samples_per_step", int, 4),
        seed=_get(sec, "train", "seed", int, _get(cfg, "", "seed", int, 0)),
        kl_scaling=_get(sec, "train", "kl_scaling", str, "full"),
        grad_clip=_get(sec, "train", "grad_clip", float, 10.0),
        tolerance_lr_scale=_get(sec, "train", "tolerance_lr_scale", float, 10.0),
    )


def eval_config_from_config(cfg: dict | None) -> dict:
    out = dict(_EVAL_DEFAULTS)
    if cfg is not None:
        sec = _section(cfg, "eval", required=False)
        for key in out:
            out[key] = _get(sec, "eval", key, type(out[key]), out[key])
    return out


def priors_from_config(cfg: dict):
    sec = _section(cfg, "priors", required=False)
    return (
        _get(sec, "priors", "rho_mean", float, -2.0),
        _get(sec, "priors", "rho_var", float, 1.0),
    )


# ------------------------------------------------------------- commands

def cmd_generate(config_path: str) -> int:
    cfg = load_config(config_path)
    spec = surrogate_spec_from_config(cfg)
    csv_path, meta_path = data_paths_from_config(cfg)
    ds = synthdata.generate(spec)
    for p in (csv_path, meta_path):
        d = os.path.dirname(p)
        if d:
            os.makedirs(d, exist_ok=True)
    ds.to_files(csv_path, meta_path)
    print(f"wrote {ds.x.shape[0]} records to {csv_path}")
    return 0


def cmd_train(config_path: str, kind: str, out_path: str) -> int:
    cfg = load_config(config_path)
    csv_path, meta_path = data_paths_from_config(cfg)
    ds = synthdata.Dataset.from_files(csv_path, meta_path)
    cs = ds.constraints_normalized()
    arch = arch_from_config(cfg)
    tcfg = train_config_from_config(cfg)
    rho_mean, rho_var = priors_from_config(cfg)

    vs = init_variational(
        arch,
        seed=tcfg.seed,
        n_constraints=cs.m if kind == "bcpnn" else 0,
        rho_prior_mean=rho_mean,
        rho_prior_var=rho_var,
    )
    Xtr, Ytr = ds.normalized("train")
    try:
        vs, trace = objective.train(
            vs, (Xtr, Ytr), cs if kind == "bcpnn" else None, tcfg
        )
    except TrainingError as exc:
        # keep the last finite state so the run is not a total loss
        if exc.last_state is not None:
            ckpt_io.save_checkpoint(
                out_path, kind, exc.last_state, cs, ds.stats, tcfg.seed, tcfg.to_dict()
            )
            objective.write_trace_csv(exc.trace, _trace_path(out_path))
        raise
    d = os.path.dirname(out_path)
    if d:
        os.makedirs(d, exist_ok=True)
    ckpt_io.save_checkpoint(out_path, kind, vs, cs, ds.stats, tcfg.seed, tcfg.to_dict())
    objective.write_trace_csv(trace, _trace_path(out_path))
    print(
        f"trained {kind}: elbo {trace[0].total:.4g} -> {trace[-1].total:.4g} "
        f"over {len(trace)} epochs"
    )
    return 0


def _trace_path(out_path: str) -> str:
    stem, _ = os.path.splitext(out_path)
    return stem + ".trace.csv"


def _tolerance_summary(state) -> list:
    """Lognormal posterior summaries per constraint from q(rho)."""
    rows = []
    mu = state.rho_mean.detach()
    var = F.softplus(state.rho_raw.detach())
    for j in range(state.m):
        m_j = float(mu[j])
        s2 = float(var[j])
        e_r = math.exp(m_j + s2 / 2.0)
        rows.append(
            {
                "constraint": j,
                "mu_rho": m_j,
                "sigma_rho": math.sqrt(s2),
                "mean_r": e_r,
                "std_r": e_r * math.sqrt(math.expm1(s2)),
            }
        )
    return rows


def run_evaluation(kind, state, cs, ds: synthdata.Dataset, eval_cfg: dict):
    """Shared metric computation for evaluate/decompose. Returns
    (report dict, BatchPredictive, normalized test targets)."""
    Xte, Yte = ds.normalized("test")
    bp = uncertainty.evaluate_batch(
        state,
        cs if kind == "bcpnn" else None,
        Xte,
        n_samples=eval_cfg["n_samples"],
        seed=eval_cfg["seed"],
        violation_cs=cs,
        violation_points=eval_cfg["violation_points"],
        chunk=eval_cfg["chunk"],
    )
    Yte_t = torch.as_tensor(Yte, dtype=torch.float64)
    level = eval_cfg["level"]
    z = uncertainty.interval_z(level)

    mse_per_output = ((bp.pooled_mean - Yte_t) ** 2).mean(dim=0)
    width = 2.0 * z * torch.sqrt(bp.pooled_var)
    half = width / 2.0
    covered = (Yte_t >= bp.pooled_mean - half) & (Yte_t <= bp.pooled_mean + half)
    cw_per_output = width.mean(dim=0)
    coverage_per_output = covered.to(torch.float64).mean(dim=0)

    def _spread(v: torch.Tensor) -> dict:
        return {
            "mean": float(v.mean()),
            "ci95_half_width": float(1.96 * v.std(unbiased=True)),
        }

    viol_samples = bp.violation_samples  # (draws, points, m)
    medians = viol_samples.reshape(-1, cs.m).median(dim=0).values

    report = {
        "model": kind,
        "n_test": int(Xte.shape[0]),
        "n_samples": eval_cfg["n_samples"],
        "level": level,
        "space": "normalized",
        "mse": _spread(mse_per_output),
        "credible_width": _spread(cw_per_output),
        "coverage_ratio": float(covered.to(torch.float64).mean()),
        "aleatoric": _spread(bp.aleatoric.mean(dim=0)),
        "epistemic": _spread(bp.epistemic.mean(dim=0)),
        "per_output": {
            name: {
                "mse": float(mse_per_output[i]),
                "credible_width": float(cw_per_output[i]),
                "coverage": float(coverage_per_output[i]),
            }
            for i, name in enumerate(synthdata.OUTPUT_NAMES)
        },
        "violation": {
            "units": "normalized, unit-norm constraint rows",
            "per_constraint": [
                {
                    "constraint": j,
                    "mean": float(bp.violation_mean[j]),
                    "std": float(bp.violation_std[j]),
                    "median": float(medians[j]),
                }
                for j in range(cs.m)
            ],
            "aggregate_mean": float(bp.violation_mean.sum()),
        },
    }
    if kind == "bcpnn":
        report["tolerance_posterior"] = _tolerance_summary(state)
    return report, bp, Yte_t


def _fd_bins(samples: np.ndarray) -> np.ndarray:
    """Freedman-Diaconis bin edges; falls back to 50 bins for
    degenerate interquartile range."""
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = q75 - q25
    lo, hi = samples.min(), samples.max()
    if iqr <= 0 or hi <= lo:
        return np.linspace(lo, hi if hi > lo else lo + 1e-12, 51)
    width = 2.0 * iqr * len(samples) ** (-1.0 / 3.0)
    n_bins = max(1, min(500, int(math.ceil((hi - lo) / width))))
    return np.linspace(lo, hi, n_bins + 1)


def _write_violation_files(bp, m: int, out_dir: str, max_rows: int):
    samples = bp.violation_samples.numpy()  # (draws, points, m)
    draws, points, _ = samples.shape
    flat = samples.reshape(-1, m)

    stride = max(1, math.ceil(flat.shape[0] / max_rows))
    with open(os.path.join(out_dir, "violations_samples.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "point", "constraint", "violation"])
        for row in range(0, flat.shape[0], stride):
            d, p = divmod(row, points)
            pt = int(bp.violation_sample_idx[p])
            for j in range(m):
                w.writerow([d, pt, j, repr(float(flat[row, j]))])

    with open(os.path.join(out_dir, "violations_hist.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["constraint", "bin_left", "bin_right", "count"])
        for j in range(m):
            edges = _fd_bins(flat[:, j])
            counts, edges = np.histogram(flat[:, j], bins=edges)
            for k, c in enumerate(counts):
                w.writerow([j, repr(float(edges[k])), repr(float(edges[k + 1])), int(c)])


def cmd_evaluate(ckpt_path: str, data_path: str, out_dir: str, config_path: str | None) -> int:
    ck = ckpt_io.load_checkpoint(ckpt_path)
    ds = synthdata.Dataset.from_files(data_path, _default_meta_path(data_path))
    if not ckpt_io.stats_compatible(ck["stats"], ds.stats):
        raise ConfigError("checkpoint normalization statistics do not match the dataset")
    eval_cfg = eval_config_from_config(load_config(config_path) if config_path else None)

    report, bp, _ = run_evaluation(ck["kind"], ck["state"], ck["constraints"], ds, eval_cfg)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "metrics_per_output.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["output", "mse", "credible_width", "coverage"])
        for name, row in report["per_output"].items():
            w.writerow([name, repr(row["mse"]), repr(row["credible_width"]), repr(row["coverage"])])
    _write_violation_files(bp, ck["constraints"].m, out_dir, eval_cfg["max_violation_rows"])
    print(f"wrote evaluation report to {out_dir}")
    return 0


def cmd_decompose(ckpt_path: str, data_path: str, out_dir: str, config_path: str | None) -> int:
    ck = ckpt_io.load_checkpoint(ckpt_path)
    ds = synthdata.Dataset.from_files(data_path, _default_meta_path(data_path))
    if not ckpt_io.stats_compatible(ck["stats"], ds.stats):
        raise ConfigError("checkpoint normalization statistics do not match the dataset")
    eval_cfg = eval_config_from_config(load_config(config_path) if config_path else None)

    _, bp, _ = run_evaluation(ck["kind"], ck["state"], ck["constraints"], ds, eval_cfg)
    terms = {
        "aleatoric": bp.aleatoric,
        "constraint_reduction": bp.constraint_reduction,
        "epistemic": bp.epistemic,
        "tolerance_uncertainty": bp.tolerance_uncertainty,
        "interaction": bp.interaction,
        "total": bp.pooled_var,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "decomposition.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["output"] + list(terms))
        means = {k: v.mean(dim=0) for k, v in terms.items()}
        for i, name in enumerate(synthdata.OUTPUT_NAMES):
            w.writerow([name] + [repr(float(means[k][i])) for k in terms])
    print(f"wrote decomposition to {out_dir}")
    return 0


# ----------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate the surrogate dataset")
    g.add_argument("--config", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", required=True, choices=["bnn", "bcpnn"])
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")

    d = sub.add_parser("decompose", help="export the variance decomposition")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "generate":
            return cmd_generate(args.config)
        if args.command == "train":
            return cmd_train(args.config, args.model, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(args.ckpt, args.data, args.out, args.config)
        if args.command == "decompose":
            return cmd_decompose(args.ckpt, args.data, args.out, args.config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, ConditioningError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except CbnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
