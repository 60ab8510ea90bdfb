"""Analytic battery-like surrogate dataset.

Stands in for an electrochemical single-particle simulator: smooth
nonlinear maps from (current, state of charge, temperature) to eight
outputs whose noiseless values satisfy two linear identities exactly --
a voltage balance

    V = V_ocv - eta_p - eta_n - dV_ir

and an energy balance

    Q_tot = Q_rev + Q_irr.

Handles heteroscedastic noise injection, train/val/test splitting,
normalization, and the mapping of the constraint system into normalized
coordinates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConstraintSystem
from .errors import ContractError

INPUT_NAMES = ["I", "SOC", "T"]
OUTPUT_NAMES = ["V", "V_ocv", "eta_p", "eta_n", "dV_ir", "Q_tot", "Q_rev", "Q_irr"]
VOLTAGE_OUTPUTS = ["V", "V_ocv", "eta_p", "eta_n", "dV_ir"]
THERMAL_OUTPUTS = ["Q_tot", "Q_rev", "Q_irr"]

DEFAULT_CURRENTS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
DEFAULT_TEMPERATURES = (273.0, 283.0, 293.0, 298.0, 303.0, 313.0, 318.0)
SOC_RANGE = (0.05, 0.95)

SURROGATE_VERSION = "cbnn-surrogate-1"


@dataclass(frozen=True)
class SurrogateSpec:
    """Grid and noise configuration for one generated dataset."""

    currents: tuple = DEFAULT_CURRENTS
    temperatures: tuple = DEFAULT_TEMPERATURES
    soc_points: int = 500
    voltage_noise: float = 0.003
    thermal_noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "currents", tuple(float(c) for c in self.currents))
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if self.soc_points < 2:
            raise ContractError("need at least two SOC points")
        if self.voltage_noise <= 0 or self.thermal_noise <= 0:
            raise ContractError("noise scales must be positive")

    @property
    def n_records(self) -> int:
        return len(self.currents) * len(self.temperatures) * self.soc_points

    @property
    def noise_sigma(self) -> np.ndarray:
        """Per-output noise standard deviation, in OUTPUT_NAMES order."""
        return np.array(
            [
                self.voltage_noise if name in VOLTAGE_OUTPUTS else self.thermal_noise
                for name in OUTPUT_NAMES
            ]
        )

    def to_dict(self) -> dict:
        return {
            "currents": list(self.currents),
            "temperatures": list(self.temperatures),
            "soc_points": self.soc_points,
            "voltage_noise": self.voltage_noise,
            "thermal_noise": self.thermal_noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateSpec":
        return cls(
            currents=tuple(d.get("currents", DEFAULT_CURRENTS)),
            temperatures=tuple(d.get("temperatures", DEFAULT_TEMPERATURES)),
            soc_points=int(d.get("soc_points", 500)),
            voltage_noise=float(d.get("voltage_noise", 0.003)),
            thermal_noise=float(d.get("thermal_noise", 0.04)),
            seed=int(d.get("seed", 0)),
        )


def surrogate_truth(I, SOC, T) -> np.ndarray:
    """Noiseless outputs for in-range inputs; vectorized over leading
    dimensions. Output order follows OUTPUT_NAMES.

    Both balance identities hold to machine precision by construction,
    and all current-driven terms vanish at I = 0.
    """
    I = np.asarray(I, dtype=float)
    SOC = np.asarray(SOC, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(SOC < SOC_RANGE[0] - 1e-12) or np.any(SOC > SOC_RANGE[1] + 1e-12):
        raise ContractError("SOC outside supported range")
    if np.any(I < 0) or np.any(I > 5.0):
        raise ContractError("current outside supported range")
    if np.any(T < 250.0) or np.any(T > 340.0):
        raise ContractError("temperature outside supported range")

    cold = (298.0 - T) / 298.0
    v_ocv = 3.2 + 0.6 * SOC + 0.25 * np.tanh(6.0 * (SOC - 0.5))
    eta_p = 0.03 * I * (1.0 + 2.0 * cold) * (1.1 - 0.2 * SOC)
    eta_n = 0.02 * I * (1.0 + 2.0 * cold) * (0.9 + 0.2 * SOC)
    dv_ir = 0.015 * I * (1.0 + (298.0 - T) / 150.0)
    q_rev = 120.0 * I * (SOC - 0.45)
    q_irr = 3000.0 * I * (eta_p + eta_n + dv_ir)
    v = v_ocv - eta_p - eta_n - dv_ir
    q_tot = q_rev + q_irr
    return np.stack(
        [v, v_ocv, eta_p, eta_n, dv_ir, q_tot, q_rev, q_irr], axis=-1
    )


@dataclass
class NormStats:
    """Per-variable affine normalization statistics from the training
    split (population standard deviation)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def __post_init__(self):
        for std in (self.x_std, self.y_std):
            if np.any(np.asarray(std) <= 0):
                raise ContractError("zero/negative standard deviation in normalization stats")

    def to_dict(self) -> dict:
        return {
            "x_mean": [float(v) for v in self.x_mean],
            "x_std": [float(v) for v in self.x_std],
            "y_mean": [float(v) for v in self.y_mean],
            "y_std": [float(v) for v in self.y_std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            x_mean=np.array(d["x_mean"]),
            x_std=np.array(d["x_std"]),
            y_mean=np.array(d["y_mean"]),
            y_std=np.array(d["y_std"]),
        )


def normalize(values, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ContractError("zero/negative standard deviation")
    return (np.asarray(values, dtype=float) - mean) / std


def denormalize(values, mean, std) -> np.ndarray:
    return np.asarray(values, dtype=float) * np.asarray(std, dtype=float) + np.asarray(
        mean, dtype=float
    )


def physical_constraints() -> ConstraintSystem:
    """The two balance identities as A x + B y = b in physical units."""
    A = np.zeros((2, 3))
    B = np.zeros((2, 8))
    b = np.zeros(2)
    # V - V_ocv + eta_p + eta_n + dV_ir = 0
    B[0, OUTPUT_NAMES.index("V")] = 1.0
    B[0, OUTPUT_NAMES.index("V_ocv")] = -1.0
    B[0, OUTPUT_NAMES.index("eta_p")] = 1.0
    B[0, OUTPUT_NAMES.index("eta_n")] = 1.0
    B[0, OUTPUT_NAMES.index("dV_ir")] = 1.0
    # Q_tot - Q_rev - Q_irr = 0
    B[1, OUTPUT_NAMES.index("Q_tot")] = 1.0
    B[1, OUTPUT_NAMES.index("Q_rev")] = -1.0
    B[1, OUTPUT_NAMES.index("Q_irr")] = -1.0
    return ConstraintSystem(A=A, B=B, b=b)


def normalized_constraints(stats: NormStats, cs: ConstraintSystem | None = None) -> ConstraintSystem:
    """Map a physical-space constraint system into normalized
    coordinates and rescale each row to unit Euclidean norm so the
    learned tolerances are comparable across constraints.

    With x = sx * x' + mx and y = sy * y' + my, the residual
    A x + B y - b becomes A' x' + B' y' - b' with A' = A diag(sx),
    B' = B diag(sy), b' = b - A mx - B my (then row-rescaled)."""
    if cs is None:
        cs = physical_constraints()
    A = cs.A.numpy()
    B = cs.B.numpy()
    b = cs.b.numpy()
    A2 = A * stats.x_std
    B2 = B * stats.y_std
    b2 = b - A @ stats.x_mean - B @ stats.y_mean
    row_norm = np.sqrt((A2**2).sum(axis=1) + (B2**2).sum(axis=1))
    return ConstraintSystem(
        A=A2 / row_norm[:, None], B=B2 / row_norm[:, None], b=b2 / row_norm
    )


@dataclass
class Dataset:
    """Generated records plus everything needed to train and evaluate:
    raw inputs, noisy and noiseless outputs, split labels, normalization
    statistics, and provenance (spec)."""

    spec: SurrogateSpec
    x: np.ndarray
    y_noisy: np.ndarray
    y_true: np.ndarray
    split: np.ndarray
    stats: NormStats = field(init=False)

    def __post_init__(self):
        tr = self.split == "train"
        self.stats = NormStats(
            x_mean=self.x[tr].mean(axis=0),
            x_std=self.x[tr].std(axis=0),
            y_mean=self.y_noisy[tr].mean(axis=0),
            y_std=self.y_noisy[tr].std(axis=0),
        )

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def normalized(self, split: str, noisy: bool = True):
        """(x_norm, y_norm) arrays for one split."""
        idx = self.indices(split)
        y = self.y_noisy if noisy else self.y_true
        return (
            normalize(self.x[idx], self.stats.x_mean, self.stats.x_std),
            normalize(y[idx], self.stats.y_mean, self.stats.y_std),
        )

    def constraints_normalized(self) -> ConstraintSystem:
        return normalized_constraints(self.stats)

    def to_files(self, csv_path, json_path):
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(INPUT_NAMES + OUTPUT_NAMES + ["split"])
            for xi, yi, si in zip(self.x, self.y_noisy, self.split):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi] + [si])
        meta = {
            "spec": self.spec.to_dict(),
            "stats": self.stats.to_dict(),
            "noise_sigma": {
                name: float(sigma)
                for name, sigma in zip(OUTPUT_NAMES, self.spec.noise_sigma)
            },
            "surrogate_version": SURROGATE_VERSION,
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_files(cls, csv_path, json_path) -> "Dataset":
        with open(json_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        spec = SurrogateSpec.from_dict(meta["spec"])
        xs, ys, splits = [], [], []
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != INPUT_NAMES + OUTPUT_NAMES + ["split"]:
                raise ContractError(f"unexpected dataset header: {header}")
            for row in reader:
                xs.append([float(v) for v in row[:3]])
                ys.append([float(v) for v in row[3:11]])
                splits.append(row[11])
        x = np.array(xs)
        y_noisy = np.array(ys)
        # ground truth is a deterministic function of the inputs
        y_true = surrogate_truth(x[:, 0], x[:, 1], x[:, 2])
        ds = cls(
            spec=spec,
            x=x,
            y_noisy=y_noisy,
            y_true=y_true,
            split=np.array(splits),
        )
        stored = NormStats.from_dict(meta["stats"])
        if not (
            np.allclose(stored.x_mean, ds.stats.x_mean)
            and np.allclose(stored.y_mean, ds.stats.y_mean)
        ):
            raise ContractError("stored normalization stats disagree with records")
        ds.stats = stored
        return ds


def generate(spec: SurrogateSpec) -> Dataset:
    """Generate the full grid dataset with seeded heteroscedastic noise
    and a 60/20/20 record-level split.

    Noise streams are derived per grid combination from (seed, combo
    index), so the output is independent of evaluation order."""
    soc = np.linspace(SOC_RANGE[0], SOC_RANGE[1], spec.soc_points)
    sigma = spec.noise_sigma

    xs, ys_true, ys_noisy = [], [], []
    combo = 0
    for I in spec.currents:
        for T in spec.temperatures:
            x = np.column_stack(
                [np.full_like(soc, I), soc, np.full_like(soc, T)]
            )
            y = surrogate_truth(x[:, 0], x[:, 1], x[:, 2])
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, combo]))
            noise = rng.standard_normal(y.shape) * sigma
            xs.append(x)
            ys_true.append(y)
            ys_noisy.append(y + noise)
            combo += 1

    x = np.concatenate(xs)
    y_true = np.concatenate(ys_true)
    y_noisy = np.concatenate(ys_noisy)
    n = x.shape[0]

    split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 10**9]))
    order = split_rng.permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_val]] = "val"
    split[order[n_train + n_val :]] = "test"

    return Dataset(spec=spec, x=x, y_noisy=y_noisy, y_true=y_true, split=split.astype(str))
