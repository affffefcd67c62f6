"""Likelihood estimates, corruption sweeps, outlier ROC, PSNR and gradient-ratio tracking."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .diffcore import ContractViolation

NOISE_KINDS = ("salt-pepper", "gaussian")
DEFAULT_LEVELS = (0.10, 0.25, 0.40)


@dataclass
class EvalReport:
    """Per-image rows plus aggregates of one numeric column, with a config echo."""

    rows: list = field(default_factory=list)
    value_key: str = "value"
    config: dict = field(default_factory=dict)
    group_key: str | None = None

    def aggregates(self) -> dict:
        def stats(vals):
            v = np.asarray(vals, dtype=np.float64)
            return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
                    "std": float(v.std())}

        if not self.rows:
            return {}
        if self.group_key is None:
            return {"all": stats([r[self.value_key] for r in self.rows])}
        groups: dict = {}
        for r in self.rows:
            groups.setdefault(r[self.group_key], []).append(r[self.value_key])
        return {str(k): stats(v) for k, v in groups.items()}

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path = stem.with_suffix(".csv")
        json_path = stem.with_suffix(".json")
        fields = list(self.rows[0]) if self.rows else [self.value_key]
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            wr.writeheader()
            for r in self.rows:
                wr.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
        json_path.write_text(json.dumps({"config": self.config, "aggregates": self.aggregates()},
                                        indent=2, sort_keys=True))
        return csv_path, json_path


# -- likelihood ----------------------------------------------------------------

def log_mean_exp(logw, axis: int = 0) -> np.ndarray:
    """log(mean(exp(logw))) with the max shift; safe for weights near e^{+-700}."""
    logw = np.asarray(logw, dtype=np.float64)
    return logsumexp(logw, axis=axis) - math.log(logw.shape[axis])


def iw_loglik(model, x, k: int = 50, rng: np.random.Generator | None = None, x_input=None,
              log_weights: np.ndarray | None = None) -> np.ndarray:
    """Importance-weighted log-likelihood estimate per image, shape (B,).

    ``x_input`` (default ``x``) is what the encoder sees; the likelihood always
    scores ``x``.  Precomputed ``log_weights`` (K, B) bypass the model.
    """
    if k < 1:
        raise ContractViolation(f"K must be at least 1, got {k}")
    if log_weights is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        log_weights = model.log_weights(x, k, rng, x_input=x_input)
    return log_mean_exp(log_weights[:k], axis=0)


def bits_per_dim(loglik, dimensions: int):
    if dimensions <= 0:
        raise ContractViolation("dimensions must be positive")
    return -np.asarray(loglik, dtype=np.float64) / (dimensions * math.log(2.0)) if np.ndim(loglik) \
        else -float(loglik) / (dimensions * math.log(2.0))


# -- corruption ----------------------------------------------------------------

def corrupt(image, kind: str, level: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Salt-and-pepper (fair-coin 0/1 replacement) or clamped additive Gaussian noise.

    For ``gaussian`` the level is the noise standard deviation.
    """
    x = np.asarray(image, dtype=np.float64)
    if not 0.0 <= level <= 1.0:
        raise ContractViolation(f"noise level must lie in [0, 1], got {level}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "salt-pepper":
        hit = rng.random(x.shape) < level
        coin = rng.random(x.shape) < 0.5
        return np.where(hit, coin.astype(np.float64), x)
    if kind == "gaussian":
        return np.clip(x + level * rng.standard_normal(x.shape), 0.0, 1.0)
    raise ContractViolation(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


def denoise_sweep(model, data, kind: str, levels=DEFAULT_LEVELS, k: int = 50, seed: int = 0,
                  split: str = "test") -> EvalReport:
    """Denoising NLL of clean images given corrupted encoder input, per level.

    ``nll`` is -log mean_k p(x | z_k) with z_k ~ q(z | corrupted x), the
    predictive likelihood of the clean target.  ``marginal_nll`` is the usual
    IW bound on -log p(x) computed with the corrupted-input proposal; its
    target does not depend on the noise, so only ``nll`` carries the trend.
    """
    x = np.asarray(data, dtype=np.float64)
    if len(x) == 0:
        raise ContractViolation("empty evaluation split")
    rows = []
    for level in sorted(float(v) for v in levels):
        rng = np.random.default_rng(seed)
        noisy = corrupt(x, kind, level, rng)
        cond = log_mean_exp(model.log_conditionals(x, k, rng, x_input=noisy), axis=0)
        marg = iw_loglik(model, x, k, rng=rng, x_input=noisy)
        rows.extend({"split": split, "kind": kind, "level": level, "index": i, "nll": float(-c),
                     "marginal_nll": float(-m)} for i, (c, m) in enumerate(zip(cond, marg)))
    return EvalReport(rows, "nll", {"seed": seed, "K": k, "kind": kind, "levels": list(levels),
                                    "nll": "-log mean_k p(x | z_k), z_k ~ q(z | corrupted x)"},
                      group_key="level")


# -- images ----------------------------------------------------------------------

@dataclass(frozen=True)
class Psnr:
    db: float
    infinite: bool = False

    def __float__(self) -> float:
        return self.db


def psnr(reconstruction, target) -> Psnr:
    """10 log10(1 / MSE) for images in [0, 1]; MSE = 0 gives a flagged +inf."""
    r = np.asarray(reconstruction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ContractViolation(f"shape mismatch: {r.shape} vs {t.shape}")
    mse = float(((r - t) ** 2).mean())
    if mse == 0.0:
        return Psnr(math.inf, True)
    return Psnr(10.0 * math.log10(1.0 / mse))


# -- outlier ROC -------------------------------------------------------------------

@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["fpr", "tpr"])
            for f, t in zip(self.fpr, self.tpr):
                wr.writerow([repr(float(f)), repr(float(t))])


def roc_curve(inlier_scores, outlier_scores) -> RocResult:
    """ROC of the rule "score above threshold means outlier", swept over every score."""
    s_in = np.asarray(inlier_scores, dtype=np.float64).ravel()
    s_out = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ContractViolation("both inlier and outlier sets must be non-empty")
    thresholds = np.unique(np.concatenate([s_in, s_out]))[::-1]
    # counts of scores >= each threshold, ties handled by grouping equal scores
    tp = np.searchsorted(np.sort(-s_out), -thresholds, side="right")
    fp = np.searchsorted(np.sort(-s_in), -thresholds, side="right")
    tpr = np.concatenate([[0.0], tp / s_out.size])
    fpr = np.concatenate([[0.0], fp / s_in.size])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, auc)


def reconstruction_mse(model, data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    x = x.reshape(len(x), -1)
    return ((model.reconstruct(x) - x) ** 2).mean(axis=1)


def roc_outlier(model, inliers, outliers) -> RocResult:
    """ROC/AUC of reconstruction MSE as an outlier score."""
    if len(inliers) == 0 or len(outliers) == 0:
        raise ContractViolation("both inlier and outlier sets must be non-empty")
    return roc_curve(reconstruction_mse(model, inliers), reconstruction_mse(model, outliers))


# -- gradient ratios ---------------------------------------------------------------

def grad_ratio_track(records) -> list[dict]:
    """Per (epoch, layer) ratio of mean input-gradient norm to mean output-gradient norm.

    ``records`` are dicts with ``epoch``, ``layer``, ``pooling``, ``grad_in`` and
    ``grad_out``.  A zero denominator yields ``ratio=None`` with ``flag`` set.
    """
    acc: dict = {}
    for r in records:
        key = (r["epoch"], r["layer"])
        a = acc.setdefault(key, {"pooling": bool(r["pooling"]), "gin": 0.0, "gout": 0.0, "n": 0})
        a["gin"] += r["grad_in"]
        a["gout"] += r["grad_out"]
        a["n"] += 1
    out = []
    for (epoch, layer), a in acc.items():
        if a["gout"] == 0.0:
            ratio, flag = None, "zero_denominator"
        else:
            ratio, flag = a["gin"] / a["gout"], ""
        out.append({"epoch": epoch, "layer": layer, "pooling": a["pooling"], "ratio": ratio, "flag": flag})
    out.sort(key=lambda row: (row["epoch"], row["layer"]))
    return out
