"""Geodesic interpolation with endpoint-constrained cubic curves in latent space.

A curve ``g(s) = a s^3 + b s^2 + c s + d`` with ``c = z2 - z1 - a - b`` and
``d = z1`` is decoded through ``G = D(g(s))``; derivatives of ``G`` come from
central differences.  Three losses act on the decoded path:

* insertion: spread of the decoded speed around its mean (uniform pace),
* geodesic: norm of the acceleration projected on the decoder Jacobian,
* min-geodesic: summed decoded speed (a length surrogate).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Adam, ContractViolation, Tensor

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (1.0, 0.01, 10.0)


@dataclass
class CubicCurve:
    a: np.ndarray
    b: np.ndarray
    z1: np.ndarray
    z2: np.ndarray

    def __post_init__(self):
        self.z1 = np.asarray(self.z1, dtype=np.float64).reshape(-1)
        self.z2 = np.asarray(self.z2, dtype=np.float64).reshape(-1)
        dim = self.z1.size
        self.a = np.zeros(dim) if self.a is None else np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.b = np.zeros(dim) if self.b is None else np.asarray(self.b, dtype=np.float64).reshape(-1)
        if not (self.a.size == self.b.size == self.z2.size == dim):
            raise ContractViolation("curve coefficients and endpoints must share one dimension")
        for v in (self.a, self.b, self.z1, self.z2):
            if not np.all(np.isfinite(v)):
                raise ContractViolation("curve coefficients must be finite")

    @classmethod
    def linear(cls, z1, z2) -> "CubicCurve":
        return cls(None, None, z1, z2)

    @property
    def dim(self) -> int:
        return self.z1.size

    @property
    def c(self) -> np.ndarray:
        return self.z2 - self.z1 - self.a - self.b

    @property
    def d(self) -> np.ndarray:
        return self.z1

    def __call__(self, s):
        return curve_eval(self, s)


def _basis(s: np.ndarray) -> np.ndarray:
    return np.stack([s ** 3 - s, s ** 2 - s], axis=-1)


def curve_eval(curve: CubicCurve, s):
    """g(s) for scalar or array ``s`` in [0, 1]; endpoints are reproduced exactly."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise ContractViolation(f"curve parameter must lie in [0, 1], got {s}")
    s_col = s_arr[..., None]
    out = (s_col ** 3 - s_col) * curve.a + (s_col ** 2 - s_col) * curve.b \
        + (1.0 - s_col) * curve.z1 + s_col * curve.z2
    return out


def _curve_points(a: Tensor, b: Tensor, z1, z2, s: np.ndarray) -> Tensor:
    """Differentiable g(s) for a vector of parameters ``s``."""
    ab = dc.stack([a, b], axis=0)
    lin = (1.0 - s)[:, None] * z1 + s[:, None] * z2
    return dc.add(dc.matmul(_basis(s), ab), lin)


@dataclass
class CurveSampling:
    """Where the decoded path is probed.

    ``nodes="midpoint"`` (default) uses s_i = (i + 1/2)/n with half-width
    ds = 1/(2n), so consecutive stencils tile [0, 1] and the summed speed
    is n times the inscribed polyline length.  ``nodes="grid"`` uses
    s_i = i/(n-1) with stencils shifted inward at the ends.
    """

    n: int = 32
    ds: float | None = None
    nodes: str = "midpoint"

    def __post_init__(self):
        if self.n < 2:
            raise ContractViolation(f"need at least 2 curve samples, got {self.n}")
        if self.nodes not in ("midpoint", "grid"):
            raise ContractViolation(f"unknown node layout {self.nodes!r}")
        if self.ds is None:
            self.ds = 1.0 / (2 * self.n) if self.nodes == "midpoint" else 1.0 / (4 * self.n)
        if not 0 < self.ds <= 1.0 / (2 * self.n) + 1e-15:
            raise ContractViolation(f"step {self.ds} outside (0, 1/(2n)] for n={self.n}")

    @property
    def s(self) -> np.ndarray:
        i = np.arange(self.n)
        if self.nodes == "midpoint":
            return (i + 0.5) / self.n
        return i / (self.n - 1)

    @property
    def centers(self) -> np.ndarray:
        return np.clip(self.s, self.ds, 1.0 - self.ds)


@dataclass
class DecodedPath:
    """Decoded curve samples and their finite-difference derivatives, (n, N) each."""

    latent: Tensor
    G: Tensor
    G1: Tensor
    G2: Tensor

    @property
    def speed(self) -> np.ndarray:
        return np.sqrt((self.G1.data ** 2).sum(-1))


def _decode_points(decoder, a, b, z1, z2, sampling: CurveSampling) -> DecodedPath:
    c = sampling.centers
    h = sampling.ds
    n = len(c)
    s_all = np.concatenate([c, c + h, c - h])
    s_all = np.clip(s_all, 0.0, 1.0)
    pts = _curve_points(a, b, z1, z2, s_all)
    out = decoder(pts)
    out = dc.reshape(out, (3 * n, -1)) if out.ndim != 2 else out
    g0 = out[0:n]
    gp = out[n:2 * n]
    gm = out[2 * n:3 * n]
    g1 = dc.mul(dc.sub(gp, gm), 1.0 / (2 * h))
    g2 = dc.mul(dc.sub(dc.add(gp, gm), dc.mul(g0, 2.0)), 1.0 / (h * h))
    return DecodedPath(pts[0:n], g0, g1, g2)


def decode_curve(decoder, curve: CubicCurve, sampling: CurveSampling | None = None) -> DecodedPath:
    sampling = sampling or CurveSampling()
    return _decode_points(decoder, Tensor(curve.a), Tensor(curve.b), curve.z1, curve.z2, sampling)


def _value(x):
    return float(x.data) if isinstance(x, Tensor) else float(x)


def loss_insertion(path: DecodedPath) -> Tensor:
    """Mean squared deviation of each decoded speed from the mean speed, relative to it."""
    n = path.G1.shape[0]
    if n < 2:
        raise ContractViolation("insertion loss needs at least 2 samples")
    speed = dc.norm(path.G1, axis=-1)
    mean = dc.reduce_mean(speed)
    if mean.data <= 1e-12:
        raise ContractViolation("degenerate curve: decoded speed is zero everywhere")
    return dc.reduce_mean(dc.power(dc.sub(dc.div(speed, mean), 1.0), 2))


def loss_geodesic(path: DecodedPath, decoder) -> Tensor:
    """Mean over samples of ||J(g(s_i))^T G''(s_i)||, J the decoder Jacobian."""
    jac = dc.jacobian(decoder, path.latent)
    n = path.G2.shape[0]
    acc = dc.reshape(path.G2, (n, 1, -1))
    proj = dc.matmul(acc, jac)
    return dc.reduce_mean(dc.norm(dc.reshape(proj, (n, -1)), axis=-1))


def loss_min_geodesic(path: DecodedPath) -> Tensor:
    """Sum of decoded speeds over the samples."""
    if path.G1.shape[0] < 2:
        raise ContractViolation("min-geodesic loss needs at least 2 samples")
    return dc.reduce_sum(dc.norm(path.G1, axis=-1))


def _total(decoder, a, b, z1, z2, sampling, weights):
    w1, w2, w3 = weights
    if min(weights) < 0:
        raise ContractViolation(f"loss weights must be non-negative, got {weights}")
    path = _decode_points(decoder, a, b, z1, z2, sampling)
    parts = {
        "insertion": loss_insertion(path),
        "geodesic": loss_geodesic(path, decoder) if w2 else Tensor(0.0),
        "min_geodesic": loss_min_geodesic(path),
    }
    total = dc.add(dc.add(dc.mul(parts["insertion"], w1), dc.mul(parts["geodesic"], w2)),
                   dc.mul(parts["min_geodesic"], w3))
    return total, parts, path


def total_loss(curve: CubicCurve, decoder, sampling: CurveSampling | None = None,
               weights=DEFAULT_WEIGHTS):
    """Weighted sum of the three curve losses plus a float breakdown."""
    sampling = sampling or CurveSampling()
    if np.array_equal(curve.z1, curve.z2) and not np.any(curve.a) and not np.any(curve.b):
        # a point, not a curve: every loss is zero by convention
        return 0.0, {"insertion": 0.0, "geodesic": 0.0, "min_geodesic": 0.0, "total": 0.0}
    with dc.no_grad():
        total, parts, _ = _total(decoder, Tensor(curve.a), Tensor(curve.b), curve.z1, curve.z2,
                                 sampling, tuple(weights))
    breakdown = {k: _value(v) for k, v in parts.items()}
    breakdown["total"] = _value(total)
    return breakdown["total"], breakdown


@dataclass
class FitResult:
    curve: CubicCurve
    trace: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)
    diverged: bool = False
    best_step: int = 0


def _adam_fit(decoder, z1, z2, a0, b0, sampling, weights, steps, lr):
    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    opt = Adam([a, b], lr=lr)
    best = (np.inf, a0.copy(), b0.copy(), 0)
    trace = []
    for step in range(steps + 1):
        opt.zero_grad()
        total, _, _ = _total(decoder, a, b, z1, z2, sampling, weights)
        val = _value(total)
        trace.append(val)
        if val < best[0]:
            best = (val, a.data.copy(), b.data.copy(), step)
        if step == steps:
            break
        dc.backward(total)
        opt.step()
    return best, trace


def _restart_inits(z1, z2, restarts: int, seed: int):
    """Starts bent sideways by half the chord length, in opposite pairs."""
    rng = np.random.default_rng(seed)
    chord = z2 - z1
    unit = chord / np.linalg.norm(chord)
    inits = []
    for r in range(restarts):
        if r % 2 == 0:
            u = rng.standard_normal(z1.size)
            u -= (u @ unit) * unit
            nrm = np.linalg.norm(u)
            u = u / nrm if nrm > 1e-12 else np.zeros_like(u)
        # b (s^2 - s) displaces the midpoint by -b/4
        inits.append((np.zeros_like(z1), (2.0 if r % 2 == 0 else -2.0) * np.linalg.norm(chord) * u))
    return inits


def fit_geodesic(decoder, z1, z2, sampling: CurveSampling | None = None,
                 weights=DEFAULT_WEIGHTS, steps: int = 500, lr: float = 0.01,
                 init: CubicCurve | None = None, restarts: int = 0, seed: int = 0) -> FitResult:
    """Optimize the free coefficients (a, b) with Adam, starting from the linear curve.

    ``restarts`` extra runs start from bent curves (the bend sits in ``b``)
    and the overall lowest-loss curve seen wins, the starts included.  If the
    loss turns non-finite the linear curve comes back with ``diverged`` set.
    """
    sampling = sampling or CurveSampling()
    weights = tuple(float(w) for w in weights)
    z1 = np.asarray(z1, dtype=np.float64).reshape(-1)
    z2 = np.asarray(z2, dtype=np.float64).reshape(-1)
    if np.array_equal(z1, z2):
        zero = {"insertion": 0.0, "geodesic": 0.0, "min_geodesic": 0.0, "total": 0.0}
        return FitResult(CubicCurve.linear(z1, z2), [0.0], zero)
    a0 = init.a if init is not None else np.zeros_like(z1)
    b0 = init.b if init is not None else np.zeros_like(z1)
    starts = [(a0, b0)] + _restart_inits(z1, z2, restarts, seed)
    best, trace = None, []
    try:
        for a_s, b_s in starts:
            run_best, run_trace = _adam_fit(decoder, z1, z2, a_s, b_s, sampling, weights, steps, lr)
            if best is None or run_best[0] < best[0]:
                best = (run_best[0], run_best[1], run_best[2], run_best[3] + len(trace))
            trace += run_trace
    except (dc.NumericalError, ContractViolation) as exc:
        log.warning("geodesic fit diverged at step %d: %s", len(trace), exc)
        curve = CubicCurve.linear(z1, z2)
        try:
            _, losses = total_loss(curve, decoder, sampling, weights)
        except (dc.NumericalError, ContractViolation):
            losses = dict.fromkeys(("insertion", "geodesic", "min_geodesic", "total"), float("nan"))
        return FitResult(curve, trace, losses, diverged=True)
    curve = CubicCurve(best[1], best[2], z1, z2)
    _, losses = total_loss(curve, decoder, sampling, weights)
    return FitResult(curve, trace, losses, best_step=best[3])


def linear_baseline(z1, z2, sampling: CurveSampling | None = None, decoder=None):
    """Latent points (1-s) z1 + s z2 at the sampling nodes, decoded if a decoder is given."""
    sampling = sampling or CurveSampling()
    curve = CubicCurve.linear(z1, z2)
    if decoder is None:
        return curve_eval(curve, sampling.s)
    with dc.no_grad():
        return decode_curve(decoder, curve, sampling)


def decoded_length(decoder, curve: CubicCurve, m: int = 2000) -> float:
    """Length of the decoded polyline through ``m + 1`` evenly spaced curve points."""
    s = np.linspace(0.0, 1.0, m + 1)
    with dc.no_grad():
        out = decoder(Tensor(curve_eval(curve, s))).data.reshape(m + 1, -1)
    return float(np.sqrt((np.diff(out, axis=0) ** 2).sum(1)).sum())


def decoded_points(decoder, curve: CubicCurve, m: int = 200) -> np.ndarray:
    s = np.linspace(0.0, 1.0, m + 1)
    with dc.no_grad():
        return decoder(Tensor(curve_eval(curve, s))).data.reshape(m + 1, -1)


def export_curve(path_csv, curve: CubicCurve, decoder, sampling: CurveSampling | None = None,
                 weights=DEFAULT_WEIGHTS, losses: dict | None = None, seed=None,
                 extra: dict | None = None) -> list:
    """Write ``s, speed, g_1..g_J`` rows and a JSON sidecar next to them.

    Returns both paths.
    """
    sampling = sampling or CurveSampling()
    with dc.no_grad():
        path = decode_curve(decoder, curve, sampling)
    s = sampling.s
    pts = curve_eval(curve, s)
    speed = path.speed
    with open(path_csv, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["s", "speed"] + [f"g_{j + 1}" for j in range(curve.dim)])
        for i in range(len(s)):
            wr.writerow([repr(float(s[i])), repr(float(speed[i]))] + [repr(float(v)) for v in pts[i]])
    if losses is None:
        _, losses = total_loss(curve, decoder, sampling, weights)
    side = {
        "z1": curve.z1.tolist(), "z2": curve.z2.tolist(),
        "a": curve.a.tolist(), "b": curve.b.tolist(),
        "losses": losses, "weights": list(weights), "seed": seed,
    }
    side.update(extra or {})
    json_path = str(path_csv).rsplit(".", 1)[0] + ".json"
    with open(json_path, "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
    return [path_csv, json_path]
