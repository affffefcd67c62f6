"""VTAE objective and the Adam training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffcore as dc
from .. import stlayer
from ..diffcore import ContractViolation, NumericalError, Tensor
from .model import VaeModel

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "elbo", "kl", "recon", "grad_ratio")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    latent_a: int = 44
    latent_b: int = 6
    # weights of (reconstruction, KL, geodesic-distance) terms
    loss_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    noise_scale: float = 1.0
    k_neighbors: int = 8
    entropy_lambda: float = 0.01
    # {"kind": "salt-pepper" | "gaussian" | "mixed", "levels": [...]} for denoising training
    input_noise: dict | None = None
    eval_seed: int = 12345

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.lr < 0 or self.weight_decay < 0 or self.noise_scale <= 0:
            raise ContractViolation("learning rate and weight decay must be >= 0, noise scale > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolation("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch size must be at least 1")
        if len(self.loss_weights) != 3:
            raise ContractViolation("loss_weights needs three entries")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_metrics: dict | None, cause: str):
        self.epoch = epoch
        self.last_metrics = last_metrics
        super().__init__(f"training diverged in epoch {epoch} ({cause}); last finite metrics: {last_metrics}")


@dataclass
class TrainResult:
    model: VaeModel
    metrics: list = field(default_factory=list)
    breakdown: list = field(default_factory=list)
    grad_records: list = field(default_factory=list)


def geodesic_term(embedding: Tensor, gd) -> Tensor:
    """(1/P^2) sum_{i,j} (||E_i - E_j|| - GD_ij)^2 over all ordered pairs of a batch."""
    gd = np.asarray(gd, dtype=np.float64)
    p = embedding.shape[0]
    if gd.shape != (p, p):
        raise ContractViolation(f"geodesic table is {gd.shape}, batch needs ({p}, {p})")
    iu, ju = np.triu_indices(p, 1)
    bad = ~np.isfinite(gd[iu, ju]) | ~np.isfinite(gd[ju, iu])
    if bad.any():
        k = int(np.argmax(bad))
        raise ContractViolation(f"missing geodesic distance for pair ({iu[k]}, {ju[k]})")
    if p < 2:
        return dc.mul(dc.reduce_sum(embedding), 0.0)
    diff = dc.sub(embedding[iu], embedding[ju])
    dist = dc.norm(diff, axis=-1)
    # GD is symmetric, so each unordered pair contributes twice
    r = dc.sub(dist, 0.5 * (gd[iu, ju] + gd[ju, iu]))
    return dc.mul(dc.reduce_sum(dc.mul(r, r)), 2.0 / (p * p))


def vtae_loss(model: VaeModel, batch, gd=None, weights=(1.0, 1.0, 1.0), rng=None, eps=None,
              target=None, entropy_lambda: float = 0.0, trace: list | None = None):
    """Negative ELBO plus the geodesic-distance term, averaged over the batch.

    ``batch`` feeds the encoder; ``target`` (default ``batch``) is scored by the
    likelihood.  Returns ``(loss, breakdown)`` where the breakdown holds the
    per-image ``neg_recon``, ``kl``, ``gd`` and ``entropy`` values.
    """
    w_rec, w_kl, w_gd = (float(w) for w in weights)
    target = batch if target is None else target
    lat = model.encode(batch, rng=rng, eps=eps, trace=trace)
    ll = model.log_likelihood(target, lat, trace)
    kl = model.kl(lat)
    loss = dc.reduce_mean(dc.sub(dc.mul(kl, w_kl), dc.mul(ll, w_rec)))
    parts = {"neg_recon": -float(ll.data.mean()), "kl": float(kl.data.mean()), "gd": 0.0, "entropy": 0.0}
    if w_gd != 0.0:
        if gd is None:
            raise ContractViolation("geodesic-distance weight is nonzero but no distances were given")
        term = geodesic_term(lat.embedding, gd)
        parts["gd"] = term.item()
        loss = dc.add(loss, dc.mul(term, w_gd))
    if entropy_lambda and model.last_attention is not None and model.nonlocal_block is not None:
        b = model.last_attention.shape[0]
        pen = stlayer.entropy_penalty(model.last_attention, entropy_lambda / b)
        parts["entropy"] = pen.item()
        loss = dc.add(loss, pen)
    return loss, parts


def _corrupt_batch(x: np.ndarray, spec: dict, rng: np.random.Generator) -> np.ndarray:
    from ..evalsuite import corrupt

    kinds = ["salt-pepper", "gaussian"] if spec.get("kind", "mixed") == "mixed" else [spec["kind"]]
    levels = list(spec.get("levels", (0.1, 0.25, 0.4)))
    kind = kinds[int(rng.integers(len(kinds)))]
    level = float(levels[int(rng.integers(len(levels)))])
    return corrupt(x, kind, level, rng)


def evaluate_epoch(model: VaeModel, data: np.ndarray, seed: int, batch: int = 500) -> dict:
    """Mean ELBO and its KL / reconstruction-MSE parts over ``data`` with a fixed noise stream."""
    rng = np.random.default_rng(seed)
    tot_elbo = tot_kl = tot_mse = 0.0
    n = len(data)
    with dc.no_grad():
        for lo in range(0, n, batch):
            x = data[lo:lo + batch]
            lat = model.encode(x, rng=rng)
            ll = model.log_likelihood(x, lat).data
            kl = model.kl(lat).data
            tot_elbo += float((ll - kl).sum())
            tot_kl += float(kl.sum())
            rec = model.reconstruct(x)
            tot_mse += float(((rec - x.reshape(len(x), -1)) ** 2).mean(axis=1).sum())
    return {"elbo": tot_elbo / n, "kl": tot_kl / n, "recon": tot_mse / n}


def train(model: VaeModel, data, config: TrainConfig, gd_table=None, callback=None) -> TrainResult:
    """Fit ``model`` to ``data`` (N, ...) with Adam; one metrics row per epoch.

    ``gd_table`` is a :class:`~vtae.manifold.GeodesicTable` over the rows of
    ``data``; it is built from ``config.k_neighbors`` when the third loss weight
    is nonzero and no table is passed.
    """
    from ..evalsuite import grad_ratio_track

    x_all = np.asarray(data, dtype=np.float64)
    n = len(x_all)
    if n == 0:
        raise ContractViolation("training set is empty")
    x_all = x_all.reshape((n,) + tuple(model.arch.input_shape))
    if config.lr == 0:
        log.warning("learning rate is 0: parameters will not change")
    if config.loss_weights[2] != 0 and gd_table is None:
        from ..manifold import GeodesicTable

        gd_table = GeodesicTable(x_all.reshape(n, -1), k=config.k_neighbors)
    params = model.parameters()
    opt = dc.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2),
                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    last = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = {"neg_recon": 0.0, "kl": 0.0, "gd": 0.0, "entropy": 0.0}
        n_batches = 0
        try:
            for lo in range(0, n, config.batch_size):
                idx = np.sort(order[lo:lo + config.batch_size])
                target = x_all[idx]
                inp = target if config.input_noise is None else _corrupt_batch(target, config.input_noise, rng)
                gd = gd_table.pairs(idx) if config.loss_weights[2] != 0 else None
                xin = Tensor(inp, requires_grad=True)
                trace: list = []
                opt.zero_grad()
                loss, parts = vtae_loss(model, xin, gd, config.loss_weights, rng=rng, target=target,
                                        entropy_lambda=config.entropy_lambda, trace=trace)
                if not math.isfinite(loss.item()):
                    raise NumericalError("non-finite loss")
                for _, _, a, b in trace:
                    a.retain_grad()
                    b.retain_grad()
                dc.backward(loss)
                for name, pool, a, b in trace:
                    gin = float(np.linalg.norm(a.grad)) if a.grad is not None else 0.0
                    gout = float(np.linalg.norm(b.grad)) if b.grad is not None else 0.0
                    result.grad_records.append({"epoch": epoch, "layer": name, "pooling": pool,
                                                "grad_in": gin, "grad_out": gout})
                for p in params:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NumericalError("non-finite gradient")
                opt.step()
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
            ev = evaluate_epoch(model, x_all, config.eval_seed)
        except NumericalError as exc:
            raise TrainingDiverged(epoch, last, str(exc)) from exc
        series = grad_ratio_track([r for r in result.grad_records if r["epoch"] == epoch])
        ratios = [v for row in series for v in [row["ratio"]] if v is not None]
        row = {"epoch": epoch, **ev, "grad_ratio": float(np.median(ratios)) if ratios else float("nan")}
        if not all(math.isfinite(v) for k, v in ev.items()):
            raise TrainingDiverged(epoch, last, "non-finite evaluation metrics")
        result.metrics.append(row)
        result.breakdown.append({"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}})
        last = row
        log.info("epoch %d elbo %.4f kl %.4f recon %.5f", epoch, ev["elbo"], ev["kl"], ev["recon"])
        if callback is not None:
            callback(epoch, row)
    return result
