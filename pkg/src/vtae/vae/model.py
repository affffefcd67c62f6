"""Two-latent VAE whose decoder warps an appearance image (from z_A) by an
affine transform (from z_B)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffcore as dc
from .. import stlayer
from ..diffcore import ContractViolation, Tensor
from ..diffcore.nn import MLP, Conv2d, Linear, avg_pool2d, upsample_nearest

LOG_2PI = math.log(2 * math.pi)
# Squeeze probabilities into [eps, 1 - eps] before taking logs.
PROB_EPS = 1e-6


@dataclass
class Architecture:
    """Static description of a model; round-trips through the checkpoint manifest."""

    input_shape: tuple = (1, 28, 28)
    hidden: tuple = (512, 256)
    latent_a: int = 44
    latent_b: int = 6
    transform_hidden: int = 32
    likelihood: str = "bernoulli"
    obs_std: float = 0.1
    encoder: str = "mlp"
    conv_channels: tuple = (32, 64, 128, 256)
    nonlocal_block: bool = False
    nonlocal_inner: int = 4
    nonlocal_pool: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ContractViolation(f"unknown likelihood {self.likelihood!r}")
        if self.encoder not in ("mlp", "conv"):
            raise ContractViolation(f"unknown encoder {self.encoder!r}")
        if self.latent_a < 1 or self.latent_b < 0:
            raise ContractViolation("latent split needs latent_a >= 1 and latent_b >= 0")
        if self.uses_transformer and len(self.input_shape) != 3:
            raise ContractViolation("the spatial transformer needs image-shaped input (C, H, W)")

    @property
    def latent_dim(self) -> int:
        return self.latent_a + self.latent_b

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def uses_transformer(self) -> bool:
        return self.latent_b > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def mnist_architecture(**kw) -> Architecture:
    return Architecture(**kw)


def conv_preset(**kw) -> Architecture:
    """Convolutional encoder with channels (32, 64, 128, 256), stride 2, kernel 4."""
    kw.setdefault("encoder", "conv")
    return Architecture(**kw)


def point_architecture(dim: int = 2, latent: int = 2, hidden=(64, 64), **kw) -> Architecture:
    """Real-valued point data (e.g. the donut) without the transformer stage."""
    kw.setdefault("likelihood", "gaussian")
    return Architecture(input_shape=(dim,), hidden=tuple(hidden), latent_a=latent, latent_b=0, **kw)


@dataclass
class GaussianPosterior:
    mean: Tensor
    log_variance: Tensor

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance.data)


@dataclass
class LatentPair:
    z_a: Tensor
    z_b: Tensor
    posterior_a: GaussianPosterior
    posterior_b: GaussianPosterior
    eps_a: np.ndarray = field(repr=False, default=None)
    eps_b: np.ndarray = field(repr=False, default=None)

    @property
    def z(self) -> Tensor:
        return dc.concat([self.z_a, self.z_b], axis=-1) if self.z_b.shape[-1] else self.z_a

    @property
    def embedding(self) -> Tensor:
        """Concatenated posterior means, one row per input."""
        pa, pb = self.posterior_a, self.posterior_b
        return dc.concat([pa.mean, pb.mean], axis=-1) if pb.mean.shape[-1] else pa.mean


def kl_gaussian(q: GaussianPosterior) -> Tensor:
    """KL(q || N(0, I)) summed over the last axis."""
    mu, lv = q.mean, q.log_variance
    inner = dc.sub(dc.sub(dc.add(dc.mul(mu, mu), dc.exp(lv)), lv), 1.0)
    return dc.mul(dc.reduce_sum(inner, axis=-1), 0.5)


def gaussian_logpdf(z: Tensor, mean=None, log_variance=None) -> Tensor:
    """log N(z; mean, diag(exp(log_variance))) summed over the last axis."""
    if mean is None:
        sq = dc.mul(z, z)
        return dc.mul(dc.add(dc.reduce_sum(sq, axis=-1), z.shape[-1] * LOG_2PI), -0.5)
    diff = dc.sub(z, mean)
    sq = dc.div(dc.mul(diff, diff), dc.exp(log_variance))
    return dc.mul(dc.add(dc.add(dc.reduce_sum(sq, axis=-1), dc.reduce_sum(log_variance, axis=-1)),
                         z.shape[-1] * LOG_2PI), -0.5)


class VaeModel:
    """Encoder, appearance decoder (z_A -> x~), transform decoder (z_B -> nu) and warp."""

    def __init__(self, arch: Architecture, seed: int = 0, noise_scale: float = 1.0,
                 zero_encoder_head: bool = False):
        self.arch = arch
        self.seed = seed
        self.noise_scale = float(noise_scale)
        rng = np.random.default_rng(seed)
        d, j = arch.data_dim, arch.latent_dim
        self._convs: list[Conv2d] = []
        if arch.encoder == "conv":
            c, h, w = arch.input_shape
            for ch in arch.conv_channels:
                self._convs.append(Conv2d(c, ch, 4, rng, stride=2, padding=1))
                c, h, w = ch, (h + 2 - 4) // 2 + 1, (w + 2 - 4) // 2 + 1
            enc_in = c * h * w
        else:
            enc_in = d
        self.encoder = MLP([enc_in, *arch.hidden, 2 * j], rng, zero_last=zero_encoder_head)
        self.decoder_a = MLP([arch.latent_a, *reversed(arch.hidden), d], rng)
        self.decoder_b = (MLP([arch.latent_b, arch.transform_hidden, 6], rng, activation="tanh",
                              zero_last=True) if arch.uses_transformer else None)
        self.nonlocal_block = (stlayer.NonLocalBlock(arch.input_shape[0], arch.nonlocal_inner, rng)
                               if arch.nonlocal_block and arch.is_image else None)
        self.variance_head = None
        self.last_attention: Tensor | None = None

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self._convs):
            out[f"conv{i}.weight"] = conv.weight
            out[f"conv{i}.bias"] = conv.bias
        for prefix, mlp in (("enc", self.encoder), ("dec_a", self.decoder_a), ("dec_b", self.decoder_b)):
            if mlp is None:
                continue
            for i, layer in enumerate(mlp.layers):
                out[f"{prefix}.{i}.weight"] = layer.weight
                out[f"{prefix}.{i}.bias"] = layer.bias
        if self.nonlocal_block is not None:
            for name in ("theta", "phi", "g", "w_out"):
                out[f"nonlocal.{name}"] = getattr(self.nonlocal_block, name)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    # -- encoder ------------------------------------------------------------
    def _check_input(self, x) -> Tensor:
        x = dc.as_tensor(x)
        shape = tuple(self.arch.input_shape)
        if x.shape[1:] == shape:
            return x
        if x.ndim == 2 and x.shape[1] == self.arch.data_dim:
            return dc.reshape(x, (x.shape[0],) + shape)
        raise ContractViolation(f"input shape {x.shape} does not match (batch, {shape})")

    def encoder_stats(self, x, trace: list | None = None):
        x = self._check_input(x)
        b = x.shape[0]
        h = x
        if self._convs:
            for i, conv in enumerate(self._convs):
                inp = h
                h = dc.relu(conv(h))
                if trace is not None:
                    trace.append((f"conv{i}", False, inp, h))
        h = dc.reshape(h, (b, -1))
        sub = [] if trace is not None else None
        out = self.encoder(h, sub)
        if trace is not None:
            trace.extend((f"enc_{name}", pool, i, o) for name, pool, i, o in sub)
        j = self.arch.latent_dim
        mean = out[:, :j]
        raw_lv = out[:, j:]
        lv = dc.add(raw_lv, 2.0 * math.log(self.noise_scale)) if self.noise_scale != 1.0 else raw_lv
        return mean, lv

    def encode(self, x, rng: np.random.Generator | None = None, eps=None, trace=None) -> LatentPair:
        """Posterior parameters and a reparametrized sample.

        ``eps`` (B, J) may be supplied to replay a draw; otherwise it comes
        from ``rng`` (a fresh generator seeded with the model seed if None).
        """
        mean, lv = self.encoder_stats(x, trace)
        b, j = mean.shape
        if eps is None:
            rng = rng if rng is not None else np.random.default_rng(self.seed)
            eps = rng.standard_normal((b, j))
        eps = np.asarray(eps, dtype=np.float64)
        z = dc.add(mean, dc.mul(dc.exp(dc.mul(lv, 0.5)), eps))
        ja = self.arch.latent_a
        qa = GaussianPosterior(mean[:, :ja], lv[:, :ja])
        qb = GaussianPosterior(mean[:, ja:], lv[:, ja:])
        return LatentPair(z[:, :ja], z[:, ja:], qa, qb, eps[:, :ja], eps[:, ja:])

    # -- decoder ------------------------------------------------------------
    def appearance_logits(self, z_a, trace: list | None = None) -> Tensor:
        """Pre-activation appearance output (B, D); includes the non-local filter."""
        z_a = dc.as_tensor(z_a)
        sub = [] if trace is not None else None
        out = self.decoder_a(z_a, sub)
        if trace is not None:
            trace.extend((f"dec_{name}", pool, i, o) for name, pool, i, o in sub)
        if self.nonlocal_block is not None:
            c, h, w = self.arch.input_shape
            b = z_a.shape[0]
            img = dc.reshape(out, (b, c, h, w))
            k = self.arch.nonlocal_pool
            pooled = avg_pool2d(img, k) if k > 1 else img
            filtered = self.nonlocal_block(pooled)
            self.last_attention = self.nonlocal_block.attention
            resid = dc.sub(filtered, pooled)
            if k > 1:
                resid = upsample_nearest(resid, k)
            out = dc.reshape(dc.add(img, resid), (b, -1))
            if trace is not None:
                trace.append(("nonlocal", True, img, out))
        return out

    def appearance(self, z_a, trace: list | None = None) -> Tensor:
        """x~: probabilities (Bernoulli) or means (Gaussian), shape (B, D)."""
        logits = self.appearance_logits(z_a, trace)
        return dc.sigmoid(logits) if self.arch.likelihood == "bernoulli" else logits

    def transform_params(self, z_b) -> Tensor:
        """nu: (B, 6) velocity parameters."""
        if self.decoder_b is None:
            raise ContractViolation("model has no transformation latent")
        return self.decoder_b(dc.as_tensor(z_b))

    def spatial_transform(self, x_tilde: Tensor, nu: Tensor) -> Tensor:
        c, h, w = self.arch.input_shape
        b = x_tilde.shape[0]
        theta = stlayer.velocity_theta(nu)
        grid = stlayer.affine_grid(theta, h, w)
        img = dc.reshape(x_tilde, (b, c, h, w))
        return dc.reshape(stlayer.sample_bilinear(img, grid), (b, -1))

    def decode(self, z_a, z_b=None, trace: list | None = None) -> Tensor:
        """Mean of p(x | z_A, z_B), flattened to (B, D)."""
        x_tilde = self.appearance(z_a, trace)
        if self.decoder_b is None:
            return x_tilde
        return self.spatial_transform(x_tilde, self.transform_params(z_b))

    def decode_joint(self, z) -> Tensor:
        """Decoder on the concatenated latent (B, J_A + J_B)."""
        z = dc.as_tensor(z)
        ja = self.arch.latent_a
        if self.decoder_b is None:
            return self.decode(z)
        return self.decode(z[:, :ja], z[:, ja:])

    def geometry_decoder(self, z) -> Tensor:
        """Decoder used for geodesics: the mean, plus the std channel when one is fitted."""
        mean = self.decode_joint(z)
        if self.variance_head is None:
            return mean
        return dc.concat([mean, self.variance_head.std(z)], axis=-1)

    # -- likelihood ---------------------------------------------------------
    def log_likelihood(self, x_target, latents: LatentPair, trace: list | None = None) -> Tensor:
        """log p(x | z) per row, (B,)."""
        x = dc.as_tensor(x_target)
        x = dc.reshape(x, (x.shape[0], -1))
        if self.arch.likelihood == "bernoulli":
            if np.any(x.data < 0) or np.any(x.data > 1):
                raise ContractViolation("Bernoulli likelihood needs pixels in [0, 1]")
            if self.decoder_b is None:
                logits = self.appearance_logits(latents.z_a, trace)
                ll = dc.neg(dc.add(dc.mul(x, dc.softplus(dc.neg(logits))),
                                   dc.mul(dc.sub(1.0, x), dc.softplus(logits))))
            else:
                p = self.decode(latents.z_a, latents.z_b, trace)
                p = dc.add(dc.mul(p, 1.0 - 2 * PROB_EPS), PROB_EPS)
                ll = dc.add(dc.mul(x, dc.log(p)), dc.mul(dc.sub(1.0, x), dc.log(dc.sub(1.0, p))))
            return dc.reduce_sum(ll, axis=-1)
        mu = self.decode(latents.z_a, latents.z_b, trace)
        s = self.arch.obs_std
        diff = dc.sub(x, mu)
        sq = dc.reduce_sum(dc.mul(diff, diff), axis=-1)
        return dc.add(dc.mul(sq, -0.5 / (s * s)), -0.5 * x.shape[1] * (LOG_2PI + 2 * math.log(s)))

    def kl(self, latents: LatentPair) -> Tensor:
        """KL of both posteriors against their standard normal priors, (B,)."""
        kl = kl_gaussian(latents.posterior_a)
        if latents.posterior_b.mean.shape[-1]:
            kl = dc.add(kl, kl_gaussian(latents.posterior_b))
        return kl

    def log_weights(self, x_target, k: int, rng: np.random.Generator, x_input=None) -> np.ndarray:
        """(K, B) log importance weights log p(x, z_k) - log q(z_k | x_input)."""
        x_input = x_target if x_input is None else x_input
        out = []
        with dc.no_grad():
            mean, lv = self.encoder_stats(x_input)
            ja = self.arch.latent_a
            for _ in range(k):
                eps = rng.standard_normal(mean.shape)
                lat = self.encode(x_input, eps=eps)
                z = lat.z
                logq = gaussian_logpdf(z, mean, lv)
                logp = dc.add(gaussian_logpdf(z[:, :ja]), gaussian_logpdf(z[:, ja:])) \
                    if self.arch.latent_b else gaussian_logpdf(z)
                out.append(self.log_likelihood(x_target, lat).data + logp.data - logq.data)
        return np.stack(out)

    def log_conditionals(self, x_target, k: int, rng: np.random.Generator, x_input=None) -> np.ndarray:
        """(K, B) values of log p(x_target | z_k) with z_k drawn from q(z | x_input)."""
        x_input = x_target if x_input is None else x_input
        with dc.no_grad():
            mean, _ = self.encoder_stats(x_input)
            out = [self.log_likelihood(x_target, self.encode(x_input, eps=rng.standard_normal(mean.shape))).data
                   for _ in range(k)]
        return np.stack(out)

    def reconstruct(self, x) -> np.ndarray:
        """Decoded posterior means, (B, D)."""
        with dc.no_grad():
            mean, _ = self.encoder_stats(x)
            ja = self.arch.latent_a
            return self.decode(mean[:, :ja], mean[:, ja:]).data


def elbo(model: VaeModel, x, rng: np.random.Generator | None = None, eps=None) -> Tensor:
    """Single-sample ELBO per row: log p(x | z) - KL(q_A) - KL(q_B)."""
    lat = model.encode(x, rng=rng, eps=eps)
    return dc.sub(model.log_likelihood(x, lat), model.kl(lat))


def generate(model: VaeModel, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Sample z_A, z_B from the priors, decode, warp; returns (n, *input_shape)."""
    arch = model.arch
    za = rng.standard_normal((n, arch.latent_a))
    zb = rng.standard_normal((n, arch.latent_b))
    with dc.no_grad():
        out = model.decode(Tensor(za), Tensor(zb))
    return out.data.reshape((n,) + arch.input_shape)


class VarianceHead:
    """Latent-dependent output std that rises away from the training codes.

    ``std(z) = s_in + (s_out - s_in) * exp(-sum_k rbf_k(z))``: inside the data
    the RBF mass keeps the std at the fitted residual scale ``s_in`` (one per
    output dimension); far away it approaches ``s_out``.
    """

    def __init__(self, centers, bandwidths, std_in, std_out: float):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.bandwidths = np.asarray(bandwidths, dtype=np.float64)
        self.std_in = np.asarray(std_in, dtype=np.float64)
        self.std_out = float(std_out)

    def _rbf(self, z) -> Tensor:
        z = dc.as_tensor(z)
        diff = dc.sub(dc.reshape(z, (z.shape[0], 1, z.shape[1])), self.centers[None])
        d2 = dc.reduce_sum(dc.mul(diff, diff), axis=-1)
        return dc.exp(dc.mul(d2, -self.bandwidths[None]))

    def coverage(self, z) -> Tensor:
        """1 - exp(-sum_k rbf_k(z)), in [0, 1)."""
        return dc.sub(1.0, dc.exp(dc.neg(dc.reduce_sum(self._rbf(z), axis=-1, keepdims=True))))

    def std(self, z) -> Tensor:
        single = dc.as_tensor(z).ndim == 1
        zz = dc.reshape(dc.as_tensor(z), (1, -1)) if single else z
        gap = dc.sub(1.0, self.coverage(zz))
        out = dc.add(dc.mul(gap, self.std_out - self.std_in[None]), self.std_in[None])
        return dc.reshape(out, (-1,)) if single else out

    def to_arrays(self) -> dict:
        return {"centers": self.centers, "bandwidths": self.bandwidths,
                "std_in": self.std_in, "std_out": np.array([self.std_out])}

    @classmethod
    def from_arrays(cls, d: dict) -> "VarianceHead":
        return cls(d["centers"], d["bandwidths"], d["std_in"], float(d["std_out"][0]))


def fit_variance_head(model: VaeModel, data, n_centers: int = 32, std_out: float = 10.0,
                      seed: int = 0, kappa: float = 1.5) -> VarianceHead:
    """Attach a :class:`VarianceHead` fitted to the codes and residuals of ``data``.

    Centres come from k-means on the posterior means; each bandwidth scales
    with its cluster's mean radius times ``kappa``.
    """
    from scipy.cluster.vq import kmeans2

    x = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    with dc.no_grad():
        mean, _ = model.encoder_stats(x)
    codes = mean.data
    std_in = np.sqrt(((x - model.reconstruct(x)) ** 2).mean(axis=0))
    std_in = np.maximum(std_in, 1e-6)
    k = min(n_centers, len(codes))
    centers, labels = kmeans2(codes, k, seed=seed, minit="++")
    bw = np.empty(k)
    for c in range(k):
        members = codes[labels == c]
        spread = np.sqrt(((members - centers[c]) ** 2).sum(1)).mean() if len(members) else 0.0
        bw[c] = 0.5 / (kappa * max(spread, 1e-3)) ** 2
    head = VarianceHead(centers, bw, std_in, std_out)
    model.variance_head = head
    return head
