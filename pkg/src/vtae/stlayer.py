"""Spatial transformer: affine parametrizations, grids, bilinear sampling,
non-local attention and its entropy penalty."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation, Tensor

KINDS = ("direct", "decomposed", "velocity")


@dataclass
class AffineTransform:
    """Six-parameter affine map.

    ``direct``: the 2x3 matrix row by row.
    ``decomposed``: (angle, shear, scale_x, scale_y, shift_x, shift_y).
    ``velocity``: a 2x3 velocity whose matrix exponential is the map.
    """

    kind: str
    params: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown transform kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.shape != (6,):
            raise ContractViolation(f"affine transform needs 6 parameters, got {self.params.size}")
        if not np.all(np.isfinite(self.params)):
            raise ContractViolation("affine parameters must be finite")
        if self.kind == "decomposed" and (self.params[2] <= 0 or self.params[3] <= 0):
            raise ContractViolation(
                f"decomposed scales must be positive, got {self.params[2]}, {self.params[3]}")

    def to_matrix(self) -> np.ndarray:
        return to_matrix(self)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "AffineTransform":
        rec = json.loads(text)
        return cls(rec["kind"], np.asarray(rec["params"]))

    @classmethod
    def identity(cls, kind: str = "velocity") -> "AffineTransform":
        if kind == "direct":
            return cls(kind, np.array([1.0, 0, 0, 0, 1, 0]))
        if kind == "decomposed":
            return cls(kind, np.array([0.0, 0, 1, 1, 0, 0]))
        return cls(kind, np.zeros(6))


def decomposed_matrix(angle, shear, sx, sy, tx, ty) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    sc = np.diag([sx, sy])
    return np.hstack([rot @ sh @ sc, [[tx], [ty]]])


def to_matrix(t: AffineTransform) -> np.ndarray:
    """2x3 matrix of ``t``."""
    p = t.params
    if t.kind == "direct":
        return p.reshape(2, 3).copy()
    if t.kind == "decomposed":
        return decomposed_matrix(*p)
    v = np.zeros((3, 3))
    v[:2] = p.reshape(2, 3)
    return expm3(v)[:2]


# Pade(13) numerator coefficients (Higham 2005).
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)


def expm3(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant.

    The input is scaled by 2**-s until its 1-norm is at most 0.5.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"expm3 needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if not np.any(a @ a):
        # nilpotent of index <= 2: the series stops after the linear term
        return np.eye(n) + a
    norm1 = np.abs(a).sum(axis=0).max() if a.size else 0.0
    s = 0 if norm1 <= 0.5 else int(math.ceil(math.log2(norm1 / 0.5)))
    x = a / (2.0 ** s)
    b = _PADE13
    ident = np.eye(n)
    x2 = x @ x
    x4 = x2 @ x2
    x6 = x4 @ x2
    u = x @ (x6 @ (b[13] * x6 + b[11] * x4 + b[9] * x2)
             + b[7] * x6 + b[5] * x4 + b[3] * x2 + b[1] * ident)
    v = (x6 @ (b[12] * x6 + b[10] * x4 + b[8] * x2)
         + b[6] * x6 + b[4] * x4 + b[2] * x2 + b[0] * ident)
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    if n == 3 and not np.any(a[2]):
        r[2] = (0.0, 0.0, 1.0)
    return r


def expm_tensor(v: Tensor, order: int = 12) -> Tensor:
    """Differentiable matrix exponential of a batch of square matrices.

    Truncated Taylor series after scaling to 1-norm <= 0.5, then repeated
    squaring; built from diffcore primitives so both differentiation modes
    pass through it.
    """
    v = dc.as_tensor(v)
    norm1 = np.abs(v.data).sum(axis=-2).max() if v.size else 0.0
    s = 0 if norm1 <= 0.5 else int(math.ceil(math.log2(norm1 / 0.5)))
    x = dc.mul(v, 1.0 / 2.0 ** s)
    n = v.shape[-1]
    eye = np.broadcast_to(np.eye(n), v.shape).copy()
    # Horner: I + x(I + x/2(I + x/3(...)))
    acc = Tensor(eye)
    for k in range(order, 0, -1):
        acc = dc.add(eye, dc.mul(dc.matmul(x, acc), 1.0 / k))
    for _ in range(s):
        acc = dc.matmul(acc, acc)
    return acc


def velocity_theta(nu: Tensor) -> Tensor:
    """Map a (B, 6) velocity batch to (B, 2, 3) affine matrices."""
    nu = dc.as_tensor(nu)
    b = nu.shape[0]
    top = dc.reshape(nu, (b, 2, 3))
    full = dc.concat([top, dc.zeros((b, 1, 3))], axis=1)
    return dc.getitem(expm_tensor(full), (slice(None), slice(0, 2), slice(None)))


def _mesh(height: int, width: int):
    if height < 1 or width < 1:
        raise ContractViolation(f"grid extent must be positive, got {height}x{width}")
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


def make_grid(t: AffineTransform | np.ndarray, height: int, width: int) -> np.ndarray:
    """Source coordinates (2, H, W) for each normalized output location.

    Channel 0 is x (along width), channel 1 is y (along height).
    """
    m = to_matrix(t) if isinstance(t, AffineTransform) else np.asarray(t, dtype=np.float64)
    gx, gy = _mesh(height, width)
    src = m[:, :2] @ np.stack([gx.ravel(), gy.ravel()]) + m[:, 2:3]
    return src.reshape(2, height, width)


def affine_grid(theta: Tensor, height: int, width: int) -> Tensor:
    """Differentiable batch version of :func:`make_grid`: (B,2,3) -> (B,2,H,W)."""
    theta = dc.as_tensor(theta)
    gx, gy = _mesh(height, width)
    base = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)])
    src = dc.matmul(theta, base)
    return dc.reshape(src, (theta.shape[0], 2, height, width))


def _snap(p: np.ndarray) -> np.ndarray:
    r = np.round(p)
    return np.where(np.abs(r - p) < 1e-10, r - p, 0.0)


def sample_bilinear(image, grid):
    """Bilinearly sample ``image`` (B,C,H,W) at ``grid`` (B,2,H',W').

    Coordinates are normalized so that -1 and 1 hit the centres of the
    border pixels; samples outside the image read zeros.  Plain arrays in
    give a plain array back, and a single (H,W) image with a (2,H',W')
    grid is accepted as well.
    """
    plain = not isinstance(image, Tensor) and not isinstance(grid, Tensor)
    img = dc.as_tensor(image)
    grd = dc.as_tensor(grid)
    squeeze = False
    if img.ndim == 2 and grd.ndim == 3:
        img = dc.reshape(img, (1, 1) + img.shape)
        grd = dc.reshape(grd, (1,) + grd.shape)
        squeeze = True
    if img.ndim != 4 or grd.ndim != 4 or grd.shape[1] != 2 or grd.shape[0] != img.shape[0]:
        raise ContractViolation(
            f"sample_bilinear: image {img.shape} and grid {grd.shape} do not conform")
    b, c, h, w = img.shape
    ho, wo = grd.shape[2], grd.shape[3]
    px = dc.mul(dc.add(grd[:, 0:1], 1.0), 0.5 * (w - 1))
    py = dc.mul(dc.add(grd[:, 1:2], 1.0), 0.5 * (h - 1))
    # snap round-off next to pixel centres by a constant shift (gradient unchanged)
    px = dc.add(px, _snap(px.data))
    py = dc.add(py, _snap(py.data))
    x0 = np.floor(px.data)
    y0 = np.floor(py.data)
    wx = dc.sub(px, x0)
    wy = dc.sub(py, y0)
    base = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    out = None
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        valid = ((xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)).astype(np.float64)
        idx = base + (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).astype(np.intp)
        vals = dc.take(img, idx)
        fx = wx if dx else dc.sub(1.0, wx)
        fy = wy if dy else dc.sub(1.0, wy)
        term = dc.mul(vals, dc.mul(dc.mul(fx, fy), valid))
        out = term if out is None else dc.add(out, term)
    if squeeze:
        out = dc.reshape(out, (ho, wo))
    return out.data.copy() if plain else out


def warp(image, t: AffineTransform):
    """Apply ``t`` to a single (H, W) array."""
    image = np.asarray(image, dtype=np.float64)
    return sample_bilinear(image, make_grid(t, *image.shape))


def invert_matrix(m: np.ndarray) -> np.ndarray:
    """Inverse of a 2x3 affine matrix."""
    a = np.linalg.inv(m[:, :2])
    return np.hstack([a, -a @ m[:, 2:3]])


# -- non-local attention ---------------------------------------------------

class NonLocalBlock:
    """Embedded-Gaussian non-local block with residual connection.

    ``y_i = x_i + W_o sum_j softmax_j(theta(x_i) . phi(x_j)) g(x_j)``, where
    theta, phi, g and W_o act on channels.  The last attention tensor is kept
    in :attr:`attention`.
    """

    def __init__(self, channels: int, inner: int, rng: np.random.Generator, zero_output=True):
        def init(shape):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape), requires_grad=True)

        self.theta = init((channels, inner))
        self.phi = init((channels, inner))
        self.g = init((channels, inner))
        wo = np.zeros((inner, channels)) if zero_output else rng.normal(0, 1 / math.sqrt(inner), (inner, channels))
        self.w_out = Tensor(wo, requires_grad=True)
        self.attention: Tensor | None = None

    def parameters(self):
        return [self.theta, self.phi, self.g, self.w_out]

    def __call__(self, x: Tensor) -> Tensor:
        out, self.attention = nonlocal_block(x, self.theta, self.phi, self.g, self.w_out)
        return out


def nonlocal_block(x, theta, phi, g, w_out):
    """Return ``(output, attention)`` for a (B,C,H,W) or (C,H,W) feature map."""
    x = dc.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ContractViolation(f"nonlocal_block expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    flat = dc.transpose(dc.reshape(x, (b, c, h * w)), (0, 2, 1))
    q = dc.matmul(flat, theta)
    k = dc.matmul(flat, phi)
    v = dc.matmul(flat, g)
    attn = dc.softmax(dc.matmul(q, dc.transpose(k, (0, 2, 1))), axis=-1)
    y = dc.matmul(dc.matmul(attn, v), w_out)
    y = dc.reshape(dc.transpose(y, (0, 2, 1)), (b, c, h, w))
    out = dc.add(x, y)
    if single:
        out = dc.reshape(out, (c, h, w))
    return out, attn


def entropy_penalty(attention, lam: float):
    """``lam * sum_rows sum_j p_j log p_j`` over the last axis (negative entropy)."""
    p = dc.as_tensor(attention)
    rows = p.data.sum(axis=-1)
    if not np.allclose(rows, 1.0, atol=1e-6, rtol=0):
        worst = float(np.abs(rows - 1).max())
        raise ContractViolation(f"attention rows must sum to 1 (max deviation {worst:.3g})")
    if lam == 0:
        return dc.mul(dc.reduce_sum(p), 0.0) if p.requires_grad else Tensor(0.0)
    plogp = dc.mul(p, dc.log(dc.add(p, 1e-300)))
    return dc.mul(dc.reduce_sum(plogp), float(lam))
