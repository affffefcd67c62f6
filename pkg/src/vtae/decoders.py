"""Small analytic decoders (latent batch (B, J) -> data batch (B, N)).

They serve as fixtures with known geometry: a flat identity map, a linear
map, and the unit-circle embedding of a 1-D latent.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc


def identity_decoder(z):
    return dc.identity(z)


class LinearDecoder:
    """z -> z A^T for a fixed (N, J) matrix A."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)

    def __call__(self, z):
        return dc.matmul(dc.as_tensor(z), self.a.T)


def scaled(decoder, factor: float):
    """Decoder whose output is ``factor`` times that of ``decoder``."""
    return lambda z: dc.mul(decoder(z), float(factor))


def circle_decoder(z):
    """theta -> (cos theta, sin theta) for a (B, 1) latent batch."""
    z = dc.as_tensor(z)
    return dc.concat([dc.cos(z), dc.sin(z)], axis=-1)
