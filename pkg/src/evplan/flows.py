"""Stacked radial flows over a standard-normal base.

Each layer maps z -> z + beta * h(alpha, r) * (z - z0) with r = |z - z0| and
h = 1 / (alpha + r). With alpha = softplus(a) > 0 and beta = -alpha + softplus(b)
the map stays invertible for any raw parameters.
"""

from __future__ import annotations

import numpy as np

from evplan import autodiff as ad

_R_EPS = 1e-12  # keeps the radius differentiable at z == z0


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_flow(rng: np.random.Generator, d: int, n_layers: int, alpha: float = 1.0):
    """Near-identity layers: beta = 0 up to rounding."""
    centers = 0.5 * rng.standard_normal((n_layers, d))
    a_raw = np.full(n_layers, inverse_softplus(alpha))
    b_raw = a_raw.copy()
    return centers, a_raw, b_raw


def flow_log_density(z, centers, a_raw, b_raw) -> ad.Tensor:
    """log p(z) for z of shape (..., d); parameters are Tensors (L, d), (L,), (L,)."""
    z = ad.as_tensor(z)
    d = z.shape[-1]
    n_layers = centers.shape[0]
    logdet = None
    x = z
    for i in range(n_layers):
        z0 = ad.getitem(centers, i)
        alpha = ad.softplus(ad.getitem(a_raw, i))
        beta = ad.softplus(ad.getitem(b_raw, i)) - alpha
        diff = x - z0
        r = ad.sqrt(ad.sum(diff * diff, axis=-1, keepdims=True) + _R_EPS)
        h = 1.0 / (alpha + r)
        bh = beta * h
        # d h / d r = -h^2
        term = (d - 1) * ad.log(1.0 + bh) + ad.log(1.0 + bh - beta * h * h * r)
        logdet = term if logdet is None else logdet + term
        x = x + bh * diff
    base = -0.5 * ad.sum(x * x, axis=-1, keepdims=True) - float(0.5 * d * np.log(2 * np.pi))
    out = base if logdet is None else base + logdet
    return ad.reshape(out, out.shape[:-1])


def flow_log_density_np(z, centers, a_raw, b_raw) -> np.ndarray:
    with ad.no_grad():
        return flow_log_density(
            ad.Tensor(np.asarray(z, dtype=float)), ad.Tensor(centers), ad.Tensor(a_raw), ad.Tensor(b_raw)
        ).data
