"""Learnable codebook and nearest-neighbour vector quantization.

Latents are handled as (M, D) or batched (B, M, D) arrays: M vectors of
dimension D per sample. Quantized features travel as integer index arrays;
the one-hot form is never materialized.
"""

from __future__ import annotations

import numpy as np

from .tensor_core import (
    ConfigurationError,
    InputError,
    Node,
    as_node,
    default_dtype,
    gather_rows,
    mse_norm,
    mul,
    reshape,
    stop_gradient,
    straight_through,
)

DEFAULT_LAMBDA = 0.5


class CorruptMessageError(ValueError):
    """Index data that cannot have come from a valid encoder."""


def codebook_init(K: int, D: int, seed: int) -> np.ndarray:
    """K x D entries drawn i.i.d. from U[-1/K, 1/K]."""
    if K <= 0 or D <= 0:
        raise ConfigurationError(f"codebook needs K, D > 0 (got {K}, {D})")
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0 / K, 1.0 / K, size=(K, D)).astype(default_dtype())


def _codebook_array(codebook) -> np.ndarray:
    return codebook.value if isinstance(codebook, Node) else np.asarray(codebook)


def quantize_nearest(latent, codebook, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Return (indices, quantized) for every latent vector.

    Distances are evaluated in float64 so that the selected entry agrees with
    an exact Euclidean scan; ties go to the lowest index.
    """
    z = np.asarray(latent.value if isinstance(latent, Node) else latent)
    c = _codebook_array(codebook)
    if z.shape[-1] != c.shape[1]:
        raise ConfigurationError(f"latent dimension {z.shape[-1]} != codebook dimension {c.shape[1]}")
    flat = z.reshape(-1, c.shape[1]).astype(np.float64)
    c64 = c.astype(np.float64)
    c_sq = np.einsum("kd,kd->k", c64, c64)
    idx = np.empty(len(flat), dtype=np.int64)
    for start in range(0, len(flat), chunk):
        block = flat[start:start + chunk]
        dist = np.einsum("nd,nd->n", block, block)[:, None] - 2.0 * block @ c64.T + c_sq[None, :]
        idx[start:start + chunk] = dist.argmin(axis=1)
    idx = idx.reshape(z.shape[:-1])
    return idx, c[idx]


def dequantize(indices, codebook) -> np.ndarray:
    c = _codebook_array(codebook)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= c.shape[0]):
        raise CorruptMessageError(f"index outside codebook of size {c.shape[0]}")
    return c[idx] if idx.size else np.zeros(idx.shape + (c.shape[1],), dtype=c.dtype)


def straight_through_compose(e_c: Node, e_d) -> Node:
    """Forward the quantized feature, back-propagate into the encoder output."""
    return straight_through(e_c, e_d)


def _batch(x: Node) -> Node:
    return x if x.value.ndim == 3 else reshape(x, (1,) + x.shape)


def codebook_loss(e_c, indices, codebook: Node, reduction: str = "sum") -> Node:
    """||sg(e_c) - c[indices]||^2; only the selected codebook rows get gradient."""
    e_c = _batch(as_node(e_c))
    idx = np.asarray(indices, dtype=np.int64).reshape(e_c.shape[:-1])
    selected = gather_rows(codebook, idx)
    return mse_norm(stop_gradient(e_c), selected, reduction)


def commitment_loss(e_c: Node, e_d, lam: float = DEFAULT_LAMBDA, reduction: str = "sum") -> Node:
    """lam * ||e_c - sg(e_d)||^2; e_d is treated as a constant."""
    if lam < 0:
        raise InputError("lambda must be non-negative")
    e_c = _batch(as_node(e_c))
    target = np.asarray(e_d.value if isinstance(e_d, Node) else e_d).reshape(e_c.shape)
    return mul(mse_norm(e_c, Node(target), reduction), float(lam))
