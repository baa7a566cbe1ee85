"""Reference numpy implementations of the hot kernels.

These define the semantics the compiled module must reproduce.
"""
import numpy as np


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu_forward(z):
    """Return ``(z * sigmoid(z), sigmoid(z))`` for a 2-D float64 array."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    sig = _sigmoid(z)
    return z * sig, sig


def silu_backward(g, z, sig):
    """Chain ``g`` through SiLU given the cached pre-activation and sigmoid."""
    if g.shape != z.shape or sig.shape != z.shape:
        raise ValueError("silu_backward: shape mismatch")
    return g * (sig + z * sig * (1.0 - sig))


def inverse_cdf(weights, uniforms):
    """Map uniforms in [0, 1) to indices drawn from unnormalized ``weights``.

    Index ``i`` is returned for ``u * total`` in ``[cum[i-1], cum[i])``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ValueError("inverse_cdf: empty weights")
    if np.any(weights < 0.0):
        raise ValueError("inverse_cdf: negative weight")
    cum = np.cumsum(weights)
    total = cum[-1]
    if not total > 0.0:
        raise ValueError("inverse_cdf: weights sum to zero")
    u = np.asarray(uniforms, dtype=np.float64) * total
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, weights.size - 1).astype(np.int64)
