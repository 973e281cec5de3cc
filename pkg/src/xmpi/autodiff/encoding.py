"""Sinusoidal positional encoding of normalized coordinates."""

import numpy as np


def positional_encoding(p, levels: int) -> np.ndarray:
    """Lift ``p`` (any shape, values in [-1, 1]) to ``(..., 2 * levels)``.

    Output order is ``sin(2^0 π p), cos(2^0 π p), ..., sin(2^(L-1) π p), cos(2^(L-1) π p)``.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    p = np.asarray(p)
    if p.dtype.kind != "f":
        p = p.astype(np.float64)
    freq = (2.0 ** np.arange(levels) * np.pi).astype(p.dtype)
    arg = p[..., None] * freq
    out = np.empty(p.shape + (2 * levels,), dtype=p.dtype)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def encode_coordinates(xyz, t, spatial_levels: int = 10, time_levels: int = 6) -> np.ndarray:
    """Concatenate encodings of x, y, z (``spatial_levels`` each) and t.

    ``xyz``: (n, 3), ``t``: (n,) or scalar. Returns (n, 6 * spatial_levels + 2 * time_levels).
    """
    xyz = np.asarray(xyz)
    n = xyz.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=xyz.dtype), (n,))
    enc = positional_encoding(xyz, spatial_levels).reshape(n, 6 * spatial_levels)
    return np.concatenate([enc, positional_encoding(t, time_levels)], axis=1)
