import numpy as np

TAYLOR_DEGREE = 13
SQUARING_THRESHOLD = 0.5


def matrix_exp(a):
    """Matrix exponential by scaling and squaring with a degree-13 Taylor series.

    Accepts a single ``(d, d)`` matrix or a stack ``(..., d, d)``. Each matrix
    is scaled by ``2**-s`` so that its 1-norm is at most 0.5, where the
    truncated series is accurate to machine precision, then squared ``s`` times.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    d = a.shape[-1]
    norms = np.abs(a).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norms / SQUARING_THRESHOLD))
    s = np.where(np.isfinite(s) & (s > 0), s, 0).astype(int)
    scaled = a / (2.0 ** s)[..., None, None]

    eye = np.broadcast_to(np.eye(d), a.shape)
    result = eye.copy()
    # Horner: I + X(I + X/2(I + X/3(...)))
    for k in range(TAYLOR_DEGREE, 0, -1):
        result = eye + (scaled @ result) / k

    for step in range(int(s.max()) if s.size else 0):
        sq = result @ result
        mask = (s > step)[..., None, None]
        result = np.where(mask, sq, result)
    return result
