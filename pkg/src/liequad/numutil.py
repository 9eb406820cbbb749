"""Small shared numerical helpers: quadrature nodes, finite differences, rank tools.

Everything here is deterministic.  Rank decisions use a relative singular
value cutoff so that scale changes in the input do not flip decisions.
"""

from __future__ import annotations

import numpy as np

# Singular values <= RANK_RTOL * sigma_max count as zero everywhere in the package.
RANK_RTOL = 1e-8

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(order):
    """Nodes and weights on [0, 1], cached per order."""
    try:
        return _GL_CACHE[order]
    except KeyError:
        x, w = np.polynomial.legendre.leggauss(order)
        pair = (0.5 * (x + 1.0), 0.5 * w)
        _GL_CACHE[order] = pair
        return pair


def numerical_rank(mat, rtol=RANK_RTOL, scale=0.0):
    """Rank via SVD with relative cutoff; rank 0 for an (effectively) zero matrix.

    ``scale`` raises the reference the cutoff is relative to; pass the natural
    magnitude of the matrix's inputs so that a matrix that is tiny only
    because of roundoff in those inputs does not rank against its own noise.
    """
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    ref = max(s[0], scale)
    if ref == 0.0:
        return 0
    return int(np.sum(s > rtol * ref))


def nullspace(mat, rtol=RANK_RTOL, scale=0.0):
    """Orthonormal basis (columns) of the kernel of ``mat``."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    u, s, vt = np.linalg.svd(mat)
    smax = s[0] if s.size else 0.0
    ref = max(smax, scale)
    rank = int(np.sum(s > rtol * ref)) if ref > 0 else 0
    return vt[rank:].T.copy()


def central_gradient(f, x, step=1e-6, richardson=True):
    """Central-difference gradient of scalar f at x, one Richardson level by default."""
    x = np.asarray(x, dtype=float)
    n = x.size

    def cd(h):
        g = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
        return g

    if not richardson:
        return cd(step)
    g1 = cd(step)
    g2 = cd(step / 2.0)
    return (4.0 * g2 - g1) / 3.0


def central_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian of vector f at x (no Richardson)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * step))
    return np.stack(cols, axis=-1)


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def format_float(x):
    """17 significant digits, enough to round-trip a float64 exactly."""
    return format(float(x), ".17g")
