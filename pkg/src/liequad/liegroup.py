"""Concrete matrix Lie groups: elements, group charts, and an exp oracle.

Groups are represented by their defining matrix equations (orthogonality,
unit determinant, unipotent pattern), never by exponential coordinates.  The
graph chart inverts a selection of matrix entries by Gauss-Newton projection
onto the defining equations, so the whole chart machinery stays free of the
matrix exponential.  ``matrix_exp_oracle`` exists only as an independent
reference and honors a purity guard that the quadrature tests switch on.

Complex groups (su2) are handled through a real flattening: a matrix maps to
the vector [Re(entries row-major), Im(entries row-major)].
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.linalg

from .liealg import make_algebra
from .numutil import RANK_RTOL

MEMBERSHIP_TOL = 1e-8          # constructed elements must sit on the manifold this well
REPROJECT_LIMIT = 1e-4         # residuals past this are a hard error, no silent repair
EXPANSION_TOL = 1e-10          # adjoint images must expand in the algebra basis this well
NEWTON_TOL = 1e-12
# the graph-chart solve feeds phase points into outer Newton loops whose own
# tolerance is NEWTON_TOL, so it must land well below that to avoid setting
# their residual floor
GRAPH_NEWTON_TOL = 1e-14
NEWTON_MAXIT = 50

_oracle_state = {"forbidden": 0, "calls": 0}


@contextmanager
def forbid_exp_oracle():
    """Make matrix_exp_oracle raise inside the context (purity enforcement)."""
    _oracle_state["forbidden"] += 1
    try:
        yield
    finally:
        _oracle_state["forbidden"] -= 1


def oracle_call_count():
    return _oracle_state["calls"]


class ChartDomainError(RuntimeError):
    """Gauss-Newton failed to invert chart coordinates: point left the chart."""


# -- membership constraints --------------------------------------------------
#
# Each constraint exposes residual(mat) -> vector and jacobian(mat) -> matrix
# with columns indexed by the group's real flat coordinates.


class _Orthogonal:
    def __init__(self, N):
        self.N = N
        self.rows = [(a, b) for a in range(N) for b in range(a, N)]

    def residual(self, g):
        M = g.T @ g - np.eye(self.N)
        return np.array([M[a, b] for a, b in self.rows])

    def jacobian(self, g):
        N = self.N
        J = np.zeros((len(self.rows), N * N))
        for r, (a, b) in enumerate(self.rows):
            for i in range(N):
                J[r, i * N + a] += g[i, b]
                J[r, i * N + b] += g[i, a]
        return J


class _Unitary:
    def __init__(self, N):
        self.N = N
        self.re_rows = [(a, b) for a in range(N) for b in range(a, N)]
        self.im_rows = [(a, b) for a in range(N) for b in range(a + 1, N)]

    def residual(self, g):
        M = g.conj().T @ g - np.eye(self.N)
        re = [M[a, b].real for a, b in self.re_rows]
        im = [M[a, b].imag for a, b in self.im_rows]
        return np.array(re + im)

    def jacobian(self, g):
        N = self.N
        A, B = g.real, g.imag
        nre, nim = len(self.re_rows), len(self.im_rows)
        J = np.zeros((nre + nim, 2 * N * N))
        for r, (a, b) in enumerate(self.re_rows):
            for i in range(N):
                J[r, i * N + b] += A[i, a]
                J[r, i * N + a] += A[i, b]
                J[r, N * N + i * N + b] += B[i, a]
                J[r, N * N + i * N + a] += B[i, b]
        for r, (a, b) in enumerate(self.im_rows):
            for i in range(N):
                # Im (g^H g)_{ab} = sum_i A_ia B_ib - B_ia A_ib
                J[nre + r, i * N + a] += B[i, b]
                J[nre + r, i * N + b] += -B[i, a]
                J[nre + r, N * N + i * N + b] += A[i, a]
                J[nre + r, N * N + i * N + a] += -A[i, b]
        return J


def _adjugate(g):
    N = g.shape[0]
    d = np.linalg.det(g)
    if abs(d) > 1e-3:
        # group iterates stay near |det| = 1, where adj = det * inv
        return d * np.linalg.inv(g)
    adj = np.empty_like(g)
    for i in range(N):
        for j in range(N):
            minor = np.delete(np.delete(g, j, axis=0), i, axis=1)
            adj[i, j] = (-1) ** (i + j) * np.linalg.det(minor) if N > 1 else 1.0
    return adj


class _UnitDet:
    def __init__(self, N, complex_entries=False):
        self.N = N
        self.complex_entries = complex_entries

    def residual(self, g):
        d = np.linalg.det(g)
        if self.complex_entries:
            return np.array([d.real - 1.0, d.imag])
        return np.array([d - 1.0])

    def jacobian(self, g):
        N = self.N
        D = _adjugate(g).T  # D[i, j] = d det / d g_{ij}
        if not self.complex_entries:
            return D.reshape(1, -1)
        J = np.zeros((2, 2 * N * N))
        J[0, : N * N] = D.real.reshape(-1)
        J[0, N * N :] = -D.imag.reshape(-1)
        J[1, : N * N] = D.imag.reshape(-1)
        J[1, N * N :] = D.real.reshape(-1)
        return J


class _Pattern:
    """Affine entry constraints: flat[index] == value."""

    def __init__(self, flat_dim, pairs):
        self.pairs = list(pairs)
        self.J = np.zeros((len(self.pairs), flat_dim))
        for r, (idx, _) in enumerate(self.pairs):
            self.J[r, idx] = 1.0

    def residual_flat(self, u):
        return np.array([u[idx] - val for idx, val in self.pairs])

    def jacobian(self, _g):
        return self.J


# -- the group class ---------------------------------------------------------


class GroupElement:
    __slots__ = ("matrix", "group", "_ad", "_adit")

    def __init__(self, matrix, group):
        m = np.array(matrix)
        m.setflags(write=False)
        self.matrix = m
        self.group = group
        self._ad = None
        self._adit = None

    def __matmul__(self, other):
        return self.group.compose(self, other)

    def inverse(self):
        return self.group.inverse(self)

    def __repr__(self):
        return f"GroupElement({self.group.name}, {np.array2string(self.matrix, precision=4)})"


class MatrixGroup:
    """A matrix group with its Lie algebra, membership equations, and charts."""

    def __init__(self, name, algebra, basis_matrices, constraints, project):
        self.name = name
        self.algebra = algebra
        basis = np.asarray(basis_matrices)
        self.is_complex = np.iscomplexobj(basis)
        self.basis = basis
        self.N = basis.shape[1]
        self.dim = algebra.dim
        self.flat_dim = (2 if self.is_complex else 1) * self.N * self.N
        self.constraints = constraints
        self._project_matrix = project
        # flat images of the basis, and a pseudo-inverse for expanding
        # algebra-valued matrices back into coordinates
        self._basis_flat = np.stack([self.flat(X) for X in basis])
        self._expand = np.linalg.pinv(self._basis_flat.T)
        self._basis_stack = np.stack([np.asarray(X) for X in basis])
        self._check_bracket_consistency()

    def _flat_stack(self, mats):
        """Rows of flat() applied to a stack of matrices."""
        m = np.asarray(mats)
        k = m.shape[0]
        if self.is_complex:
            return np.concatenate([m.real.reshape(k, -1), m.imag.reshape(k, -1)], axis=1)
        return m.reshape(k, -1).astype(float, copy=False)

    def _check_bracket_consistency(self):
        for i in range(self.dim):
            for j in range(self.dim):
                lhs = self.basis[i] @ self.basis[j] - self.basis[j] @ self.basis[i]
                rhs = self.algebra_matrix(self.algebra.c[i, j])
                if np.max(np.abs(lhs - rhs)) > 1e-12:
                    raise ValueError(
                        f"{self.name}: matrix commutators disagree with structure constants"
                    )

    # flat real coordinates ---------------------------------------------------

    def flat(self, matrix):
        m = np.asarray(matrix)
        if self.is_complex:
            return np.concatenate([m.real.reshape(-1), m.imag.reshape(-1)])
        return m.reshape(-1).astype(float, copy=True)

    def unflat(self, u):
        n2 = self.N * self.N
        if self.is_complex:
            return u[:n2].reshape(self.N, self.N) + 1j * u[n2:].reshape(self.N, self.N)
        return u.reshape(self.N, self.N).copy()

    def algebra_matrix(self, xi):
        """Represent algebra coordinates as a matrix."""
        return np.tensordot(np.asarray(xi, float), self.basis, axes=(0, 0))

    def algebra_coords(self, matrix):
        """Expand an algebra-valued matrix in the basis; error if it does not fit."""
        u = self.flat(matrix)
        coords = self._expand @ u
        resid = np.linalg.norm(self._basis_flat.T @ coords - u)
        if resid > EXPANSION_TOL * max(1.0, np.linalg.norm(u)):
            raise ValueError(f"{self.name}: matrix does not lie in the algebra (residual {resid:.2e})")
        return coords

    def _algebra_coords_stack(self, mats):
        """Expand a stack of algebra-valued matrices; rows are coordinate vectors."""
        u = self._flat_stack(mats)
        coords = u @ self._expand.T
        resid = np.linalg.norm(coords @ self._basis_flat - u, axis=1)
        scale = np.maximum(1.0, np.linalg.norm(u, axis=1))
        worst = np.max(resid / scale) if len(resid) else 0.0
        if worst > EXPANSION_TOL:
            raise ValueError(f"{self.name}: matrix does not lie in the algebra (residual {worst:.2e})")
        return coords

    # membership --------------------------------------------------------------

    def membership_vector(self, matrix):
        parts = []
        u = None
        for con in self.constraints:
            if isinstance(con, _Pattern):
                u = self.flat(matrix) if u is None else u
                parts.append(con.residual_flat(u))
            else:
                parts.append(con.residual(matrix))
        return np.concatenate(parts)

    def membership_jacobian(self, matrix):
        return np.vstack([con.jacobian(matrix) for con in self.constraints])

    def membership_residual(self, matrix):
        return float(np.linalg.norm(self.membership_vector(matrix)))

    def element(self, matrix, policy=True):
        """Wrap a matrix, applying the re-projection policy.

        Residual <= 1e-8: accept.  In (1e-8, 1e-4]: re-project onto the
        manifold and re-validate.  Larger: hard error.
        """
        m = np.asarray(matrix, dtype=complex if self.is_complex else float)
        r = self.membership_residual(m)
        if r > MEMBERSHIP_TOL:
            if not policy or r > REPROJECT_LIMIT:
                raise ValueError(f"{self.name}: matrix off the group manifold (residual {r:.3e})")
            m = self._project_matrix(m)
            r = self.membership_residual(m)
            if r > MEMBERSHIP_TOL:
                raise ValueError(f"{self.name}: re-projection failed (residual {r:.3e})")
        return GroupElement(m, self)

    def identity(self):
        dtype = complex if self.is_complex else float
        return GroupElement(np.eye(self.N, dtype=dtype), self)

    def compose(self, a, b):
        return self.element(a.matrix @ b.matrix)

    def inverse(self, a):
        return self.element(np.linalg.inv(a.matrix))

    # adjoint / coadjoint ------------------------------------------------------

    def adjoint_matrix(self, g):
        """Matrix of Ad_g on algebra coordinates (columns are Ad_g e_i)."""
        if isinstance(g, GroupElement):
            if g._ad is None:
                g._ad = self._adjoint_of(g.matrix)
            return g._ad
        return self._adjoint_of(np.asarray(g))

    def _adjoint_of(self, gm):
        ginv = np.linalg.inv(gm)
        conj = np.einsum("ij,njk,kl->nil", gm, self._basis_stack, ginv)
        return self._algebra_coords_stack(conj).T

    def adjoint_inv_transpose(self, g):
        """Transposed inverse of Ad_g: the matrix of the coadjoint action."""
        if isinstance(g, GroupElement) and g._adit is not None:
            return g._adit
        out = np.linalg.inv(self.adjoint_matrix(g)).T
        if isinstance(g, GroupElement):
            g._adit = out
        return out

    def adjoint(self, g, xi):
        return self.adjoint_matrix(g) @ np.asarray(xi, float)

    def coadjoint(self, g, alpha):
        """<coadjoint(g, alpha), eta> = <alpha, Ad_{g^-1} eta>."""
        return self.adjoint_inv_transpose(g) @ np.asarray(alpha, float)

    # tangent helpers ----------------------------------------------------------

    def tangent_matrix(self, g, v_body):
        """Tangent matrix g @ X(v) for body coordinates v."""
        gm = g.matrix if isinstance(g, GroupElement) else np.asarray(g)
        return gm @ self.algebra_matrix(v_body)

    def body_coords(self, g, tangent):
        """Body coordinates of a tangent matrix at g: expand g^-1 dg."""
        gm = g.matrix if isinstance(g, GroupElement) else np.asarray(g)
        return self.algebra_coords(np.linalg.solve(gm, tangent))


# -- catalogue ----------------------------------------------------------------


def _so3_basis():
    L = np.zeros((3, 3, 3))
    for i, (j, k) in enumerate(((1, 2), (2, 0), (0, 1))):
        L[i, j, k] = -1.0
        L[i, k, j] = 1.0
    return L


def _project_polar_real(m):
    u, _s, vt = np.linalg.svd(m)
    p = u @ vt
    if np.linalg.det(p) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        p = u @ vt
    return p


def _project_polar_unitary(m):
    u, _s, vh = np.linalg.svd(m)
    p = u @ vh
    d = np.linalg.det(p)
    return p / np.sqrt(d)


def _project_unit_det(m):
    d = np.linalg.det(m)
    if d <= 0:
        raise ValueError("cannot re-project: determinant not positive")
    return m / np.sqrt(d)


def _pattern_projector(pairs, unflat, flat):
    def project(m):
        u = flat(m)
        for idx, val in pairs:
            u[idx] = val
        return unflat(u)

    return project


def make_group(key):
    """Catalogue groups: "so3", "su2", "sl2r", "heis3", "rn:<k>"."""
    if key == "so3":
        alg = make_algebra("so3")
        return MatrixGroup(
            "so3", alg, _so3_basis(),
            [_Orthogonal(3), _UnitDet(3)], _project_polar_real,
        )
    if key == "su2":
        alg = make_algebra("su2")
        s1 = np.array([[0, 1], [1, 0]], dtype=complex)
        s2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
        s3 = np.array([[1, 0], [0, -1]], dtype=complex)
        basis = np.stack([-0.5j * s1, -0.5j * s2, -0.5j * s3])
        return MatrixGroup(
            "su2", alg, basis,
            [_Unitary(2), _UnitDet(2, complex_entries=True)], _project_polar_unitary,
        )
    if key == "sl2r":
        alg = make_algebra("sl2r")
        basis = np.stack([
            np.array([[1.0, 0.0], [0.0, -1.0]]),
            np.array([[0.0, 1.0], [1.0, 0.0]]),
            np.array([[0.0, 1.0], [-1.0, 0.0]]),
        ])
        return MatrixGroup("sl2r", alg, basis, [_UnitDet(2)], _project_unit_det)
    if key == "heis3":
        alg = make_algebra("heis3")
        E = np.zeros((3, 3, 3))
        E[0, 0, 1] = 1.0  # x
        E[1, 1, 2] = 1.0  # y
        E[2, 0, 2] = 1.0  # z (central)
        pairs = [(0, 1.0), (4, 1.0), (8, 1.0), (3, 0.0), (6, 0.0), (7, 0.0)]
        pat = _Pattern(9, pairs)
        g = MatrixGroup(
            "heis3", alg, E, [pat],
            _pattern_projector(pairs, lambda u: u.reshape(3, 3), lambda m: m.reshape(-1).copy()),
        )
        return g
    if key.startswith("rn:"):
        alg = make_algebra(key)
        k = alg.dim
        N = k + 1
        E = np.zeros((k, N, N))
        for i in range(k):
            E[i, i, N - 1] = 1.0
        free = {i * N + (N - 1) for i in range(k)}
        pairs = []
        for i in range(N):
            for j in range(N):
                idx = i * N + j
                if idx in free:
                    continue
                pairs.append((idx, 1.0 if i == j else 0.0))
        pat = _Pattern(N * N, pairs)
        return MatrixGroup(
            key, alg, E, [pat],
            _pattern_projector(pairs, lambda u: u.reshape(N, N), lambda m: m.reshape(-1).copy()),
        )
    raise KeyError(f"unknown group key {key!r}")


# -- exp oracle ---------------------------------------------------------------


def matrix_exp_oracle(group, xi, t=1.0):
    """exp(t xi) by scaling-and-squaring with an 18-term Taylor series.

    Independent reference implementation; the quadrature route never calls
    this.  Raises under the purity guard.
    """
    if _oracle_state["forbidden"]:
        raise RuntimeError("matrix_exp_oracle invoked while the purity guard is active")
    _oracle_state["calls"] += 1
    A = t * group.algebra_matrix(xi)
    norm = np.linalg.norm(A)
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    B = A / (2**s)
    term = np.eye(group.N, dtype=B.dtype)
    acc = np.eye(group.N, dtype=B.dtype)
    for k in range(1, 19):
        term = term @ B / k
        acc = acc + term
    for _ in range(s):
        acc = acc @ acc
    return group.element(acc)


# -- graph chart --------------------------------------------------------------


class GraphChart:
    """Local coordinates on the group: n selected matrix entries near g0.

    Entry selection is a greedy column-pivoted QR of the differential matrix
    (rows = flat tangent basis at g0), so the selected entries have linearly
    independent differentials.  Inversion runs Gauss-Newton on the defining
    equations plus the entry equations; no exponential anywhere.
    """

    def __init__(self, group, g0=None):
        self.group = group
        self.g0 = g0 if g0 is not None else group.identity()
        D = np.stack([group.flat(group.tangent_matrix(self.g0, e)) for e in np.eye(group.dim)])
        _q, R, piv = scipy.linalg.qr(D, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.size < group.dim or diag[-1] <= RANK_RTOL * diag[0]:
            raise ValueError("degenerate tangent basis: cannot select chart entries")
        self.selected = np.sort(piv[: group.dim])
        self._flat0 = group.flat(self.g0.matrix)
        self._x0sel = self._flat0[self.selected]
        self._validity = None

    def to_coords(self, g):
        gm = g.matrix if isinstance(g, GroupElement) else np.asarray(g)
        return self.group.flat(gm)[self.selected] - self._x0sel

    def from_coords(self, x, warm=None):
        """Invert the chart by Gauss-Newton; ChartDomainError on failure."""
        grp = self.group
        target = np.asarray(x, float) + self._x0sel
        u = grp.flat(warm.matrix) if warm is not None else self._flat0.copy()

        def full_residual(uu):
            m = grp.unflat(uu)
            return np.concatenate([grp.membership_vector(m), uu[self.selected] - target])

        r = full_residual(u)
        rn = np.linalg.norm(r)
        sel_rows = np.zeros((len(self.selected), grp.flat_dim))
        for i, idx in enumerate(self.selected):
            sel_rows[i, idx] = 1.0
        slow = 0
        for _ in range(NEWTON_MAXIT):
            if rn <= GRAPH_NEWTON_TOL:
                # the residual already bounds the membership defect, so wrap
                # the matrix directly instead of re-validating
                return GroupElement(grp.unflat(u), grp)
            J = np.vstack([grp.membership_jacobian(grp.unflat(u)), sel_rows])
            step = scipy.linalg.lstsq(J, -r, lapack_driver="gelsy")[0]
            t = 1.0
            for _bt in range(16):
                u_try = u + t * step
                r_try = full_residual(u_try)
                rn_try = np.linalg.norm(r_try)
                if rn_try < rn:
                    # converging solves contract fast; persistent slow decrease
                    # means the target is outside the chart, so abort early
                    slow = slow + 1 if rn_try > 0.25 * rn else 0
                    u, r, rn = u_try, r_try, rn_try
                    break
                t *= 0.5
            else:
                break
            if slow >= 5:
                break
        if rn <= GRAPH_NEWTON_TOL:
            return GroupElement(grp.unflat(u), grp)
        raise ChartDomainError(
            f"{grp.name} graph chart inversion did not converge (residual {rn:.3e})"
        )

    def tangent_coords_matrix(self, g):
        """Matrix M with M @ v_body = d(to_coords)/dt along tangent g X(v)."""
        grp = self.group
        gm = g.matrix if isinstance(g, GroupElement) else np.asarray(g)
        tangents = np.einsum("ij,njk->nik", gm, grp._basis_stack)
        return grp._flat_stack(tangents)[:, self.selected].T

    def validity_radius(self, n_probes=16, bisect_steps=8, seed=2718):
        """Largest r (bisection) with chart inversion converging on a probe sphere."""
        if self._validity is not None:
            return self._validity
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((n_probes, self.group.dim))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]

        def ok(r):
            for d in dirs:
                try:
                    self.from_coords(r * d)
                except (ChartDomainError, ValueError):
                    return False
            return True

        lo, hi = 0.0, 0.25
        while ok(hi) and hi < 64.0:
            lo, hi = hi, 2.0 * hi
        for _ in range(bisect_steps):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
        self._validity = lo
        return lo

