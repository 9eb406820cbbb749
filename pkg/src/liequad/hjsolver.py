"""Integration of invariant systems by quadratures.

Four-step route around a center point of phase space: (1) reduce the
conserved momentum pair to its locally independent components, (2) build a
complete solution chart parametrizing the nearby momentum fibers, (3) obtain
a generating function and a linearizing map by one-dimensional quadratures,
(4) evolve linearly in the linearized coordinates and map back.  No matrix
exponential is used anywhere on this route.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cotangent import PhasePoint, TangentPhaseVector
from .liegroup import NEWTON_MAXIT, NEWTON_TOL, ChartDomainError, GraphChart
from .numutil import gauss_legendre, nullspace, numerical_rank

GN_TOL = 1e-10
GN_MAXIT = 20
AUDIT_TOL = 1e-9
ISOTROPY_TOL = 1e-8
TANGENCY_TOL = 1e-8
RATE_DRIFT_TOL = 1e-5
HALVING_LIMIT = 12
FAIL_BUDGET = 16
RECENTER_LIMIT = 64


class HypothesisError(ValueError):
    """An integrability hypothesis failed its numerical check."""


@dataclass
class QuadratureConfig:
    """Knobs for the one-dimensional quadratures and finite differences."""

    order: int = 6
    max_panels: int = 16
    quad_tol: float = 1e-12
    fd_step: float = 1e-6


@dataclass
class TrajectorySample:
    """Sampled trajectory with per-sample audit data."""

    ts: np.ndarray
    points: list
    diagnostics: dict = field(default_factory=dict)

    def state_rows(self):
        """Rows [t, flat(g)..., alpha...] for serialization."""
        rows = []
        for t, p in zip(self.ts, self.points):
            grp = p.g.group
            rows.append(np.concatenate([[t], grp.flat(p.g.matrix), p.alpha]))
        return np.array(rows)


def fiber_isotropy_defect(bundle, p):
    """Largest |omega| over a kernel basis of the momentum-pair differential."""
    J = bundle.momentum_pair_jacobian_body(p)
    K = nullspace(J)
    if K.shape[1] == 0:
        return 0.0
    O = bundle.omega_matrix(p)
    return float(np.max(np.abs(K.T @ O @ K)))


class FirstIntegralsMap:
    """Locally independent components of the conserved momentum pair.

    Near a point whose body momentum has isotropy dimension k the raw pair
    (spatial, body) has rank 2n - k; the reduction projects the raw values
    onto the top left-singular directions of the chart Jacobian at the
    center.  Phase-space coordinates are (entry chart of the group factor,
    body momentum).
    """

    def __init__(self, bundle, center):
        self.bundle = bundle
        self.center = center
        self.dim = bundle.group.dim
        self.chart = GraphChart(bundle.group, center.g)
        self.x0 = np.concatenate([np.zeros(self.dim), center.alpha])
        self.raw0 = bundle.momentum_pair(center)
        J0 = self.raw_jacobian_coords(center)
        k = bundle.algebra.isotropy_dimension(center.alpha)
        ell = 2 * self.dim - k
        r = numerical_rank(J0)
        if r != ell:
            raise HypothesisError(
                f"momentum-pair rank {r} disagrees with the isotropy count {ell} at the center"
            )
        U, s, Vt = np.linalg.svd(J0)
        self.rank = ell
        self.deficiency = k
        self.reduce = U[:, :ell]
        self.kernel = Vt[ell:].T
        self.sigma_min = float(s[ell - 1])

    def coords(self, p):
        return np.concatenate([self.chart.to_coords(p.g), p.alpha])

    def point(self, x, warm=None):
        g = self.chart.from_coords(x[: self.dim], warm=warm)
        return PhasePoint(g, np.asarray(x[self.dim :], float))

    def body_from_coords(self, p, dx):
        """Coordinate perturbation (dq, da) as a body tangent vector."""
        M = self.chart.tangent_coords_matrix(p.g)
        return TangentPhaseVector(np.linalg.solve(M, dx[: self.dim]), dx[self.dim :])

    def raw_jacobian_coords(self, p):
        Jb = self.bundle.momentum_pair_jacobian_body(p)
        M = self.chart.tangent_coords_matrix(p.g)
        T = np.eye(2 * self.dim)
        T[: self.dim, : self.dim] = np.linalg.inv(M)
        return Jb @ T

    def value(self, p):
        return self.reduce.T @ (self.bundle.momentum_pair(p) - self.raw0)

    def jacobian_coords(self, p):
        return self.reduce.T @ self.raw_jacobian_coords(p)


class _FailFloor:
    """Smallest |n| whose inversion failed, learned during one flow call."""

    __slots__ = ("radius",)

    def __init__(self):
        self.radius = np.inf


class _ChartNode:
    """A solved chart point with its factored linearization.

    The inverse tangent-coordinate matrix, the symplectic matrix, and the
    momentum-direction body tangents are all point data; they are computed
    once and reused by every derivative product at the node.
    """

    __slots__ = ("owner", "p", "x", "lu", "lam", "n", "_minv", "_omat", "_lam_body", "_ljac")

    def __init__(self, owner, p, x, lu, lam, n):
        self.owner = owner
        self.p = p
        self.x = x
        self.lu = lu
        self.lam = lam
        self.n = n
        self._minv = None
        self._omat = None
        self._lam_body = None
        self._ljac = None

    @property
    def minv(self):
        if self._minv is None:
            chart = self.owner.integrals.chart
            self._minv = np.linalg.inv(chart.tangent_coords_matrix(self.p.g))
        return self._minv

    @property
    def omat(self):
        if self._omat is None:
            self._omat = self.owner.bundle.omega_matrix(self.p)
        return self._omat

    def body_vector(self, dn, dlam):
        """Concatenated body tangent of the solution map along (dn, dlam)."""
        dx = scipy.linalg.lu_solve(self.lu, np.concatenate([dn, dlam]))
        dim = self.owner.integrals.dim
        return np.concatenate([self.minv @ dx[:dim], dx[dim:]])

    def tangent(self, dn, dlam):
        """Chart derivative of the solution map in the direction (dn, dlam)."""
        w = self.body_vector(dn, dlam)
        dim = self.owner.integrals.dim
        return TangentPhaseVector(w[:dim], w[dim:])

    def lam_body(self):
        """Momentum-direction body tangents as columns of a 2*dim x ell array."""
        if self._lam_body is None:
            k, ell = self.owner.k, self.owner.ell
            dim = self.owner.integrals.dim
            dx = scipy.linalg.lu_solve(self.lu, np.vstack([np.zeros((k, ell)), np.eye(ell)]))
            self._lam_body = np.vstack([self.minv @ dx[:dim], dx[dim:]])
        return self._lam_body

    def lam_tangents(self):
        B = self.lam_body()
        dim = self.owner.integrals.dim
        return [TangentPhaseVector(B[:dim, j], B[dim:, j]) for j in range(B.shape[1])]

    def omega(self, w1, w2):
        return float(w1.concat() @ self.omat @ w2.concat())

    def theta(self, w):
        return self.owner.bundle.theta(self.p, w)


class CompleteSolutionChart:
    """Fiberwise parametrization of phase space near a center point.

    Coordinates (lam, n): lam are the reduced momentum values, n are
    transversal coordinates along the momentum fibers.  The chart solves for
    the phase point with prescribed (lam, n), carries exact derivatives from
    the factored solve, and computes the generating function and the
    linearizing map by quadratures.
    """

    def __init__(self, bundle, dyn_field, center, config=None, check=True):
        self.bundle = bundle
        self.field = dyn_field
        self.config = config or QuadratureConfig()
        self.integrals = FirstIntegralsMap(bundle, center)
        self.trans = self.integrals.kernel.T
        self.k = self.integrals.deficiency
        self.ell = self.integrals.rank
        self._validity = None
        if check:
            self.check_hypotheses()

    # -- hypothesis checks -----------------------------------------------

    def check_hypotheses(self, n_samples=8, seed=4321, radius=0.1):
        d_iso = fiber_isotropy_defect(self.bundle, self.integrals.center)
        if d_iso > ISOTROPY_TOL:
            raise HypothesisError(
                f"momentum fibers are not isotropic at the center (defect {d_iso:.3e})"
            )
        d_tan = self.tangency_defect(n_samples=n_samples, seed=seed, radius=radius)
        if d_tan > TANGENCY_TOL:
            raise HypothesisError(
                f"the field is not tangent to the momentum fibers (defect {d_tan:.3e}); "
                "the momentum pair is not conserved by this dynamics"
            )

    def tangency_defect(self, n_samples=8, seed=4321, radius=0.1):
        """Sup of |DF X| over sampled chart points (F the raw momentum pair)."""
        ints = self.integrals
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(n_samples + 1):
            if i == 0:
                p = ints.center
            else:
                x = ints.x0 + radius * rng.standard_normal(2 * ints.dim)
                p = ints.point(x, warm=ints.center.g)
            w = self.field(p)
            img = self.bundle.momentum_pair_jacobian_body(p) @ w.concat()
            worst = max(worst, np.linalg.norm(img) / max(1.0, np.linalg.norm(w.concat())))
        return worst

    # -- chart solves ------------------------------------------------------

    def coords(self, p):
        """(lam, n) of a phase point; meaningful near the center only."""
        ints = self.integrals
        lam = ints.value(p)
        n = self.trans @ (ints.coords(p) - ints.x0)
        return lam, n

    def invert(self, lam, n, x_init=None, warm_g=None):
        """Solve for the phase point with coordinates (lam, n); Newton."""
        ints = self.integrals
        lam = np.asarray(lam, float)
        n = np.asarray(n, float)
        if x_init is None:
            A0 = self._system_matrix(ints.center)
            x = ints.x0 + np.linalg.solve(A0, np.concatenate([n, lam]))
        else:
            x = np.asarray(x_init, float).copy()
        warm = warm_g if warm_g is not None else ints.center.g
        scale = max(1.0, float(np.linalg.norm(lam)), float(np.linalg.norm(n)))
        p = ints.point(x, warm=warm)
        r = self._residual(p, x, lam, n)
        rn = np.linalg.norm(r)
        slow = 0
        for _ in range(NEWTON_MAXIT):
            if rn <= NEWTON_TOL * scale:
                return p, x
            A = self._system_matrix(p)
            step = np.linalg.solve(A, -r)
            t = 1.0
            for _bt in range(16):
                x_try = x + t * step
                try:
                    p_try = ints.point(x_try, warm=p.g)
                except (ChartDomainError, ValueError):
                    t *= 0.5
                    continue
                r_try = self._residual(p_try, x_try, lam, n)
                rn_try = np.linalg.norm(r_try)
                if rn_try < rn:
                    # persistent slow decrease means (lam, n) is out of reach
                    slow = slow + 1 if rn_try > 0.25 * rn else 0
                    p, x, r, rn = p_try, x_try, r_try, rn_try
                    break
                t *= 0.5
            else:
                break
            if slow >= 5:
                break
        if rn <= NEWTON_TOL * scale:
            return p, x
        raise ChartDomainError(
            f"complete-solution inversion did not converge (residual {rn:.3e})"
        )

    def point(self, lam, n, x_init=None):
        return self.invert(lam, n, x_init=x_init)[0]

    def _residual(self, p, x, lam, n):
        return np.concatenate(
            [self.trans @ (x - self.integrals.x0) - n, self.integrals.value(p) - lam]
        )

    def _system_matrix(self, p):
        return np.vstack([self.trans, self.integrals.jacobian_coords(p)])

    def _node(self, lam, n, from_node=None):
        lam = np.asarray(lam, float)
        n = np.asarray(n, float)
        if from_node is None:
            p, x = self.invert(lam, n)
        else:
            # first-order predictor through the neighbor's factored system
            rhs = np.concatenate([n - from_node.n, lam - from_node.lam])
            x_init = from_node.x + scipy.linalg.lu_solve(from_node.lu, rhs)
            p, x = self.invert(lam, n, x_init=x_init, warm_g=from_node.p.g)
        lu = scipy.linalg.lu_factor(self._system_matrix(p))
        return _ChartNode(self, p, x, lu, lam, n)

    def validity_radius(self, n_probes=16, bisect_steps=8, seed=2718):
        """Largest rho (bisection) with inversion converging on a probe sphere."""
        if self._validity is not None:
            return self._validity
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((n_probes, self.ell + self.k))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]

        def ok(rho):
            for d in dirs:
                try:
                    self.invert(rho * d[: self.ell], rho * d[self.ell :])
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

    # -- quadratures -------------------------------------------------------

    def _segment_quad(self, integrand):
        """Adaptive quadrature with an embedded half-order error estimate.

        Panels double globally until the estimate converges.  Integrands are
        analytic inside the chart, so non-convergence at the panel cap is a
        domain failure, not a refinement problem; raising keeps the cost of
        probing past the chart boundary bounded.
        """
        nodes_hi, weights_hi = gauss_legendre(self.config.order)
        nodes_lo, weights_lo = gauss_legendre(max(2, self.config.order // 2))

        def gl(nodes, weights, a, b):
            h = b - a
            total = 0.0
            for s, w in zip(nodes, weights):
                total = total + w * integrand(a + s * h)
            return h * total

        panels = 1
        err = np.inf
        while panels <= self.config.max_panels:
            edges = np.linspace(0.0, 1.0, panels + 1)
            hi = lo = 0.0
            for a, b in zip(edges[:-1], edges[1:]):
                hi = hi + gl(nodes_hi, weights_hi, a, b)
                lo = lo + gl(nodes_lo, weights_lo, a, b)
            err = np.max(np.abs(np.atleast_1d(hi - lo)))
            if err <= self.config.quad_tol * max(1.0, float(np.max(np.abs(np.atleast_1d(hi))))):
                return hi
            panels *= 2
        raise ChartDomainError(f"quadrature refinement exhausted (estimate gap {err:.3e})")

    def _phi_increment(self, lam, n_a, n_b, warm_node=None):
        """Integral along the straight fiber segment of -omega(d_lam, d_s)."""
        n_a = np.asarray(n_a, float)
        dn = np.asarray(n_b, float) - n_a
        if not np.any(dn):
            return np.zeros(self.ell)
        warm = {"node": warm_node}
        zl = np.zeros(self.ell)

        def integrand(s):
            node = self._node(lam, n_a + s * dn, from_node=warm["node"])
            warm["node"] = node
            ws = node.body_vector(dn, zl)
            return -(node.lam_body().T @ (node.omat @ ws))

        return self._segment_quad(integrand)

    def generating_function(self, lam, n):
        """Path integral of the tautological form over the standard path.

        The path runs (0,0) -> (lam,0) in the momentum values, then
        (lam,0) -> (lam,n) inside the fiber; the fiber leg is
        path-independent because the fibers are isotropic.
        """
        lam = np.asarray(lam, float)
        n = np.asarray(n, float)
        total = 0.0
        warm = {"node": None}
        if np.any(lam):
            zk = np.zeros(self.k)

            def leg1(s):
                node = self._node(s * lam, zk, from_node=warm["node"])
                warm["node"] = node
                return node.theta(node.tangent(zk, lam))

            total += float(self._segment_quad(leg1))
        if np.any(n):
            zl = np.zeros(self.ell)

            def leg2(s):
                node = self._node(lam, s * n, from_node=warm["node"])
                warm["node"] = node
                return node.theta(node.tangent(n, zl))

            total += float(self._segment_quad(leg2))
        return total

    def linearizing_map(self, lam, n, method="fast"):
        """Momentum-direction derivative data of the generating function.

        "fast" evaluates the fiber-leg integral of -omega(d_lam, d_s)
        directly; this is the map that evolves linearly along the dynamics
        (exactly, up to quadrature error).  "fd" central-differences the
        generating function over lam; it equals fast plus theta_pairing plus
        a function of lam alone, and the extra pairing term is generally not
        affine along the flow, so "fd" is a value-level cross-check, not an
        evolution coordinate.
        """
        if method == "fast":
            return self._phi_increment(lam, np.zeros(self.k), n)
        if method == "fd":
            lam = np.asarray(lam, float)
            h = self.config.fd_step * max(1.0, float(np.linalg.norm(lam)))
            out = np.zeros(self.ell)
            for j in range(self.ell):
                e = np.zeros(self.ell)
                e[j] = h
                out[j] = (
                    self.generating_function(lam + e, n)
                    - self.generating_function(lam - e, n)
                ) / (2.0 * h)
            return out
        raise ValueError(f"unknown linearizing-map method {method!r}")

    def theta_pairing(self, lam, n):
        """Tautological form against the momentum-direction derivatives."""
        node = self._node(lam, n)
        return np.array([node.theta(vj) for vj in node.lam_tangents()])

    def linearizing_jacobian(self, node):
        """Exact n-derivative of the fast linearizing map at a solved node."""
        if node._ljac is None:
            dim = self.integrals.dim
            rhs = np.vstack([np.eye(self.k), np.zeros((self.ell, self.k))])
            dx = scipy.linalg.lu_solve(node.lu, rhs)
            W = np.vstack([node.minv @ dx[:dim], dx[dim:]])
            node._ljac = -(node.lam_body().T @ (node.omat @ W))
        return node._ljac

    def flow_rate(self, node):
        """Time derivative of the linearizing map along the dynamics."""
        X = self.field(node.p)
        return (X.concat() @ node.omat) @ node.lam_body()

    # -- linear time evolution ---------------------------------------------

    def linear_flow(self, p0, ts, allow_partial=False):
        """Evolve p0 by the times ts via the linearized coordinates.

        Each requested time is reached by Gauss-Newton on the fiber
        coordinates against the absolute linear target t * rate, with
        time-halving continuation when a step is too large.  Sub-step
        progress is kept, so on a stall the frontier sits essentially at the
        chart boundary and the caller can re-center there.  Every accepted
        sample is audited against the linear target; the sup of audit
        residuals is reported in the diagnostics.
        """
        ts = np.asarray(ts, float)
        lam, n0 = self.coords(p0)
        node = self._node(lam, n0)
        beta = self.flow_rate(node)
        points, audits = [], []
        phi_cur = np.zeros(self.ell)  # linearizing map relative to n0
        t_cur = 0.0
        completed = 0
        failure = None
        floor = _FailFloor()  # per-call, so the chart itself stays immutable
        for t in ts:
            span = abs(t - t_cur)
            dt_min = max(span, 1e-12) / 2.0**HALVING_LIMIT
            fails = 0
            while t != t_cur and failure is None:
                remaining = t - t_cur
                dt = remaining
                while True:
                    gap = (t_cur + dt) * beta - phi_cur
                    if self._predicted_out(node, gap, floor):
                        # step-size control from the learned failure radius;
                        # costs one small lstsq, does not touch the budget
                        dt *= 0.5
                        if abs(dt) < dt_min:
                            failure = ChartDomainError(
                                "chart boundary reached (predicted)"
                            )
                            break
                        continue
                    try:
                        node_new, phi_new = self._gauss_newton(
                            lam, node, phi_cur, (t_cur + dt) * beta, floor=floor
                        )
                        break
                    except (ChartDomainError, ValueError, np.linalg.LinAlgError) as err:
                        fails += 1
                        dt *= 0.5
                        if abs(dt) < dt_min or fails > FAIL_BUDGET:
                            failure = err
                            break
                if failure is not None:
                    break
                node, phi_cur = node_new, phi_new
                t_cur = t if dt == remaining else t_cur + dt
            if failure is not None:
                break
            audits.append(float(np.linalg.norm(phi_cur - t * beta)))
            points.append(node.p)
            completed += 1
        diagnostics = {
            "lam": lam,
            "flow_rate": beta,
            "audits": audits,
            "audit_max": max(audits) if audits else 0.0,
            "completed": completed,
            "frontier": (t_cur, node.p),
        }
        if failure is not None and not allow_partial:
            raise ChartDomainError(
                f"linear flow stalled at sample {completed} of {len(ts)}: {failure}"
            )
        return TrajectorySample(ts[:completed], points, diagnostics)

    def _predicted_out(self, node, gap, floor):
        """Would the Newton endpoint for this gap land past known failures?"""
        if not np.isfinite(floor.radius):
            return False
        J = self.linearizing_jacobian(node)
        step, *_ = np.linalg.lstsq(J, np.asarray(gap, float), rcond=None)
        return float(np.linalg.norm(node.n + step)) >= 0.9 * floor.radius

    def _gauss_newton(self, lam, node_from, phi_from, target, floor=None):
        node = node_from
        phi = np.asarray(phi_from, float).copy()
        r = phi - target
        rn = np.linalg.norm(r)
        for _ in range(GN_MAXIT):
            if rn <= GN_TOL:
                return node, phi
            J = self.linearizing_jacobian(node)
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
            t = 1.0
            improved = False
            for _bt in range(8):
                cand = node.n + t * step
                try:
                    # solve the geometry first: it fails fast out of domain,
                    # while the increment integral is the expensive part
                    node_try = self._node(lam, cand, from_node=node)
                    dphi = self._phi_increment(lam, node.n, cand, warm_node=node)
                except (ChartDomainError, ValueError):
                    if floor is not None:
                        floor.radius = min(floor.radius, float(np.linalg.norm(cand)))
                    t *= 0.5
                    continue
                phi_try = phi + dphi
                r_try = phi_try - target
                rn_try = np.linalg.norm(r_try)
                if rn_try < rn or rn_try <= GN_TOL:
                    node, phi, r, rn = node_try, phi_try, r_try, rn_try
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
        if rn <= AUDIT_TOL:
            return node, phi
        raise ChartDomainError(f"fiber solve did not meet the audit tolerance ({rn:.3e})")


def rate_drift(chart, p0, dt=1e-2):
    """Change of the flow rate transported a short time along the dynamics."""
    lam, n0 = chart.coords(p0)
    node0 = chart._node(lam, n0)
    beta0 = chart.flow_rate(node0)
    node1, _phi1 = chart._gauss_newton(lam, node0, np.zeros(chart.ell), dt * beta0)
    beta1 = chart.flow_rate(node1)
    return float(np.linalg.norm(beta1 - beta0) / max(1.0, np.linalg.norm(beta0)))


def integrate_by_quadratures(
    bundle,
    dyn_field,
    p0,
    ts,
    config=None,
    check=True,
    recenter_limit=RECENTER_LIMIT,
):
    """Full quadrature integration of an invariant system from p0 over ts.

    Builds a complete solution chart at p0 (validating the integrability
    hypotheses when check is set), evolves linearly in the linearized fiber
    coordinates, and re-centers the chart at the frontier point whenever the
    flow leaves the chart domain.  ts are absolute times from p0, processed
    in the given order (ascending recommended).
    """
    ts = np.asarray(ts, float)
    config = config or QuadratureConfig()
    points = []
    t_base = 0.0
    p_base = p0
    idx = 0
    recenters = 0
    audits = []
    first = True
    while idx < len(ts):
        chart = CompleteSolutionChart(
            bundle, dyn_field, p_base, config=config, check=(check and first)
        )
        if check and first:
            drift = rate_drift(chart, p_base)
            if drift > RATE_DRIFT_TOL:
                raise HypothesisError(
                    f"the flow rate drifts along the dynamics (relative drift {drift:.3e}); "
                    "the linearizing coordinates are not evolving linearly"
                )
        first = False
        sample = chart.linear_flow(p_base, ts[idx:] - t_base, allow_partial=True)
        audits.extend(sample.diagnostics["audits"])
        m = sample.diagnostics["completed"]
        points.extend(sample.points)
        idx += m
        if idx >= len(ts):
            break
        t_front, p_front = sample.diagnostics["frontier"]
        if m == 0 and t_front == 0.0:
            err = ChartDomainError(
                f"no progress from t={t_base:g} even after re-centering"
            )
            err.t_achieved = t_base
            raise err
        recenters += 1
        if recenters > recenter_limit:
            err = ChartDomainError(
                f"re-centering limit exceeded (reached t={t_base + t_front:g})"
            )
            err.t_achieved = t_base + t_front
            raise err
        t_base += t_front
        p_base = p_front
    return TrajectorySample(
        ts,
        points,
        {
            "audits": audits,
            "audit_max": max(audits) if audits else 0.0,
            "recenters": recenters,
        },
    )


def hj_residual(bundle, section, lam, n, fd_step=1e-5, order=16):
    """Defect of the potential property of a fiber section.

    For a complete solution the tautological form pulled back to a fixed
    momentum slice is closed, so its line integral from the slice origin is a
    potential whose gradient returns the form.  The residual compares a
    finite-difference gradient of that integral against the form itself; it
    is evaluated with no access to the section internals, so corrupted
    sections (ones that drift across momentum fibers) are detected.
    """
    lam = np.asarray(lam, float)
    n = np.asarray(n, float)
    k = len(n)
    nodes, weights = gauss_legendre(order)
    grp = bundle.group

    def path_theta(nn, s, ds):
        # theta(d/ds section(lam, s*nn)) by 4th-order finite differences
        def value(h):
            pp = section(lam, (s + h) * nn)
            pm = section(lam, (s - h) * nn)
            dg = (grp.flat(pp.g.matrix) - grp.flat(pm.g.matrix)) / (2.0 * h)
            p = section(lam, s * nn)
            v = grp.body_coords(p.g, grp.unflat(dg))
            return float(p.alpha @ v)

        return (4.0 * value(ds) - value(2.0 * ds)) / 3.0

    def potential(nn):
        total = 0.0
        for s, w in zip(nodes, weights):
            total += w * path_theta(nn, s, fd_step)
        return total

    worst = 0.0
    for j in range(k):
        e = np.zeros(k)
        e[j] = fd_step * max(1.0, float(np.linalg.norm(n)))
        grad = (potential(n + e) - potential(n - e)) / (2.0 * e[j])
        p = section(lam, n)
        dgj = np.zeros(k)
        dgj[j] = fd_step
        pp = section(lam, n + dgj)
        pm = section(lam, n - dgj)
        dg = (grp.flat(pp.g.matrix) - grp.flat(pm.g.matrix)) / (2.0 * fd_step)
        v = grp.body_coords(p.g, grp.unflat(dg))
        form_j = float(p.alpha @ v)
        worst = max(worst, abs(grad - form_j))
    return worst
