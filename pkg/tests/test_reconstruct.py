import numpy as np
import pytest
from scipy.integrate import solve_ivp

from liequad.cotangent import (
    CotangentBundle,
    InvariantField,
    PhasePoint,
    TangentPhaseVector,
    left_invariant_hamiltonian_field,
)
from liequad.liegroup import make_group, matrix_exp_oracle
from liequad.reconstruct import (
    HorizontalityError,
    HorizontalSubmersion,
    ReconstructionError,
    SectionDomainError,
    ThetaConnection,
    VerticalityError,
    _default_quotient_integrator,
    build_theta,
    connection_reproduction_defect,
    fd_eta,
    flow_residual_max,
    isotropy_basis_at,
    isotropy_dimension_at,
    make_product_scenario,
    make_so3_scenario,
    make_tstar_scenario,
    momentum_defect,
    momentum_eta,
    projected_field_defect,
    scenario_from_key,
    transversality_defect,
    two_step_reconstruct,
    usual_reconstruct,
    validate_invariant_system,
    vertical_integrate,
)

TS = np.linspace(0.0, 1.0, 65)

_cache = {}


def cached(key, builder):
    if key not in _cache:
        _cache[key] = builder()
    return _cache[key]


def tstar_so3(field=None, name="default"):
    def build():
        return make_tstar_scenario("so3", field)

    return cached(("tstar-so3", name), build)


def fiber_rotation_field(bundle):
    c = np.array([0.4, -0.3, 0.5])

    def ev(p):
        return TangentPhaseVector(np.zeros(3), np.cross(c, p.alpha))

    return InvariantField(bundle, ev, name="fiber-rotation")


def so3_bundle():
    return cached("so3-bundle", lambda: CotangentBundle(make_group("so3")))


def tstar_start():
    alpha0 = np.array([0.7, -0.4, 0.5])
    g0 = matrix_exp_oracle(make_group("so3"), np.array([0.2, 0.1, -0.3]))
    return PhasePoint(g0, alpha0), alpha0


def pair_start(sys_, lam=(2.0, 3.0, 1.0)):
    lam0 = np.asarray(lam, float)
    m_sec = sys_.section(lam0)
    g = matrix_exp_oracle(sys_.group, np.array([0.3, -0.2, 0.4]))
    return sys_.act(g, m_sec), m_sec, lam0


def near_section_point(sys_, rng, spread=0.7):
    """Moderate displacement of a random section point; inside factor-solve reach."""
    lam = sys_.project(sys_.random_point(rng))
    xi = rng.standard_normal(sys_.group.dim)
    xi *= spread * rng.uniform() / np.linalg.norm(xi)
    return sys_.act(matrix_exp_oracle(sys_.group, xi), sys_.section(lam))


def ambient_oracle(bundle, field, p0, ts):
    rhs = bundle.ambient_rhs(field)
    sol = solve_ivp(
        rhs,
        (float(ts[0]), float(ts[-1])),
        bundle.ambient_coords(p0),
        method="RK45",
        rtol=1e-10,
        atol=1e-12,
        t_eval=ts,
    )
    assert sol.status == 0
    return [bundle.from_ambient(sol.y[:, k]) for k in range(sol.y.shape[1])]


def phase_gap(a, b):
    return float(np.linalg.norm(a.g.matrix - b.g.matrix) + np.linalg.norm(a.alpha - b.alpha))


# -- scenario axioms -----------------------------------------------------------


def test_cotangent_scenario_axioms():
    d = validate_invariant_system(tstar_so3(), n_samples=10, seed=3)
    assert d["action_identity"] <= 1e-10
    assert d["action_composition"] <= 1e-10
    assert d["projection_invariance"] <= 1e-10
    assert d["section_property"] <= 1e-10
    assert d["field_invariance"] <= 1e-8
    assert d["momentum_equivariance"] <= 1e-10
    assert d["momentum_equation"] <= 1e-10


def test_vector_pair_scenario_axioms():
    sys_ = cached("pairs-free", make_so3_scenario)
    d = validate_invariant_system(sys_, n_samples=10, seed=3)
    assert d["action_identity"] <= 1e-10
    assert d["action_composition"] <= 1e-10
    assert d["projection_invariance"] <= 1e-10
    assert d["section_property"] <= 1e-10
    assert d["field_invariance"] <= 1e-8
    assert d["momentum_equivariance"] <= 1e-10
    assert d["momentum_equation"] <= 1e-10


def test_product_scenario_axioms():
    sys_ = cached("product", make_product_scenario)
    d = validate_invariant_system(sys_, n_samples=10, seed=3)
    assert d["action_identity"] <= 1e-10
    assert d["action_composition"] <= 1e-10
    assert d["projection_invariance"] <= 1e-10
    assert d["field_invariance"] <= 1e-8


def test_invariant_projection_roundtrip_on_sections():
    rng = np.random.default_rng(21)
    for convention in ("position", "momentum"):
        sys_ = make_so3_scenario(section=convention)
        for _ in range(25):
            a, b = rng.uniform(0.2, 4.0, 2)
            c = rng.uniform(-0.9, 0.9) * np.sqrt(a * b)
            lam = np.array([a, b, c])
            assert np.linalg.norm(sys_.project(sys_.section(lam)) - lam) <= 1e-12


def test_isotropy_dimensions():
    sys_ = cached("pairs-free", make_so3_scenario)
    rng = np.random.default_rng(4)
    for _ in range(10):
        assert isotropy_dimension_at(sys_, sys_.random_point(rng)) == 0
    q = np.array([1.0, 0.2, -0.3])
    assert isotropy_dimension_at(sys_, np.concatenate([q, 2.0 * q])) == 1
    prod = cached("product", make_product_scenario)
    for _ in range(5):
        m = prod.random_point(rng)
        basis = isotropy_basis_at(prod, m)
        assert basis.shape[1] == 1
        # the stabilizer is rotation about the state's own axis
        axis = basis[:3, 0] / np.linalg.norm(basis[:3, 0])
        assert abs(abs(axis @ (m[:3] / np.linalg.norm(m[:3]))) - 1.0) <= 1e-6


def test_momentum_map_defining_equation():
    rng = np.random.default_rng(9)
    sys_ = cached("pairs-free", make_so3_scenario)
    for _ in range(6):
        assert momentum_defect(sys_, sys_.random_point(rng)) <= 1e-10
    ct = tstar_so3()
    for _ in range(6):
        assert momentum_defect(ct, ct.random_point(rng)) <= 1e-10


# -- group-factor maps ----------------------------------------------------------


def test_solved_factor_matches_group_part():
    # on a trivialized cotangent bundle the factor map is the group component
    sys_ = tstar_so3()
    m0 = sys_.section(np.array([0.7, -0.4, 0.5]))
    theta = build_theta(sys_, m0, use_exact=False)
    assert isinstance(theta, HorizontalSubmersion)
    rng = np.random.default_rng(12)
    for _ in range(6):
        p = sys_.random_point(rng)
        assert np.linalg.norm(theta(p).matrix - p.g.matrix) <= 1e-10


def test_build_theta_certifies_vector_pair_factor():
    sys_ = cached("pairs-momentum", lambda: make_so3_scenario(section="momentum"))
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = cached("theta-pairs-momentum", lambda: build_theta(sys_, m0))
    ident = np.eye(3)
    assert np.linalg.norm(theta(m0).matrix - ident) <= 1e-10
    rng = np.random.default_rng(31)
    for _ in range(10):
        m = near_section_point(sys_, rng)
        assert theta.defining_defect(m) <= 1e-8
        on_sec = sys_.section(sys_.project(m))
        assert np.linalg.norm(theta(on_sec).matrix - ident) <= 1e-8


def test_factor_and_projection_are_jointly_immersive():
    sys_ = cached("pairs-momentum", lambda: make_so3_scenario(section="momentum"))
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = cached("theta-pairs-momentum", lambda: build_theta(sys_, m0))
    assert transversality_defect(sys_, theta, m0) > 1e-6
    prod = cached("product", make_product_scenario)
    mp = prod.section(np.array([1.5]))
    thp = cached("theta-product", lambda: build_theta(prod, mp))
    assert transversality_defect(prod, thp, mp) > 1e-6


def test_stabilized_factor_solve_is_deterministic():
    # minimal-norm updates fix the representative despite the gauge freedom
    prod = cached("product", make_product_scenario)
    mp = prod.section(np.array([1.5]))
    rng = np.random.default_rng(44)
    m = near_section_point(prod, rng)
    a = HorizontalSubmersion(prod, mp)(m)
    b = HorizontalSubmersion(prod, mp)(m)
    assert np.array_equal(a.matrix, b.matrix)
    assert prod.chart_distance(m, prod.act(a, prod.section(prod.project(m)))) <= 1e-8


def test_factor_base_point_must_sit_on_section():
    sys_ = cached("pairs-free", make_so3_scenario)
    off = sys_.act(matrix_exp_oracle(sys_.group, np.array([0.0, 0.0, 0.5])), sys_.section(np.array([2.0, 3.0, 1.0])))
    with pytest.raises(ReconstructionError):
        HorizontalSubmersion(sys_, off)


# -- transport of the quotient motion -------------------------------------------


def test_two_step_free_particle_matches_exact_flight():
    sys_ = cached("pairs-momentum", lambda: make_so3_scenario(section="momentum"))
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = cached("theta-pairs-momentum", lambda: build_theta(sys_, m0))
    p0, _, _ = pair_start(sys_)
    sample = two_step_reconstruct(sys_, theta, p0, TS)
    q0, v0 = p0[:3], p0[3:]
    worst = max(
        np.linalg.norm(pt - np.concatenate([q0 + t * v0, v0]))
        for t, pt in zip(sample.ts, sample.points)
    )
    assert worst <= 1e-6
    assert sample.diagnostics["flow_residual_max"] <= 1e-5
    assert sample.diagnostics["factor_drift_max"] <= 1e-6
    assert sample.diagnostics["quotient_match_max"] <= 1e-8


def test_two_step_rejects_factor_moving_field():
    # straight-line motion turns the factor of the position-aligned section
    sys_ = cached("pairs-position", lambda: make_so3_scenario(section="position"))
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = cached("theta-pairs-position", lambda: build_theta(sys_, m0))
    p0, _, _ = pair_start(sys_)
    with pytest.raises(HorizontalityError):
        two_step_reconstruct(sys_, theta, p0, TS)


def test_two_step_rejects_orbit_tangent_field():
    sys_ = tstar_so3()
    theta = cached("theta-tstar", lambda: build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5]))))
    p0, _ = tstar_start()
    with pytest.raises(HorizontalityError):
        two_step_reconstruct(sys_, theta, p0, TS)


def test_two_step_zero_field_is_constant():
    def build():
        b = so3_bundle()
        fld = InvariantField(b, lambda p: TangentPhaseVector(np.zeros(3), np.zeros(3)), name="rest")
        return make_tstar_scenario(b.group, fld)

    sys_ = cached(("tstar-so3", "rest"), build)
    theta = cached("theta-tstar-rest", lambda: build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5]))))
    p0, _ = tstar_start()
    sample = two_step_reconstruct(sys_, theta, p0, TS)
    assert max(phase_gap(p, p0) for p in sample.points) <= 1e-12


def fiber_rotation_scenario():
    def build():
        b = so3_bundle()
        return make_tstar_scenario(b.group, fiber_rotation_field(b))

    return cached(("tstar-so3", "fiber-rotation"), build)


def fiber_rotation_two_step():
    def build():
        sys_ = fiber_rotation_scenario()
        theta = build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5])))
        p0, _ = tstar_start()
        return two_step_reconstruct(sys_, theta, p0, TS)

    return cached("two-step-fiber-rotation", build)


def test_two_step_cotangent_fiber_motion_vs_adaptive_oracle():
    sys_ = fiber_rotation_scenario()
    sample = fiber_rotation_two_step()
    p0, _ = tstar_start()
    oracle = ambient_oracle(so3_bundle(), fiber_rotation_field(so3_bundle()), p0, TS)
    assert max(phase_gap(a, b) for a, b in zip(sample.points, oracle)) <= 1e-5
    assert sample.diagnostics["flow_residual_max"] <= 1e-5


def test_two_step_reports_section_domain_exit():
    # the relative-alignment invariant decays to the domain edge in finite time
    def decay(m, rate=2.0):
        q, p = m[:3], m[3:]
        return np.concatenate([np.zeros(3), rate * ((q @ p) / (q @ q) * q - p)])

    sys_ = make_so3_scenario(field=decay, section="position")
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = build_theta(sys_, m0)
    p0 = sys_.act(matrix_exp_oracle(sys_.group, np.array([0.3, -0.2, 0.4])), m0)
    grid = np.linspace(0.0, 8.0, 129)
    with pytest.raises(SectionDomainError) as info:
        two_step_reconstruct(sys_, theta, p0, grid)
    err = info.value
    assert 4.0 < err.t_achieved < 7.0
    assert 0 < len(err.partial.points) < len(grid)
    assert err.partial.diagnostics["flow_residual_max"] <= 1e-5
    assert err.partial.diagnostics["factor_drift_max"] <= 1e-6


def test_two_step_gate_rejects_skewed_quotient_motion():
    sys_ = cached("pairs-momentum", lambda: make_so3_scenario(section="momentum"))
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = cached("theta-pairs-momentum", lambda: build_theta(sys_, m0))
    p0, _, _ = pair_start(sys_)
    inner = _default_quotient_integrator(sys_)

    def skewed(Y, lam0, t_span):
        return inner(lambda lam: 1.05 * Y(lam), lam0, t_span)

    with pytest.raises(ReconstructionError, match="flow-equation"):
        two_step_reconstruct(sys_, theta, p0, TS, quotient_integrator=skewed)


# -- lift through a connection ----------------------------------------------------


def tstar_theta():
    sys_ = fiber_rotation_scenario()
    return cached(
        "theta-tstar-fiber-rotation",
        lambda: build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5]))),
    )


def test_connection_reproduces_action_generators():
    sys_ = fiber_rotation_scenario()
    conn = ThetaConnection(sys_, tstar_theta())
    rng = np.random.default_rng(5)
    for _ in range(4):
        assert connection_reproduction_defect(sys_, conn, sys_.random_point(rng), rng=rng) <= 1e-6


def test_lifted_route_matches_transport_route():
    sys_ = fiber_rotation_scenario()
    conn = ThetaConnection(sys_, tstar_theta())
    p0, _ = tstar_start()
    usual = cached("usual-fiber-rotation", lambda: usual_reconstruct(sys_, conn, p0, TS))
    two = fiber_rotation_two_step()
    assert max(phase_gap(a, b) for a, b in zip(usual.points, two.points)) <= 1e-7
    assert usual.diagnostics["flow_residual_max"] <= 1e-5


def test_lifted_route_on_orbit_tangent_field():
    # zero quotient motion: the lift freezes and only the factor equation runs
    sys_ = tstar_so3()
    theta = cached("theta-tstar", lambda: build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5]))))
    conn = ThetaConnection(sys_, theta)
    p0, alpha0 = tstar_start()
    sample = usual_reconstruct(sys_, conn, p0, TS)
    group = sys_.group
    rate = np.linalg.solve(group.algebra.killing_form(), alpha0)
    worst = 0.0
    for t, pt in zip(sample.ts, sample.points):
        expected = p0.g @ matrix_exp_oracle(group, rate, float(t))
        worst = max(worst, np.linalg.norm(pt.g.matrix - expected.matrix))
        assert np.linalg.norm(pt.alpha - alpha0) <= 1e-10
    assert worst <= 1e-8


def test_lifted_route_generic_field_vs_adaptive_oracle():
    def build():
        b = so3_bundle()
        fld = left_invariant_hamiltonian_field(b, lambda mu: np.array([1.0, 2.0, 3.0]) * mu, name="anisotropic")
        return make_tstar_scenario(b.group, fld)

    sys_ = cached(("tstar-so3", "anisotropic"), build)
    theta = build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5])))
    conn = ThetaConnection(sys_, theta)
    p0, _ = tstar_start()
    sample = usual_reconstruct(sys_, conn, p0, TS)
    b = so3_bundle()
    fld = left_invariant_hamiltonian_field(b, lambda mu: np.array([1.0, 2.0, 3.0]) * mu, name="anisotropic")
    oracle = ambient_oracle(b, fld, p0, TS)
    assert max(phase_gap(a, o) for a, o in zip(sample.points, oracle)) <= 1e-5
    assert sample.diagnostics["flow_residual_max"] <= 1e-5


def test_lifted_route_needs_free_action():
    sys_ = cached("pairs-free", make_so3_scenario)
    with pytest.raises(ReconstructionError, match="free"):
        usual_reconstruct(sys_, None, None, TS)


# -- orbit-tangent motion as a one-parameter factor --------------------------------


def test_vertical_route_cotangent_field_vs_adaptive_oracle():
    sys_ = tstar_so3()
    theta = cached("theta-tstar", lambda: build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5]))))
    p0, _ = tstar_start()
    sample = vertical_integrate(sys_, theta, p0, TS)
    assert sample.diagnostics["group_factor"] == "quadrature"
    from liequad.cotangent import build_casimir_field
    from liequad.liealg import killing_casimir

    b = so3_bundle()
    fld = build_casimir_field(b, killing_casimir(b.algebra))
    oracle = ambient_oracle(b, fld, p0, TS)
    assert max(phase_gap(a, o) for a, o in zip(sample.points, oracle)) <= 1e-6


def test_vertical_route_pair_rotation_vs_closed_form():
    sys_ = cached(
        "pairs-rotation-momentum",
        lambda: make_so3_scenario(
            field=lambda m: np.concatenate(
                [np.cross(np.cross(m[:3], m[3:]), m[:3]), np.cross(np.cross(m[:3], m[3:]), m[3:])]
            ),
            section="momentum",
        ),
    )
    m0 = sys_.section(np.array([2.0, 3.0, 1.0]))
    theta = build_theta(sys_, m0)
    p0 = sys_.act(matrix_exp_oracle(sys_.group, np.array([0.3, -0.2, 0.4])), m0)
    sample = vertical_integrate(sys_, theta, p0, TS)
    assert sample.diagnostics["group_factor"] == "quadrature"
    mu = np.cross(p0[:3], p0[3:])
    worst = 0.0
    for t, pt in zip(sample.ts, sample.points):
        R = matrix_exp_oracle(sys_.group, mu, float(t)).matrix
        worst = max(worst, np.linalg.norm(pt - np.concatenate([R @ p0[:3], R @ p0[3:]])))
    assert worst <= 1e-6


def test_vertical_route_momentum_rate_formula_matches_difference():
    sys_ = tstar_so3()
    theta = cached("theta-tstar", lambda: build_theta(sys_, sys_.section(np.array([0.7, -0.4, 0.5]))))
    p0, _ = tstar_start()
    lam = sys_.project(p0)
    B = sys_.group.algebra.killing_form()
    provider = momentum_eta(lambda mu: np.linalg.solve(B, mu))
    assert np.linalg.norm(provider(sys_, lam) - fd_eta(sys_, theta, lam)) <= 1e-5
    a = vertical_integrate(sys_, theta, p0, TS)
    b = vertical_integrate(sys_, theta, p0, TS, eta_provider=provider)
    assert max(phase_gap(x, y) for x, y in zip(a.points, b.points)) <= 1e-8


def test_vertical_route_stabilizer_shift_leaves_curve_fixed():
    prod = cached("product", make_product_scenario)
    mp = prod.section(np.array([1.5]))
    theta = cached("theta-product", lambda: build_theta(prod, mp))
    p0 = prod.act(matrix_exp_oracle(prod.group, np.array([0.2, -0.1, 0.3, 0.5])), mp)
    base = vertical_integrate(prod, theta, p0, TS)
    assert base.diagnostics["group_factor"] == "quadrature"
    chi_dir = isotropy_basis_at(prod, prod.section(prod.project(p0)))[:, 0]
    for scale in (1.7, -0.6):
        shifted = vertical_integrate(prod, theta, p0, TS, chi=scale * chi_dir)
        gap = max(np.linalg.norm(a - b) for a, b in zip(base.points, shifted.points))
        assert gap <= 1e-8
    # free-pair states have no stabilizer to shift by
    pairs = cached("pairs-free", make_so3_scenario)
    rng = np.random.default_rng(2)
    assert isotropy_basis_at(pairs, pairs.random_point(rng)).shape[1] == 0


def test_vertical_route_rejects_quotient_moving_field():
    sys_ = fiber_rotation_scenario()
    p0, _ = tstar_start()
    with pytest.raises(VerticalityError):
        vertical_integrate(sys_, tstar_theta(), p0, TS)


def test_vertical_route_flags_series_fallback():
    # nilpotent shear direction admits no covector, so the factor comes from
    # the series oracle and says so
    def build():
        grp = make_group("heis3")
        b = CotangentBundle(grp)
        fld = InvariantField(
            b, lambda p: TangentPhaseVector(np.array([1.0, 0.0, 0.0]), np.zeros(3)), name="shear"
        )
        return make_tstar_scenario(grp, fld)

    sys_ = cached(("tstar-heis3", "shear"), build)
    alpha0 = np.array([0.4, -0.3, 0.8])
    theta = build_theta(sys_, sys_.section(alpha0))
    p0 = PhasePoint(matrix_exp_oracle(sys_.group, np.array([0.1, 0.2, -0.1])), alpha0)
    sample = vertical_integrate(sys_, theta, p0, TS)
    assert sample.diagnostics["group_factor"] == "oracle"
    assert sample.diagnostics["warnings"]
    assert sample.diagnostics["flow_residual_max"] <= 1e-5
    worst = max(
        np.linalg.norm(pt.g.matrix - (p0.g @ matrix_exp_oracle(sys_.group, np.array([1.0, 0.0, 0.0]), float(t))).matrix)
        for t, pt in zip(sample.ts, sample.points)
    )
    assert worst <= 1e-8


# -- projected dynamics and the gate ------------------------------------------------


def test_projected_field_well_defined_on_quotient():
    rng = np.random.default_rng(6)
    sys_ = cached("pairs-momentum", lambda: make_so3_scenario(section="momentum"))
    for _ in range(8):
        assert projected_field_defect(sys_, sys_.random_point(rng)) <= 1e-8
    ct = fiber_rotation_scenario()
    for _ in range(8):
        assert projected_field_defect(ct, ct.random_point(rng)) <= 1e-8


def test_flow_gate_flags_wrong_curve():
    sys_ = cached("pairs-momentum", lambda: make_so3_scenario(section="momentum"))
    p0, _, _ = pair_start(sys_)

    def drifted(t):
        out = np.array(p0)
        out[:3] = p0[:3] + 0.9 * t * p0[3:]
        return out

    assert flow_residual_max(sys_, drifted, TS) > 1e-2
