import numpy as np
import pytest

from meanfield_lq import model, recursion, tree
from meanfield_lq.errors import HorizonMismatch
from meanfield_lq.model import InitialPair
from meanfield_lq.tree import AdaptedProcess, ScenarioTree

from conftest import make_problem


def all_ones_scalar_problem(N=2):
    one = np.ones((1, 1))
    vec1 = np.ones(1)
    return model.from_time_invariant(
        1, 1, N, A=one, Abar=one, B=one, Bbar=one, C=one, Cbar=one,
        D=one, Dbar=one, f=np.zeros(1), d=np.zeros(1), Q=one, Qbar=one,
        R=one, Rbar=one, q=np.zeros(1), rho=np.zeros(1), G=one, Gbar=one,
        g=np.zeros(1),
    )


class TestTreeBasics:
    def test_depth_cap(self):
        with pytest.raises(HorizonMismatch):
            ScenarioTree(15)
        assert ScenarioTree(15, force=True).depth == 15

    def test_tower_property(self, rng):
        vals = rng.normal(size=(2**5, 3))
        inner = tree.cond_mean(vals, 5, 3)
        # identical up to summation order
        np.testing.assert_allclose(
            tree.cond_mean(inner, 3, 1), tree.cond_mean(vals, 5, 1), rtol=0, atol=1e-14
        )

    def test_child_moments_realise_unit_noise(self, rng):
        # E[w] = 0 and E[w^2] = 1 at every node: averaging the children of a
        # process of the form a + b*w recovers a, the half-difference b
        a = rng.normal(size=(4, 2))
        b = rng.normal(size=(4, 2))
        child = np.empty((8, 2))
        child[0::2] = a + b
        child[1::2] = a - b
        np.testing.assert_allclose(tree.child_mean(child), a, rtol=0, atol=1e-15)
        np.testing.assert_allclose(tree.child_wmean(child), b, rtol=0, atol=1e-15)


class TestRollForward:
    def test_no_diffusion_children_equal(self, rng):
        p = make_problem(rng, 2, 2, 3)
        for t, k in p.pairs():
            p.C[t, k] = np.zeros((2, 2))
            p.Cbar[t, k] = np.zeros((2, 2))
            p.D[t, k] = np.zeros((2, 2))
            p.Dbar[t, k] = np.zeros((2, 2))
            p.d[t, k] = np.zeros(2)
        control = tree.constant_control(p, 0, rng.normal(size=2))
        state = tree.roll_forward(p, InitialPair(0, rng.normal(size=2)), control, 0)
        for k in range(1, p.N + 1):
            v = state.values[k]
            assert np.array_equal(v[0::2], v[1::2])

    def test_all_ones_scalar_hand_values(self):
        p = all_ones_scalar_problem()
        control = tree.constant_control(p, 0)
        state = tree.roll_forward(p, InitialPair(0, np.ones(1)), control, 0)
        np.testing.assert_array_equal(state.values[1][:, 0], [4.0, 0.0])
        # by hand: X2 = 2*(X1 + E0 X1)/2 summed drift/diffusion with E0 X1 = 2
        e0 = 2.0
        drift = state.values[1][:, 0] + e0
        leaves = np.empty(4)
        leaves[0::2] = drift + drift
        leaves[1::2] = drift - drift
        np.testing.assert_array_equal(state.values[2][:, 0], leaves)

    def test_missing_control_level_raises(self, rng):
        p = make_problem(rng, 2, 2, 3)
        control = AdaptedProcess({0: np.zeros((1, 2))})
        with pytest.raises(HorizonMismatch):
            tree.roll_forward(p, InitialPair(0, np.zeros(2)), control, 0)


class TestCost:
    def test_zero_weights_zero_cost(self, rng):
        p = make_problem(rng, 2, 2, 3)
        for t, k in p.pairs():
            p.Q[t, k] = np.zeros((2, 2))
            p.Qbar[t, k] = np.zeros((2, 2))
            p.R[t, k] = np.zeros((2, 2))
            p.Rbar[t, k] = np.zeros((2, 2))
            p.q[t, k] = np.zeros(2)
            p.rho[t, k] = np.zeros(2)
        p.G = [np.zeros((2, 2))] * p.N
        p.Gbar = [np.zeros((2, 2))] * p.N
        p.g = [np.zeros(2)] * p.N
        control = tree.constant_control(p, 0, rng.normal(size=2))
        j = tree.cost(p, InitialPair(0, rng.normal(size=2)), control, 0)
        assert np.array_equal(j, np.zeros(1))

    def test_two_leaf_terminal_variance(self):
        z = np.zeros((1, 1))
        one = np.ones((1, 1))
        p = model.from_time_invariant(
            1, 1, 1, A=one, Abar=z, B=z, Bbar=z, C=one, Cbar=z, D=z, Dbar=z,
            f=np.zeros(1), d=np.zeros(1), Q=z, Qbar=z, R=z, Rbar=z,
            q=np.zeros(1), rho=np.zeros(1), G=one, Gbar=z, g=np.zeros(1),
        )
        j = tree.cost(p, InitialPair(0, np.ones(1)), tree.constant_control(p, 0), 0)
        # X1 = 1 +/- 1, so E[X1^2] = (4 + 0) / 2
        assert j[0] == 2.0

    def test_conditional_costs_per_node(self, rng):
        p = make_problem(rng, 2, 1, 3)
        control = tree.constant_control(p, 1, rng.normal(size=1))
        fam = rng.normal(size=(2, 2))
        j = tree.cost(p, InitialPair(1, fam), control, 1)
        assert j.shape == (2,)
        assert np.all(np.isfinite(j))


class TestSolveBsde:
    def test_telescoping_conditional_expectation(self, rng):
        n = 2
        z = np.zeros((n, n))
        p = make_problem(rng, n, 1, 3)
        for t, k in p.pairs():
            p.A[t, k] = np.eye(n)
            p.Abar[t, k] = z.copy()
            p.C[t, k] = z.copy()
            p.Cbar[t, k] = z.copy()
            p.Q[t, k] = z.copy()
            p.Qbar[t, k] = z.copy()
            p.q[t, k] = np.zeros(n)
        p.G = [np.eye(n)] * 3
        p.Gbar = [z.copy()] * 3
        p.g = [np.zeros(n)] * 3
        control = tree.constant_control(p, 0, np.zeros(1))
        state = tree.roll_forward(p, InitialPair(0, rng.normal(size=n)), control, 0)
        zproc = tree.solve_bsde(p, state, 0)
        for l in range(0, 4):
            want = tree.lift(tree.cond_mean(state.values[3], 3, l), l, l)
            np.testing.assert_allclose(zproc.values[l], want, atol=1e-12)

    def test_scalar_two_step_vs_enumeration(self, rng):
        p = make_problem(rng, 1, 1, 2, convex=False)
        control = AdaptedProcess({k: rng.normal(size=(2**k, 1)) for k in range(2)})
        x0 = rng.normal(size=1)
        state = tree.roll_forward(p, InitialPair(0, x0), control, 0)
        got = tree.solve_bsde(p, state, 0)

        # independent enumeration over the four leaves with explicit maps
        X1 = {s: float(state.values[1][i, 0]) for i, s in enumerate("+-")}
        X2 = {s1 + s2: float(state.values[2][2 * i + (0 if s2 == "+" else 1), 0])
              for i, s1 in enumerate("+-") for s2 in "+-"}
        G, Gb, gv = float(p.G[0][0, 0]), float(p.Gbar[0][0, 0]), float(p.g[0][0])
        e0x2 = sum(X2.values()) / 4.0
        Z2 = {w: G * X2[w] + Gb * e0x2 + gv for w in X2}
        a, ab = float(p.A[0, 1][0, 0]), float(p.Abar[0, 1][0, 0])
        c, cb = float(p.C[0, 1][0, 0]), float(p.Cbar[0, 1][0, 0])
        qv, qb, qc = float(p.Q[0, 1][0, 0]), float(p.Qbar[0, 1][0, 0]), float(p.q[0, 1][0])
        e0x1 = sum(X1.values()) / 2.0
        e0z2w = sum(0.5 * (Z2[w + "+"] - Z2[w + "-"]) for w in X1) / 2.0
        e0z2 = sum(Z2.values()) / 4.0
        Z1 = {}
        for w in X1:
            e1z2 = 0.5 * (Z2[w + "+"] + Z2[w + "-"])
            e1z2w = 0.5 * (Z2[w + "+"] - Z2[w + "-"])
            Z1[w] = (a * e1z2 + ab * e0z2 + c * e1z2w + cb * e0z2w
                     + qv * X1[w] + qb * e0x1 + qc)
        np.testing.assert_allclose(got.values[1][:, 0], [Z1["+"], Z1["-"]], atol=1e-12)


class TestStationarity:
    def test_uncontrolled_system_zero_residual(self, rng):
        p = make_problem(rng, 2, 2, 3)
        for t, k in p.pairs():
            p.B[t, k] = np.zeros((2, 2))
            p.Bbar[t, k] = np.zeros((2, 2))
            p.D[t, k] = np.zeros((2, 2))
            p.Dbar[t, k] = np.zeros((2, 2))
            p.R[t, k] = np.eye(2)
            p.Rbar[t, k] = np.zeros((2, 2))
            p.rho[t, k] = np.zeros(2)
        control = tree.constant_control(p, 0)
        res = tree.stationarity_residuals(p, InitialPair(0, rng.normal(size=2)), control, 0)
        assert all(v == 0.0 for v in res.values())

    def test_solver_control_is_stationary(self, rng):
        p = make_problem(rng, 2, 2, 4)
        _, gains, _ = recursion.solve_gdre_global(p)
        init = InitialPair(0, rng.normal(size=2))
        _, control = tree.equilibrium_pair(p, gains, init)
        res = tree.stationarity_residuals(p, init, control, 0)
        assert max(res.values()) <= 1e-9

    def test_perturbed_control_is_detected(self, rng):
        p = make_problem(rng, 2, 2, 3, coupled=True)
        _, gains, _ = recursion.solve_gdre_global(p)
        init = InitialPair(0, rng.normal(size=2))
        _, control = tree.equilibrium_pair(p, gains, init)
        control.values[0] = control.values[0] + 0.1
        res = tree.stationarity_residuals(p, init, control, 0)
        assert res[0] > 0.01


class TestRestartConsistency:
    def test_first_step_matches_concatenated_state(self, rng):
        for _ in range(5):
            p = make_problem(rng, 2, 2, 4, convex=False)
            control = AdaptedProcess(
                {k: rng.normal(size=(2**k, 2)) for k in range(4)}
            )
            init = InitialPair(0, rng.normal(size=2))
            star = tree.concatenated_state(p, control, init)
            for k in range(p.N):
                restart = tree.roll_forward(p, InitialPair(k, star.values[k]), control, k)
                got = restart.values[k + 1]
                want = star.values[k + 1]
                assert np.max(np.abs(got - want)) <= 1e-10 * (1.0 + np.max(np.abs(want)))


class TestJhat:
    def test_zero_variation(self, rng):
        p = make_problem(rng, 2, 2, 3)
        assert tree.variation_cost(p, 1, np.zeros(2)) == 0.0

    def test_reference_step1_diagonal_entry(self, example):
        got = tree.variation_cost(example, 1, np.array([1.0, 0.0]))
        assert abs(got - 400.8004) < 1e-3

    def test_matches_quadratic_coefficient(self, rng):
        for _ in range(8):
            p = make_problem(rng, 2, 2, 4, convex=False)
            tab = recursion.solve_symmetric(p)
            k = int(rng.integers(0, 4))
            ub = rng.normal(size=2)
            want = float(ub @ recursion.assemble_m2(p, tab, k) @ ub)
            assert abs(tree.variation_cost(p, k, ub) - want) <= 1e-9 * (1.0 + abs(want))

    def test_node_varying_variation(self, rng):
        p = make_problem(rng, 2, 2, 3)
        tab = recursion.solve_symmetric(p)
        ub = rng.normal(size=(2, 2))
        got = tree.variation_cost(p, 1, ub)
        m2 = recursion.assemble_m2(p, tab, 1)
        want = np.einsum("ni,ij,nj->n", ub, m2, ub)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_sign_tracks_convexity_margin(self, rng):
        # nonnegative variation costs in every direction iff the quadratic
        # coefficient is PSD: probe along its extreme eigvector
        found_negative = False
        for _ in range(20):
            p = make_problem(rng, 2, 2, 3, convex=False)
            tab = recursion.solve_symmetric(p)
            verdicts, mats = recursion.convexity_margins(p, tab)
            for k, (v, m2) in enumerate(zip(verdicts, mats)):
                w, vec = np.linalg.eigh(0.5 * (m2 + m2.T))
                val = tree.variation_cost(p, k, vec[:, 0])
                if v.min_eigenvalue < -1e-9:
                    assert val < 0.0
                    found_negative = True
                else:
                    assert val >= -1e-9 * (1.0 + abs(w[0]))
        assert found_negative  # the generator does produce nonconvex steps


class TestDifferenceFormula:
    def test_zero_lambda(self, rng):
        p = make_problem(rng, 2, 2, 3, convex=False)
        u = AdaptedProcess({k: rng.normal(size=(2**k, 2)) for k in range(3)})
        res = tree.difference_formula_check(p, 1, rng.normal(size=(2, 2)), u,
                                            rng.normal(size=2), 0.0)
        assert res <= 1e-12

    def test_zero_variation(self, rng):
        p = make_problem(rng, 2, 2, 3, convex=False)
        u = AdaptedProcess({k: rng.normal(size=(2**k, 2)) for k in range(3)})
        res = tree.difference_formula_check(p, 1, rng.normal(size=(2, 2)), u,
                                            np.zeros(2), 0.8)
        assert res <= 1e-12

    def test_random_tuples(self, rng):
        for _ in range(10):
            n, m, N = 2, 2, int(rng.integers(2, 5))
            p = make_problem(rng, n, m, N, convex=False)
            k = int(rng.integers(0, N))
            u = AdaptedProcess({l: rng.normal(size=(2**l, m)) for l in range(k, N)})
            zeta = rng.normal(size=(2**k, n))
            res = tree.difference_formula_check(p, k, zeta, u, rng.normal(size=m),
                                                float(rng.uniform(-1, 1)))
            assert res <= 1e-10


class TestRepresentation:
    def test_solver_feedback_representation(self, rng):
        for _ in range(5):
            p = make_problem(rng, 2, 2, 4, convex=False)
            tab, gains, _ = recursion.solve_gdre_global(p)
            x = rng.normal(size=2)
            for k in range(p.N):
                assert tree.representation_check(p, gains, 0, x, k, tab) <= 1e-8

    def test_homogeneous_zero_state(self, rng):
        p = make_problem(rng, 2, 2, 3, homogeneous=True)
        tab, gains, _ = recursion.solve_gdre_global(p)
        res = tree.representation_check(p, gains, 0, np.zeros(2), 0, tab)
        assert res <= 1e-12


class TestCertification:
    def test_reference_example_certifies(self, example):
        _, gains, _ = recursion.solve_gdre_global(example)
        init = InitialPair(0, np.array([1.0, 1.0]))
        _, control = tree.equilibrium_pair(example, gains, init)
        cert = tree.certify_equilibrium(example, init, control, 0)
        assert cert.verdict
        assert max(cert.stationary_residuals.values()) <= 1e-8
        assert all(g["min_gap"] >= -1e-9 for g in cert.deviation_gaps)

    def test_zeroed_feedback_fails_on_coupled_instance(self, rng):
        p = make_problem(rng, 2, 2, 3, coupled=True)
        _, gains, _ = recursion.solve_gdre_global(p)
        bad_psi = [s.copy() for s in gains.Psi]
        bad_psi[0] = np.zeros_like(bad_psi[0])
        bad = recursion.GainSchedule(gains.W, gains.Wdag, gains.H, gains.beta,
                                     bad_psi, gains.alpha)
        init = InitialPair(0, rng.normal(size=2) + 1.0)
        _, control = tree.equilibrium_pair(p, bad, init)
        cert = tree.certify_equilibrium(p, init, control, 0)
        assert not cert.verdict
        assert cert.stationary_residuals[0] > 1e-6

    def test_certifies_from_interior_start_with_node_family(self, rng):
        p = make_problem(rng, 2, 2, 4)
        _, gains, _ = recursion.solve_gdre_global(p)
        init = InitialPair(1, rng.normal(size=(2, 2)))
        _, control = tree.equilibrium_pair(p, gains, init)
        cert = tree.certify_equilibrium(p, init, control, 1)
        assert cert.verdict
        assert set(cert.stationary_residuals) == {1, 2, 3}

    def test_uncoupled_zero_control_trivially_certifies(self, rng):
        p = make_problem(rng, 2, 2, 3)
        for t, k in p.pairs():
            p.B[t, k] = np.zeros((2, 2))
            p.Bbar[t, k] = np.zeros((2, 2))
            p.D[t, k] = np.zeros((2, 2))
            p.Dbar[t, k] = np.zeros((2, 2))
            p.R[t, k] = np.eye(2)
            p.Rbar[t, k] = np.zeros((2, 2))
            p.rho[t, k] = np.zeros(2)
        control = tree.constant_control(p, 0)
        cert = tree.certify_equilibrium(p, InitialPair(0, rng.normal(size=2)), control, 0)
        assert cert.verdict

    def test_quadratic_structure_of_single_step_cost(self, rng):
        # the restarted cost is exactly quadratic in the step-k control value
        p = make_problem(rng, 2, 2, 3, convex=False)
        tab = recursion.solve_symmetric(p)
        k = 1
        u = AdaptedProcess({l: rng.normal(size=(2**l, 2)) for l in range(k, p.N)})
        zeta = rng.normal(size=(2**k, 2))
        init = InitialPair(k, zeta)

        def j(ub):
            return tree.cost(p, init, tree.deviated_control(u, k, ub - u.values[k]), k)

        zero = np.zeros(2)
        e = np.eye(2)
        j0 = j(zero)
        m_fit = np.empty((2, 2))
        lin = np.empty((2, zeta.shape[0]))
        for i in range(2):
            jp, jm = j(e[i]), j(-e[i])
            m_fit[i, i] = float((jp + jm - 2 * j0)[0]) / 2.0
            lin[i] = (jp - jm) / 4.0
        jpp = j(e[0] + e[1])
        m_fit[0, 1] = m_fit[1, 0] = float((jpp - j(e[0]) - j(e[1]) + j0)[0]) / 2.0
        m2 = recursion.assemble_m2(p, tab, k)
        np.testing.assert_allclose(m_fit, m2, atol=1e-9 * (1 + np.max(np.abs(m2))))
        ub = rng.normal(size=2)
        want = j0 + ub @ m2 @ ub + 2.0 * lin.T @ ub
        np.testing.assert_allclose(j(ub), want, atol=1e-9 * (1 + np.max(np.abs(want))))
