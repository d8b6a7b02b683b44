"""Shared generators for randomised solver and oracle tests."""

import numpy as np
import pytest

from meanfield_lq import model


def rand_psd(rng, d, scale=0.5):
    a = rng.normal(size=(d, d)) * scale
    return a @ a.T


def make_problem(rng, n, m, N, scale=0.5, convex=True, meanfield=True,
                 coupled=False, homogeneous=False):
    """Random instance with full triangular data.

    convex      weights chosen PSD (controls strictly PD) so the one-instant
                deviation coefficients are positive at every step
    meanfield   include nonzero barred blocks
    coupled     rescale input blocks so the summed B and D have norm >= 0.5
    homogeneous zero out every affine term
    """
    p = model.ProblemData(n, m, N)
    for t, k in p.pairs():
        p.A[t, k] = rng.normal(size=(n, n)) * scale
        p.C[t, k] = rng.normal(size=(n, n)) * scale
        p.Abar[t, k] = rng.normal(size=(n, n)) * scale if meanfield else np.zeros((n, n))
        p.Cbar[t, k] = rng.normal(size=(n, n)) * scale if meanfield else np.zeros((n, n))
        for name, bar in (("B", "Bbar"), ("D", "Dbar")):
            base = rng.normal(size=(n, m)) * scale
            extra = rng.normal(size=(n, m)) * 0.5 * scale if meanfield else np.zeros((n, m))
            if coupled:
                total = np.linalg.norm(base + extra)
                if total < 0.5:
                    factor = 0.8 / max(total, 1e-6)
                    base = base * factor
                    extra = extra * factor
            getattr(p, name)[t, k] = base
            getattr(p, bar)[t, k] = extra
        if convex:
            Q = rand_psd(rng, n, scale)
            Qsum = rand_psd(rng, n, scale)
            R = rand_psd(rng, m, scale) + 0.4 * np.eye(m)
            Rsum = rand_psd(rng, m, scale) + 0.4 * np.eye(m)
        else:
            Q = rand_sym(rng, n, scale)
            Qsum = Q + (rand_sym(rng, n, scale) if meanfield else 0.0)
            R = rand_sym(rng, m, scale)
            Rsum = R + (rand_sym(rng, m, scale) if meanfield else 0.0)
        p.Q[t, k] = Q
        p.Qbar[t, k] = Qsum - Q if meanfield else np.zeros((n, n))
        p.R[t, k] = R
        p.Rbar[t, k] = Rsum - R if meanfield else np.zeros((m, m))
        for name, dim in (("f", n), ("d", n), ("q", n), ("rho", m)):
            vec = np.zeros(dim) if homogeneous else rng.normal(size=dim) * scale
            getattr(p, name)[t, k] = vec
    for t in range(N):
        if convex:
            G = rand_psd(rng, n, scale)
            Gsum = rand_psd(rng, n, scale)
        else:
            G = rand_sym(rng, n, scale)
            Gsum = G + (rand_sym(rng, n, scale) if meanfield else 0.0)
        p.G.append(G)
        p.Gbar.append(Gsum - G if meanfield else np.zeros((n, n)))
        p.g.append(np.zeros(n) if homogeneous else rng.normal(size=n) * scale)
    return p


def rand_sym(rng, d, scale=0.5):
    a = rng.normal(size=(d, d)) * scale
    return 0.5 * (a + a.T)


def random_dims(rng, max_nm=3, max_N=5):
    return int(rng.integers(1, max_nm + 1)), int(rng.integers(1, max_nm + 1)), int(rng.integers(2, max_N + 1))


@pytest.fixture
def rng():
    return np.random.default_rng(20250810)


@pytest.fixture(scope="session")
def example():
    p = model.bundled_example()
    assert model.validate(p) == []
    return p
