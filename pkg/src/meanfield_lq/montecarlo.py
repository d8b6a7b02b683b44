"""Monte Carlo simulation of equilibrium trajectories and costs.

Paths are driven by a counter-based generator (Philox keyed by the seed),
so the noise of path i is a pure function of (seed, i): growing the path
count or changing the execution layout never changes existing paths, and
reruns are bit-identical.

Mean-field terms condition on the supplied initial atom, so every E_t in
the dynamics and cost is estimated by the cross-path average at that step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import DimensionMismatch, EmptyConfig, HorizonMismatch
from .matrices import sym_part
from .model import InitialPair, ProblemData

NOISE_LAWS = ("rademacher", "standard_gaussian")


@dataclass(frozen=True)
class SimConfig:
    paths: int
    seed: int = 0
    noise_law: str = "rademacher"
    keep_paths: int = 0

    def __post_init__(self):
        if self.paths < 1:
            raise EmptyConfig(f"paths must be >= 1, got {self.paths}")
        if self.noise_law not in NOISE_LAWS:
            raise EmptyConfig(f"noise_law must be one of {NOISE_LAWS}")


@dataclass
class SimResult:
    mean_cost: float
    std_error: float | None
    trajectory_moments: list  # [{"k", "mean", "cov"}] for the realised state
    path_sample: np.ndarray | None

    def to_dict(self) -> dict:
        return {
            "mean_cost": float(self.mean_cost),
            "std_error": None if self.std_error is None else float(self.std_error),
            "trajectory_moments": [
                {"k": int(r["k"]), "mean": r["mean"].tolist(), "cov": r["cov"].tolist()}
                for r in self.trajectory_moments
            ],
            "path_sample": None if self.path_sample is None else self.path_sample.tolist(),
        }


def draw_noise(cfg: SimConfig, paths: int, steps: int) -> np.ndarray:
    """(paths, steps) noise matrix; row i depends only on (seed, i)."""
    gen = np.random.Generator(np.random.Philox(key=cfg.seed))
    u = gen.random((paths, steps))
    if cfg.noise_law == "rademacher":
        return np.where(u < 0.5, -1.0, 1.0)
    tiny = 2.0**-53
    return ndtri(np.clip(u, tiny, 1.0 - tiny))


def _atom_state(p: ProblemData, init: InitialPair) -> np.ndarray:
    x = np.asarray(init.x, dtype=float)
    if x.ndim != 1 or x.shape != (p.n,):
        raise DimensionMismatch(
            "simulation conditions on one information-set atom: pass a deterministic n-vector"
        )
    return x


def _closed_loop_paths(p: ProblemData, gains, x0: np.ndarray, t: int, w: np.ndarray):
    """Per-path equilibrium state and control from the feedback schedule."""
    paths = w.shape[0]
    cal = p.cal
    states = {t: np.tile(x0, (paths, 1))}
    controls = {}
    for k in range(t, p.N):
        xk = states[k]
        uk = gains.control(k, xk)
        controls[k] = uk
        drift = xk @ cal.A(k, k).T + uk @ cal.B(k, k).T + p.f[k, k]
        diff = xk @ cal.C(k, k).T + uk @ cal.D(k, k).T + p.d[k, k]
        states[k + 1] = drift + diff * w[:, k - t][:, None]
    return states, controls


def _family_cost_paths(p: ProblemData, t: int, x0: np.ndarray, controls: dict,
                       w: np.ndarray) -> np.ndarray:
    """Per-path cost of the (t, .)-family system driven by a control table.

    E_t factors (both in the dynamics and the cost) are replaced by
    cross-path means, which is consistent because all paths share the
    level-t atom.
    """
    paths = w.shape[0]
    xk = np.tile(x0, (paths, 1))
    total = np.zeros(paths)
    for k in range(t, p.N):
        uk = controls[k]
        mx = xk.mean(axis=0)
        mu = uk.mean(axis=0)
        total += np.einsum("ni,ij,nj->n", xk, p.Q[t, k], xk)
        total += mx @ p.Qbar[t, k] @ mx
        total += np.einsum("ni,ij,nj->n", uk, p.R[t, k], uk)
        total += mu @ p.Rbar[t, k] @ mu
        total += 2.0 * xk @ p.q[t, k]
        total += 2.0 * uk @ p.rho[t, k]
        drift = (xk @ p.A[t, k].T + p.Abar[t, k] @ mx
                 + uk @ p.B[t, k].T + p.Bbar[t, k] @ mu + p.f[t, k])
        diff = (xk @ p.C[t, k].T + p.Cbar[t, k] @ mx
                + uk @ p.D[t, k].T + p.Dbar[t, k] @ mu + p.d[t, k])
        xk = drift + diff * w[:, k - t][:, None]
    mx = xk.mean(axis=0)
    total += np.einsum("ni,ij,nj->n", xk, p.G[t], xk)
    total += mx @ p.Gbar[t] @ mx
    total += 2.0 * xk @ p.g[t]
    return total


def simulate(p: ProblemData, init: InitialPair, gains, cfg: SimConfig) -> SimResult:
    """Estimate the cost of the equilibrium pair at the given initial atom.

    The gain schedule realises the equilibrium control along the per-path
    closed-loop state; the cost is accumulated along the (t, .)-family
    system driven by that control, matching the exact tree evaluation.
    """
    t = init.t
    if t >= p.N:
        raise HorizonMismatch(f"initial time {t} >= horizon {p.N}")
    x0 = _atom_state(p, init)
    w = draw_noise(cfg, cfg.paths, p.N - t)
    states, controls = _closed_loop_paths(p, gains, x0, t, w)
    costs = _family_cost_paths(p, t, x0, controls, w)
    mean_cost = float(costs.mean())
    std_error = None
    if cfg.paths > 1:
        std_error = float(costs.std(ddof=1) / np.sqrt(cfg.paths))
    moments = []
    for k in range(t, p.N + 1):
        xk = states[k]
        mean = xk.mean(axis=0)
        if cfg.paths > 1:
            cov = sym_part(np.cov(xk.T).reshape(p.n, p.n))
        else:
            cov = np.zeros((p.n, p.n))
        moments.append({"k": k, "mean": mean, "cov": cov})
    sample = None
    if cfg.keep_paths:
        keep = min(cfg.keep_paths, cfg.paths)
        sample = np.stack([states[k][:keep] for k in range(t, p.N + 1)], axis=1)
    return SimResult(mean_cost, std_error, moments, sample)


def estimate_deviation_gap(p: ProblemData, init: InitialPair, gains, k: int,
                           perturbation, cfg: SimConfig,
                           history=None) -> tuple[float, float | None]:
    """Paired estimate of the one-instant deviation cost gap at step k.

    Conditions on an information-set atom at k (noise history ``history``,
    all +1 by default), rolls the equilibrium pair forward under common
    random numbers, and compares the restarted cost of the deviated control
    (shifted by ``perturbation`` at step k only) against the candidate.
    """
    t = init.t
    if not (t <= k < p.N):
        raise HorizonMismatch(f"deviation step {k} outside {{{t}..{p.N - 1}}}")
    x0 = _atom_state(p, init)
    hist = [1.0] * (k - t) if history is None else [float(h) for h in history]
    if len(hist) != k - t:
        raise DimensionMismatch(f"history must have length {k - t}")
    cal = p.cal
    xk = x0.copy()
    for j in range(t, k):
        u = gains.Psi[j] @ xk + gains.alpha[j]
        drift = cal.A(j, j) @ xk + cal.B(j, j) @ u + p.f[j, j]
        diff = cal.C(j, j) @ xk + cal.D(j, j) @ u + p.d[j, j]
        xk = drift + diff * hist[j - t]

    delta = np.asarray(perturbation, dtype=float)
    if delta.shape != (p.m,):
        raise DimensionMismatch(f"perturbation has shape {delta.shape}, expected ({p.m},)")
    w = draw_noise(cfg, cfg.paths, p.N - k)
    _, controls = _closed_loop_paths(p, gains, xk, k, w)
    base = _family_cost_paths(p, k, xk, controls, w)
    deviated = dict(controls)
    deviated[k] = controls[k] + delta
    pert = _family_cost_paths(p, k, xk, deviated, w)
    gap = pert - base
    se = None
    if cfg.paths > 1:
        se = float(gap.std(ddof=1) / np.sqrt(cfg.paths))
    return float(gap.mean()), se
