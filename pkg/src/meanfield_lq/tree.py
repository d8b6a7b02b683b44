"""Exact probability-tree engine for binary (Rademacher) noise.

Every operation here is brute force on the complete binary tree: conditional
expectations are subtree averages, noise-weighted expectations are signed
half-differences of children.  Nothing in this module consults the backward
recursions, so it can serve as an independent oracle for them.

Node convention: the level-k node with index i has children 2*i (noise +1)
and 2*i + 1 (noise -1) at level k+1; node probability is 2**-k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, HorizonMismatch
from .model import InitialPair, ProblemData

MAX_DEPTH = 14


class ScenarioTree:
    """Complete binary tree of a given depth with a memory guard."""

    def __init__(self, depth: int, force: bool = False):
        if depth < 0:
            raise HorizonMismatch(f"tree depth must be >= 0, got {depth}")
        if depth > MAX_DEPTH and not force:
            raise HorizonMismatch(
                f"tree depth {depth} exceeds the cap {MAX_DEPTH}; pass force=True to override"
            )
        self.depth = depth

    def nodes(self, level: int) -> int:
        return 2**level


def cond_mean(values: np.ndarray, level: int, k: int) -> np.ndarray:
    """Conditional expectation given level k of a level-`level` process."""
    if k > level:
        raise HorizonMismatch(f"cannot condition level {level} on later level {k}")
    v = np.asarray(values, dtype=float)
    width = 2 ** (level - k)
    return v.reshape(2**k, width, -1).mean(axis=1)


def lift(values: np.ndarray, k: int, level: int) -> np.ndarray:
    """Broadcast a level-k process to its level-`level` descendants."""
    if level < k:
        raise HorizonMismatch(f"cannot lift level {k} down to {level}")
    return np.repeat(np.asarray(values, dtype=float), 2 ** (level - k), axis=0)


def child_mean(values: np.ndarray) -> np.ndarray:
    """E_l of a level-(l+1) process: plain average of the two children."""
    return 0.5 * (values[0::2] + values[1::2])


def child_wmean(values: np.ndarray) -> np.ndarray:
    """E_l of (level-(l+1) process * w_l): signed half-difference of children."""
    return 0.5 * (values[0::2] - values[1::2])


@dataclass
class AdaptedProcess:
    """Per-node values of a tree-adapted process, keyed by level."""

    values: dict = field(default_factory=dict)

    def level_range(self) -> tuple[int, int]:
        ks = sorted(self.values)
        return ks[0], ks[-1]

    def require(self, lo: int, hi: int, dim: int | None = None):
        for lev in range(lo, hi + 1):
            if lev not in self.values:
                raise HorizonMismatch(f"process missing level {lev}")
            v = self.values[lev]
            if v.shape[0] != 2**lev:
                raise DimensionMismatch(f"level {lev} has {v.shape[0]} nodes, expected {2**lev}")
            if dim is not None and v.shape[1] != dim:
                raise DimensionMismatch(f"level {lev} has dim {v.shape[1]}, expected {dim}")

    def copy(self) -> "AdaptedProcess":
        return AdaptedProcess({k: v.copy() for k, v in self.values.items()})


def constant_control(p: ProblemData, t: int, value=None) -> AdaptedProcess:
    """Control process equal to one fixed vector (default zero) at every node."""
    vec = np.zeros(p.m) if value is None else np.asarray(value, dtype=float)
    return AdaptedProcess({k: np.tile(vec, (2**k, 1)) for k in range(t, p.N)})


def _check_tree(p: ProblemData, tree: ScenarioTree | None) -> ScenarioTree:
    if tree is None:
        return ScenarioTree(p.N)
    if tree.depth < p.N:
        raise HorizonMismatch(f"tree depth {tree.depth} < horizon {p.N}")
    return tree


def roll_forward(p: ProblemData, init: InitialPair, control: AdaptedProcess,
                 t: int, tree: ScenarioTree | None = None) -> AdaptedProcess:
    """Exact state rollout of the system restarted at family index t.

    Conditional means (the E_t terms in the dynamics) are subtree averages
    at the level-t ancestor of each node.
    """
    _check_tree(p, tree)
    control.require(t, p.N - 1, p.m)
    x0 = init.node_values(p.n) if init.t == t else None
    if x0 is None:
        raise HorizonMismatch(f"initial pair is at t={init.t}, rollout starts at {t}")
    state = AdaptedProcess({t: x0})
    for k in range(t, p.N):
        xk = state.values[k]
        uk = control.values[k]
        ex = lift(cond_mean(xk, k, t), t, k)
        eu = lift(cond_mean(uk, k, t), t, k)
        drift = (xk @ p.A[t, k].T + ex @ p.Abar[t, k].T
                 + uk @ p.B[t, k].T + eu @ p.Bbar[t, k].T + p.f[t, k])
        diff = (xk @ p.C[t, k].T + ex @ p.Cbar[t, k].T
                + uk @ p.D[t, k].T + eu @ p.Dbar[t, k].T + p.d[t, k])
        nxt = np.empty((2 ** (k + 1), p.n))
        nxt[0::2] = drift + diff
        nxt[1::2] = drift - diff
        state.values[k + 1] = nxt
    return state


def cost(p: ProblemData, init: InitialPair, control: AdaptedProcess,
         t: int, tree: ScenarioTree | None = None,
         state: AdaptedProcess | None = None) -> np.ndarray:
    """Exact conditional cost of the (t, .)-family problem, per level-t node."""
    if state is None:
        state = roll_forward(p, init, control, t, tree)
    total = np.zeros(2**t)
    for k in range(t, p.N):
        xk = state.values[k]
        uk = control.values[k]
        qx = np.einsum("ni,ij,nj->n", xk, p.Q[t, k], xk)
        qu = np.einsum("ni,ij,nj->n", uk, p.R[t, k], uk)
        mean_x = cond_mean(xk, k, t)
        mean_u = cond_mean(uk, k, t)
        total += cond_mean(qx[:, None], k, t)[:, 0]
        total += np.einsum("ni,ij,nj->n", mean_x, p.Qbar[t, k], mean_x)
        total += cond_mean(qu[:, None], k, t)[:, 0]
        total += np.einsum("ni,ij,nj->n", mean_u, p.Rbar[t, k], mean_u)
        total += 2.0 * mean_x @ p.q[t, k]
        total += 2.0 * mean_u @ p.rho[t, k]
    xN = state.values[p.N]
    gx = np.einsum("ni,ij,nj->n", xN, p.G[t], xN)
    mean_xN = cond_mean(xN, p.N, t)
    total += cond_mean(gx[:, None], p.N, t)[:, 0]
    total += np.einsum("ni,ij,nj->n", mean_xN, p.Gbar[t], mean_xN)
    total += 2.0 * mean_xN @ p.g[t]
    return total


def concatenated_state(p: ProblemData, control: AdaptedProcess,
                       init: InitialPair, tree: ScenarioTree | None = None) -> AdaptedProcess:
    """State realised when the problem is restarted at every step.

    Each step k uses the diagonal (k, k) blocks; since states and controls
    at level k are measurable there, the conditional-mean terms collapse
    into the summed (calligraphic) coefficients and the rollout is node-wise.
    """
    _check_tree(p, tree)
    control.require(init.t, p.N - 1, p.m)
    cal = p.cal
    state = AdaptedProcess({init.t: init.node_values(p.n)})
    for k in range(init.t, p.N):
        xk = state.values[k]
        uk = control.values[k]
        drift = xk @ cal.A(k, k).T + uk @ cal.B(k, k).T + p.f[k, k]
        diff = xk @ cal.C(k, k).T + uk @ cal.D(k, k).T + p.d[k, k]
        nxt = np.empty((2 ** (k + 1), p.n))
        nxt[0::2] = drift + diff
        nxt[1::2] = drift - diff
        state.values[k + 1] = nxt
    return state


def equilibrium_pair(p: ProblemData, gains, init: InitialPair,
                     tree: ScenarioTree | None = None) -> tuple[AdaptedProcess, AdaptedProcess]:
    """Closed-loop state and the control it realises, from a gain schedule."""
    _check_tree(p, tree)
    cal = p.cal
    state = AdaptedProcess({init.t: init.node_values(p.n)})
    control = AdaptedProcess()
    for k in range(init.t, p.N):
        xk = state.values[k]
        uk = gains.control(k, xk)
        control.values[k] = uk
        drift = xk @ cal.A(k, k).T + uk @ cal.B(k, k).T + p.f[k, k]
        diff = xk @ cal.C(k, k).T + uk @ cal.D(k, k).T + p.d[k, k]
        nxt = np.empty((2 ** (k + 1), p.n))
        nxt[0::2] = drift + diff
        nxt[1::2] = drift - diff
        state.values[k + 1] = nxt
    return state, control


def equilibrium_state(p: ProblemData, gains, init: InitialPair,
                      tree: ScenarioTree | None = None) -> AdaptedProcess:
    return equilibrium_pair(p, gains, init, tree)[0]


def solve_bsde(p: ProblemData, forward_state: AdaptedProcess, k: int,
               tree: ScenarioTree | None = None) -> AdaptedProcess:
    """Exact backward pass of the adjoint equation restarted at index k.

    The stage-l value mixes the one-step child mean (E_l), the child
    half-difference (E_l of the noise-weighted value) and level-k subtree
    averages for the barred coefficients.
    """
    _check_tree(p, tree)
    forward_state.require(k, p.N, p.n)
    z = AdaptedProcess()
    xN = forward_state.values[p.N]
    ek_xN = lift(cond_mean(xN, p.N, k), k, p.N)
    z.values[p.N] = xN @ p.G[k].T + ek_xN @ p.Gbar[k].T + p.g[k]
    for l in range(p.N - 1, k - 1, -1):
        zn = z.values[l + 1]
        ez = child_mean(zn)
        ezw = child_wmean(zn)
        ek_z = lift(cond_mean(zn, l + 1, k), k, l)
        ek_zw = lift(cond_mean(ezw, l, k), k, l)
        xl = forward_state.values[l]
        ek_x = lift(cond_mean(xl, l, k), k, l)
        z.values[l] = (
            ez @ p.A[k, l] + ek_z @ p.Abar[k, l]
            + ezw @ p.C[k, l] + ek_zw @ p.Cbar[k, l]
            + xl @ p.Q[k, l].T + ek_x @ p.Qbar[k, l].T + p.q[k, l]
        )
    return z


def stationarity_gradient(p: ProblemData, state_k: AdaptedProcess,
                          control: AdaptedProcess, k: int) -> np.ndarray:
    """Left side of the first-order condition at step k, per level-k node."""
    z = solve_bsde(p, state_k, k)
    zn = z.values[k + 1]
    ez = child_mean(zn)
    ezw = child_wmean(zn)
    cal = p.cal
    return (control.values[k] @ cal.R(k, k).T + ez @ cal.B(k, k)
            + ezw @ cal.D(k, k) + p.rho[k, k])


def stationarity_residuals(p: ProblemData, init: InitialPair, control: AdaptedProcess,
                           t: int, tree: ScenarioTree | None = None) -> dict:
    """Max node-wise norm of the stationarity equation for each k in {t..N-1}.

    For each k the adjoint system is restarted at (k, X*_k) along the
    candidate control, solved exactly, and the gradient norm is maximised
    over level-k nodes.
    """
    _check_tree(p, tree)
    star = concatenated_state(p, control, init, tree)
    out = {}
    for k in range(t, p.N):
        restart = InitialPair(k, star.values[k])
        state_k = roll_forward(p, restart, control, k, tree)
        grad = stationarity_gradient(p, state_k, control, k)
        out[k] = float(np.max(np.linalg.norm(grad, axis=1)))
    return out


def variation_cost(p: ProblemData, k: int, ubar, tree: ScenarioTree | None = None):
    """Exact cost of a single-instant control variation at step k.

    ``ubar`` is either an m-vector (same variation at every level-k node,
    returns a float) or a (2**k, m) node family (returns per-node values).
    The variational state starts at zero, jumps through the summed input
    blocks at step k and then follows the homogeneous dynamics.
    """
    _check_tree(p, tree)
    ub = np.asarray(ubar, dtype=float)
    scalar_input = ub.ndim == 1
    nodes = np.tile(ub, (2**k, 1)) if scalar_input else ub
    if nodes.shape != (2**k, p.m):
        raise DimensionMismatch(f"ubar has shape {ub.shape}, expected ({p.m},) or {(2**k, p.m)}")
    cal = p.cal
    y = AdaptedProcess({k: np.zeros((2**k, p.n))})
    jump_drift = nodes @ cal.B(k, k).T
    jump_diff = nodes @ cal.D(k, k).T
    first = np.empty((2 ** (k + 1), p.n))
    first[0::2] = jump_drift + jump_diff
    first[1::2] = jump_drift - jump_diff
    y.values[k + 1] = first
    for l in range(k + 1, p.N):
        yl = y.values[l]
        ek_y = lift(cond_mean(yl, l, k), k, l)
        drift = yl @ p.A[k, l].T + ek_y @ p.Abar[k, l].T
        diff = yl @ p.C[k, l].T + ek_y @ p.Cbar[k, l].T
        nxt = np.empty((2 ** (l + 1), p.n))
        nxt[0::2] = drift + diff
        nxt[1::2] = drift - diff
        y.values[l + 1] = nxt
    total = np.einsum("ni,ij,nj->n", nodes, cal.R(k, k), nodes)
    for l in range(k, p.N):
        yl = y.values[l]
        qy = np.einsum("ni,ij,nj->n", yl, p.Q[k, l], yl)
        mean_y = cond_mean(yl, l, k)
        total += cond_mean(qy[:, None], l, k)[:, 0]
        total += np.einsum("ni,ij,nj->n", mean_y, p.Qbar[k, l], mean_y)
    yN = y.values[p.N]
    gy = np.einsum("ni,ij,nj->n", yN, p.G[k], yN)
    mean_yN = cond_mean(yN, p.N, k)
    total += cond_mean(gy[:, None], p.N, k)[:, 0]
    total += np.einsum("ni,ij,nj->n", mean_yN, p.Gbar[k], mean_yN)
    if scalar_input:
        return float(total[0])
    return total


def deviated_control(control: AdaptedProcess, k: int, delta) -> AdaptedProcess:
    """Copy of a control with the level-k values shifted by ``delta``."""
    out = control.copy()
    d = np.asarray(delta, dtype=float)
    out.values[k] = out.values[k] + d
    return out


def difference_formula_check(p: ProblemData, k: int, zeta, u: AdaptedProcess,
                             ubar, lam: float, tree: ScenarioTree | None = None) -> float:
    """Residual of the exact cost-difference expansion at step k.

    Left side: two exact cost evaluations differing only in the step-k
    control.  Right side: linear term through the restarted adjoint plus
    lam**2 times the variational cost.  Returns the max node-wise gap.
    """
    _check_tree(p, tree)
    init = InitialPair(k, np.asarray(zeta, dtype=float))
    ub = np.asarray(ubar, dtype=float)
    ub_nodes = np.tile(ub, (2**k, 1)) if ub.ndim == 1 else ub
    state = roll_forward(p, init, u, k, tree)
    j_base = cost(p, init, u, k, tree, state=state)
    j_pert = cost(p, init, deviated_control(u, k, lam * ub_nodes), k, tree)
    lhs = j_pert - j_base
    grad = stationarity_gradient(p, state, u, k)
    quad = variation_cost(p, k, ub_nodes, tree)
    rhs = 2.0 * lam * np.sum(grad * ub_nodes, axis=1) + lam * lam * quad
    return float(np.max(np.abs(lhs - rhs)))


def representation_check(p: ProblemData, gains, t: int, x, k: int,
                         tables, tree: ScenarioTree | None = None) -> float:
    """Max gap between the exact adjoint and its table representation.

    The adjoint restarted at (k, X*_k) along the feedback control must equal
    P (X - E_k X) + script-P E_k X + T (X* - E_k X*) + script-T E_k X* + pi
    stage by stage; ``tables`` are the solved backward tables.
    """
    tree = _check_tree(p, tree)
    init = InitialPair(t, np.asarray(x, dtype=float))
    star, control = equilibrium_pair(p, gains, init, tree)
    restart = InitialPair(k, star.values[k])
    state_k = roll_forward(p, restart, control, k, tree)
    z = solve_bsde(p, state_k, k, tree)
    worst = 0.0
    for l in range(k, p.N + 1):
        xl = state_k.values[l]
        xs = star.values[l]
        ek_x = lift(cond_mean(xl, l, k), k, l)
        ek_xs = lift(cond_mean(xs, l, k), k, l)
        pred = (
            (xl - ek_x) @ tables.P[k, l].T
            + ek_x @ tables.Pcal[k, l].T
            + (xs - ek_xs) @ tables.T[k, l].T
            + ek_xs @ tables.Tcal[k, l].T
            + tables.pi[k, l]
        )
        gap = float(np.max(np.linalg.norm(z.values[l] - pred, axis=1)))
        worst = max(worst, gap)
    return worst


@dataclass
class EquilibriumCertificate:
    """Verdict of the exact tree certification of a candidate control."""

    stationary_residuals: dict
    convexity_values: dict
    deviation_gaps: list
    verdict: bool
    tol_stationary: float
    tol_convexity: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "stationary_residuals": {str(k): float(v) for k, v in self.stationary_residuals.items()},
            "convexity_values": {str(k): float(v) for k, v in self.convexity_values.items()},
            "deviation_gaps": [
                {"k": int(g["k"]), "scale": float(g["scale"]), "min_gap": float(g["min_gap"])}
                for g in self.deviation_gaps
            ],
            "verdict": bool(self.verdict),
            "tol_stationary": float(self.tol_stationary),
            "tol_convexity": float(self.tol_convexity),
            "seed": int(self.seed),
        }


DEVIATION_SCALES = (1.0, 0.1, 0.01)


def certify_equilibrium(p: ProblemData, init: InitialPair, control: AdaptedProcess,
                        t: int, deviations: int = 4, seed: int = 20240801,
                        tol_stationary: float = 1e-8, tol_convexity: float = 1e-9,
                        tree: ScenarioTree | None = None) -> EquilibriumCertificate:
    """Full certification: stationarity, convexity and sampled deviations.

    Convexity values are the variational costs of the m canonical unit
    variations plus ``deviations`` seeded random unit directions, minimised
    per step.  Deviation gaps compare the restarted cost of the candidate
    control against single-instant perturbations at three scales probing
    the linear and quadratic parts; for an equilibrium all gaps are >= 0
    up to tolerance.
    """
    tree = _check_tree(p, tree)
    residuals = stationarity_residuals(p, init, control, t, tree)
    rng = np.random.default_rng(seed)
    convexity = {}
    for k in range(t, p.N):
        dirs = [np.eye(p.m)[i] for i in range(p.m)]
        for _ in range(deviations):
            v = rng.normal(size=p.m)
            dirs.append(v / np.linalg.norm(v))
        convexity[k] = min(variation_cost(p, k, v, tree) for v in dirs)

    star = concatenated_state(p, control, init, tree)
    gaps = []
    for k in range(t, p.N):
        restart = InitialPair(k, star.values[k])
        base = cost(p, restart, control, k, tree)
        for scale in DEVIATION_SCALES:
            worst = np.inf
            for _ in range(max(1, deviations // 2)):
                v = rng.normal(size=p.m)
                delta = scale * v / np.linalg.norm(v)
                pert = cost(p, restart, deviated_control(control, k, delta), k, tree)
                worst = min(worst, float(np.min(pert - base)))
            gaps.append({"k": k, "scale": scale, "min_gap": worst})

    ok = (
        all(v <= tol_stationary for v in residuals.values())
        and all(v >= -tol_convexity for v in convexity.values())
        and all(g["min_gap"] >= -tol_convexity for g in gaps)
    )
    return EquilibriumCertificate(
        stationary_residuals=residuals,
        convexity_values=convexity,
        deviation_gaps=gaps,
        verdict=ok,
        tol_stationary=tol_stationary,
        tol_convexity=tol_convexity,
        seed=seed,
    )
