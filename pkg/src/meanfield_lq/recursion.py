"""Backward recursions, gain assembly and solvability verdicts.

The solvers fill doubly-indexed tables keyed by (start index k, stage l):
a symmetric pair (P, script-P), a generally nonsymmetric pair (T, script-T)
and an affine term pi.  Gains are frozen per start index while sweeping k
from N-1 down to 0 -- the unique causal order in which every pseudoinverse
the recursions reference is already available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matrices as mx
from .errors import EpsilonNonPositive, HorizonMismatch
from .matrices import PsdVerdict
from .model import InitialPair, ProblemData

RANGE_TOL = 1e-8


@dataclass
class RecursionTables:
    """Solution tables, keyed by (k, l) with 0 <= k <= N-1, k <= l <= N."""

    N: int
    P: dict = field(default_factory=dict)
    Pcal: dict = field(default_factory=dict)
    T: dict = field(default_factory=dict)
    Tcal: dict = field(default_factory=dict)
    pi: dict = field(default_factory=dict)

    def Pbar(self, k, l):
        return self.Pcal[k, l] - self.P[k, l]

    def Tbar(self, k, l):
        return self.Tcal[k, l] - self.T[k, l]


@dataclass
class GainSchedule:
    """Per-step gain data: W, its pseudoinverse, H, beta and feedback form."""

    W: list
    Wdag: list
    H: list
    beta: list
    Psi: list      # -Wdag @ H
    alpha: list    # -Wdag @ beta

    @property
    def N(self) -> int:
        return len(self.W)

    def control(self, k: int, x: np.ndarray) -> np.ndarray:
        """Feedback value Psi_k x + alpha_k (x may be a stack of states)."""
        return x @ self.Psi[k].T + self.alpha[k]


@dataclass
class SolvabilityReport:
    convexity_margins: list
    convexity_verdicts: list
    M2: list
    rangeH_residuals: list
    rangeBeta_residuals: list
    verdict_all_pairs: bool
    per_pair_note: str
    range_tolerance: float

    def to_dict(self) -> dict:
        return {
            "convexity_margins": [float(v) for v in self.convexity_margins],
            "convexity_psd": [bool(v.is_psd) for v in self.convexity_verdicts],
            "psd_tolerances": [float(v.tolerance_used) for v in self.convexity_verdicts],
            "M2": [m.tolist() for m in self.M2],
            "rangeH_residuals": [float(v) for v in self.rangeH_residuals],
            "rangeBeta_residuals": [float(v) for v in self.rangeBeta_residuals],
            "verdict_all_pairs": bool(self.verdict_all_pairs),
            "per_pair_note": self.per_pair_note,
            "range_tolerance": float(self.range_tolerance),
        }


def solve_symmetric(p: ProblemData) -> RecursionTables:
    """Fill the symmetric tables P and script-P by backward induction.

    For each start index k: P[k][N] = G_k, script-P[k][N] = script-G_k, then
    P[k][l]        = Q + A' P A + C' P C           (plain blocks)
    script-P[k][l] = scr-Q + scr-A' scr-P scr-A + scr-C' P scr-C
    with every result re-symmetrised to kill roundoff drift.
    """
    tab = RecursionTables(p.N)
    cal = p.cal
    for k in range(p.N):
        tab.P[k, p.N] = p.G[k].copy()
        tab.Pcal[k, p.N] = cal.G(k)
        for l in range(p.N - 1, k - 1, -1):
            A, C = p.A[k, l], p.C[k, l]
            cA, cC = cal.A(k, l), cal.C(k, l)
            Pn, Pcn = tab.P[k, l + 1], tab.Pcal[k, l + 1]
            tab.P[k, l] = mx.sym_part(p.Q[k, l] + A.T @ Pn @ A + C.T @ Pn @ C)
            tab.Pcal[k, l] = mx.sym_part(cal.Q(k, l) + cA.T @ Pcn @ cA + cC.T @ Pn @ cC)
    return tab


def assemble_m2(p: ProblemData, tables: RecursionTables, k: int) -> np.ndarray:
    """Quadratic coefficient of a one-instant control deviation at step k."""
    cal = p.cal
    cB, cD = cal.B(k, k), cal.D(k, k)
    return cal.R(k, k) + cB.T @ tables.Pcal[k, k + 1] @ cB + cD.T @ tables.P[k, k + 1] @ cD


def convexity_margins(p: ProblemData, tables: RecursionTables,
                      tol: float | None = None) -> tuple[list[PsdVerdict], list[np.ndarray]]:
    """Per-step PSD verdicts for the deviation-cost coefficients."""
    verdicts, mats = [], []
    for k in range(p.N):
        m2 = assemble_m2(p, tables, k)
        mats.append(m2)
        verdicts.append(mx.psd_check(m2, tol))
    return verdicts, mats


def _gain_blocks(p, tables, k, epsilon):
    cal = p.cal
    cB, cD = cal.B(k, k), cal.D(k, k)
    PT = tables.P[k, k + 1] + tables.T[k, k + 1]
    PcTc = tables.Pcal[k, k + 1] + tables.Tcal[k, k + 1]
    W = cal.R(k, k) + cB.T @ PcTc @ cB + cD.T @ PT @ cD
    if epsilon:
        W = W + epsilon * np.eye(p.m)
    H = cB.T @ PcTc @ cal.A(k, k) + cD.T @ PT @ cal.C(k, k)
    beta = cB.T @ (PcTc @ p.f[k, k] + tables.pi[k, k + 1]) + cD.T @ (PT @ p.d[k, k]) + p.rho[k, k]
    return W, H, beta


def solve_gdre_global(p: ProblemData, tables: RecursionTables | None = None,
                      epsilon: float = 0.0,
                      range_tol: float = RANGE_TOL) -> tuple[RecursionTables, GainSchedule, SolvabilityReport]:
    """Solve the coupled nonsymmetric tables and assemble the gain schedule.

    Outer loop over start index k = N-1 .. 0.  While processing k, the inner
    stage loop l = N-1 .. k+1 only references gains of start indices l > k,
    which were frozen in earlier outer iterations; the gains of index k are
    assembled (and their pseudoinverse fixed) from the stage-(k+1) tables
    before the diagonal entries at l = k are filled.

    ``epsilon`` > 0 adds epsilon * I to the control weight sum inside the
    W blocks only (the perturbed-cost variant); the recursions themselves
    are unchanged apart from flowing through the perturbed pseudoinverses.
    """
    if tables is None:
        tables = solve_symmetric(p)
    N, n, m = p.N, p.n, p.m
    cal = p.cal
    W = [None] * N
    Wdag = [None] * N
    H = [None] * N
    beta = [None] * N
    Psi = [None] * N
    alpha = [None] * N

    for k in range(N - 1, -1, -1):
        tables.T[k, N] = np.zeros((n, n))
        tables.Tcal[k, N] = np.zeros((n, n))
        tables.pi[k, N] = p.g[k].copy()

        def step(l):
            A, C = p.A[k, l], p.C[k, l]
            B, D = p.B[k, l], p.D[k, l]
            cA, cB = cal.A(k, l), cal.B(k, l)
            cC, cD = cal.C(k, l), cal.D(k, l)
            dA, dB = cal.A(l, l), cal.B(l, l)
            dC, dD = cal.C(l, l), cal.D(l, l)
            Pn, Pcn = tables.P[k, l + 1], tables.Pcal[k, l + 1]
            Tn, Tcn = tables.T[k, l + 1], tables.Tcal[k, l + 1]
            WdH = Wdag[l] @ H[l]
            Wdb = Wdag[l] @ beta[l]
            tables.T[k, l] = (
                A.T @ Tn @ dA + C.T @ Tn @ dC
                - (A.T @ Pn @ B + A.T @ Tn @ dB + C.T @ Pn @ D + C.T @ Tn @ dD) @ WdH
            )
            tables.Tcal[k, l] = (
                cA.T @ Tcn @ dA + cC.T @ Tn @ dC
                - (cA.T @ Pcn @ cB + cA.T @ Tcn @ dB + cC.T @ Pn @ cD + cC.T @ Tn @ dD) @ WdH
            )
            tables.pi[k, l] = (
                cA.T @ Pcn @ (p.f[k, l] - cB @ Wdb)
                + cA.T @ Tcn @ (p.f[l, l] - dB @ Wdb)
                + cC.T @ Pn @ (p.d[k, l] - cD @ Wdb)
                + cC.T @ Tn @ (p.d[l, l] - dD @ Wdb)
                + cA.T @ tables.pi[k, l + 1]
                + p.q[k, l]
            )

        for l in range(N - 1, k, -1):
            step(l)
        W[k], H[k], beta[k] = _gain_blocks(p, tables, k, epsilon)
        Wdag[k] = mx.pinv(W[k])
        Psi[k] = -Wdag[k] @ H[k]
        alpha[k] = -Wdag[k] @ beta[k]
        step(k)

    gains = GainSchedule(W, Wdag, H, beta, Psi, alpha)
    verdicts, mats = convexity_margins(p, tables)
    res_h = [mx.range_residual(W[k], H[k]) for k in range(N)]
    res_b = [mx.range_residual(W[k], beta[k].reshape(m, 1)) for k in range(N)]
    ok = (
        all(v.is_psd for v in verdicts)
        and all(r <= range_tol for r in res_h)
        and all(r <= range_tol for r in res_b)
    )
    report = SolvabilityReport(
        convexity_margins=[v.min_eigenvalue for v in verdicts],
        convexity_verdicts=verdicts,
        M2=mats,
        rangeH_residuals=res_h,
        rangeBeta_residuals=res_b,
        verdict_all_pairs=ok,
        per_pair_note=(
            "fixed-pair solvability additionally needs the projected residual "
            "(I - W Wdag)(H X + beta) = 0 along the realised trajectory; "
            "see solve_fixed_pair"
        ),
        range_tolerance=range_tol,
    )
    return tables, gains, report


def solve_epsilon(p: ProblemData, epsilon: float) -> tuple[GainSchedule, RecursionTables]:
    """Gain schedule of the perturbed problem with control weight + eps * I."""
    if not (epsilon > 0.0):
        raise EpsilonNonPositive(f"epsilon must be > 0, got {epsilon}")
    tables, gains, _ = solve_gdre_global(p, epsilon=float(epsilon))
    return gains, tables


def affine_feedback_tables(p: ProblemData, psi, alpha, k: int,
                   tables: RecursionTables | None = None) -> tuple[dict, dict, dict]:
    """Backward tables for an arbitrary affine feedback u_l = Psi_l x + alpha_l.

    Returns (T, Tbar, pi) rows for start index k as dicts keyed by stage l
    in {k..N}.  With Psi = -Wdag H and alpha = -Wdag beta these coincide
    with the globally solved tables (Tbar being script-T minus T).
    """
    if tables is None:
        tables = solve_symmetric(p)
    N = p.N
    cal = p.cal
    psi = {l: np.asarray(psi[l], dtype=float) for l in range(k, N)}
    alpha = {l: np.asarray(alpha[l], dtype=float) for l in range(k, N)}
    T = {N: np.zeros((p.n, p.n))}
    Tb = {N: np.zeros((p.n, p.n))}
    pi = {N: p.g[k].copy()}
    for l in range(N - 1, k - 1, -1):
        A, Ab, C, Cb = p.A[k, l], p.Abar[k, l], p.C[k, l], p.Cbar[k, l]
        B, Bb, D, Db = p.B[k, l], p.Bbar[k, l], p.D[k, l], p.Dbar[k, l]
        cA, cB, cC, cD = cal.A(k, l), cal.B(k, l), cal.C(k, l), cal.D(k, l)
        dA, dB = cal.A(l, l), cal.B(l, l)
        dC, dD = cal.C(l, l), cal.D(l, l)
        Pn, Pcn = tables.P[k, l + 1], tables.Pcal[k, l + 1]
        Pbn = Pcn - Pn
        Tn, Tbn = T[l + 1], Tb[l + 1]
        Tcn = Tn + Tbn
        T[l] = (
            A.T @ Tn @ dA + C.T @ Tn @ dC
            + (A.T @ Pn @ B + A.T @ Tn @ dB + C.T @ Pn @ D + C.T @ Tn @ dD) @ psi[l]
        )
        Tb[l] = (
            A.T @ Tbn @ dA + Ab.T @ Tcn @ dA + Cb.T @ Tn @ dC
            + (
                A.T @ Pn @ Bb + A.T @ Pbn @ cB + A.T @ Tbn @ dB + C.T @ Pn @ Db
                + Ab.T @ Pcn @ cB + Ab.T @ Tcn @ dB + Cb.T @ Pn @ cD + Cb.T @ Tn @ dD
            ) @ psi[l]
        )
        pi[l] = (
            cA.T @ Pcn @ (cB @ alpha[l] + p.f[k, l])
            + cA.T @ Tcn @ (dB @ alpha[l] + p.f[l, l])
            + cC.T @ Pn @ (cD @ alpha[l] + p.d[k, l])
            + cC.T @ Tn @ (dD @ alpha[l] + p.d[l, l])
            + cA.T @ pi[l + 1]
            + p.q[k, l]
        )
    return T, Tb, pi


@dataclass
class FixedPairReport:
    """Trajectory-dependent solvability check for one initial pair."""

    max_residual: float
    per_step: dict  # k -> max node residual of (I - W Wdag)(H x + beta)
    tolerance: float

    @property
    def satisfied(self) -> bool:
        return self.max_residual <= self.tolerance


def solve_fixed_pair(p: ProblemData, tables: RecursionTables, gains: GainSchedule,
                     init: InitialPair, tree, tol: float = RANGE_TOL) -> FixedPairReport:
    """Roll the closed-loop state on the tree and test the projected residual.

    At every node of every level k >= t the condition
    (I - W_k Wdag_k)(H_k x + beta_k) = 0 must hold for the feedback form of
    the control to solve the stationarity equation; with the all-pairs
    verdict true this is automatic.
    """
    from .tree import equilibrium_state  # local import; tree has no recursion dep

    if tree.depth < p.N:
        raise HorizonMismatch(f"tree depth {tree.depth} < horizon {p.N}")
    state = equilibrium_state(p, gains, init)
    per_step = {}
    worst = 0.0
    for k in range(init.t, p.N):
        proj = np.eye(p.m) - gains.W[k] @ gains.Wdag[k]
        vals = state.values[k] @ gains.H[k].T + gains.beta[k]
        res = float(np.max(np.linalg.norm(vals @ proj.T, axis=1))) if vals.size else 0.0
        per_step[k] = res
        worst = max(worst, res)
    return FixedPairReport(worst, per_step, tol)


# ---------------------------------------------------------------------------
# Dedicated path for instances with no mean-field blocks: the single-family
# recursions collapse every script quantity onto its plain counterpart.

def solve_no_meanfield(p: ProblemData) -> tuple[RecursionTables, GainSchedule, SolvabilityReport]:
    """Solver specialised to instances whose barred blocks all vanish.

    Uses only A, B, C, D, Q, R, G (no sums), so agreement with the general
    solver on bar-free instances is a real consistency check rather than a
    re-run of the same arithmetic.
    """
    N, n, m = p.N, p.n, p.m
    tab = RecursionTables(N)
    for k in range(N):
        tab.P[k, N] = p.G[k].copy()
        for l in range(N - 1, k - 1, -1):
            A, C = p.A[k, l], p.C[k, l]
            Pn = tab.P[k, l + 1]
            tab.P[k, l] = mx.sym_part(p.Q[k, l] + A.T @ Pn @ A + C.T @ Pn @ C)
    for key, val in list(tab.P.items()):
        tab.Pcal[key] = val.copy()

    W = [None] * N
    Wdag = [None] * N
    H = [None] * N
    beta = [None] * N
    Psi = [None] * N
    alpha = [None] * N
    for k in range(N - 1, -1, -1):
        tab.T[k, N] = np.zeros((n, n))
        tab.pi[k, N] = p.g[k].copy()

        def step(l):
            A, C = p.A[k, l], p.C[k, l]
            B, D = p.B[k, l], p.D[k, l]
            dA, dB = p.A[l, l], p.B[l, l]
            dC, dD = p.C[l, l], p.D[l, l]
            Pn, Tn = tab.P[k, l + 1], tab.T[k, l + 1]
            WdH = Wdag[l] @ H[l]
            Wdb = Wdag[l] @ beta[l]
            # P pairs with the wide-index blocks, T with the diagonal ones
            tab.T[k, l] = (
                A.T @ Tn @ dA + C.T @ Tn @ dC
                - (A.T @ Pn @ B + A.T @ Tn @ dB + C.T @ Pn @ D + C.T @ Tn @ dD) @ WdH
            )
            tab.pi[k, l] = (
                A.T @ Pn @ (p.f[k, l] - B @ Wdb)
                + A.T @ Tn @ (p.f[l, l] - dB @ Wdb)
                + C.T @ Pn @ (p.d[k, l] - D @ Wdb)
                + C.T @ Tn @ (p.d[l, l] - dD @ Wdb)
                + A.T @ tab.pi[k, l + 1]
                + p.q[k, l]
            )

        for l in range(N - 1, k, -1):
            step(l)
        B, D = p.B[k, k], p.D[k, k]
        PT = tab.P[k, k + 1] + tab.T[k, k + 1]
        W[k] = p.R[k, k] + B.T @ PT @ B + D.T @ PT @ D
        H[k] = B.T @ PT @ p.A[k, k] + D.T @ PT @ p.C[k, k]
        beta[k] = B.T @ (PT @ p.f[k, k] + tab.pi[k, k + 1]) + D.T @ (PT @ p.d[k, k]) + p.rho[k, k]
        Wdag[k] = mx.pinv(W[k])
        Psi[k] = -Wdag[k] @ H[k]
        alpha[k] = -Wdag[k] @ beta[k]
        step(k)
    for key, val in list(tab.T.items()):
        tab.Tcal[key] = val.copy()

    gains = GainSchedule(W, Wdag, H, beta, Psi, alpha)
    verdicts, mats = convexity_margins(p, tab)
    res_h = [mx.range_residual(W[k], H[k]) for k in range(N)]
    res_b = [mx.range_residual(W[k], beta[k].reshape(m, 1)) for k in range(N)]
    ok = (
        all(v.is_psd for v in verdicts)
        and all(r <= RANGE_TOL for r in res_h)
        and all(r <= RANGE_TOL for r in res_b)
    )
    report = SolvabilityReport(
        convexity_margins=[v.min_eigenvalue for v in verdicts],
        convexity_verdicts=verdicts,
        M2=mats,
        rangeH_residuals=res_h,
        rangeBeta_residuals=res_b,
        verdict_all_pairs=ok,
        per_pair_note="no-mean-field specialisation",
        range_tolerance=RANGE_TOL,
    )
    return tab, gains, report


def gains_to_dict(gains: GainSchedule) -> dict:
    return {
        "W": [w.tolist() for w in gains.W],
        "Wdag": [w.tolist() for w in gains.Wdag],
        "H": [h.tolist() for h in gains.H],
        "beta": [b.tolist() for b in gains.beta],
        "Psi": [s.tolist() for s in gains.Psi],
        "alpha": [a.tolist() for a in gains.alpha],
    }


def gains_from_dict(doc: dict) -> GainSchedule:
    return GainSchedule(
        W=[np.asarray(w, dtype=float) for w in doc["W"]],
        Wdag=[np.asarray(w, dtype=float) for w in doc["Wdag"]],
        H=[np.asarray(h, dtype=float) for h in doc["H"]],
        beta=[np.asarray(b, dtype=float) for b in doc["beta"]],
        Psi=[np.asarray(s, dtype=float) for s in doc["Psi"]],
        alpha=[np.asarray(a, dtype=float) for a in doc["alpha"]],
    )


def tables_to_dict(tables: RecursionTables) -> dict:
    def dump(d):
        return {f"{k},{l}": v.tolist() for (k, l), v in sorted(d.items())}

    return {
        "N": tables.N,
        "P": dump(tables.P),
        "Pcal": dump(tables.Pcal),
        "T": dump(tables.T),
        "Tcal": dump(tables.Tcal),
        "pi": dump(tables.pi),
    }
