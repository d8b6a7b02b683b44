"""Problem data model: triangular coefficient families, special cases, JSON I/O.

A problem instance carries one copy of every system/weight block for each
pair of indices (t, k) with 0 <= t <= k <= N-1: the data genuinely depend on
the time the problem is (re)started at, which is the whole point of the
model.  Storage is a plain dict keyed by (t, k).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ProblemFormatError

# family name -> (shape kind, symmetric?)
MATRIX_FAMILIES = {
    "A": ("nn", False),
    "Abar": ("nn", False),
    "B": ("nm", False),
    "Bbar": ("nm", False),
    "C": ("nn", False),
    "Cbar": ("nn", False),
    "D": ("nm", False),
    "Dbar": ("nm", False),
    "Q": ("nn", True),
    "Qbar": ("nn", True),
    "R": ("mm", True),
    "Rbar": ("mm", True),
}
VECTOR_FAMILIES = {"f": "n", "d": "n", "q": "n", "rho": "m"}
FAMILY_NAMES = tuple(MATRIX_FAMILIES) + tuple(VECTOR_FAMILIES)

# symmetry defects below SYM_OK are ignored; up to SYM_WARN they are fixed
# with a warning; beyond that the block is rejected.
SYM_OK = 1e-12
SYM_WARN_REL = 1e-2


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" | "warning"
    path: str
    message: str


@dataclass
class ProblemData:
    """All coefficients of one control problem instance.

    Matrix families are dicts keyed by (t, k) over the triangular index set
    {0 <= t <= k <= N-1}; terminal weights are lists indexed by t.
    """

    n: int
    m: int
    N: int
    A: dict = field(default_factory=dict)
    Abar: dict = field(default_factory=dict)
    B: dict = field(default_factory=dict)
    Bbar: dict = field(default_factory=dict)
    C: dict = field(default_factory=dict)
    Cbar: dict = field(default_factory=dict)
    D: dict = field(default_factory=dict)
    Dbar: dict = field(default_factory=dict)
    Q: dict = field(default_factory=dict)
    Qbar: dict = field(default_factory=dict)
    R: dict = field(default_factory=dict)
    Rbar: dict = field(default_factory=dict)
    f: dict = field(default_factory=dict)
    d: dict = field(default_factory=dict)
    q: dict = field(default_factory=dict)
    rho: dict = field(default_factory=dict)
    G: list = field(default_factory=list)
    Gbar: list = field(default_factory=list)
    g: list = field(default_factory=list)

    def pairs(self):
        """All valid (t, k) index pairs, t <= k <= N-1."""
        return ((t, k) for t in range(self.N) for k in range(t, self.N))

    @property
    def cal(self) -> "CalligraphicView":
        return CalligraphicView(self)

    def shape_of(self, name: str) -> tuple:
        if name in MATRIX_FAMILIES:
            kind = MATRIX_FAMILIES[name][0]
            return {"nn": (self.n, self.n), "nm": (self.n, self.m), "mm": (self.m, self.m)}[kind]
        dim = self.n if VECTOR_FAMILIES[name] == "n" else self.m
        return (dim,)

    def copy(self) -> "ProblemData":
        out = ProblemData(self.n, self.m, self.N)
        for name in FAMILY_NAMES:
            setattr(out, name, {tk: v.copy() for tk, v in getattr(self, name).items()})
        out.G = [v.copy() for v in self.G]
        out.Gbar = [v.copy() for v in self.Gbar]
        out.g = [v.copy() for v in self.g]
        return out


class CalligraphicView:
    """Read-only sums of paired blocks: script-A = A + Abar and friends."""

    def __init__(self, p: ProblemData):
        self._p = p

    def A(self, t, k):
        return self._p.A[t, k] + self._p.Abar[t, k]

    def B(self, t, k):
        return self._p.B[t, k] + self._p.Bbar[t, k]

    def C(self, t, k):
        return self._p.C[t, k] + self._p.Cbar[t, k]

    def D(self, t, k):
        return self._p.D[t, k] + self._p.Dbar[t, k]

    def Q(self, t, k):
        return self._p.Q[t, k] + self._p.Qbar[t, k]

    def R(self, t, k):
        return self._p.R[t, k] + self._p.Rbar[t, k]

    def G(self, t):
        return self._p.G[t] + self._p.Gbar[t]


@dataclass(frozen=True)
class InitialPair:
    """Start time plus start state.

    ``x`` is a deterministic n-vector (mandatory at t = 0, where the
    information set is trivial) or, for t > 0, an array of shape (2**t, n)
    holding one vector per scenario-tree node at level t.
    """

    t: int
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))

    def node_values(self, n: int) -> np.ndarray:
        """The state as a (2**t, n) node family."""
        if self.x.ndim == 1:
            if self.x.shape != (n,):
                raise DimensionMismatch(f"initial state has dim {self.x.shape}, expected ({n},)")
            return np.tile(self.x, (2**self.t, 1))
        if self.x.shape != (2**self.t, n):
            raise DimensionMismatch(
                f"initial node family has shape {self.x.shape}, expected {(2**self.t, n)}"
            )
        return self.x.copy()


def validate(p: ProblemData) -> list[Finding]:
    """Check invariants, auto-symmetrising weight blocks with small defects.

    Returns the empty list iff the instance is sound.  Symmetry defects up
    to 1e-2 relative are repaired in place and reported as warnings (a
    hand-typed weight matrix is rarely bit-symmetric); anything larger, plus
    missing blocks, bad shapes or non-finite entries, is an error.
    """
    findings: list[Finding] = []
    if p.n < 1 or p.m < 1 or p.N < 1:
        findings.append(Finding("error", "dims", f"bad dimensions n={p.n} m={p.m} N={p.N}"))
        return findings

    def check_block(name, key, value, shape, symmetric, path):
        if value is None:
            findings.append(Finding("error", path, "missing block"))
            return
        a = np.asarray(value, dtype=float)
        if a.shape != shape:
            findings.append(Finding("error", path, f"shape {a.shape}, expected {shape}"))
            return
        if a.size and not np.all(np.isfinite(a)):
            findings.append(Finding("error", path, "non-finite entries"))
            return
        if symmetric:
            defect = float(np.max(np.abs(a - a.T))) if a.size else 0.0
            if defect > SYM_WARN_REL * (1.0 + float(np.max(np.abs(a)))):
                findings.append(Finding("error", path, f"asymmetric (defect {defect:.3g})"))
                return
            if defect > 0.0:
                getattr(p, name)[key] = 0.5 * (a + a.T)
                if defect > SYM_OK:
                    findings.append(
                        Finding("warning", path, f"symmetrised (defect {defect:.3g})")
                    )

    for name in FAMILY_NAMES:
        fam = getattr(p, name)
        shape = p.shape_of(name)
        symmetric = name in MATRIX_FAMILIES and MATRIX_FAMILIES[name][1]
        for t, k in p.pairs():
            check_block(name, (t, k), fam.get((t, k)), shape, symmetric, f"{name}[{t}][{k}]")
        extra = [tk for tk in fam if tk[1] < tk[0] or tk[1] >= p.N or tk[0] < 0]
        for tk in extra:
            findings.append(Finding("error", f"{name}[{tk[0]}][{tk[1]}]", "index out of range"))

    for name, lst, shape, symmetric in (
        ("G", p.G, (p.n, p.n), True),
        ("Gbar", p.Gbar, (p.n, p.n), True),
        ("g", p.g, (p.n,), False),
    ):
        if len(lst) != p.N:
            findings.append(Finding("error", name, f"{len(lst)} blocks, expected {p.N}"))
            continue
        for t in range(p.N):
            a = np.asarray(lst[t], dtype=float)
            if a.shape != shape:
                findings.append(Finding("error", f"{name}[{t}]", f"shape {a.shape}, expected {shape}"))
                continue
            if a.size and not np.all(np.isfinite(a)):
                findings.append(Finding("error", f"{name}[{t}]", "non-finite entries"))
                continue
            if symmetric:
                defect = float(np.max(np.abs(a - a.T)))
                if defect > SYM_WARN_REL * (1.0 + float(np.max(np.abs(a)))):
                    findings.append(Finding("error", f"{name}[{t}]", f"asymmetric (defect {defect:.3g})"))
                elif defect > 0.0:
                    lst[t] = 0.5 * (a + a.T)
                    if defect > SYM_OK:
                        findings.append(
                            Finding("warning", f"{name}[{t}]", f"symmetrised (defect {defect:.3g})")
                        )
    return findings


def _per_k(datum, N, shape, name):
    """Accept a single block (broadcast over k) or a length-N sequence."""
    a = np.asarray(datum, dtype=float)
    if a.shape == shape:
        return [a.copy() for _ in range(N)]
    if a.shape == (N, *shape):
        return [a[k].copy() for k in range(N)]
    if isinstance(datum, (list, tuple)) and len(datum) == N:
        out = []
        for k in range(N):
            b = np.asarray(datum[k], dtype=float)
            if b.shape != shape:
                raise DimensionMismatch(f"{name}[{k}] has shape {b.shape}, expected {shape}")
            out.append(b)
        return out
    raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape} or {N} of them")


def from_time_invariant(n, m, N, *, A, Abar, B, Bbar, C, Cbar, D, Dbar,
                        f, d, Q, Qbar, R, Rbar, q, rho, G, Gbar, g) -> ProblemData:
    """Build an instance whose data do not depend on the start time.

    Each datum is either one block (constant in k) or a length-N sequence
    indexed by k; either way the block for step k is shared by every start
    time t <= k, and the terminal weights are identical for all t.
    """
    p = ProblemData(n, m, N)
    per_k = {}
    for name, datum in (("A", A), ("Abar", Abar), ("B", B), ("Bbar", Bbar),
                        ("C", C), ("Cbar", Cbar), ("D", D), ("Dbar", Dbar),
                        ("Q", Q), ("Qbar", Qbar), ("R", R), ("Rbar", Rbar),
                        ("f", f), ("d", d), ("q", q), ("rho", rho)):
        per_k[name] = _per_k(datum, N, p.shape_of(name), name)
    for name, blocks in per_k.items():
        fam = getattr(p, name)
        for t, k in p.pairs():
            fam[t, k] = blocks[k].copy()
    G0 = np.asarray(G, dtype=float)
    Gb0 = np.asarray(Gbar, dtype=float)
    g0 = np.asarray(g, dtype=float)
    if G0.shape != (n, n) or Gb0.shape != (n, n) or g0.shape != (n,):
        raise DimensionMismatch("terminal blocks must be a single n x n / n-vector set")
    p.G = [G0.copy() for _ in range(N)]
    p.Gbar = [Gb0.copy() for _ in range(N)]
    p.g = [g0.copy() for _ in range(N)]
    return p


def from_no_meanfield(n, m, N, *, A, B, C, D, f, d, Q, R, q, rho, G, g) -> ProblemData:
    """Build an instance with every barred block set to zero.

    Non-barred families are dicts keyed by (t, k) (triangular), or a single
    block to broadcast everywhere; G and g are per-t lists or single blocks.
    """
    p = ProblemData(n, m, N)

    def fill(name, datum):
        fam = getattr(p, name)
        shape = p.shape_of(name)
        if isinstance(datum, dict):
            for t, k in p.pairs():
                if (t, k) not in datum:
                    raise DimensionMismatch(f"{name} missing block ({t},{k})")
                a = np.asarray(datum[t, k], dtype=float)
                if a.shape != shape:
                    raise DimensionMismatch(f"{name}[{t}][{k}] has shape {a.shape}")
                fam[t, k] = a.copy()
        else:
            a = np.asarray(datum, dtype=float)
            if a.shape != shape:
                raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
            for t, k in p.pairs():
                fam[t, k] = a.copy()

    for name, datum in (("A", A), ("B", B), ("C", C), ("D", D),
                        ("Q", Q), ("R", R), ("f", f), ("d", d),
                        ("q", q), ("rho", rho)):
        fill(name, datum)
    for name in ("Abar", "Bbar", "Cbar", "Dbar", "Qbar", "Rbar"):
        shape = p.shape_of(name)
        for t, k in p.pairs():
            getattr(p, name)[t, k] = np.zeros(shape)

    def terminal(datum, shape, name):
        if isinstance(datum, (list, tuple)) and len(datum) == N and np.asarray(datum[0]).shape == shape:
            return [np.asarray(b, dtype=float).copy() for b in datum]
        a = np.asarray(datum, dtype=float)
        if a.shape != shape:
            raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
        return [a.copy() for _ in range(N)]

    p.G = terminal(G, (n, n), "G")
    p.Gbar = [np.zeros((n, n)) for _ in range(N)]
    p.g = terminal(g, (n,), "g")
    return p


def bundled_example() -> ProblemData:
    """The bundled 2-state/2-control, two-step reference instance."""
    p = ProblemData(2, 2, 2)
    M = np.array
    p.A[0, 0] = M([[3.3, 0.41], [-1.3, 1.9]])
    p.A[0, 1] = M([[5.12, -0.35], [1.31, 2.03]])
    p.A[1, 1] = M([[8.5, 3.03], [-2.23, 7.2]])
    p.Abar[0, 0] = M([[3.34, -1.01], [1.43, 2.03]])
    p.Abar[0, 1] = M([[3.45, -0.3], [1.2, 4.0]])
    p.Abar[1, 1] = M([[5.67, 1.93], [-1.16, 6.54]])
    p.B[0, 0] = M([[3.5, 1.6], [-0.2, 3.0]])
    p.B[0, 1] = M([[4.45, 2.36], [-1.2, 5.0]])
    p.B[1, 1] = M([[7.35, -2.35], [-3.38, 6.32]])
    p.Bbar[0, 0] = M([[3.2, 0.32], [1.5, 3.0]])
    p.Bbar[0, 1] = M([[3.65, -0.3], [-0.42, 5.6]])
    p.Bbar[1, 1] = M([[5.67, 1.93], [-1.16, 6.54]])
    p.C[0, 0] = M([[5.6, 1.0], [0.73, 7.8]])
    p.C[0, 1] = M([[5.0, 0.73], [-0.47, 5.2]])
    p.C[1, 1] = M([[2.5, 3.03], [-4.23, 6.2]])
    p.Cbar[0, 0] = M([[5.6, 1.0], [0.73, 7.8]])
    p.Cbar[0, 1] = M([[5.0, 0.73], [-0.47, 5.2]])
    p.Cbar[1, 1] = M([[10.17, 5.93], [-6.16, 7.54]])
    p.D[0, 0] = M([[6.0, 1.63], [-1.37, 7.0]])
    p.D[0, 1] = M([[4.0, 0.93], [1.07, 3.0]])
    p.D[1, 1] = M([[8.56, -4.75], [-2.8, 7.0]])
    p.Dbar[0, 0] = M([[4.6, 0.63], [-1.57, 6.4]])
    p.Dbar[0, 1] = M([[4.4, 1.93], [2.34, 5.63]])
    p.Dbar[1, 1] = M([[-8.72, 2.43], [1.16, -6.54]])
    p.Q[0, 0] = M([[-1.0, 0.8], [0.8, -1.6]])
    p.Q[0, 1] = M([[4.0, 0.0], [0.0, 0.0]])
    p.Q[1, 1] = M([[2.0, 0.1], [0.1, 5.0]])
    p.Qbar[0, 0] = M([[-0.5, -0.1], [-0.1, 1.0]])
    p.Qbar[0, 1] = M([[-2.0, 0.0], [0.0, -3.0]])
    p.Qbar[1, 1] = M([[-1.0, 0.1], [0.1, -3.0]])
    p.R[0, 0] = M([[-0.5, 0.0], [0.0, 1.0]])
    p.R[0, 1] = M([[1.0, 0.0], [0.0, -2.0]])
    p.R[1, 1] = M([[4.0, -0.3], [-0.3, -2.0]])
    p.Rbar[0, 0] = M([[0.0, 0.0], [0.0, 0.0]])
    p.Rbar[0, 1] = M([[-2.0, 0.0], [0.0, 2.0]])
    p.Rbar[1, 1] = M([[-7.0, -1.3], [-1.3, -4.0]])
    p.f[0, 0] = M([-0.5, -1.0])
    p.f[0, 1] = M([-1.34, 2.5])
    p.f[1, 1] = M([1.0, 2.0])
    p.d[0, 0] = M([1.32, 2.79])
    p.d[0, 1] = M([-0.35, 8.9])
    p.d[1, 1] = M([0.0, 1.0])
    p.q[0, 0] = M([-0.85, -1.8])
    p.q[0, 1] = M([2.0, 7.0])
    p.q[1, 1] = M([6.0, 8.0])
    p.rho[0, 0] = M([3.2, 2.1])
    p.rho[0, 1] = M([1.42, 2.71])
    p.rho[1, 1] = M([6.2, -5.7])
    p.G = [M([[1.0, 0.0], [0.0, 2.0]]), M([[2.0, -0.3], [-0.3, 3.0]])]
    p.Gbar = [M([[2.0, 0.0], [0.0, 3.0]]), M([[-0.5, -0.2], [-0.2, 1.0]])]
    p.g = [M([5.6, 7.8]), M([-9.0, 8.7])]
    return p


# ---------------------------------------------------------------------------
# JSON serialisation.  The writer is canonical: keys sorted, floats printed
# with 17 significant digits, so serialise -> parse -> serialise is
# byte-identical.

def canonical_dumps(obj) -> str:
    """Deterministic JSON text for nested dict/list/number/str/bool/None."""
    parts: list[str] = []
    _dump(obj, parts)
    return "".join(parts)


def _dump(obj, parts):
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            raise ProblemFormatError("cannot serialise non-finite float")
        parts.append(format(v, ".17g"))
    elif isinstance(obj, np.ndarray):
        _dump(obj.tolist(), parts)
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(obj):
            if i:
                parts.append(",")
            _dump(item, parts)
        parts.append("]")
    elif isinstance(obj, dict):
        parts.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(key)))
            parts.append(":")
            _dump(obj[key], parts)
        parts.append("}")
    else:
        raise ProblemFormatError(f"cannot serialise {type(obj).__name__}")


def to_json(p: ProblemData) -> str:
    """Serialise a problem instance to canonical JSON text."""
    data = {}
    for name in FAMILY_NAMES:
        fam = getattr(p, name)
        data[name] = {f"{t},{k}": fam[t, k].tolist() for (t, k) in fam}
    doc = {
        "n": p.n,
        "m": p.m,
        "N": p.N,
        "data": data,
        "terminal": {
            "G": [b.tolist() for b in p.G],
            "Gbar": [b.tolist() for b in p.Gbar],
            "g": [b.tolist() for b in p.g],
        },
    }
    return canonical_dumps(doc)


def from_json(text: str) -> tuple[ProblemData, list[Finding]]:
    """Parse and validate a problem file; raises ProblemFormatError on errors."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"not valid JSON: {exc}") from exc
    for key in ("n", "m", "N", "data", "terminal"):
        if key not in doc:
            raise ProblemFormatError(f"missing top-level key {key!r}")
    try:
        p = ProblemData(int(doc["n"]), int(doc["m"]), int(doc["N"]))
    except (TypeError, ValueError) as exc:
        raise ProblemFormatError(f"bad dimensions: {exc}") from exc
    data = doc["data"]
    if not isinstance(data, dict):
        raise ProblemFormatError("'data' must be an object")
    for name in FAMILY_NAMES:
        if name not in data:
            raise ProblemFormatError(f"missing family {name!r}")
        fam = getattr(p, name)
        entry = data[name]
        if isinstance(entry, dict):
            for key, block in entry.items():
                try:
                    t_s, k_s = key.split(",")
                    t, k = int(t_s), int(k_s)
                except ValueError as exc:
                    raise ProblemFormatError(f"{name}: bad index key {key!r}") from exc
                fam[t, k] = np.asarray(block, dtype=float)
        elif isinstance(entry, list):
            # dense layout: entry[t][k], null below the diagonal
            for t, row in enumerate(entry):
                for k, block in enumerate(row):
                    if block is not None:
                        fam[t, k] = np.asarray(block, dtype=float)
        else:
            raise ProblemFormatError(f"{name}: expected object or list")
    term = doc["terminal"]
    for key in ("G", "Gbar", "g"):
        if key not in term:
            raise ProblemFormatError(f"missing terminal key {key!r}")
    p.G = [np.asarray(b, dtype=float) for b in term["G"]]
    p.Gbar = [np.asarray(b, dtype=float) for b in term["Gbar"]]
    p.g = [np.asarray(b, dtype=float) for b in term["g"]]
    findings = validate(p)
    errors = [f for f in findings if f.severity == "error"]
    if errors:
        raise ProblemFormatError(
            "; ".join(f"{f.path}: {f.message}" for f in errors[:8])
        )
    return p, findings


def save(p: ProblemData, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_json(p))
        fh.write("\n")


def load(path) -> tuple[ProblemData, list[Finding]]:
    with open(path, encoding="utf-8") as fh:
        return from_json(fh.read())
