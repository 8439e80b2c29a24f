"""Reverse-mode automatic differentiation on a recorded operation tape.

A scalar objective is traced once into a fixed topological list of
elementary operations.  Re-evaluating the tape at new inputs never changes
its topology, so gradients (one reverse sweep), sparse Hessians
(forward-over-reverse, grouped by a column coloring) and the third-order
directional contractions needed by the Laplace outer gradient all run on
the same compiled structure.

Recording happens through operator overloading on :class:`Var`; taped
functions may branch on data but never on parameter values (comparisons
of ``Var`` raise :class:`RecordingError`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

__all__ = [
    "RecordingError",
    "NonFiniteValueError",
    "PatternMismatchError",
    "Var",
    "TapeBuilder",
    "Tape",
    "SparsityPattern",
    "record",
    "detect_sparsity",
    "hessian_sparse",
    "color_pattern",
    "exp",
    "log",
    "sqrt",
    "logistic",
    "softplus",
    "lgamma",
    "log_bessel_k",
    "square",
    "tsum",
]

# Op codes.  CONST/INPUT nodes are prefilled before a sweep; the rest are
# compute nodes grouped into vectorizable segments.
CONST = 0
INPUT = 1
ADD = 2
SUB = 3
MUL = 4
DIV = 5
NEG = 6
EXP = 7
LOG = 8
SQRT = 9
POWC = 10  # aux = constant exponent
LOGISTIC = 11
SOFTPLUS = 12
LGAMMA = 13
LOGBESSELK = 14  # aux = order nu (data, not a parameter)

_BINARY = frozenset((ADD, SUB, MUL, DIV))

OP_NAMES = {
    CONST: "const", INPUT: "input", ADD: "add", SUB: "sub", MUL: "mul",
    DIV: "div", NEG: "neg", EXP: "exp", LOG: "log", SQRT: "sqrt",
    POWC: "pow", LOGISTIC: "logistic", SOFTPLUS: "softplus",
    LGAMMA: "lgamma", LOGBESSELK: "log_bessel_k",
}


class RecordingError(Exception):
    """An unsupported operation was attempted while recording a tape."""


class NonFiniteValueError(ArithmeticError):
    """A tape sweep produced a non-finite intermediate value."""

    def __init__(self, node: int, op: int):
        self.node = int(node)
        self.op_name = OP_NAMES.get(op, str(op))
        super().__init__(f"non-finite value at tape node {node} (op {self.op_name})")


class PatternMismatchError(ValueError):
    """A Hessian probe excited an entry outside the supplied pattern."""


class Var:
    """Handle to one tape node, supporting arithmetic overloads."""

    __slots__ = ("tb", "i")

    def __init__(self, tb: "TapeBuilder", i: int):
        self.tb = tb
        self.i = i

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tb is not self.tb:
                raise RecordingError("mixing variables from different tapes")
            return other.i
        if isinstance(other, (int, float, np.integer, np.floating)):
            return self.tb.const(float(other)).i
        raise RecordingError(f"cannot record operand of type {type(other).__name__}")

    def __add__(self, other):
        return self.tb._push(ADD, self.i, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tb._push(SUB, self.i, self._lift(other))

    def __rsub__(self, other):
        return self.tb._push(SUB, self._lift(other), self.i)

    def __mul__(self, other):
        return self.tb._push(MUL, self.i, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tb._push(DIV, self.i, self._lift(other))

    def __rtruediv__(self, other):
        return self.tb._push(DIV, self._lift(other), self.i)

    def __neg__(self):
        return self.tb._push(NEG, self.i)

    def __pow__(self, p):
        if not isinstance(p, (int, float, np.integer, np.floating)):
            raise RecordingError("exponent must be a data constant; use exp(p*log(x)) otherwise")
        return self.tb._push(POWC, self.i, aux=float(p))

    def _no_branch(self, *_):
        raise RecordingError(
            "branching on a taped parameter value is not supported; "
            "branch only on data known at recording time"
        )

    __lt__ = __le__ = __gt__ = __ge__ = _no_branch

    def __bool__(self):
        raise RecordingError("a taped value has no truth value; branch only on data")


class TapeBuilder:
    """Accumulates nodes during recording; ``finish`` compiles a Tape."""

    def __init__(self, n_inputs: int):
        self.op: list[int] = []
        self.a: list[int] = []
        self.b: list[int] = []
        self.aux: list[float] = []
        self.val: list[float] = []
        self.n_inputs = n_inputs
        self._const_cache: dict[float, int] = {}
        for _ in range(n_inputs):
            self.op.append(INPUT)
            self.a.append(-1)
            self.b.append(-1)
            self.aux.append(0.0)
            self.val.append(0.0)

    def inputs(self) -> list[Var]:
        return [Var(self, i) for i in range(self.n_inputs)]

    def set_input_values(self, x0) -> None:
        x0 = np.asarray(x0, dtype=float)
        for i in range(self.n_inputs):
            self.val[i] = float(x0[i])

    def const(self, c: float) -> Var:
        c = float(c)
        idx = self._const_cache.get(c)
        if idx is None:
            idx = len(self.op)
            self.op.append(CONST)
            self.a.append(-1)
            self.b.append(-1)
            self.aux.append(0.0)
            self.val.append(c)
            self._const_cache[c] = idx
        return Var(self, idx)

    def _push(self, op: int, a: int, b: int = -1, aux: float = 0.0) -> Var:
        va = self.val[a]
        vb = self.val[b] if b >= 0 else 0.0
        with np.errstate(all="ignore"):
            v = _eval_scalar(op, va, vb, aux)
        idx = len(self.op)
        self.op.append(op)
        self.a.append(a)
        self.b.append(b)
        self.aux.append(aux)
        self.val.append(float(v))
        return Var(self, idx)

    def unary(self, op: int, v: Var, aux: float = 0.0) -> Var:
        return self._push(op, v.i, aux=aux)

    def finish(self, output: Var) -> "Tape":
        if not isinstance(output, Var):
            raise RecordingError("objective must return a taped Var")
        return Tape(self, output.i)


def _eval_scalar(op, va, vb, aux):
    if op == ADD:
        return va + vb
    if op == SUB:
        return va - vb
    if op == MUL:
        return va * vb
    if op == DIV:
        return va / vb
    if op == NEG:
        return -va
    if op == EXP:
        return np.exp(va)
    if op == LOG:
        return np.log(va)
    if op == SQRT:
        return np.sqrt(va)
    if op == POWC:
        return va ** aux
    if op == LOGISTIC:
        return _logistic_np(va)
    if op == SOFTPLUS:
        return _softplus_np(va)
    if op == LGAMMA:
        return _sp.gammaln(va)
    if op == LOGBESSELK:
        return _log_kv_np(aux, va)
    raise RecordingError(f"unsupported op code {op}")


def _logistic_np(x):
    return 0.5 * (np.tanh(np.asarray(x, dtype=float) * 0.5) + 1.0)


def _softplus_np(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _log_kv_np(nu, x):
    # kve = exp(x) * kv avoids underflow of kv at large x
    return np.log(_sp.kve(nu, x)) - x


def _kv_log_derivs(nu, x):
    """First three derivatives of x -> log K_nu(x).

    Uses K_nu^{(n)} = (-1/2)^n sum_k C(n,k) K_{nu-n+2k} on scaled Bessel
    values so the ratios stay finite for large x.
    """
    x = np.asarray(x, dtype=float)
    kv = {m: _sp.kve(nu + m, x) for m in range(-3, 4)}
    k0 = kv[0]
    d1 = -0.5 * (kv[-1] + kv[1])
    d2 = 0.25 * (kv[-2] + 2.0 * kv[0] + kv[2])
    d3 = -0.125 * (kv[-3] + 3.0 * kv[-1] + 3.0 * kv[1] + kv[3])
    r1 = d1 / k0
    r2 = d2 / k0
    r3 = d3 / k0
    g1 = r1
    g2 = r2 - r1 * r1
    g3 = r3 - 3.0 * r2 * r1 + 2.0 * r1 ** 3
    return g1, g2, g3


def _unary_derivs(op, v, aux):
    """(f', f'', f''') of a unary op at value v."""
    if op == NEG:
        one = -np.ones_like(v)
        zero = np.zeros_like(v)
        return one, zero, zero
    if op == EXP:
        e = np.exp(v)
        return e, e, e
    if op == LOG:
        inv = 1.0 / v
        return inv, -inv * inv, 2.0 * inv ** 3
    if op == SQRT:
        s = np.sqrt(v)
        d1 = 0.5 / s
        return d1, -0.25 / (s * v), 0.375 / (s * v * v)
    if op == POWC:
        # Guard 0 * v**negative -> nan when the derivative is identically 0.
        c = np.asarray(aux, dtype=float)
        k1, k2, k3 = c, c * (c - 1.0), c * (c - 1.0) * (c - 2.0)
        with np.errstate(all="ignore"):
            d1 = np.where(k1 == 0.0, 0.0, k1 * v ** (c - 1.0))
            d2 = np.where(k2 == 0.0, 0.0, k2 * v ** (c - 2.0))
            d3 = np.where(k3 == 0.0, 0.0, k3 * v ** (c - 3.0))
        return d1, d2, d3
    if op == LOGISTIC:
        s = _logistic_np(v)
        d1 = s * (1.0 - s)
        d2 = d1 * (1.0 - 2.0 * s)
        d3 = d2 * (1.0 - 2.0 * s) - 2.0 * d1 * d1
        return d1, d2, d3
    if op == SOFTPLUS:
        s = _logistic_np(v)
        d2 = s * (1.0 - s)
        d3 = d2 * (1.0 - 2.0 * s)
        return s, d2, d3
    if op == LGAMMA:
        return _sp.psi(v), _sp.polygamma(1, v), _sp.polygamma(2, v)
    if op == LOGBESSELK:
        return _kv_log_derivs(aux, v)
    raise AssertionError(f"not a unary op: {op}")


class _Scatter:
    """Precompiled adjoint scatter for one operand column of a segment.

    Skips constant operands (their adjoints are never read) and uses the
    fast fancy-index add when the remaining target indices are unique.
    """

    __slots__ = ("sel", "idx", "unique")

    def __init__(self, operand_idx: np.ndarray, is_const: np.ndarray):
        keep = ~is_const[operand_idx]
        self.sel = None if keep.all() else np.flatnonzero(keep)
        self.idx = operand_idx[keep] if self.sel is not None else operand_idx
        self.unique = np.unique(self.idx).size == self.idx.size

    def add1(self, dest: np.ndarray, w: np.ndarray) -> None:
        w = w if self.sel is None else w[self.sel]
        if self.unique:
            dest[self.idx] += w
        else:
            np.add.at(dest, self.idx, w)

    def add2(self, dest: np.ndarray, w: np.ndarray) -> None:
        w = w if self.sel is None else w[self.sel]
        if self.unique:
            dest[self.idx] += w
        else:
            np.add.at(dest, self.idx, w)


@dataclass
class _Segment:
    op: int
    start: int
    stop: int
    a: np.ndarray
    b: np.ndarray | None
    aux: np.ndarray | None
    sca: _Scatter | None = None
    scb: _Scatter | None = None


class Tape:
    """Compiled computation tape for a scalar objective.

    Immutable and shareable across threads; every sweep allocates its own
    workspace.
    """

    def __init__(self, tb: TapeBuilder, out: int):
        self.n_inputs = tb.n_inputs
        self.n_nodes = len(tb.op)
        self.out = out
        self.op = np.asarray(tb.op, dtype=np.int8)
        self.arg_a = np.asarray(tb.a, dtype=np.int64)
        self.arg_b = np.asarray(tb.b, dtype=np.int64)
        self.aux = np.asarray(tb.aux, dtype=np.float64)
        self._is_const = self.op == CONST
        self._template = np.where(self._is_const, np.asarray(tb.val), 0.0)
        self.x0 = np.asarray(tb.val[: self.n_inputs], dtype=float)
        self._segments = self._compile_segments()
        # Recorded primal values come from the compiled path itself so that
        # replay at x0 is bitwise identical.
        self.recorded_vals = self._forward(self.x0, check=False)
        builder_vals = np.asarray(tb.val, dtype=float)
        ok = np.isclose(self.recorded_vals, builder_vals, rtol=1e-10, atol=1e-10)
        ok |= ~np.isfinite(builder_vals)
        if not ok.all():
            bad = int(np.argmin(ok))
            raise RecordingError(
                f"tape replay diverged from recording at node {bad} "
                f"({OP_NAMES[int(self.op[bad])]})"
            )

    # -- compilation -------------------------------------------------------

    def _compile_segments(self) -> list[_Segment]:
        segs: list[_Segment] = []
        op, a, b = self.op, self.arg_a, self.arg_b
        i = 0
        n = self.n_nodes
        prefilled = self._is_const | (self.op == INPUT)

        while i < n:
            if prefilled[i]:
                i += 1
                continue
            start = i
            cur = op[i]
            j = i + 1
            while j < n and op[j] == cur and not prefilled[j]:
                if not (prefilled[a[j]] or a[j] < start):
                    break
                if b[j] >= 0 and not (prefilled[b[j]] or b[j] < start):
                    break
                j += 1
            aa = a[start:j].copy()
            bb = b[start:j].copy() if cur in _BINARY else None
            aux = self.aux[start:j].copy() if cur in (POWC, LOGBESSELK) else None
            seg = _Segment(int(cur), start, j, aa, bb, aux)
            seg.sca = _Scatter(aa, self._is_const)
            if bb is not None:
                seg.scb = _Scatter(bb, self._is_const)
            segs.append(seg)
            i = j
        return segs

    # -- sweeps ------------------------------------------------------------

    def _forward(self, x, check=True):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_inputs,):
            raise ValueError(f"expected input of shape ({self.n_inputs},), got {x.shape}")
        vals = self._template.copy()
        vals[: self.n_inputs] = x
        for s in self._segments:
            va = vals[s.a]
            with np.errstate(all="ignore"):
                if s.op == ADD:
                    r = va + vals[s.b]
                elif s.op == SUB:
                    r = va - vals[s.b]
                elif s.op == MUL:
                    r = va * vals[s.b]
                elif s.op == DIV:
                    r = va / vals[s.b]
                elif s.op == NEG:
                    r = -va
                elif s.op == EXP:
                    r = np.exp(va)
                elif s.op == LOG:
                    r = np.log(va)
                elif s.op == SQRT:
                    r = np.sqrt(va)
                elif s.op == POWC:
                    r = va ** s.aux
                elif s.op == LOGISTIC:
                    r = _logistic_np(va)
                elif s.op == SOFTPLUS:
                    r = _softplus_np(va)
                elif s.op == LGAMMA:
                    r = _sp.gammaln(va)
                elif s.op == LOGBESSELK:
                    r = _log_kv_np(s.aux, va)
                else:  # pragma: no cover
                    raise AssertionError(s.op)
            if check and not np.all(np.isfinite(r)):
                bad = s.start + int(np.argmin(np.isfinite(r)))
                raise NonFiniteValueError(bad, s.op)
            vals[s.start: s.stop] = r
        return vals

    def value(self, x) -> float:
        return float(self._forward(x)[self.out])

    def value_and_grad(self, x):
        vals = self._forward(x)
        adj = self._reverse(vals)
        return float(vals[self.out]), adj[: self.n_inputs].copy()

    def gradient(self, x):
        return self.value_and_grad(x)[1]

    def _reverse(self, vals):
        n = self.n_nodes
        adj = np.zeros(n)
        adj[self.out] = 1.0
        for s in reversed(self._segments):
            w = adj[s.start: s.stop]
            if not w.any():
                continue
            va = vals[s.a]
            if s.op in _BINARY:
                vb = vals[s.b]
                if s.op == ADD:
                    s.sca.add1(adj, w)
                    s.scb.add1(adj, w)
                elif s.op == SUB:
                    s.sca.add1(adj, w)
                    s.scb.add1(adj, -w)
                elif s.op == MUL:
                    s.sca.add1(adj, vb * w)
                    s.scb.add1(adj, va * w)
                else:  # DIV
                    ib = 1.0 / vb
                    s.sca.add1(adj, ib * w)
                    s.scb.add1(adj, -va * ib * ib * w)
            else:
                d1, _, _ = _unary_derivs(s.op, va, s.aux)
                s.sca.add1(adj, d1 * w)
        g = adj[: self.n_inputs]
        if not np.all(np.isfinite(g)):
            bad = int(np.argmin(np.isfinite(adj)))
            raise NonFiniteValueError(bad, int(self.op[bad]))
        return adj

    def hvp(self, x, tangents):
        """Hessian-tangent products H @ T for T of shape (n_inputs, C).

        One forward tangent sweep plus one tangent-carrying reverse sweep
        (forward-over-reverse).  Returns (n_inputs, C).
        """
        T = np.asarray(tangents, dtype=float)
        squeeze = T.ndim == 1
        if squeeze:
            T = T[:, None]
        vals = self._forward(x)
        dvals = self._forward_tangent(vals, T)
        gdot = self._reverse_tangent(vals, dvals)
        return gdot[:, 0] if squeeze else gdot

    def _forward_tangent(self, vals, T):
        n, C = self.n_nodes, T.shape[1]
        dv = np.zeros((n, C))
        dv[: self.n_inputs] = T
        for s in self._segments:
            va = vals[s.a]
            if s.op == ADD:
                r = dv[s.a] + dv[s.b]
            elif s.op == SUB:
                r = dv[s.a] - dv[s.b]
            elif s.op == MUL:
                r = vals[s.b][:, None] * dv[s.a] + va[:, None] * dv[s.b]
            elif s.op == DIV:
                ib = 1.0 / vals[s.b]
                r = ib[:, None] * dv[s.a] - (va * ib * ib)[:, None] * dv[s.b]
            else:
                d1, _, _ = _unary_derivs(s.op, va, s.aux)
                r = d1[:, None] * dv[s.a]
            dv[s.start: s.stop] = r
        return dv

    def _reverse_tangent(self, vals, dvals):
        """Tangent-of-adjoint sweep; returns grad_dot = H @ T."""
        n = self.n_nodes
        C = dvals.shape[1]
        adj = np.zeros(n)
        adjd = np.zeros((n, C))
        adj[self.out] = 1.0
        for s in reversed(self._segments):
            w = adj[s.start: s.stop]
            wd = adjd[s.start: s.stop]
            va = vals[s.a]
            da = dvals[s.a]
            if s.op in _BINARY:
                vb = vals[s.b]
                db = dvals[s.b]
                if s.op == ADD:
                    s.sca.add1(adj, w)
                    s.scb.add1(adj, w)
                    s.sca.add2(adjd, wd)
                    s.scb.add2(adjd, wd)
                    continue
                if s.op == SUB:
                    s.sca.add1(adj, w)
                    s.scb.add1(adj, -w)
                    s.sca.add2(adjd, wd)
                    s.scb.add2(adjd, -wd)
                    continue
                if s.op == MUL:
                    pa, pb = vb, va
                    dpa, dpb = db, da
                else:  # DIV
                    ib = 1.0 / vb
                    ib2 = ib * ib
                    pa = ib
                    pb = -va * ib2
                    dpa = -ib2[:, None] * db
                    dpb = -da * ib2[:, None] + (2.0 * va * ib2 * ib)[:, None] * db
                s.sca.add1(adj, pa * w)
                s.scb.add1(adj, pb * w)
                s.sca.add2(adjd, pa[:, None] * wd + dpa * w[:, None])
                s.scb.add2(adjd, pb[:, None] * wd + dpb * w[:, None])
            else:
                d1, d2, _ = _unary_derivs(s.op, va, s.aux)
                s.sca.add1(adj, d1 * w)
                s.sca.add2(adjd, d1[:, None] * wd + d2[:, None] * da * w[:, None])
        return adjd[: self.n_inputs]

    def third_contract(self, x, U, S):
        """sum_c T3[u_c, s_c, .] where T3 is the third-derivative tensor.

        U, S: (n_inputs, C) direction pairs.  Implemented as one reverse
        sweep over two-direction second-order jets: the alpha*gamma
        coefficient of the gradient at x + alpha*u + gamma*s is exactly
        the required contraction.  Returns shape (n_inputs,).
        """
        U = np.asarray(U, dtype=float)
        S = np.asarray(S, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if S.ndim == 1:
            S = S[:, None]
        vals = self._forward(x)
        du = self._forward_tangent(vals, U)
        ds = self._forward_tangent(vals, S)
        dus = self._forward_cross(vals, du, ds)
        gus = self._reverse_jet2(vals, du, ds, dus)
        return gus.sum(axis=1)

    def _forward_cross(self, vals, du, ds):
        """Cross second-order jet coefficients d^2 node / (d alpha d gamma)."""
        n, C = du.shape
        dus = np.zeros((n, C))
        for s in self._segments:
            va = vals[s.a]
            au, as_, aus = du[s.a], ds[s.a], dus[s.a]
            if s.op in _BINARY:
                vb = vals[s.b]
                bu, bs, bus = du[s.b], ds[s.b], dus[s.b]
                if s.op == ADD:
                    r = aus + bus
                elif s.op == SUB:
                    r = aus - bus
                elif s.op == MUL:
                    r = au * bs + as_ * bu + va[:, None] * bus + vb[:, None] * aus
                else:  # DIV: faa = 0, fab = -1/b^2, fbb = 2a/b^3
                    ib = (1.0 / vb)[:, None]
                    ib2 = ib * ib
                    r = (-(au * bs + as_ * bu) * ib2
                         + 2.0 * va[:, None] * bu * bs * ib2 * ib
                         + ib * aus - va[:, None] * ib2 * bus)
            else:
                d1, d2, _ = _unary_derivs(s.op, va, s.aux)
                r = d2[:, None] * au * as_ + d1[:, None] * aus
            dus[s.start: s.stop] = r
        return dus

    def _reverse_jet2(self, vals, du, ds, dus):
        """Reverse sweep carrying (adj, adj_u, adj_s, adj_us); returns adj_us."""
        n = self.n_nodes
        C = du.shape[1]
        A = np.zeros(n)
        Au = np.zeros((n, C))
        As = np.zeros((n, C))
        Aus = np.zeros((n, C))
        A[self.out] = 1.0

        for s in reversed(self._segments):
            w = A[s.start: s.stop]
            wu = Au[s.start: s.stop]
            ws = As[s.start: s.stop]
            wus = Aus[s.start: s.stop]
            va = vals[s.a]
            au, as_, aus = du[s.a], ds[s.a], dus[s.a]
            if s.op in _BINARY:
                vb = vals[s.b]
                bu, bs, bus = du[s.b], ds[s.b], dus[s.b]
                if s.op in (ADD, SUB):
                    sg = 1.0 if s.op == ADD else -1.0
                    s.sca.add1(A, w)
                    s.sca.add2(Au, wu)
                    s.sca.add2(As, ws)
                    s.sca.add2(Aus, wus)
                    s.scb.add1(A, sg * w)
                    s.scb.add2(Au, sg * wu)
                    s.scb.add2(As, sg * ws)
                    s.scb.add2(Aus, sg * wus)
                    continue
                if s.op == MUL:
                    pa0, pau, pas, paus = vb, bu, bs, bus
                    pb0, pbu, pbs, pbus = va, au, as_, aus
                else:  # DIV
                    ib = 1.0 / vb
                    ib2 = ib * ib
                    ib3 = ib2 * ib
                    ib4 = ib2 * ib2
                    pa0 = ib
                    pau = -ib2[:, None] * bu
                    pas = -ib2[:, None] * bs
                    paus = 2.0 * ib3[:, None] * bu * bs - ib2[:, None] * bus
                    pb0 = -va * ib2
                    pbu = -au * ib2[:, None] + 2.0 * (va * ib3)[:, None] * bu
                    pbs = -as_ * ib2[:, None] + 2.0 * (va * ib3)[:, None] * bs
                    pbus = (2.0 * ib3[:, None] * (au * bs + as_ * bu)
                            - 6.0 * (va * ib4)[:, None] * bu * bs
                            - aus * ib2[:, None]
                            + 2.0 * (va * ib3)[:, None] * bus)
                self._emit_jet2(s.sca, A, Au, As, Aus, w, wu, ws, wus,
                                pa0, pau, pas, paus)
                self._emit_jet2(s.scb, A, Au, As, Aus, w, wu, ws, wus,
                                pb0, pbu, pbs, pbus)
            else:
                d1, d2, d3 = _unary_derivs(s.op, va, s.aux)
                p0 = d1
                pu = d2[:, None] * au
                ps = d2[:, None] * as_
                pus = d3[:, None] * au * as_ + d2[:, None] * aus
                self._emit_jet2(s.sca, A, Au, As, Aus, w, wu, ws, wus,
                                p0, pu, ps, pus)
        return Aus[: self.n_inputs]

    @staticmethod
    def _emit_jet2(sc, A, Au, As, Aus, w, wu, ws, wus, p0, pu, ps, pus):
        sc.add1(A, p0 * w)
        sc.add2(Au, p0[:, None] * wu + pu * w[:, None])
        sc.add2(As, p0[:, None] * ws + ps * w[:, None])
        sc.add2(Aus, p0[:, None] * wus + pu * ws + ps * wu + pus * w[:, None])

    # -- introspection (used by tests to spot-check local partials) --------

    def node_ops(self):
        """Op names per node in tape order."""
        return [OP_NAMES[int(o)] for o in self.op]

    def local_partials(self, x):
        """List of (node, op, partial wrt a, partial wrt b) at input x."""
        vals = self._forward(x)
        out = []
        for s in self._segments:
            va = vals[s.a]
            if s.op in _BINARY:
                vb = vals[s.b]
                if s.op == ADD:
                    pa, pb = np.ones_like(va), np.ones_like(vb)
                elif s.op == SUB:
                    pa, pb = np.ones_like(va), -np.ones_like(vb)
                elif s.op == MUL:
                    pa, pb = vb, va
                else:
                    pa, pb = 1.0 / vb, -va / (vb * vb)
            else:
                pa, _, _ = _unary_derivs(s.op, va, s.aux)
                pb = None
            for k in range(s.stop - s.start):
                out.append((
                    s.start + k,
                    OP_NAMES[s.op],
                    float(pa[k]),
                    float(pb[k]) if pb is not None else None,
                ))
        return out


def record(f, x0) -> Tape:
    """Trace the objective callback f at x0 into a Tape.

    f receives a list of Var (one per input) and must return a single Var
    (or a plain float for a constant objective).
    """
    x0 = np.asarray(x0, dtype=float)
    tb = TapeBuilder(x0.size)
    tb.set_input_values(x0)
    out = f(tb.inputs())
    if isinstance(out, (int, float, np.integer, np.floating)):
        out = tb.const(float(out))
    return tb.finish(out)


# --------------------------------------------------------------------------
# Sparsity detection and sparse Hessians
# --------------------------------------------------------------------------


@dataclass
class SparsityPattern:
    """Lower-triangle (row >= col) index pairs of a symmetric pattern."""

    n: int
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def from_pairs(cls, n: int, pairs) -> "SparsityPattern":
        if pairs:
            arr = np.array(sorted(pairs), dtype=np.int64)
            rows, cols = arr[:, 0].copy(), arr[:, 1].copy()
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        return cls(n=n, rows=rows, cols=cols)

    @classmethod
    def dense(cls, n: int) -> "SparsityPattern":
        r, c = np.tril_indices(n)
        return cls(n=n, rows=r.astype(np.int64), cols=c.astype(np.int64))

    @property
    def nnz(self) -> int:
        return self.rows.size

    def pair_set(self):
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def with_diagonal(self) -> "SparsityPattern":
        pairs = self.pair_set() | {(i, i) for i in range(self.n)}
        return SparsityPattern.from_pairs(self.n, pairs)


_NONLINEAR_UNARY = frozenset((EXP, LOG, SQRT, POWC, LOGISTIC, SOFTPLUS, LGAMMA, LOGBESSELK))


def _bits(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def detect_sparsity(tape: Tape, block) -> SparsityPattern:
    """Conservative superset of Hessian nonzeros on block x block.

    Propagates per-node dependency bitmasks over the block variables and
    adds a coupling clique at every nonlinear interaction.  Worst case is
    the dense pattern.
    """
    block = np.asarray(block, dtype=np.int64)
    m = block.size
    pos = {int(v): k for k, v in enumerate(block)}
    masks = [0] * tape.n_nodes
    for i in range(tape.n_inputs):
        p = pos.get(i)
        if p is not None:
            masks[i] = 1 << p
    pairs: set[tuple[int, int]] = set()

    def couple(ma: int, mb: int):
        if ma == 0 or mb == 0:
            return
        ba = _bits(ma)
        bb = ba if mb == ma else _bits(mb)
        for i in ba:
            for j in bb:
                pairs.add((i, j) if i >= j else (j, i))

    op, a, b, aux = tape.op, tape.arg_a, tape.arg_b, tape.aux
    for i in range(tape.n_nodes):
        o = int(op[i])
        if o in (CONST, INPUT):
            continue
        ma = masks[a[i]]
        if o in (ADD, SUB):
            masks[i] = ma | masks[b[i]]
        elif o == NEG:
            masks[i] = ma
        elif o == MUL:
            mb = masks[b[i]]
            couple(ma, mb)
            masks[i] = ma | mb
        elif o == DIV:
            mb = masks[b[i]]
            couple(ma, mb)
            couple(mb, mb)
            masks[i] = ma | mb
        elif o in _NONLINEAR_UNARY:
            if o == POWC and aux[i] in (0.0, 1.0):
                masks[i] = ma
            else:
                couple(ma, ma)
                masks[i] = ma
        else:  # pragma: no cover
            raise AssertionError(o)
    pairs |= {(k, k) for k in range(m)}  # keep diagonal factorizable
    return SparsityPattern.from_pairs(m, pairs)


def color_pattern(pattern: SparsityPattern) -> np.ndarray:
    """Greedy distance-2 coloring: same-colored columns have disjoint rows."""
    m = pattern.n
    col_rows: list[list[int]] = [[] for _ in range(m)]
    row_cols: list[list[int]] = [[] for _ in range(m)]
    for r, c in zip(pattern.rows.tolist(), pattern.cols.tolist()):
        col_rows[c].append(r)
        row_cols[r].append(c)
        if r != c:
            col_rows[r].append(c)
            row_cols[c].append(r)
    colors = np.full(m, -1, dtype=np.int64)
    order = np.argsort([-len(cr) for cr in col_rows], kind="stable")
    for c in order:
        forbidden = set()
        for r in col_rows[c]:
            for c2 in row_cols[r]:
                if colors[c2] >= 0:
                    forbidden.add(int(colors[c2]))
        k = 0
        while k in forbidden:
            k += 1
        colors[c] = k
    return colors


def hessian_sparse(tape: Tape, x, pattern: SparsityPattern, block=None,
                   dense_threshold: int = 64, debug: bool = False):
    """Hessian entries of the taped objective on the given pattern.

    block maps pattern indices to tape input indices (defaults to all
    inputs).  Returns a sparse.SparseSymmetric.  With debug=True, the two
    independent recoveries of each off-diagonal entry are compared and a
    PatternMismatchError raised when they disagree (a symptom of a pattern
    that is too small).
    """
    from .sparse import SparseSymmetric

    if block is None:
        block = np.arange(tape.n_inputs, dtype=np.int64)
    else:
        block = np.asarray(block, dtype=np.int64)
    m = pattern.n
    if block.size != m:
        raise ValueError("block size does not match pattern dimension")
    if m <= dense_threshold:
        colors = np.arange(m, dtype=np.int64)
    else:
        colors = color_pattern(pattern)
    C = int(colors.max()) + 1 if m else 0
    seeds = np.zeros((tape.n_inputs, C))
    seeds[block, colors] = 1.0
    gdot = tape.hvp(x, seeds)  # (n_inputs, C)
    rows, cols = pattern.rows, pattern.cols
    v1 = gdot[block[rows], colors[cols]]
    v2 = gdot[block[cols], colors[rows]]
    if debug:
        scale = 1.0 + np.maximum(np.abs(v1), np.abs(v2))
        bad = np.abs(v1 - v2) > 1e-6 * scale
        if bad.any():
            k = int(np.argmax(bad))
            raise PatternMismatchError(
                f"Hessian entry ({rows[k]},{cols[k]}) recovered inconsistently "
                f"({v1[k]:.6g} vs {v2[k]:.6g}); supplied pattern is likely too small"
            )
    vals = 0.5 * (v1 + v2)
    H = SparseSymmetric.from_entries(m, rows, cols, vals)
    if debug:
        # A random probe excites any off-pattern entry the coloring folded
        # into the recovered values.
        r = np.random.default_rng(0).standard_normal(m)
        probe = np.zeros(tape.n_inputs)
        probe[block] = r
        exact = tape.hvp(x, probe)[block]
        approx = H.matvec(r)
        err = np.abs(exact - approx)
        tol = 1e-6 * (1.0 + np.abs(exact))
        if (err > tol).any():
            k = int(np.argmax(err - tol))
            raise PatternMismatchError(
                f"probe product mismatch at block row {k} "
                f"({approx[k]:.6g} vs exact {exact[k]:.6g}); "
                "supplied pattern misses true Hessian nonzeros"
            )
    return H


# --------------------------------------------------------------------------
# DSL helpers
# --------------------------------------------------------------------------


def _u(opcode):
    def fn(v: Var) -> Var:
        return v.tb.unary(opcode, v)
    return fn


exp = _u(EXP)
log = _u(LOG)
sqrt = _u(SQRT)
logistic = _u(LOGISTIC)
softplus = _u(SOFTPLUS)
lgamma = _u(LGAMMA)


def log_bessel_k(v: Var, nu: float) -> Var:
    """log K_nu(v) with the order nu fixed at recording time."""
    return v.tb.unary(LOGBESSELK, v, aux=float(nu))


def square(v: Var) -> Var:
    return v * v


def tsum(terms):
    """Pairwise-tree sum of taped terms (keeps segments wide)."""
    terms = list(terms)
    if not terms:
        raise ValueError("tsum of no terms")
    while len(terms) > 1:
        nxt = []
        for k in range(0, len(terms) - 1, 2):
            nxt.append(terms[k] + terms[k + 1])
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]
