"""Laplace-approximated marginal likelihood and nested optimization.

The model objective is a taped negative log joint density -f(beta, b, phi)
over a partitioned parameter vector.  The marginal negative log likelihood
is approximated by

    nll(theta) = f(theta, bhat) + 0.5 logdet H(theta) - (m/2) log 2 pi

with bhat the inner (conditional-mode) minimizer over the random effects b
and H the random-effect Hessian block at the mode.  Estimation nests an
inner sparse Newton solve inside an outer box-projected BFGS search whose
stopping rule is the maximum gradient component of the outer objective.

When the random-effect prior is a GMRF whose normalizing constant depends
on hyperparameters only, the objective tape carries the unnormalized
quadratic form and a companion "flag-0" tape isolates that GMRF term; the
exact Gaussian Laplace value of the flag-0 tape supplies the normalizing
constant once per outer evaluation, outside the inner Newton loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as tp
from .sparse import (
    CholeskyFactor,
    NotPositiveDefiniteError,
    SparseSymmetric,
    SymbolicCholesky,
)

__all__ = [
    "ParameterPartition",
    "ObjectiveSpec",
    "InnerSolution",
    "LaplaceOptions",
    "LaplaceProblem",
    "OuterResult",
    "OptimizationError",
    "InnerFailureError",
    "LineSearchError",
    "MaxIterationsError",
    "inner_optimize",
    "laplace_nll",
    "laplace_nll_normalized",
    "outer_optimize",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ParameterPartition:
    """Index sets splitting the input vector into fixed effects beta,
    variance/covariance parameters phi (on unconstrained scales), and
    random effects b."""

    beta: np.ndarray
    phi: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.int64))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.int64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.int64))
        all_idx = np.concatenate([self.beta, self.phi, self.b])
        if np.unique(all_idx).size != all_idx.size:
            raise ValueError("partition index sets overlap")

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.phi])

    @property
    def n_theta(self) -> int:
        return self.beta.size + self.phi.size

    @property
    def n_b(self) -> int:
        return self.b.size

    @property
    def n_total(self) -> int:
        return self.beta.size + self.phi.size + self.b.size


@dataclass(frozen=True)
class ObjectiveSpec:
    """A user model: taped -f(beta, b, phi) plus optional pieces.

    tape        negative log joint; when flag0_tape is given the GMRF
                normalizing constants are omitted from it (unnormalized
                quadratic forms only).
    prior_tape  -(log p3(beta) + log p3(phi)); depends on theta only.
    flag0_tape  the unnormalized GMRF term alone (the flag == 0 branch).
    flag0_b     indices (into the input vector) of the random effects the
                flag-0 GMRF term covers; defaults to all of partition.b.
    constraints sum-to-zero blocks of b handled by conditioning; each entry
                is an index array into the input vector.
    """

    tape: tp.Tape
    partition: ParameterPartition
    prior_tape: tp.Tape | None = None
    flag0_tape: tp.Tape | None = None
    flag0_b: np.ndarray | None = None
    constraints: tuple = ()

    def __post_init__(self):
        if self.tape.n_inputs != self.partition.n_total:
            raise ValueError("tape input dimension does not match partition")
        if self.prior_tape is not None and self.prior_tape.n_inputs != self.tape.n_inputs:
            raise ValueError("prior tape input dimension mismatch")
        if self.flag0_tape is not None:
            if self.flag0_tape.n_inputs != self.tape.n_inputs:
                raise ValueError("flag-0 tape input dimension mismatch")
            fb = self.partition.b if self.flag0_b is None else np.asarray(self.flag0_b, np.int64)
            object.__setattr__(self, "flag0_b", fb)


@dataclass
class InnerSolution:
    """Converged inner Newton state at fixed theta."""

    b_hat: np.ndarray
    hessian: SparseSymmetric
    factor: CholeskyFactor
    grad_norm: float
    n_iter: int
    f_value: float


@dataclass
class LaplaceOptions:
    inner_tol_rel: float = 1e-10
    outer_tol: float = 1e-8
    lower: float = -10.0
    upper: float = 10.0
    max_outer: int = 200
    max_inner: int = 100
    max_damp: int = 25
    dense_threshold: int = 64
    armijo_c1: float = 1e-4
    restarts: int = 0


class OptimizationError(RuntimeError):
    """Carries the last iterate so callers can diagnose or relaunch."""

    def __init__(self, msg, theta=None, nll=None, mgc=None):
        super().__init__(msg)
        self.theta = None if theta is None else np.asarray(theta)
        self.nll = nll
        self.mgc = mgc


class InnerFailureError(OptimizationError):
    pass


class LineSearchError(OptimizationError):
    pass


class MaxIterationsError(OptimizationError):
    pass


class _TapeCtx:
    """Per-tape machinery: RE pattern, coloring seeds, symbolic factor."""

    def __init__(self, t: tp.Tape, b_idx: np.ndarray, dense_threshold: int):
        self.tape = t
        self.b_idx = b_idx
        self.m = b_idx.size
        self.pattern = tp.detect_sparsity(t, b_idx) if self.m else None
        self.symbolic: SymbolicCholesky | None = None

    def hessian(self, x) -> SparseSymmetric:
        return tp.hessian_sparse(self.tape, x, self.pattern, block=self.b_idx)

    def factorize(self, H: SparseSymmetric) -> CholeskyFactor:
        if self.symbolic is None:
            self.symbolic = SymbolicCholesky(H)
        try:
            return self.symbolic.factorize(H)
        except ValueError:
            # damping may perturb the pattern only if diagonal was absent;
            # detect_sparsity always includes it, so this is a true change
            self.symbolic = SymbolicCholesky(H)
            return self.symbolic.factorize(H)


class LaplaceProblem:
    """Caches tape analyses and provides nll / gradient / optimization."""

    def __init__(self, spec: ObjectiveSpec, options: LaplaceOptions | None = None):
        self.spec = spec
        self.opts = options or LaplaceOptions()
        p = spec.partition
        self.theta_idx = p.theta
        self.b_idx = p.b
        self.main = _TapeCtx(spec.tape, p.b, self.opts.dense_threshold)
        self.flag0 = None
        self._flag0_cache = (None, None)
        if spec.flag0_tape is not None:
            self.flag0 = _TapeCtx(spec.flag0_tape, spec.flag0_b, self.opts.dense_threshold)

    def _flag0_inner(self, theta) -> InnerSolution:
        key = np.asarray(theta, dtype=float).tobytes()
        if self._flag0_cache[0] != key:
            inner0 = self.inner_optimize(theta, None, ctx=self.flag0)
            self._flag0_cache = (key, inner0)
        return self._flag0_cache[1]

    # -- assembly ------------------------------------------------------------

    def assemble(self, theta, b) -> np.ndarray:
        x = np.zeros(self.spec.partition.n_total)
        x[self.theta_idx] = theta
        if self.b_idx.size:
            x[self.b_idx] = b
        return x

    # -- inner problem ---------------------------------------------------------

    def inner_optimize(self, theta, b_init=None, ctx: _TapeCtx | None = None) -> InnerSolution:
        """Newton minimization over the random effects at fixed theta."""
        ctx = ctx or self.main
        o = self.opts
        m = ctx.m
        theta = np.asarray(theta, dtype=float)
        if m == 0:
            x = self.assemble(theta, np.zeros(0))
            f = ctx.tape.value(x)
            return InnerSolution(np.zeros(0), SparseSymmetric.identity(0), None, 0.0, 0, f)
        b = np.zeros(m) if b_init is None else np.asarray(b_init, dtype=float).copy()

        def fg(bv):
            return ctx.tape.value_and_grad(self.assemble(theta, bv))

        try:
            f, g = fg(b)
        except tp.NonFiniteValueError:
            if b_init is None or not np.any(b):
                raise InnerFailureError("objective non-finite at inner start", theta=theta)
            b = np.zeros(m)
            f, g = fg(b)
        gb = g[ctx.b_idx]
        lam = 0.0
        it = 0
        eps_f = 4.0 * np.finfo(float).eps
        while np.max(np.abs(gb)) > o.inner_tol_rel * (1.0 + abs(f)):
            if it >= o.max_inner:
                raise InnerFailureError(
                    f"inner Newton did not converge in {o.max_inner} iterations "
                    f"(grad inf-norm {np.max(np.abs(gb)):.3e})", theta=theta, nll=f)
            H = ctx.hessian(self.assemble(theta, b))
            accepted = False
            floored = False
            for _ in range(o.max_damp):
                Hd = H if lam == 0.0 else H.plus_diagonal(lam)
                try:
                    F = ctx.factorize(Hd)
                except NotPositiveDefiniteError:
                    lam = self._bump(lam, H)
                    continue
                d = -F.solve(gb)
                gtd = float(gb @ d)
                if gtd >= 0.0:
                    lam = self._bump(lam, H)
                    continue
                if -gtd <= eps_f * (1.0 + abs(f)):
                    # f cannot decrease measurably in doubles; polish with
                    # full Newton steps while the gradient norm contracts
                    try:
                        f_new, g_new = fg(b + d)
                    except tp.NonFiniteValueError:
                        floored = True
                        break
                    if np.max(np.abs(g_new[ctx.b_idx])) < np.max(np.abs(gb)):
                        b = b + d
                        f, g = f_new, g_new
                        gb = g[ctx.b_idx]
                        accepted = True
                    else:
                        floored = True
                    break
                t = 1.0
                while t >= 2.0 ** -30:
                    try:
                        f_new, g_new = fg(b + t * d)
                    except tp.NonFiniteValueError:
                        t *= 0.5
                        continue
                    if f_new <= f + o.armijo_c1 * t * gtd + eps_f * (1.0 + abs(f)):
                        b = b + t * d
                        f, g = f_new, g_new
                        gb = g[ctx.b_idx]
                        accepted = True
                        break
                    t *= 0.5
                if accepted:
                    lam = 0.0 if t == 1.0 else lam * 0.25
                    break
                lam = self._bump(lam, H)
            if floored:
                break
            if not accepted:
                raise InnerFailureError(
                    "inner Newton stalled after repeated damping", theta=theta, nll=f)
            it += 1
        H = ctx.hessian(self.assemble(theta, b))
        try:
            F = ctx.factorize(H)
        except NotPositiveDefiniteError as e:
            raise InnerFailureError(
                f"random-effect Hessian not positive definite at the inner mode "
                f"(pivot {e.pivot})", theta=theta, nll=f) from e
        return InnerSolution(b, H, F, float(np.max(np.abs(gb))), it, f)

    @staticmethod
    def _bump(lam, H):
        base = 1e-6 * max(1.0, float(np.max(np.abs(H.diagonal()))))
        return base if lam == 0.0 else lam * 10.0

    # -- marginal negative log likelihood ---------------------------------------

    def _nll_la(self, ctx: _TapeCtx, inner: InnerSolution) -> float:
        if ctx.m == 0:
            return inner.f_value
        return inner.f_value + 0.5 * inner.factor.logdet() - 0.5 * ctx.m * LOG_2PI

    def nll(self, theta, warm: InnerSolution | None = None):
        """Laplace marginal nll (plus prior terms); returns (value, inner)."""
        theta = np.asarray(theta, dtype=float)
        b0 = warm.b_hat if warm is not None else None
        inner = self.inner_optimize(theta, b0)
        val = self._nll_la(self.main, inner)
        if self.flag0 is not None:
            val -= self._nll_la(self.flag0, self._flag0_inner(theta))
        if self.spec.prior_tape is not None:
            val += self.spec.prior_tape.value(self.assemble(theta, inner.b_hat))
        return val, inner

    def gmrf_unnormalized_term(self, theta, b) -> float:
        """The flag-0 branch alone: the GMRF term with no data contribution."""
        if self.spec.flag0_tape is None:
            raise ValueError("spec has no flag-0 tape")
        return self.spec.flag0_tape.value(self.assemble(theta, b))

    # -- outer gradient -----------------------------------------------------------

    def _grad_la(self, ctx: _TapeCtx, theta, inner: InnerSolution) -> np.ndarray:
        """d/dtheta of the Laplace nll of one tape at its inner mode.

        Direct theta partials of the objective (the inner gradient is zero)
        plus the determinant derivative: the partial inverse of H traced
        against the total derivative of H, with the implicit db/dtheta from
        the cross Hessian block.
        """
        x = self.assemble(theta, inner.b_hat)
        _, g = ctx.tape.value_and_grad(x)
        gt = g[self.theta_idx].copy()
        if ctx.m == 0:
            return gt
        W = inner.factor.partial_inverse()
        pat = ctx.pattern
        w_vals = W.extract(pat.rows, pat.cols)
        if ctx.m <= self.opts.dense_threshold:
            colors = np.arange(ctx.m, dtype=np.int64)
        else:
            colors = tp.color_pattern(pat)
        C = int(colors.max()) + 1 if ctx.m else 0
        n_in = ctx.tape.n_inputs
        S = np.zeros((n_in, C))
        S[ctx.b_idx, colors] = 1.0
        U = np.zeros((n_in, C))
        np.add.at(U, (ctx.b_idx[pat.rows], colors[pat.cols]), w_vals)
        off = pat.rows != pat.cols
        np.add.at(U, (ctx.b_idx[pat.cols[off]], colors[pat.rows[off]]), w_vals[off])
        t3 = 0.5 * ctx.tape.third_contract(x, U, S)
        gt += t3[self.theta_idx]
        t_b = t3[ctx.b_idx]
        # cross Hessian block C = d^2 f / (db dtheta), m x p
        p = self.theta_idx.size
        seeds = np.zeros((n_in, p))
        seeds[self.theta_idx, np.arange(p)] = 1.0
        cross = ctx.tape.hvp(x, seeds)[ctx.b_idx, :]
        gt -= cross.T @ inner.factor.solve(t_b)
        return gt

    def gradient(self, theta, inner: InnerSolution | None = None,
                 warm_b=None) -> np.ndarray:
        """Exact gradient of the outer objective at theta."""
        theta = np.asarray(theta, dtype=float)
        if inner is None:
            inner = self.inner_optimize(theta, warm_b)
        g = self._grad_la(self.main, theta, inner)
        if self.flag0 is not None:
            g -= self._grad_la(self.flag0, theta, self._flag0_inner(theta))
        if self.spec.prior_tape is not None:
            gp = self.spec.prior_tape.gradient(self.assemble(theta, inner.b_hat))
            g += gp[self.theta_idx]
        return g

    # -- outer optimization ----------------------------------------------------------

    def outer_optimize(self, theta0, bounds=None) -> "OuterResult":
        o = self.opts
        p = self.theta_idx.size
        if bounds is None:
            lo = np.full(p, o.lower)
            hi = np.full(p, o.upper)
        else:
            lo, hi = (np.broadcast_to(np.asarray(bb, dtype=float), (p,)).copy()
                      for bb in bounds)
        theta = np.clip(np.asarray(theta0, dtype=float), lo, hi)
        if theta.shape != (p,):
            raise ValueError(f"theta0 has shape {np.shape(theta0)}, expected ({p},)")

        warm: InnerSolution | None = None

        def evaluate(th):
            nonlocal warm
            val, inner = self.nll(th, warm)
            warm = inner
            return val, inner

        f, inner = evaluate(theta)
        g = self.gradient(theta, inner)
        Binv = np.eye(p)
        history = [f]
        n_accept = 0
        for it in range(o.max_outer):
            mgc = self._projected_mgc(theta, g, lo, hi)
            if mgc <= o.outer_tol:
                inner = self.inner_optimize(theta, inner.b_hat)  # final RE update
                return OuterResult(theta=theta, inner=inner, nll=f, mgc=mgc,
                                   n_iter=n_accept, history=history, problem=self)
            d = -Binv @ g
            if g @ d > -1e-14 * np.linalg.norm(g) * np.linalg.norm(d):
                Binv = np.eye(p)
                d = -g
            eps_f = 4.0 * np.finfo(float).eps * (1.0 + abs(f))
            t = 1.0
            f_new = None
            while t >= 2.0 ** -40:
                cand = np.clip(theta + t * d, lo, hi)
                step = cand - theta
                if not np.any(step):
                    break
                try:
                    f_try, inner_try = evaluate(cand)
                except (tp.NonFiniteValueError, InnerFailureError):
                    t *= 0.5
                    continue
                needed = o.armijo_c1 * min(g @ step, 0.0)
                if -needed <= eps_f:
                    # the decrease the step predicts is below the roundoff
                    # of f: accept on gradient contraction instead
                    if f_try <= f + eps_f:
                        g_try = self.gradient(cand, inner_try)
                        if (self._projected_mgc(cand, g_try, lo, hi) < mgc):
                            f_new, theta_new, inner = f_try, cand, inner_try
                            g_cached = g_try
                            break
                    t *= 0.5
                    continue
                if f_try <= f + needed:
                    f_new, theta_new, inner = f_try, cand, inner_try
                    g_cached = None
                    break
                t *= 0.5
            if f_new is None:
                raise LineSearchError(
                    "outer line search failed to find decrease",
                    theta=theta, nll=f, mgc=mgc)
            g_new = g_cached if g_cached is not None else self.gradient(theta_new, inner)
            s = theta_new - theta
            y = g_new - g
            sy = s @ y
            if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
                rho = 1.0 / sy
                V = np.eye(p) - rho * np.outer(s, y)
                Binv = V @ Binv @ V.T + rho * np.outer(s, s)
            theta, f, g = theta_new, f_new, g_new
            history.append(f)
            n_accept += 1
        raise MaxIterationsError(
            f"outer optimization did not converge in {o.max_outer} iterations",
            theta=theta, nll=f, mgc=self._projected_mgc(theta, g, lo, hi))

    @staticmethod
    def _projected_mgc(theta, g, lo, hi):
        gp = g.copy()
        at_lo = theta <= lo + 1e-12
        at_hi = theta >= hi - 1e-12
        gp[at_lo] = np.minimum(gp[at_lo], 0.0)
        gp[at_hi] = np.maximum(gp[at_hi], 0.0)
        return float(np.max(np.abs(gp))) if gp.size else 0.0


@dataclass
class OuterResult:
    theta: np.ndarray
    inner: InnerSolution
    nll: float
    mgc: float
    n_iter: int
    history: list
    problem: LaplaceProblem


# -- module-level operation surface ------------------------------------------


def _problem(spec, options=None) -> LaplaceProblem:
    if isinstance(spec, LaplaceProblem):
        return spec
    return LaplaceProblem(spec, options)


def inner_optimize(spec, theta, b_init=None, options=None) -> InnerSolution:
    return _problem(spec, options).inner_optimize(theta, b_init)


def laplace_nll(spec, theta, warm=None, options=None) -> float:
    return _problem(spec, options).nll(theta, warm)[0]


def laplace_nll_normalized(spec, theta, options=None) -> float:
    """Marginal nll with the GMRF determinant outside the inner loop.

    Identical in value to laplace_nll on a spec that declares its GMRF
    normalization tapes; raises if the spec does not.
    """
    pr = _problem(spec, options)
    if pr.flag0 is None:
        raise ValueError("spec declares no flag-0 GMRF tape to normalize")
    return pr.nll(theta)[0]


def outer_optimize(spec, theta0, bounds=None, options=None) -> OuterResult:
    return _problem(spec, options).outer_optimize(theta0, bounds)
