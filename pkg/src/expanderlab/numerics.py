"""Deterministic numerical kernels shared by the lab.

Provides the small set of generic solvers the geometric modules are built
on: an adaptive embedded Runge-Kutta integrator with cubic dense output,
a shifted inverse-power smallest-eigenpair solver, golden-section
maximization of a concave function with bracket auto-expansion,
projected-gradient minimization on the unit sphere of a weighted L2
space, and a finite-difference identity checker with convergence-order
fitting.

All kernels are pure functions of their arguments (no global state, no
hidden randomness) and are safe to call from parallel workers.  Fields
are plain numpy arrays (a scalar field on a homogeneous space is a
0-d array or float); inner products are taken against explicit measure
weights so the same code serves grid and reduced representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ToleranceConfig",
    "TimeSeries",
    "OdeTrajectory",
    "OdeFailure",
    "EigenFailure",
    "EigenResult",
    "ConcaveMaxResult",
    "ConstrainedMinResult",
    "FdResidualReport",
    "integrate_ode",
    "smallest_eigenpair",
    "maximize_concave_1d",
    "minimize_constrained",
    "fd_residual",
    "conjugate_gradient",
]


@dataclass(frozen=True)
class ToleranceConfig:
    """Tolerance knobs shared by the kernels.

    abs_tol / rel_tol are dimensionless; fd_step is the default step for
    finite-difference probes.  All must be strictly positive and
    max_iter at least 1.
    """

    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    max_iter: int = 10_000
    fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if not (self.abs_tol > 0.0 and self.rel_tol > 0.0 and self.fd_step > 0.0):
            raise ValueError("tolerances must be strictly positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class TimeSeries:
    """A sampled scalar signal along flow time: strictly increasing times."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.ndim != 1 or t.size != v.size:
            raise ValueError("times and values must be 1-d of equal length")
        if t.size >= 2 and not np.all(np.diff(t) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.times.size)


class OdeFailure(RuntimeError):
    """Raised when an integration aborts on non-finite state."""

    def __init__(self, message: str, t_last: float, y_last: np.ndarray):
        super().__init__(message)
        self.t_last = t_last
        self.y_last = y_last


# Dormand-Prince 5(4) tableau.  The fifth-order solution is propagated;
# the embedded fourth-order one supplies the local error estimate.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


@dataclass
class OdeTrajectory:
    """Accepted-step samples of an ODE solution with cubic dense output.

    Dense evaluation uses the Hermite cubic on each accepted step, built
    from the stored states and right-hand-side values at the step ends.
    status is "completed", "truncated" (step-size underflow: the last
    valid time is reported) or "halted" (a caller-supplied stop
    predicate fired).
    """

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    status: str = "completed"
    message: str = ""

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def component(self, i: int) -> TimeSeries:
        return TimeSeries(self.times, self.states[:, i])

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.times[0], self.times[-1]
        if np.any(t_arr < lo - 1e-12 * (1 + abs(lo))) or np.any(
            t_arr > hi + 1e-12 * (1 + abs(hi))
        ):
            raise ValueError(f"dense evaluation outside [{lo}, {hi}]")
        t_arr = np.clip(t_arr, lo, hi)
        idx = np.searchsorted(self.times, t_arr, side="right") - 1
        idx = np.clip(idx, 0, len(self.times) - 2)
        ta = self.times[idx]
        h = self.times[idx + 1] - ta
        s = ((t_arr - ta) / h)[:, None]
        ya, yb = self.states[idx], self.states[idx + 1]
        fa, fb = self.derivs[idx], self.derivs[idx + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        out = h00 * ya + h10 * h[:, None] * fa + h01 * yb + h11 * h[:, None] * fb
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            return out[0]
        return out


def _error_norm(err, y_old, y_new, tol: ToleranceConfig) -> float:
    scale = tol.abs_tol + tol.rel_tol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_ode(rhs, y0, t0: float, t1: float, tol: ToleranceConfig | None = None,
                  stop=None, max_step: float | None = None) -> OdeTrajectory:
    """Adaptive embedded Runge-Kutta integration of y' = rhs(t, y).

    Steps are accepted when the embedded local error estimate, in the
    mixed abs/rel scaled norm, is below one; step sizes follow a PI
    controller.  Dense output is the cubic Hermite interpolant between
    accepted steps.

    stop, if given, is a predicate stop(t, y); when it first becomes
    true the trajectory is truncated at the crossing (bisected on the
    dense output) with status "halted".  Step-size underflow returns the
    partial trajectory with status "truncated"; non-finite states raise
    OdeFailure.  max_step may be a float or a callable of t (callers cap
    steps where the cubic dense output must stay at interpolation
    accuracy well below the step-control tolerance).
    """
    if tol is None:
        tol = ToleranceConfig()
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if max_step is not None and not callable(max_step):
        cap_value = float(max_step)
        max_step = lambda t: cap_value  # noqa: E731
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    span = t1 - t0
    t = t0
    f = np.asarray(rhs(t, y), dtype=float)
    if not np.all(np.isfinite(f)):
        raise OdeFailure("non-finite right-hand side at initial state", t, y)

    # initial step heuristic
    scale = tol.abs_tol + tol.rel_tol * np.abs(y)
    d0 = float(np.sqrt(np.mean((y / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f / scale) ** 2)))
    h = 0.01 * d0 / d1 if (d0 > 1e-5 and d1 > 1e-5) else 1e-6 * span
    h = min(h, span / 10)
    if max_step is not None:
        h = min(h, max_step(t))

    times = [t]
    states = [y.copy()]
    derivs = [f.copy()]
    err_prev = 1.0
    status, message = "completed", ""
    n_steps = 0
    h_floor = 1e-14 * span

    while t < t1:
        if n_steps > 100 * tol.max_iter:
            status, message = "truncated", "step budget exhausted"
            break
        h = min(h, t1 - t)
        k = [f]
        failed_stage = False
        for i in range(1, 7):
            yi = y + h * sum(a * ki for a, ki in zip(_DP_A[i], k))
            ki = np.asarray(rhs(t + _DP_C[i] * h, yi), dtype=float)
            if not np.all(np.isfinite(ki)):
                failed_stage = True
                break
            k.append(ki)
        if failed_stage:
            h *= 0.25
            if h < h_floor:
                status, message = "truncated", "step size underflow (non-finite stages)"
                break
            continue
        y_new = y + h * sum(b * ki for b, ki in zip(_DP_B5, k))
        y4 = y + h * sum(b * ki for b, ki in zip(_DP_B4, k))
        if not np.all(np.isfinite(y_new)):
            raise OdeFailure("non-finite state during integration", t, y)
        err = _error_norm(y_new - y4, y, y_new, tol)
        if err <= 1.0:
            t_new = t + h
            f_new = k[6]  # FSAL stage equals rhs at the new point
            times.append(t_new)
            states.append(y_new.copy())
            derivs.append(f_new.copy())
            if stop is not None and stop(t_new, y_new):
                status, message = "halted", "stop predicate fired"
                t, y, f = t_new, y_new, f_new
                break
            fac = 0.9 * max(err, 1e-10) ** -0.14 * max(err_prev, 1e-10) ** -0.04
            err_prev = max(err, 1e-10)
            t, y, f = t_new, y_new, f_new
            h *= min(6.0, max(0.2, fac))
        else:
            h *= max(0.2, 0.9 * err**-0.2)
        if max_step is not None:
            h = min(h, max_step(t))
        if h < h_floor:
            status, message = "truncated", "step size underflow"
            break
        n_steps += 1

    traj = OdeTrajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        derivs=np.asarray(derivs),
        status=status,
        message=message,
    )
    if status == "halted" and stop is not None and len(times) >= 2:
        # bisect the dense output for the earliest crossing on the last step
        ta, tb = times[-2], times[-1]
        for _ in range(80):
            tm = 0.5 * (ta + tb)
            if stop(tm, traj(tm)):
                tb = tm
            else:
                ta = tm
            if tb - ta <= 1e-13 * (1.0 + abs(tb)):
                break
        yb = traj(tb)
        traj.times = np.append(traj.times[:-1], tb)
        traj.states = np.vstack([traj.states[:-1], yb])
        traj.derivs = np.vstack([traj.derivs[:-1], np.asarray(rhs(tb, yb), dtype=float)])
    return traj


def conjugate_gradient(apply_a, b: np.ndarray, weight: np.ndarray,
                       precond=None, rel_tol: float = 1e-12,
                       max_iter: int = 2000) -> np.ndarray:
    """Matrix-free preconditioned CG in the weighted L2 inner product.

    apply_a must be self-adjoint positive definite with respect to
    <f, g> = sum(f * g * weight).  weight may be a scalar or an array
    shaped like b.
    """

    def inner(u, v):
        return float(np.sum(u * v * weight))

    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = inner(r, z)
    b_norm = math.sqrt(max(inner(b, b), 1e-300))
    for _ in range(max_iter):
        if math.sqrt(max(inner(r, r), 0.0)) <= rel_tol * b_norm:
            return x
        ap = apply_a(p)
        alpha = rz / inner(p, ap)
        x = x + alpha * p
        r = r - alpha * ap
        z = precond(r) if precond is not None else r
        rz_new = inner(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


class EigenFailure(RuntimeError):
    """Eigen-iteration did not meet its residual tolerance."""

    def __init__(self, message: str, residual_history):
        super().__init__(message)
        self.residual_history = list(residual_history)


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    residuals: list = field(default_factory=list)


def smallest_eigenpair(apply_operator, measure, tol: ToleranceConfig | None = None,
                       shift: float = 0.0, w0: np.ndarray | None = None,
                       precond=None, deflate=()) -> EigenResult:
    """Ground eigenpair of a self-adjoint operator by shifted inverse iteration.

    apply_operator maps fields to fields and is self-adjoint in the
    measure-weighted inner product; shift must lie strictly below the
    smallest eigenvalue so the shifted operator is positive definite
    (callers use min of the potential minus one).  The eigenfunction is
    returned with unit weighted L2 norm and positive mean sign; deflate
    lists fields to project out each iteration (used to reach the
    smallest eigenvalue orthogonal to a known kernel).

    Raises EigenFailure with the residual history if max_iter sweeps do
    not bring the weighted residual norm under abs_tol.
    """
    if tol is None:
        tol = ToleranceConfig()
    measure = np.asarray(measure, dtype=float)

    def inner(u, v):
        return float(np.sum(u * v * measure))

    def norm(u):
        return math.sqrt(max(inner(u, u), 0.0))

    basis = []
    for d in deflate:
        d = np.asarray(d, dtype=float).copy()
        for e in basis:
            d = d - inner(d, e) * e
        nd = norm(d)
        if nd > 0:
            basis.append(d / nd)

    def project(u):
        for e in basis:
            u = u - inner(u, e) * e
        return u

    w = np.ones_like(measure) if w0 is None else np.asarray(w0, dtype=float).copy()
    w = project(w)
    if norm(w) == 0.0:
        raise ValueError("initial vector lies in the deflated subspace")
    w = w / norm(w)

    def shifted(u):
        return apply_operator(u) - shift * u

    residuals = []
    lam = inner(w, apply_operator(w))
    for _ in range(tol.max_iter):
        rhs_vec = w
        w_new = conjugate_gradient(shifted, rhs_vec, measure, precond=precond,
                                   rel_tol=1e-13, max_iter=tol.max_iter)
        w_new = project(w_new)
        n = norm(w_new)
        if n == 0.0 or not np.all(np.isfinite(w_new)):
            raise EigenFailure("inverse iteration produced a degenerate iterate", residuals)
        w = w_new / n
        aw = apply_operator(w)
        lam = inner(w, aw)
        res = norm(aw - lam * w)
        residuals.append(res)
        if res <= tol.abs_tol:
            break
    else:
        raise EigenFailure(
            f"no convergence in {tol.max_iter} iterations (residual {residuals[-1]:.3e})",
            residuals,
        )
    if inner(w, np.ones_like(w)) < 0:
        w = -w
    return EigenResult(value=float(lam), vector=w, residuals=residuals)


@dataclass
class ConcaveMaxResult:
    status: str  # "ok" or "unbounded"
    x: float
    value: float
    warnings: tuple = ()
    n_eval: int = 0


def maximize_concave_1d(f, bracket, tol: ToleranceConfig | None = None) -> ConcaveMaxResult:
    """Golden-section maximization of a concave function of one variable.

    The upper bracket end is doubled while the function is still rising
    there, up to 2**40 times the initial end; if it is still rising the
    structured outcome "unbounded" is returned instead of an error.
    Concavity is probed by sampled second differences; a violation only
    adds a warning.  On success |x - argmax| <= abs_tol.
    """
    if tol is None:
        tol = ToleranceConfig(abs_tol=1e-8)
    lo, hi = float(bracket[0]), float(bracket[1])
    if not hi > lo:
        raise ValueError("bracket must satisfy hi > lo")
    n_eval = 0

    def ev(x):
        nonlocal n_eval
        n_eval += 1
        return float(f(x))

    cap = hi * 2.0**40
    f_hi = ev(hi)
    f_mid = ev(0.5 * (lo + hi))
    while f_hi >= f_mid:
        if hi >= cap:
            return ConcaveMaxResult(status="unbounded", x=hi, value=f_hi, n_eval=n_eval)
        mid = hi
        f_mid = f_hi
        hi *= 2.0
        f_hi = ev(hi)

    warnings_out = []
    xs = np.linspace(lo, hi, 17)
    fs = [ev(x) for x in xs]
    d2 = np.diff(fs, 2)
    slack = 1e-9 * (1.0 + float(np.max(np.abs(fs))))
    if np.any(d2 > slack):
        warnings_out.append("sampled second differences violate concavity")

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = ev(c), ev(d)
    for _ in range(tol.max_iter):
        if (b - a) <= tol.abs_tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = ev(d)
    x_best = 0.5 * (a + b)
    return ConcaveMaxResult(
        status="ok", x=x_best, value=ev(x_best), warnings=tuple(warnings_out), n_eval=n_eval
    )


@dataclass
class ConstrainedMinResult:
    w: np.ndarray
    value: float
    grad_norm: float
    converged: bool
    n_iter: int
    message: str = ""


def minimize_constrained(functional, gradient, normalize, inner, w0,
                         tol: ToleranceConfig | None = None,
                         precond=None) -> ConstrainedMinResult:
    """Projected gradient descent on the unit sphere of a weighted L2 space.

    functional and gradient are the objective and its weighted-L2
    gradient; normalize retracts a field onto the constraint set
    (callers fold positivity into it); inner is the weighted inner
    product.  precond optionally maps the projected gradient to a
    descent direction (an approximate inverse of the stiff part of the
    Hessian); convergence is still declared on the plain projected
    gradient norm.  Backtracking line search; stagnation without meeting
    the tolerance returns the best iterate flagged unconverged rather
    than raising.
    """
    if tol is None:
        tol = ToleranceConfig(abs_tol=1e-8, max_iter=2000)
    w = normalize(np.asarray(w0, dtype=float).copy())
    fval = float(functional(w))
    step = 1.0
    g_norm = math.inf
    for it in range(tol.max_iter):
        g = gradient(w)
        gp = g - inner(g, w) * w
        g_norm = math.sqrt(max(inner(gp, gp), 0.0))
        if g_norm <= tol.abs_tol:
            return ConstrainedMinResult(w, fval, g_norm, True, it)
        if precond is not None:
            d = precond(gp)
            d = d - inner(d, w) * w
            slope = inner(gp, d)
            if slope <= 0.0:  # preconditioner lost positivity; fall back
                d, slope = gp, g_norm**2
        else:
            d, slope = gp, g_norm**2
        alpha = min(4.0 * step, 1e6)
        accepted = False
        for _ in range(60):
            w_try = normalize(w - alpha * d)
            f_try = float(functional(w_try))
            if f_try <= fval - 1e-4 * alpha * slope:
                w, fval, step, accepted = w_try, f_try, alpha, True
                break
            alpha *= 0.5
        if not accepted:
            return ConstrainedMinResult(
                w, fval, g_norm, False, it, message="line search stagnated"
            )
    return ConstrainedMinResult(
        w, fval, g_norm, False, tol.max_iter, message="iteration budget exhausted"
    )


@dataclass
class FdResidualReport:
    levels: list
    max_residuals: list
    order: float
    decaying: bool

    def __str__(self) -> str:
        rows = ", ".join(
            f"N={lv}: {r:.3e}" for lv, r in zip(self.levels, self.max_residuals)
        )
        return f"residuals [{rows}]; fitted order {self.order:.2f}; decaying={self.decaying}"


def fd_residual(claimed_identity, levels) -> FdResidualReport:
    """Check a claimed identity lhs == rhs across grid refinement levels.

    claimed_identity is a (lhs, rhs) pair of evaluators taking a level
    (e.g. a grid size N, with mesh width proportional to 1/N) and
    returning arrays on that level's grid.  Reports the max-norm
    residual per level and the order fitted by least squares against the
    mesh width; a non-decaying residual is flagged (decaying=False), it
    is never an error.
    """
    lhs, rhs = claimed_identity
    res = []
    for lv in levels:
        r = np.asarray(lhs(lv)) - np.asarray(rhs(lv))
        res.append(float(np.max(np.abs(r))))
    if all(r < 1e-13 for r in res):
        return FdResidualReport(list(levels), res, math.inf, True)
    logs_h = np.log([1.0 / float(lv) for lv in levels])
    logs_r = np.log([max(r, 1e-300) for r in res])
    order = float(np.polyfit(logs_h, logs_r, 1)[0]) if len(levels) >= 2 else math.nan
    decaying = bool(order >= 0.5) and res[-1] < res[0]
    return FdResidualReport(list(levels), res, order, decaying)
