"""Density evolution on the BEC for two-type ensembles with degree-2 VNs.

The per-iteration recursion is q <- eps * f(q), where f is the edge-averaged
extrinsic erasure rate of the constraint side. A component of rate r = k/n
punctured uniformly sees parity-input erasure rate q_par = (2 - 1/r) +
(1/r - 1) q, evaluates its trellis transfer (p_sys, p_par) at
(q_sys, q_par) = (q, q_par), and returns r * p_sys + (1 - r) * p_par over its
edges; the two types mix with weights rho and 1 - rho.

The BP threshold is the largest eps for which the recursion converges to
zero, located as min over x in (0, 1] of eps(x) = x / f(x). The MAP
threshold comes from the EXIT-area equation R = integral of h d(eps) over the
branch above the BP fixed point, with h(x) = f(x)^2.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import EnsembleParams
from .errors import AnalysisError, InfeasibleError
from .transfer import get_transfer
from .trellis import GeneratorSpec


def component_evaluators(params: EnsembleParams, method="exact"):
    """Transfer evaluators for the two component types (shared caches)."""
    return (
        get_transfer(GeneratorSpec.from_memory(params.m1), method),
        get_transfer(GeneratorSpec.from_memory(params.m2), method),
    )


def punctured_parity_erasure(q, rate):
    """Erasure rate of a component's parity inputs after uniform puncturing.

    A surviving parity position (probability 1/rate - 1 per mother slot) is
    erased with the edge erasure rate q; a punctured one is always erased.
    """
    keep = 1.0 / rate - 1.0
    return (1.0 - keep) + keep * np.asarray(q, dtype=np.float64)


def component_erasure(q, rate, evaluator):
    """Edge-averaged extrinsic erasure rate of one component type."""
    q = np.asarray(q, dtype=np.float64)
    qp = punctured_parity_erasure(q, rate)
    ps, pp = evaluator.evaluate(q, qp)
    return rate * ps + (1.0 - rate) * pp


def constraint_transfer(q, params: EnsembleParams, evals=None, method="exact"):
    """Edge-averaged constraint-side erasure rate f(q) for the ensemble."""
    if evals is None:
        evals = component_evaluators(params, method)
    q = np.asarray(q, dtype=np.float64)
    p1 = component_erasure(q, params.r1, evals[0]) if params.rho > 0 else 0.0
    p2 = component_erasure(q, params.r2, evals[1]) if params.rho < 1 else 0.0
    return params.rho * p1 + (1.0 - params.rho) * p2


@dataclass
class FixedPointResult:
    q: float
    converged: bool
    iterations: int


def de_fixed_point(eps, params, evals=None, method="exact", tol=1e-10,
                   max_iter=100000):
    """Iterate density evolution at channel erasure rate eps from q = eps.

    Returns the limit (or last iterate with converged=False if the tolerance
    was not reached within max_iter).
    """
    if evals is None:
        evals = component_evaluators(params, method)
    q = float(eps)
    for it in range(1, max_iter + 1):
        nxt = float(eps * constraint_transfer(q, params, evals))
        if abs(nxt - q) < tol:
            return FixedPointResult(nxt, True, it)
        q = nxt
    return FixedPointResult(q, False, max_iter)


def default_x_grid(n=2048):
    """Fixed-point grid on (0, 1]: geometric near zero, uniform above."""
    n_geo = max(8, int(round(n * 0.22)))
    geo = np.geomspace(1e-5, 0.05, n_geo)
    lin = np.linspace(0.05, 1.0, n - n_geo)
    return np.unique(np.concatenate([geo, lin]))


@dataclass
class ThresholdResult:
    params: EnsembleParams
    eps_bp: float
    x_bp: float
    eps_map: float | None = None
    exit_folds: int | None = None
    area_error: float | None = None
    method: str = "exact"
    warnings: tuple = ()

    def as_dict(self):
        d = dict(self.params.as_dict())
        d.update(
            eps_bp=self.eps_bp,
            x_bp=self.x_bp,
            eps_map=self.eps_map,
            exit_folds=self.exit_folds,
            area_error=self.area_error,
            method=self.method,
            warnings=list(self.warnings),
        )
        return d


@dataclass
class ExitCurve:
    """Samples of the fixed-point characteristic: channel parameter
    eps(x) = x / f(x) and EXIT value h(x) = f(x)^2 along fixed points x."""

    x: np.ndarray
    eps: np.ndarray
    h: np.ndarray
    params: EnsembleParams = None
    f: np.ndarray = field(default=None, repr=False)


def _eps_of_x(x, params, evals):
    f = constraint_transfer(x, params, evals)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = np.where(f > 0.0, x / np.maximum(f, 1e-300), np.inf)
    return eps, f


def bp_exit_curve(params, evals=None, method="exact", x_grid=None):
    if evals is None:
        evals = component_evaluators(params, method)
    x = default_x_grid() if x_grid is None else np.asarray(x_grid, dtype=np.float64)
    eps, f = _eps_of_x(x, params, evals)
    return ExitCurve(x=x, eps=eps, h=f * f, params=params, f=f)


def _golden_refine(fun, lo, hi, iters=60):
    """Scalar golden-section minimization of fun over [lo, hi]."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
        if b - a < 1e-10:
            break
    return (c, fc) if fc < fd else (d, fd)


def bp_threshold(params, evals=None, method="exact", x_grid=None,
                 cross_check=False):
    """BP threshold as the minimum of eps(x) = x / f(x) over (0, 1].

    The grid minimum is refined by golden-section search; with cross_check,
    a bisection on the density-evolution fixed point verifies the result and
    a disagreement beyond 1e-4 is recorded as a warning.
    """
    if evals is None:
        evals = component_evaluators(params, method)
    curve = bp_exit_curve(params, evals=evals, x_grid=x_grid)
    finite = np.isfinite(curve.eps)
    if not np.any(finite):
        raise AnalysisError("eps(x) not finite anywhere on the grid")
    i = int(np.nanargmin(np.where(finite, curve.eps, np.inf)))
    lo = curve.x[max(i - 1, 0)]
    hi = curve.x[min(i + 1, len(curve.x) - 1)]

    def eps_scalar(x):
        return float(_eps_of_x(np.array([x]), params, evals)[0][0])

    x_bp, eps_bp = _golden_refine(eps_scalar, lo, hi)
    if curve.eps[i] < eps_bp:
        x_bp, eps_bp = float(curve.x[i]), float(curve.eps[i])
    eps_bp = min(eps_bp, 1.0)
    warnings = ()
    if cross_check:
        eps_bis = _bp_threshold_bisection(params, evals)
        if abs(eps_bis - eps_bp) > 1e-4:
            warnings = (
                f"bisection cross-check disagrees: {eps_bis:.6f} vs {eps_bp:.6f}",
            )
    return ThresholdResult(
        params=params, eps_bp=float(eps_bp), x_bp=float(x_bp), method=method,
        warnings=warnings,
    )


def _bp_threshold_bisection(params, evals, tol=1e-7, zero_tol=1e-6):
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        res = de_fixed_point(mid, params, evals, tol=1e-12, max_iter=20000)
        if res.q < zero_tol:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _branch_area_tail(eps, h):
    """Running-max envelope of eps plus trapezoidal tail areas.

    tail[i] is the integral of h d(eps) from sample i to the end of the
    branch, along the monotone envelope. Returns (env, tail, folds).
    """
    env = np.maximum.accumulate(eps)
    drops = eps < env - 1e-12
    folds = int(np.count_nonzero(drops[1:] & ~drops[:-1]))
    seg = 0.5 * (h[1:] + h[:-1]) * np.diff(env)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    return env, tail, folds


def _eps_at_tail_area(env, h, tail, target):
    """Largest eps on the envelope whose tail area still reaches target.

    Returns None when even the full branch holds less than target. Within a
    sample cell the inverse is taken linearly in area.
    """
    idx = np.flatnonzero(tail >= target)
    if len(idx) == 0:
        return None
    i = int(idx[-1])
    if i == len(tail) - 1:
        return float(env[-1])
    a_hi, a_lo = tail[i], tail[i + 1]
    frac = 0.0 if a_hi <= a_lo else (a_hi - target) / (a_hi - a_lo)
    return float(env[i] + frac * (env[i + 1] - env[i]))


def map_threshold(params, threshold=None, evals=None, method="exact",
                  n_grid=16384, area_tol=1e-6):
    """MAP threshold from the EXIT-area equation.

    Integrates h d(eps) along the fixed-point branch above the BP point
    (non-monotone stretches are replaced by their running-max envelope and
    counted as folds). The area equation is solved to within area_tol; the
    reported threshold is the largest eps whose branch area stays within the
    tolerance band, which keeps the answer well defined even when the curve
    carries almost no area near its bottom. Raises InfeasibleError if the
    whole branch holds less area than the design rate.
    """
    from .ensemble import design_rate

    if evals is None:
        evals = component_evaluators(params, method)
    if threshold is None:
        threshold = bp_threshold(params, evals=evals, method=method)
    R = design_rate(params)
    x_bp = threshold.x_bp
    warnings = list(threshold.warnings)

    t = np.linspace(0.0, 1.0, n_grid)
    x = x_bp + (1.0 - x_bp) * t * t
    x[-1] = 1.0
    eps, f = _eps_of_x(x, params, evals)
    h = f * f
    if not np.all(np.isfinite(eps)):
        raise AnalysisError("eps(x) not finite on the integration branch")
    env, tail, folds = _branch_area_tail(eps, h)
    if folds:
        warnings.append(f"fixed-point curve folds {folds} time(s) above x_bp")
    eps_map = _eps_at_tail_area(env, h, tail, R - area_tol)
    if eps_map is None:
        raise InfeasibleError(
            f"EXIT area {float(tail[0]):.6f} below design rate {R:.6f}; "
            "no MAP threshold on this branch"
        )
    eps_map = max(eps_map, threshold.eps_bp)
    area_error = float(area_tol)
    return ThresholdResult(
        params=params,
        eps_bp=threshold.eps_bp,
        x_bp=threshold.x_bp,
        eps_map=eps_map,
        exit_folds=folds,
        area_error=area_error,
        method=method,
        warnings=tuple(warnings),
    )
