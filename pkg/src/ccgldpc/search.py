"""Exhaustive threshold search over the ensemble grid, plus sweep curves.

Stage 1 evaluates every grid point on a shared fixed-point grid in large
vectorized batches (all points of one memory pair at once per chunk),
producing preliminary BP thresholds (parabolic refinement of the grid
minimum) and preliminary MAP thresholds (trapezoidal area on the same
samples). Stage 2 re-evaluates the leading candidates, all points whose
preliminary objective lies within a fraction of the incumbent (capped), with
the full refined threshold routines. Chunking is fixed, so results do not
depend on the worker count.
"""

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .debec import ThresholdResult, bp_threshold, default_x_grid, map_threshold
from .ensemble import EnsembleParams, GridSpec, enumerate_grid, r2_for_target
from .errors import AnalysisError, InfeasibleError
from .transfer import get_transfer


def _quick_x_grid(n=768):
    return default_x_grid(n)


def _component_edge_erasure(ev, rate_col, x_row):
    """(C, nx) edge-averaged erasure of one component, rates per row."""
    C = rate_col.shape[0]
    nx = x_row.shape[0]
    keep = 1.0 / rate_col - 1.0
    qs = np.broadcast_to(x_row, (C, nx)).reshape(-1)
    qp = ((1.0 - keep)[:, None] + keep[:, None] * x_row[None, :]).reshape(-1)
    ps, pp = ev.evaluate(qs, qp)
    ps = ps.reshape(C, nx)
    pp = pp.reshape(C, nx)
    return rate_col[:, None] * ps + (1.0 - rate_col[:, None]) * pp


def _parabolic_min(x0, x1, x2, e0, e1, e2):
    """Vertex of the parabola through three samples; falls back to the
    middle sample when the fit is not convex or leaves the bracket."""
    d1 = (e1 - e0) / (x1 - x0)
    d2 = (e2 - e1) / (x2 - x1)
    a = (d2 - d1) / (x2 - x0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xv = 0.5 * (x0 + x1) - d1 / (2.0 * a)
    ev = e0 + d1 * (xv - x0) + a * (xv - x0) * (xv - x1)
    ok = (a > 0) & (xv > x0) & (xv < x2) & np.isfinite(ev) & (ev <= e1)
    return np.where(ok, xv, x1), np.where(ok, ev, e1)


def _chunk_thresholds(R, m1, m2, rho, r1, r2, method, x, area_tol):
    """Preliminary (eps_bp, x_bp, eps_map) for a chunk of same-memory points."""
    ev1 = get_transfer(m1, method)
    ev2 = get_transfer(m2, method)
    p1 = _component_edge_erasure(ev1, r1, x)
    p2 = _component_edge_erasure(ev2, r2, x)
    f = rho[:, None] * p1 + (1.0 - rho[:, None]) * p2
    nx = len(x)
    C = len(rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = np.where(f > 0.0, x[None, :] / np.maximum(f, 1e-300), np.inf)
    i = np.argmin(eps, axis=1)
    rows = np.arange(C)
    im = np.clip(i, 1, nx - 2)
    x_bp, eps_bp = _parabolic_min(
        x[im - 1], x[im], x[im + 1],
        eps[rows, im - 1], eps[rows, im], eps[rows, im + 1],
    )
    edge = i != im
    x_bp = np.where(edge, x[i], x_bp)
    eps_bp = np.where(edge, eps[rows, i], eps_bp)
    eps_bp = np.minimum(eps_bp, 1.0)

    # preliminary MAP: area equation on the branch at/above the minimum
    h = f * f
    on_branch = np.arange(nx)[None, :] >= i[:, None]
    emin = eps[rows, i][:, None]
    env = np.maximum.accumulate(np.where(on_branch, eps, -np.inf), axis=1)
    env = np.where(np.isfinite(env), env, emin)
    seg = 0.5 * (h[:, 1:] + h[:, :-1]) * np.diff(env, axis=1)
    tail = np.concatenate(
        [np.cumsum(seg[:, ::-1], axis=1)[:, ::-1], np.zeros((C, 1))], axis=1
    )
    target = R - area_tol
    rev = tail[:, ::-1] >= target
    jrev = rev.argmax(axis=1)
    feasible = rev[rows, jrev]
    k = nx - 1 - jrev
    k = np.minimum(k, nx - 2)
    a_hi = tail[rows, k]
    a_lo = tail[rows, k + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(a_hi > a_lo, (a_hi - target) / np.maximum(a_hi - a_lo, 1e-300), 0.0)
    eps_map = env[rows, k] + frac * (env[rows, k + 1] - env[rows, k])
    eps_map = np.where(feasible, np.maximum(eps_map, eps_bp), np.nan)
    return eps_bp, x_bp, eps_map


def _refine_worker(args):
    """Full-threshold recomputation for a batch of leaderboard candidates."""
    rows, method, area_tol = args
    out = []
    for (i, rho, r1, r2, m1, m2) in rows:
        p = EnsembleParams(rho, r1, r2, m1, m2)
        try:
            res = map_threshold(p, method=method, area_tol=area_tol)
            em = np.nan if res.eps_map is None else res.eps_map
            out.append((i, res.eps_bp, res.x_bp, em, None))
        except InfeasibleError:
            # BP value is still fine; the ensemble has no MAP solution on
            # the branch above the BP fixed point
            res = bp_threshold(p, method=method)
            out.append((i, res.eps_bp, res.x_bp, np.nan, None))
        except Exception as exc:
            out.append((i, np.nan, np.nan, np.nan, f"{type(exc).__name__}: {exc}"))
    return out


def _worker_chunk(args):
    (R, m1, m2, rho, r1, r2, method, x, area_tol, chunk_id) = args
    try:
        eps_bp, x_bp, eps_map = _chunk_thresholds(
            R, m1, m2, rho, r1, r2, method, x, area_tol
        )
        return chunk_id, eps_bp, x_bp, eps_map, []
    except Exception:
        # degrade to per-point evaluation so one bad point cannot sink a chunk
        n = len(rho)
        eps_bp = np.full(n, np.nan)
        x_bp = np.full(n, np.nan)
        eps_map = np.full(n, np.nan)
        failures = []
        for j in range(n):
            try:
                b, xb, m = _chunk_thresholds(
                    R, m1, m2, rho[j : j + 1], r1[j : j + 1], r2[j : j + 1],
                    method, x, area_tol,
                )
                eps_bp[j], x_bp[j], eps_map[j] = b[0], xb[0], m[0]
            except Exception as exc:
                failures.append((chunk_id, j, f"{type(exc).__name__}: {exc}"))
        return chunk_id, eps_bp, x_bp, eps_map, failures


@dataclass
class SearchResult:
    params: EnsembleParams
    thresholds: ThresholdResult
    objective_value: float
    rank: int


@dataclass
class GridSearchResult:
    """Arrays for every evaluated grid point plus the refined leaderboard."""

    R: float
    objective: str
    spec: GridSpec
    rho: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    eps_bp: np.ndarray
    eps_map: np.ndarray
    x_bp: np.ndarray
    refined: np.ndarray
    order: np.ndarray  # point indices, best objective first
    failures: list = field(default_factory=list)
    method: str = "tabulated"

    def __len__(self):
        return len(self.rho)

    def params_at(self, i):
        return EnsembleParams(
            float(self.rho[i]), float(self.r1[i]), float(self.r2[i]),
            int(self.m1[i]), int(self.m2[i]),
        )

    def result_at(self, i, rank):
        obj = self.eps_bp[i] if self.objective == "bp" else self.eps_map[i]
        th = ThresholdResult(
            params=self.params_at(i),
            eps_bp=float(self.eps_bp[i]),
            x_bp=float(self.x_bp[i]),
            eps_map=None if np.isnan(self.eps_map[i]) else float(self.eps_map[i]),
            method=self.method,
        )
        return SearchResult(th.params, th, float(obj), rank)

    def ranked(self, n=None):
        idx = self.order if n is None else self.order[:n]
        return [self.result_at(i, rank + 1) for rank, i in enumerate(idx)]

    def top(self):
        return self.result_at(self.order[0], 1)

    def iter_rows(self):
        for i in range(len(self.rho)):
            yield (
                float(self.rho[i]), float(self.r1[i]), float(self.r2[i]),
                int(self.m1[i]), int(self.m2[i]),
                float(self.eps_bp[i]),
                float(self.eps_map[i]) if not np.isnan(self.eps_map[i]) else float("nan"),
            )


def _rank_order(objective_vals, m1, m2, r1, r2, rho):
    key_obj = np.where(np.isnan(objective_vals), -np.inf, objective_vals)
    # lexsort: last key is primary
    return np.lexsort(
        (rho, np.abs(r1 - r2), (m1 + m2).astype(np.float64), -key_obj)
    )


def grid_search(R, spec: GridSpec = GridSpec(), objective="bp",
                method="tabulated", refine_frac=0.05, refine_cap=512,
                processes=None, chunk_size=2048, x_points=768,
                area_tol=1e-6, progress=None):
    """Evaluate every enumerate_grid point and rank by the objective.

    The leading candidates (within refine_frac of the incumbent preliminary
    objective, at most refine_cap points, at least the top 64) are recomputed
    with the refined threshold routines before final ranking.
    """
    if objective not in ("bp", "map"):
        raise ValueError("objective must be 'bp' or 'map'")
    points = list(enumerate_grid(R, spec))
    if not points:
        raise InfeasibleError("empty search grid")
    n = len(points)
    rho = np.array([p.rho for p in points])
    r1 = np.array([p.r1 for p in points])
    r2 = np.array([p.r2 for p in points])
    m1 = np.array([p.m1 for p in points], dtype=np.int64)
    m2 = np.array([p.m2 for p in points], dtype=np.int64)
    eps_bp = np.full(n, np.nan)
    x_bp = np.full(n, np.nan)
    eps_map = np.full(n, np.nan)
    refined = np.zeros(n, dtype=bool)

    # warm the evaluator caches before forking workers
    for m in sorted(set(m1.tolist()) | set(m2.tolist())):
        get_transfer(m, method)
    x = _quick_x_grid(x_points)

    # fixed chunking by memory pair keeps results worker-count independent
    tasks = []
    chunk_index = []
    for pair in sorted(set(zip(m1.tolist(), m2.tolist()))):
        sel = np.flatnonzero((m1 == pair[0]) & (m2 == pair[1]))
        for lo in range(0, len(sel), chunk_size):
            idx = sel[lo : lo + chunk_size]
            tasks.append(
                (
                    R, pair[0], pair[1],
                    rho[idx], r1[idx], r2[idx],
                    method, x, area_tol, len(tasks),
                )
            )
            chunk_index.append(idx)

    failures = []
    if processes is None:
        processes = min(mp.cpu_count(), 8)
    if processes > 1 and len(tasks) > 1:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=processes, mp_context=ctx) as pool:
            for cid, b, xb, m, fails in pool.map(_worker_chunk, tasks, chunksize=1):
                idx = chunk_index[cid]
                eps_bp[idx] = b
                x_bp[idx] = xb
                eps_map[idx] = m
                failures.extend(fails)
                if progress:
                    progress(cid + 1, len(tasks))
    else:
        for t in tasks:
            cid, b, xb, m, fails = _worker_chunk(t)
            idx = chunk_index[cid]
            eps_bp[idx] = b
            x_bp[idx] = xb
            eps_map[idx] = m
            failures.extend(fails)
            if progress:
                progress(cid + 1, len(tasks))

    obj = eps_bp if objective == "bp" else eps_map
    valid = ~np.isnan(obj)
    if not np.any(valid):
        raise AnalysisError("no grid point produced a threshold")
    incumbent = np.nanmax(obj)
    margin = refine_frac * incumbent
    cand = np.flatnonzero(valid & (obj >= incumbent - margin))
    cand = cand[np.argsort(-obj[cand], kind="stable")]
    top_floor = min(64, np.count_nonzero(valid))
    if len(cand) < top_floor:
        cand = np.argsort(-np.where(valid, obj, -np.inf), kind="stable")[:top_floor]
    cand = cand[:refine_cap]

    rows = [
        (int(i), float(rho[i]), float(r1[i]), float(r2[i]), int(m1[i]), int(m2[i]))
        for i in cand
    ]
    batches = [(rows[k : k + 16], method, area_tol) for k in range(0, len(rows), 16)]
    if processes > 1 and len(batches) > 1:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=processes, mp_context=ctx) as pool:
            refined_rows = [r for batch in pool.map(_refine_worker, batches) for r in batch]
    else:
        refined_rows = [r for batch in batches for r in _refine_worker(batch)]
    for i, b, xb, m, err in refined_rows:
        if err is not None:
            failures.append((-1, i, f"refine: {err}"))
            continue
        eps_bp[i] = b
        x_bp[i] = xb
        eps_map[i] = m
        refined[i] = True

    obj = eps_bp if objective == "bp" else eps_map
    order = _rank_order(obj, m1, m2, r1, r2, rho)
    return GridSearchResult(
        R=R, objective=objective, spec=spec,
        rho=rho, r1=r1, r2=r2, m1=m1, m2=m2,
        eps_bp=eps_bp, eps_map=eps_map, x_bp=x_bp, refined=refined,
        order=order, failures=failures, method=method,
    )


def sweep_rho(R, m1, m2, rho_grid=None, r1_equals_r2=True, r1=None,
              method="exact", with_map=True):
    """Thresholds along a rho grid at fixed component rates.

    With r1_equals_r2 both rates sit at the balanced value (R+1)/2 for every
    rho (Table-I style sweeps); otherwise r1 is held at the given value and
    r2 follows from the design rate, skipping infeasible rho.
    """
    rc = (R + 1.0) / 2.0
    if rho_grid is None:
        rho_grid = np.arange(0, 129) / 128.0
    out = []
    for rho in np.asarray(rho_grid, dtype=np.float64):
        if r1_equals_r2:
            p = EnsembleParams(float(rho), rc, rc, m1, m2)
        else:
            if r1 is None:
                raise ValueError("r1 must be given when r1_equals_r2 is off")
            try:
                r2 = r2_for_target(R, float(rho), float(r1))
            except (InfeasibleError, ValueError):
                continue
            p = EnsembleParams(float(rho), float(r1), r2, m1, m2)
        if with_map:
            out.append(map_threshold(p, method=method))
        else:
            out.append(bp_threshold(p, method=method))
    return out


def best_rho(sweep):
    """The sweep entry with the largest BP threshold."""
    return max(sweep, key=lambda t: t.eps_bp)


def sweep_r1(R, rho, m1, m2, r1_grid=None, method="exact", with_map=False):
    """BP threshold along an r1 grid at fixed rho (r2 from the design rate)."""
    rc = (R + 1.0) / 2.0
    if r1_grid is None:
        r1_grid = np.arange(rc, 1.0, 1.0 / 512)
    out = []
    for r1 in np.asarray(r1_grid, dtype=np.float64):
        if not (0.5 <= r1 < 1.0):
            continue
        try:
            r2 = r2_for_target(R, float(rho), float(r1))
        except (InfeasibleError, ValueError):
            continue
        p = EnsembleParams(float(rho), float(r1), r2, m1, m2)
        if with_map:
            out.append(map_threshold(p, method=method))
        else:
            out.append(bp_threshold(p, method=method))
    return out
