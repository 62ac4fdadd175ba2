"""Extrinsic erasure-rate transfer functions of RSC trellises on the BEC.

A constraint node running BCJR on the erasure channel is equivalent to
tracking, per trellis section, the set of states consistent with the
observations so far (forward) and with the future observations (backward).
Conditioned on the all-zero codeword, each section sees one of four
observation cases: systematic known / erased crossed with parity known /
erased. The consistent-state sets then evolve as a finite Markov chain on
subsets of trellis states, and the extrinsic erasure probabilities of the
systematic and parity bit positions are expectations of set-intersection
indicators under the stationary laws of the forward and backward chains.

`TransferFunction` computes those quantities exactly (linear solves for the
stationary vectors, batched over query points). `TabulatedTransfer` wraps an
interpolation table for the hot paths; `mc_transfer` estimates the same
quantities by direct windowed simulation of the set recursions and serves as
an independent numerical check.
"""

import os

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import AnalysisError
from .trellis import ComponentTrellis, GeneratorSpec, erasure_subset_tables

# columns of erasure_subset_tables for all-zero-codeword analysis, in case
# order (sys known, par known), (sys known, par erased),
# (sys erased, par known), (sys erased, par erased)
_CASE_COLS = (0, 2, 6, 8)

_DIRECT_SOLVE_MAX = 160  # class size above which power iteration is used


def case_weights(q_sys, q_par):
    """Probabilities of the four observation cases, shape (..., 4)."""
    q_sys = np.asarray(q_sys, dtype=np.float64)
    q_par = np.asarray(q_par, dtype=np.float64)
    return np.stack(
        [
            (1 - q_sys) * (1 - q_par),
            (1 - q_sys) * q_par,
            q_sys * (1 - q_par),
            q_sys * q_par,
        ],
        axis=-1,
    )


class SubsetChain:
    """Markov chain on subsets of trellis states under the four erasure cases.

    Subsets are integer bitmasks. The closure is generated from the all-states
    set and the zero-state singleton; every reachable subset contains the true
    (zero) state, so the empty set never appears.
    """

    def __init__(self, trellis: ComponentTrellis, forward=True):
        self.forward = forward
        self.num_states = trellis.num_states
        img = erasure_subset_tables(trellis)[:, list(_CASE_COLS)]
        self._img = img
        full = (1 << trellis.num_states) - 1
        seeds = [full, 1]
        seen = set(seeds)
        frontier = list(seeds)
        while frontier:
            nxt = []
            for mask in frontier:
                for c in range(4):
                    out = self._apply(mask, c)
                    if out not in seen:
                        seen.add(out)
                        nxt.append(out)
            frontier = nxt
        if 0 in seen:
            raise AnalysisError("empty consistent-state set reached; broken trellis")
        self.masks = np.array(sorted(seen), dtype=np.int64)
        self.index = {int(m): i for i, m in enumerate(self.masks)}
        n = len(self.masks)
        succ = np.zeros((n, 4), dtype=np.int64)
        for i, mask in enumerate(self.masks):
            for c in range(4):
                succ[i, c] = self.index[self._apply(int(mask), c)]
        self.succ = succ
        self.full_idx = self.index[full]
        self.zero_idx = self.index[1]
        self._interior_class = None

    def _apply(self, mask, case):
        img = self._img
        if self.forward:
            out = 0
            m = mask
            while m:
                low = m & -m
                out |= int(img[low.bit_length() - 1, case])
                m ^= low
            return out
        # backward: states whose consistent successors intersect mask
        out = 0
        for s in range(self.num_states):
            if img[s, case] & mask:
                out |= 1 << s
        return out

    def interior_class(self):
        """Indices of the unique recurrent class when all four cases have
        positive probability. Every subset reaches the all-states subset via
        repeated both-erased steps, so the class containing it is the unique
        terminal strongly connected component."""
        if self._interior_class is not None:
            return self._interior_class
        n = len(self.masks)
        rows = np.repeat(np.arange(n), 4)
        cols = self.succ.reshape(-1)
        adj = csr_matrix((np.ones(4 * n), (rows, cols)), shape=(n, n))
        ncomp, labels = connected_components(adj, directed=True, connection="strong")
        cls = labels[self.full_idx]
        members = np.flatnonzero(labels == cls)
        if np.any(labels[self.succ[members]] != cls):
            raise AnalysisError("recurrent subset class is not closed")
        self._interior_class = members
        return members

    def boundary_class(self, weights):
        """Recurrent class indices for a single boundary point (some case
        weights zero), following only positive-probability cases from the
        zero-state singleton. Raises if the reachable terminal class is not
        unique."""
        cases = [c for c in range(4) if weights[c] > 0.0]
        if not cases:
            raise AnalysisError("all observation-case weights are zero")
        n = len(self.masks)
        rows = np.repeat(np.arange(n), len(cases))
        cols = self.succ[:, cases].reshape(-1)
        adj = csr_matrix((np.ones(len(cases) * n), (rows, cols)), shape=(n, n))
        ncomp, labels = connected_components(adj, directed=True, connection="strong")
        # terminal components: no edges leaving the component
        terminal = np.ones(ncomp, dtype=bool)
        for c in cases:
            leave = labels[self.succ[:, c]] != labels
            terminal[labels[leave]] = False
        # reachability from the zero singleton
        reach = np.zeros(n, dtype=bool)
        stack = [self.zero_idx]
        reach[self.zero_idx] = True
        while stack:
            i = stack.pop()
            for c in cases:
                j = self.succ[i, c]
                if not reach[j]:
                    reach[j] = True
                    stack.append(j)
        hit = {int(l) for l in labels[reach] if terminal[l]}
        if len(hit) != 1:
            raise AnalysisError(
                "subset chain is not ergodic at this boundary point"
            )
        cls = hit.pop()
        return np.flatnonzero(labels == cls)

    def stationary(self, weights, members):
        """Stationary distributions over `members` for a batch of weight rows.

        weights: (G, 4); returns (G, len(members)).
        """
        weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        nc = len(members)
        remap = -np.ones(len(self.masks), dtype=np.int64)
        remap[members] = np.arange(nc)
        succ_local = remap[self.succ[members]]
        # a case whose transitions leave the class must have zero weight
        # everywhere (boundary points); zero its successors so indexing stays
        # valid and the contribution vanishes
        for c in range(4):
            bad = succ_local[:, c] < 0
            if np.any(bad):
                if np.any(weights[:, c] != 0.0):
                    raise AnalysisError("recurrent class not closed under transitions")
                succ_local = succ_local.copy()
                succ_local[bad, c] = 0
        if nc == 1:
            return np.ones((weights.shape[0], 1))
        if nc <= _DIRECT_SOLVE_MAX:
            return self._stationary_direct(weights, succ_local)
        return self._stationary_power(weights, succ_local)

    def _stationary_direct(self, weights, succ_local):
        G = weights.shape[0]
        nc = succ_local.shape[0]
        out = np.empty((G, nc))
        # chunk so the batched system stays within a few hundred MB
        chunk = max(1, min(G, int(4e7 // (nc * nc) + 1)))
        cols = np.arange(nc)
        eye = np.eye(nc)
        for lo in range(0, G, chunk):
            hi = min(G, lo + chunk)
            w = weights[lo:hi]
            g = hi - lo
            A = np.zeros((g, nc, nc))
            for c in range(4):
                A[:, succ_local[:, c], cols] += w[:, c][:, None]
            A -= eye
            A[:, -1, :] = 1.0
            b = np.zeros((g, nc, 1))
            b[:, -1, 0] = 1.0
            try:
                pi = np.linalg.solve(A, b)[..., 0]
            except np.linalg.LinAlgError:
                pi = np.stack(
                    [
                        np.linalg.lstsq(A[i], b[i], rcond=None)[0][:, 0]
                        for i in range(g)
                    ]
                )
            pi = np.clip(pi, 0.0, None)
            s = pi.sum(axis=1, keepdims=True)
            if np.any(s <= 0):
                raise AnalysisError("stationary solve produced a zero vector")
            out[lo:hi] = pi / s
        return out

    def _stationary_power(self, weights, succ_local, tol=1e-14, max_iter=20000):
        G = weights.shape[0]
        nc = succ_local.shape[0]
        mats = []
        for c in range(4):
            rows = succ_local[:, c]
            cols = np.arange(nc)
            mats.append(
                csr_matrix((np.ones(nc), (rows, cols)), shape=(nc, nc))
            )
        pi = np.full((nc, G), 1.0 / nc)
        w = weights.T  # (4, G)
        for it in range(max_iter):
            nxt = mats[0] @ pi * w[0]
            for c in range(1, 4):
                nxt += (mats[c] @ pi) * w[c]
            nxt /= nxt.sum(axis=0, keepdims=True)
            delta = np.abs(nxt - pi).max()
            pi = nxt
            if delta < tol:
                break
        else:
            raise AnalysisError("stationary power iteration did not converge")
        return pi.T


def _output_masks(trellis):
    """Per-subset successor masks entering the extrinsic indicators.

    For a forward set A (bitmask):
      d1     states δ(s,1), s in A                    (parity erased, sys=1?)
      d1p0   states δ(s,1), s in A, parity(s,1)=0     (parity observed zero)
      e1k    states δ(s,0), s in A, parity(s,0)=1     (sys observed zero)
      e1e    states δ(s,u), s in A, parity(s,u)=1     (sys erased)
    A systematic (resp. parity) extrinsic is erased iff the relevant mask
    intersects the backward alive set at the next section.
    """
    S = trellis.num_states
    per_state = np.zeros((S, 4), dtype=np.int64)
    for s in range(S):
        d1 = 1 << int(trellis.next_state[s, 1])
        d1p0 = d1 if trellis.parity[s, 1] == 0 else 0
        e1k = (1 << int(trellis.next_state[s, 0])) if trellis.parity[s, 0] == 1 else 0
        e1e = 0
        for u in (0, 1):
            if trellis.parity[s, u] == 1:
                e1e |= 1 << int(trellis.next_state[s, u])
        per_state[s] = (d1, d1p0, e1k, e1e)
    return per_state


def _fold_masks(per_state, masks):
    """OR the per-state masks over the member states of each subset."""
    out = np.zeros((len(masks), per_state.shape[1]), dtype=np.int64)
    for i, mask in enumerate(masks):
        m = int(mask)
        while m:
            low = m & -m
            out[i] |= per_state[low.bit_length() - 1]
            m ^= low
    return out


class TransferFunction:
    """Exact extrinsic erasure rates (p_sys, p_par) as functions of the input
    erasure rates (q_sys, q_par) for one terminated RSC mother code."""

    def __init__(self, gen: GeneratorSpec):
        if gen.memory > 6:
            raise AnalysisError("subset-chain analysis supports memory <= 6")
        self.generator = gen
        self.trellis = ComponentTrellis(gen)
        self.fwd = SubsetChain(self.trellis, forward=True)
        self.bwd = SubsetChain(self.trellis, forward=False)
        per_state = _output_masks(self.trellis)
        self._fwd_out = _fold_masks(per_state, self.fwd.masks)  # (nf, 4)
        self._bmasks = self.bwd.masks
        self._fc = self.fwd.interior_class()
        self._bc = self.bwd.interior_class()
        # indicator matrices restricted to the interior recurrent classes
        bm = self._bmasks[self._bc][None, :]
        self._M_int = [
            ((self._fwd_out[self._fc, k][:, None] & bm) != 0).astype(np.float64)
            for k in range(4)
        ]

    def closure_sizes(self):
        return {
            "forward": len(self.fwd.masks),
            "backward": len(self.bwd.masks),
            "forward_recurrent": len(self._fc),
            "backward_recurrent": len(self._bc),
        }

    def _bilinear(self, pf, pb, M):
        return np.einsum("gi,ij,gj->g", pf, M, pb, optimize=True)

    def _outputs(self, qs, qp, pf, pb, Ms):
        i_d1 = self._bilinear(pf, pb, Ms[0])
        i_d1p0 = self._bilinear(pf, pb, Ms[1])
        i_e1k = self._bilinear(pf, pb, Ms[2])
        i_e1e = self._bilinear(pf, pb, Ms[3])
        ps = qp * i_d1 + (1 - qp) * i_d1p0
        pp = (1 - qs) * i_e1k + qs * i_e1e
        return ps, pp

    def evaluate(self, q_sys, q_par):
        """Vectorized exact evaluation; returns (p_sys, p_par) broadcast to
        the common shape of the inputs."""
        qs, qp = np.broadcast_arrays(
            np.asarray(q_sys, dtype=np.float64), np.asarray(q_par, dtype=np.float64)
        )
        shape = qs.shape
        qs = qs.reshape(-1)
        qp = qp.reshape(-1)
        if np.any((qs < 0) | (qs > 1) | (qp < 0) | (qp > 1)):
            raise ValueError("erasure rates must lie in [0, 1]")
        ps = np.empty_like(qs)
        pp = np.empty_like(qs)
        w = case_weights(qs, qp)
        interior = np.all(w > 0.0, axis=-1)
        if np.any(interior):
            wi = w[interior]
            pf = self.fwd.stationary(wi, self._fc)
            pb = self.bwd.stationary(wi, self._bc)
            ps_i, pp_i = self._outputs(qs[interior], qp[interior], pf, pb, self._M_int)
            ps[interior] = ps_i
            pp[interior] = pp_i
        for idx in np.flatnonzero(~interior):
            ps[idx], pp[idx] = self._evaluate_boundary(qs[idx], qp[idx], w[idx])
        np.clip(ps, 0.0, 1.0, out=ps)
        np.clip(pp, 0.0, 1.0, out=pp)
        return ps.reshape(shape), pp.reshape(shape)

    def _evaluate_boundary(self, qs, qp, w):
        fc = self.fwd.boundary_class(w)
        bc = self.bwd.boundary_class(w)
        pf = self.fwd.stationary(w[None, :], fc)
        pb = self.bwd.stationary(w[None, :], bc)
        bm = self._bmasks[bc][None, :]
        Ms = [
            ((self._fwd_out[fc, k][:, None] & bm) != 0).astype(np.float64)
            for k in range(4)
        ]
        ps, pp = self._outputs(
            np.array([qs]), np.array([qp]), pf, pb, Ms
        )
        return float(ps[0]), float(pp[0])


def _default_ticks():
    """Interpolation knots: geometric refinement near zero (both outputs
    vanish on the axes, so relative accuracy needs resolution there) plus a
    uniform grid."""
    geo = np.geomspace(1e-6, 0.02, 140)
    lin = np.arange(513) / 512.0
    t = np.unique(np.concatenate([[0.0], geo, lin, [1.0]]))
    return t


class TabulatedTransfer:
    """Bicubic interpolation of a TransferFunction on a fixed knot grid.

    Queries near the (q_sys=0, q_par=1) corner are routed to the exact
    evaluator: the transfer functions jump there (the limit along q_par=1
    differs from the axis value) and no smooth fit is valid.
    """

    #: queries with q_sys below this or q_par above 1 - this go exact
    corner_guard = 0.005

    def __init__(self, tf: TransferFunction, ticks=None, batch=8192):
        self.exact = tf
        self.ticks = _default_ticks() if ticks is None else np.asarray(ticks)
        t = self.ticks
        QS, QP = np.meshgrid(t, t, indexing="ij")
        qs = QS.reshape(-1)
        qp = QP.reshape(-1)
        ps = np.empty_like(qs)
        pp = np.empty_like(qs)
        for lo in range(0, len(qs), batch):
            hi = min(len(qs), lo + batch)
            ps[lo:hi], pp[lo:hi] = tf.evaluate(qs[lo:hi], qp[lo:hi])
        n = len(t)
        self._sp_ps = RectBivariateSpline(t, t, ps.reshape(n, n), kx=3, ky=3, s=0)
        self._sp_pp = RectBivariateSpline(t, t, pp.reshape(n, n), kx=3, ky=3, s=0)

    @property
    def generator(self):
        return self.exact.generator

    def evaluate(self, q_sys, q_par):
        qs, qp = np.broadcast_arrays(
            np.asarray(q_sys, dtype=np.float64), np.asarray(q_par, dtype=np.float64)
        )
        shape = qs.shape
        qs = qs.reshape(-1)
        qp = qp.reshape(-1)
        g = self.corner_guard
        hard = (qs < g) & (qp > 1.0 - g)
        ps = self._sp_ps.ev(qs, qp)
        pp = self._sp_pp.ev(qs, qp)
        if np.any(hard):
            ps[hard], pp[hard] = self.exact.evaluate(qs[hard], qp[hard])
        np.clip(ps, 0.0, 1.0, out=ps)
        np.clip(pp, 0.0, 1.0, out=pp)
        return ps.reshape(shape), pp.reshape(shape)


_EXACT_CACHE = {}
_TAB_CACHE = {}


def get_transfer(gen_or_memory, method="exact"):
    """Shared per-generator evaluators. `method` is 'exact' or 'tabulated'."""
    if isinstance(gen_or_memory, GeneratorSpec):
        gen = gen_or_memory
    else:
        gen = GeneratorSpec.from_memory(int(gen_or_memory))
    key = gen.octal
    if key not in _EXACT_CACHE:
        _EXACT_CACHE[key] = TransferFunction(gen)
    if method == "exact":
        return _EXACT_CACHE[key]
    if method != "tabulated":
        raise ValueError(f"unknown transfer method {method!r}")
    if key not in _TAB_CACHE:
        _TAB_CACHE[key] = _load_or_build_table(gen, _EXACT_CACHE[key])
    return _TAB_CACHE[key]


def _cache_dir():
    root = os.environ.get("CCGLDPC_CACHE")
    if root is None:
        root = os.path.join(
            os.environ.get("XDG_CACHE_HOME", os.path.expanduser("~/.cache")),
            "ccgldpc",
        )
    return root


def _load_or_build_table(gen, tf):
    ticks = _default_ticks()
    path = os.path.join(
        _cache_dir(), f"transfer_{gen.octal[0]}_{gen.octal[1]}_v1.npz"
    )
    if os.path.exists(path):
        try:
            data = np.load(path)
            if data["ticks"].shape == ticks.shape and np.allclose(
                data["ticks"], ticks
            ):
                tab = TabulatedTransfer.__new__(TabulatedTransfer)
                tab.exact = tf
                tab.ticks = ticks
                n = len(ticks)
                tab._sp_ps = RectBivariateSpline(
                    ticks, ticks, data["ps"].reshape(n, n), kx=3, ky=3, s=0
                )
                tab._sp_pp = RectBivariateSpline(
                    ticks, ticks, data["pp"].reshape(n, n), kx=3, ky=3, s=0
                )
                return tab
        except Exception:
            pass
    tab = TabulatedTransfer(tf, ticks)
    try:
        os.makedirs(_cache_dir(), exist_ok=True)
        n = len(ticks)
        qs = np.repeat(ticks, n)
        qp = np.tile(ticks, n)
        ps = tab._sp_ps.ev(qs, qp)
        pp = tab._sp_pp.ev(qs, qp)
        np.savez_compressed(path, ticks=ticks, ps=ps, pp=pp)
    except OSError:
        pass
    return tab


def _full_mask_tables(trellis):
    """Lookup tables over raw subset bitmasks for simulation.

    Returns (fwd_tab, bwd_tab, out_tab) where fwd_tab/bwd_tab are
    (2^S, 4) successor masks and out_tab is (2^S, 4) with the d1, d1p0,
    e1k, e1e masks of each subset.
    """
    S = trellis.num_states
    if S > 16:
        raise AnalysisError("mask-table simulation supports at most 16 states")
    img = erasure_subset_tables(trellis)[:, list(_CASE_COLS)]
    nm = 1 << S
    per_state_out = _output_masks(trellis)
    fwd = np.zeros((nm, 4), dtype=np.int64)
    out = np.zeros((nm, 4), dtype=np.int64)
    for mask in range(1, nm):
        low = mask & -mask
        rest = mask ^ low
        s = low.bit_length() - 1
        fwd[mask] = fwd[rest] | img[s]
        out[mask] = out[rest] | per_state_out[s]
    masks_arr = np.arange(nm, dtype=np.int64)
    bwd = np.zeros((nm, 4), dtype=np.int64)
    bits = 1 << np.arange(S, dtype=np.int64)
    for c in range(4):
        alive = (img[:, c][:, None] & masks_arr[None, :]) != 0  # (S, nm)
        bwd[:, c] = (alive * bits[:, None]).sum(axis=0)
    return fwd, bwd, out


def mc_transfer(gen, q_sys, q_par, window_sections=2_000_000, seed=0):
    """Monte-Carlo estimate of (p_sys, p_par) with batch-means standard errors.

    Simulates the forward and backward consistent-set recursions over many
    independent windows and counts extrinsic erasures in the window interiors.
    Returns (p_sys, p_par, se_sys, se_par).
    """
    if isinstance(gen, GeneratorSpec):
        trellis = ComponentTrellis(gen)
    elif isinstance(gen, ComponentTrellis):
        trellis = gen
    else:
        trellis = ComponentTrellis(GeneratorSpec.from_memory(int(gen)))
    fwd_tab, bwd_tab, out_tab = _full_mask_tables(trellis)
    L = 4096
    burn = 128
    W = int(np.clip(round(window_sections / L), 8, 1024))
    rng = np.random.default_rng(seed)
    sys_erased = rng.random((L, W)) < q_sys
    par_erased = rng.random((L, W)) < q_par
    cases = (2 * sys_erased + par_erased).astype(np.int64)
    a = np.full(W, 1, dtype=np.int64)
    a_hist = np.empty((L + 1, W), dtype=np.int64)
    a_hist[0] = a
    for t in range(L):
        a = fwd_tab[a, cases[t]]
        a_hist[t + 1] = a
    b = np.full(W, 1, dtype=np.int64)
    b_hist = np.empty((L + 1, W), dtype=np.int64)
    b_hist[L] = b
    for t in range(L - 1, -1, -1):
        b = bwd_tab[b, cases[t]]
        b_hist[t] = b
    A = a_hist[:-1]  # set entering section t
    B = b_hist[1:]  # alive set after section t
    d_sel = np.where(par_erased, out_tab[A, 0], out_tab[A, 1])
    e_sel = np.where(sys_erased, out_tab[A, 3], out_tab[A, 2])
    sys_hit = ((d_sel & B) != 0)[burn : L - burn]
    par_hit = ((e_sel & B) != 0)[burn : L - burn]
    ws = sys_hit.mean(axis=0)
    wp = par_hit.mean(axis=0)
    se_s = ws.std(ddof=1) / np.sqrt(W)
    se_p = wp.std(ddof=1) / np.sqrt(W)
    return float(ws.mean()), float(wp.mean()), float(se_s), float(se_p)
