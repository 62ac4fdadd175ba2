"""Iterative BP decoding with exact forward-backward component decoders.

BEC messages are tristate (0, 1, 2 = erased) and the component decoder
propagates sets of reachable trellis states encoded as bit masks, which is
the exact erasure-channel BCJR. AWGN messages are LLRs with the convention
L = log P(bit=0) - log P(bit=1), and the component decoder is the exact
log-domain forward-backward recursion with logaddexp combining.

Frames are decoded in lockstep batches: every per-section operation is
vectorized across the batch, and finished frames are compacted away.
"""

from dataclasses import dataclass, field

import numpy as np

from .trellis import ComponentTrellis, GeneratorSpec, erasure_subset_tables

ERASED = 2

_BEC_TABLE_CACHE = {}
_TRELLIS_CACHE = {}


def _trellis_for(gen):
    t = _TRELLIS_CACHE.get(gen.octal)
    if t is None:
        t = ComponentTrellis(gen)
        _TRELLIS_CACHE[gen.octal] = t
    return t


def _mask_dp(per_state):
    """OR-combine per-state masks over all subsets: table[mask] for 2^S masks.

    per_state has shape (S, ncols); the result has shape (2^S, ncols).
    """
    S, ncols = per_state.shape
    out = np.zeros((1 << S, ncols), dtype=np.uint32)
    for mask in range(1, 1 << S):
        low = mask & -mask
        out[mask] = out[mask ^ low] | per_state[low.bit_length() - 1]
    return out


def bec_tables(gen):
    """Mask-transition tables for the erasure-channel component decoder."""
    key = gen.octal
    cached = _BEC_TABLE_CACHE.get(key)
    if cached is not None:
        return cached
    tr = _trellis_for(gen)
    S = tr.num_states
    img = erasure_subset_tables(tr)  # (S, 9) successor masks per obs case

    fwd = _mask_dp(img.astype(np.uint32))
    # backward: states whose image under the case intersects the mask
    bwd = np.zeros((1 << S, 9), dtype=np.uint32)
    masks = np.arange(1 << S, dtype=np.uint32)
    for s in range(S):
        hit = (img[s][None, :] & masks[:, None]) != 0
        bwd |= hit.astype(np.uint32) << s

    # input-conditioned successor masks, screened by the parity observation
    to_u = np.zeros((2, S, 3), dtype=np.uint32)
    for s in range(S):
        for u in (0, 1):
            ns = int(tr.next_state[s, u])
            pb = int(tr.parity[s, u])
            for cp in range(3):
                if cp == ERASED or cp == pb:
                    to_u[u, s, cp] |= np.uint32(1 << ns)
    to_u0 = _mask_dp(to_u[0])
    to_u1 = _mask_dp(to_u[1])

    # parity-conditioned successor masks, screened by the systematic observation
    to_p = np.zeros((2, S, 3), dtype=np.uint32)
    for s in range(S):
        for u in (0, 1):
            ns = int(tr.next_state[s, u])
            pb = int(tr.parity[s, u])
            for cs in range(3):
                if cs == ERASED or cs == u:
                    to_p[pb, s, cs] |= np.uint32(1 << ns)
    to_p0 = _mask_dp(to_p[0])
    to_p1 = _mask_dp(to_p[1])

    # termination sections: single branch per state forcing the register to 0
    img_tail = np.zeros((S, 9), dtype=np.uint32)
    tail_u = np.zeros((2, S, 3), dtype=np.uint32)
    tail_p = np.zeros((2, S, 3), dtype=np.uint32)
    for s in range(S):
        u = int(tr.termination_input(s))
        ns = int(tr.next_state[s, u])
        pb = int(tr.parity[s, u])
        for cs in range(3):
            for cp in range(3):
                if (cs == ERASED or cs == u) and (cp == ERASED or cp == pb):
                    img_tail[s, 3 * cs + cp] |= np.uint32(1 << ns)
        for cp in range(3):
            if cp == ERASED or cp == pb:
                tail_u[u, s, cp] |= np.uint32(1 << ns)
        for cs in range(3):
            if cs == ERASED or cs == u:
                tail_p[pb, s, cs] |= np.uint32(1 << ns)
    fwd_tail = _mask_dp(img_tail)
    bwd_tail = np.zeros((1 << S, 9), dtype=np.uint32)
    for s in range(S):
        hit = (img_tail[s][None, :] & masks[:, None]) != 0
        bwd_tail |= hit.astype(np.uint32) << s

    cached = dict(
        fwd=fwd, bwd=bwd, to_u0=to_u0, to_u1=to_u1, to_p0=to_p0, to_p1=to_p1,
        fwd_tail=fwd_tail, bwd_tail=bwd_tail, S=S,
        tail_u0=_mask_dp(tail_u[0]), tail_u1=_mask_dp(tail_u[1]),
        tail_p0=_mask_dp(tail_p[0]), tail_p1=_mask_dp(tail_p[1]),
    )
    _BEC_TABLE_CACHE[key] = cached
    return cached


def bec_bcjr(gen, sys_codes, par_codes, tail_sections=None):
    """Exact erasure-channel extrinsics for a batch of terminated trellises.

    sys_codes, par_codes: (B, L) int arrays with values {0, 1, 2=erased};
    the trailing tail_sections columns (default: the generator memory) are
    termination sections whose inputs are forced rather than free.
    Returns (ext_sys, ext_par, bad) where extrinsics are {0,1,2} and bad
    flags frames whose observations contradict the trellis constraint.
    """
    tb = bec_tables(gen)
    m = gen.memory if tail_sections is None else tail_sections
    sys_codes = np.atleast_2d(np.asarray(sys_codes, dtype=np.int64))
    par_codes = np.atleast_2d(np.asarray(par_codes, dtype=np.int64))
    B, L = sys_codes.shape
    body = L - m
    case = 3 * sys_codes + par_codes

    A = np.empty((B, L + 1), dtype=np.uint32)
    A[:, 0] = 1  # start in state 0
    fwd, fwd_tail = tb["fwd"], tb["fwd_tail"]
    for t in range(L):
        table = fwd if t < body else fwd_tail
        A[:, t + 1] = table[A[:, t], case[:, t]]
    Bm = np.empty((B, L + 1), dtype=np.uint32)
    Bm[:, L] = 1  # terminated in state 0
    bwd, bwd_tail = tb["bwd"], tb["bwd_tail"]
    for t in range(L - 1, -1, -1):
        table = bwd if t < body else bwd_tail
        Bm[:, t] = table[Bm[:, t + 1], case[:, t]]

    bad = (A[:, L] & 1) == 0
    ext_sys = np.full((B, L), ERASED, dtype=np.int8)
    ext_par = np.full((B, L), ERASED, dtype=np.int8)
    if body:
        Ab = A[:, :body]
        Bb = Bm[:, 1 : body + 1]
        cp = par_codes[:, :body]
        cs = sys_codes[:, :body]
        r0 = (tb["to_u0"][Ab, cp] & Bb) != 0
        r1 = (tb["to_u1"][Ab, cp] & Bb) != 0
        ext_sys[:, :body] = np.where(r0 & r1, ERASED, np.where(r1, 1, 0)).astype(np.int8)
        bad |= np.any(~(r0 | r1), axis=1)
        q0 = (tb["to_p0"][Ab, cs] & Bb) != 0
        q1 = (tb["to_p1"][Ab, cs] & Bb) != 0
        ext_par[:, :body] = np.where(q0 & q1, ERASED, np.where(q1, 1, 0)).astype(np.int8)
        bad |= np.any(~(q0 | q1), axis=1)
    if m:
        At = A[:, body:L]
        Bt = Bm[:, body + 1 :]
        cp = par_codes[:, body:]
        cs = sys_codes[:, body:]
        r0 = (tb["tail_u0"][At, cp] & Bt) != 0
        r1 = (tb["tail_u1"][At, cp] & Bt) != 0
        ext_sys[:, body:] = np.where(r0 & r1, ERASED, np.where(r1, 1, 0)).astype(np.int8)
        bad |= np.any(~(r0 | r1), axis=1)
        q0 = (tb["tail_p0"][At, cs] & Bt) != 0
        q1 = (tb["tail_p1"][At, cs] & Bt) != 0
        ext_par[:, body:] = np.where(q0 & q1, ERASED, np.where(q1, 1, 0)).astype(np.int8)
        bad |= np.any(~(q0 | q1), axis=1)
    return ext_sys, ext_par, bad


def _awgn_arrays(gen):
    key = (gen.octal, "awgn")
    cached = _TRELLIS_CACHE.get(key)
    if cached is not None:
        return cached
    tr = _trellis_for(gen)
    S = tr.num_states
    # incoming branches per state: exactly two (state, input) pairs
    in_state = np.zeros((S, 2), dtype=np.int64)
    in_u = np.zeros((S, 2), dtype=np.int64)
    fill = np.zeros(S, dtype=np.int64)
    for s in range(S):
        for u in (0, 1):
            ns = int(tr.next_state[s, u])
            in_state[ns, fill[ns]] = s
            in_u[ns, fill[ns]] = u
            fill[ns] += 1
    assert np.all(fill == 2)
    in_par = tr.parity[in_state, in_u]
    next_state = tr.next_state.astype(np.int64)
    parity = tr.parity.astype(np.int64)
    tail_u = np.array([int(tr.termination_input(s)) for s in range(S)])
    tail_ns = next_state[np.arange(S), tail_u]
    tail_par = parity[np.arange(S), tail_u]
    cached = dict(
        S=S, in_state=in_state, in_u=in_u, in_par=in_par,
        next_state=next_state, parity=parity,
        tail_u=tail_u, tail_ns=tail_ns, tail_par=tail_par,
    )
    _TRELLIS_CACHE[key] = cached
    return cached


NEG_INF = -np.inf


LLR_MAX = 1e9


def awgn_bcjr(gen, sys_llr, par_llr, tail_sections=None):
    """Exact log-domain forward-backward extrinsics, batched over frames.

    sys_llr, par_llr: (B, L) arrays of prior LLRs (log P0 - log P1);
    punctured positions carry 0. The last tail_sections columns are forced
    termination steps. Returns (ext_sys, ext_par) extrinsic LLRs.
    """
    ar = _awgn_arrays(gen)
    m = gen.memory if tail_sections is None else tail_sections
    sys_llr = np.clip(np.atleast_2d(np.asarray(sys_llr, dtype=np.float64)), -LLR_MAX, LLR_MAX)
    par_llr = np.clip(np.atleast_2d(np.asarray(par_llr, dtype=np.float64)), -LLR_MAX, LLR_MAX)
    B, L = sys_llr.shape
    body = L - m
    S = ar["S"]
    in_state, in_u, in_par = ar["in_state"], ar["in_u"], ar["in_par"]
    ns_all, par_all = ar["next_state"], ar["parity"]
    tail_u, tail_ns, tail_par = ar["tail_u"], ar["tail_ns"], ar["tail_par"]

    # branch metric for bit value b under prior L is -b*L; per-section
    # constants cancel in the extrinsic differences
    alpha = np.empty((B, L + 1, S))
    alpha[:, 0, :] = NEG_INF
    alpha[:, 0, 0] = 0.0
    for t in range(L):
        Ls = sys_llr[:, t][:, None]
        Lp = par_llr[:, t][:, None]
        a = alpha[:, t, :]
        if t < body:
            a0 = a[:, in_state[:, 0]] - in_u[:, 0] * Ls - in_par[:, 0] * Lp
            a1 = a[:, in_state[:, 1]] - in_u[:, 1] * Ls - in_par[:, 1] * Lp
            nxt = np.logaddexp(a0, a1)
        else:
            contrib = a - tail_u * Ls - tail_par * Lp
            nxt = np.full((B, S), NEG_INF)
            for s in range(S):
                d = tail_ns[s]
                nxt[:, d] = np.logaddexp(nxt[:, d], contrib[:, s])
        with np.errstate(invalid="ignore"):
            nxt = nxt - np.max(nxt, axis=1, keepdims=True)
        alpha[:, t + 1, :] = nxt

    beta = np.empty((B, L + 1, S))
    beta[:, L, :] = NEG_INF
    beta[:, L, 0] = 0.0
    for t in range(L - 1, -1, -1):
        Ls = sys_llr[:, t][:, None]
        Lp = par_llr[:, t][:, None]
        b_next = beta[:, t + 1, :]
        if t < body:
            b0 = b_next[:, ns_all[:, 0]] - par_all[:, 0] * Lp
            b1 = b_next[:, ns_all[:, 1]] - 1.0 * Ls - par_all[:, 1] * Lp
            cur = np.logaddexp(b0, b1)
        else:
            cur = b_next[:, tail_ns] - tail_u * Ls - tail_par * Lp
        with np.errstate(invalid="ignore"):
            cur = cur - np.max(cur, axis=1, keepdims=True)
        beta[:, t, :] = cur

    ext_sys = np.empty((B, L))
    ext_par = np.empty((B, L))
    lse = np.logaddexp.reduce
    if body:
        A = alpha[:, :body, :]                      # (B, T, S)
        Bn = beta[:, 1 : body + 1, :]
        Lp = par_llr[:, :body, None]
        Ls = sys_llr[:, :body, None]
        n0 = A - par_all[None, None, :, 0] * Lp + Bn[:, :, ns_all[:, 0]]
        n1 = A - par_all[None, None, :, 1] * Lp + Bn[:, :, ns_all[:, 1]]
        ext_sys[:, :body] = lse(n0, axis=2) - lse(n1, axis=2)
        # parity extrinsic: same branches, sys prior in, parity prior out
        g0 = A + Bn[:, :, ns_all[:, 0]]             # u = 0 branches
        g1 = A - Ls + Bn[:, :, ns_all[:, 1]]        # u = 1 branches
        p0_is1 = par_all[:, 0].astype(bool)
        p1_is1 = par_all[:, 1].astype(bool)
        m0 = np.concatenate(
            [np.where(p0_is1, NEG_INF, g0), np.where(p1_is1, NEG_INF, g1)], axis=2
        )
        m1 = np.concatenate(
            [np.where(p0_is1, g0, NEG_INF), np.where(p1_is1, g1, NEG_INF)], axis=2
        )
        ext_par[:, :body] = lse(m0, axis=2) - lse(m1, axis=2)
    for t in range(body, L):
        Ls = sys_llr[:, t][:, None]
        Lp = par_llr[:, t][:, None]
        g = alpha[:, t, :] + beta[:, t + 1, :][:, tail_ns]
        u_is1 = tail_u.astype(bool)
        p_is1 = tail_par.astype(bool)
        gp = g - tail_par * Lp
        ext_sys[:, t] = lse(np.where(u_is1, NEG_INF, gp), axis=1) - lse(
            np.where(u_is1, gp, NEG_INF), axis=1
        )
        gs = g - tail_u * Ls
        ext_par[:, t] = lse(np.where(p_is1, NEG_INF, gs), axis=1) - lse(
            np.where(p_is1, gs, NEG_INF), axis=1
        )
    return ext_sys, ext_par


def bec_vn_update(ch, other):
    """Degree-2 VN rule on the erasure channel: pass along anything known."""
    ch = np.asarray(ch)
    other = np.asarray(other)
    return np.where(ch != ERASED, ch, other)


def awgn_vn_update(ch, other):
    """Degree-2 VN rule on the AWGN channel: add the LLRs."""
    return np.asarray(ch, dtype=np.float64) + np.asarray(other, dtype=np.float64)


@dataclass
class DecodeResult:
    decoded: np.ndarray          # (B, n) hard decisions; BEC: 2 = unresolved
    converged: np.ndarray        # (B,) bool
    iterations: np.ndarray       # (B,) int
    failure: np.ndarray          # (B,) bool: contradiction observed
    residual: np.ndarray = None  # (B,) final unresolved VN count (BEC)
    history: list = field(default_factory=list)

    def single(self):
        """View of the first frame, for one-frame decode calls."""
        return DecodeResult(
            self.decoded[0], bool(self.converged[0]), int(self.iterations[0]),
            bool(self.failure[0]),
            None if self.residual is None else int(self.residual[0]),
            [int(h[0]) for h in self.history] if self.history else [],
        )


def _decoder_index(code):
    """Flat socket layout for a lifted code, cached on the code object.

    Slots are ordered trellis 0 systematic, trellis 0 kept parities (by
    section), then trellis 1 likewise; other_slot pairs the two sockets of
    each VN.
    """
    idx = getattr(code, "_decoder_index", None)
    if idx is not None:
        return idx
    slot_sys = []
    slot_par = []
    vn_of_slot = []
    base = 0
    for j in range(2):
        L = len(code.sys_vn[j])
        ss = base + np.arange(L, dtype=np.int64)
        vn_of_slot.append(code.sys_vn[j])
        base += L
        kept = code.par_vn[j] >= 0
        sp = np.full(L, -1, dtype=np.int64)
        sp[kept] = base + np.arange(int(kept.sum()), dtype=np.int64)
        vn_of_slot.append(code.par_vn[j][kept])
        base += int(kept.sum())
        slot_sys.append(ss)
        slot_par.append(sp)
    vn_of_slot = np.concatenate(vn_of_slot)
    assert base == 2 * code.n and len(vn_of_slot) == 2 * code.n
    order = np.argsort(vn_of_slot, kind="stable").reshape(-1, 2)
    other = np.empty(2 * code.n, dtype=np.int64)
    other[order[:, 0]] = order[:, 1]
    other[order[:, 1]] = order[:, 0]
    idx = dict(
        slot_sys=slot_sys, slot_par=slot_par, vn_of_slot=vn_of_slot,
        other=other, vn_slots=order,
    )
    code._decoder_index = idx
    return idx


def _tail_obs(code, obs, j):
    """(sys, par) tail observation columns of trellis j, (B, m_j) each."""
    o = code.tail_offsets()
    lo, hi = (o[0], o[1]) if j == 0 else (o[1], o[2])
    block = obs[:, lo:hi]
    return block[:, 0::2], block[:, 1::2]


def decode_bec(code, obs, max_iter=100, trace=False):
    """Iterative BP over a lifted code on the erasure channel.

    obs: (B, transmit_length) or (transmit_length,) tristate array.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.int8))
    B, n_tx = obs.shape
    assert n_tx == code.transmit_length
    idx = _decoder_index(code)
    n = code.n
    ch = obs[:, :n]

    ext = np.full((B, 2 * n), ERASED, dtype=np.int8)
    active = np.arange(B)
    iterations = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    failure = np.zeros(B, dtype=bool)
    residual = np.full(B, n, dtype=np.int64)
    history = []
    prev_known = np.full(B, -1, dtype=np.int64)

    ch_slot = ch[:, idx["vn_of_slot"]]
    for it in range(1, max_iter + 1):
        if len(active) == 0:
            break
        msg = np.where(ch_slot[active] != ERASED, ch_slot[active], ext[active][:, idx["other"]])
        bad = np.zeros(len(active), dtype=bool)
        new_ext = ext[active]
        for j in range(2):
            if len(code.sys_vn[j]) == 0:
                continue
            gen = code.gens[j]
            tail_s, tail_p = _tail_obs(code, obs[active], j)
            sys_codes = np.concatenate([msg[:, idx["slot_sys"][j]], tail_s], axis=1)
            sp = idx["slot_par"][j]
            kept = sp >= 0
            par_body = np.full((len(active), len(sp)), ERASED, dtype=np.int8)
            par_body[:, kept] = msg[:, sp[kept]]
            par_codes = np.concatenate([par_body, tail_p], axis=1)
            es, ep, bj = bec_bcjr(gen, sys_codes, par_codes)
            body = len(sp)
            new_ext[:, idx["slot_sys"][j]] = es[:, :body]
            new_ext[:, sp[kept]] = ep[:, :body][:, kept]
            bad |= bj
        ext[active] = new_ext
        failure[active] |= bad

        pair_ext = new_ext[:, idx["vn_slots"]]  # (b, n, 2)
        known = (ch[active] != ERASED) | (pair_ext != ERASED).any(axis=2)
        resid = n - known.sum(axis=1)
        residual[active] = resid
        iterations[active] = it
        if trace:
            snap = residual.copy()
            history.append(snap)
        known_msgs = (new_ext != ERASED).sum(axis=1) + known.sum(axis=1)
        done = (resid == 0) | (known_msgs == prev_known[active]) | bad
        converged[active] |= resid == 0
        prev_known[active] = known_msgs
        active = active[~done]

    pair_ext = ext[:, idx["vn_slots"]]
    e0, e1 = pair_ext[:, :, 0], pair_ext[:, :, 1]
    decoded = np.where(ch != ERASED, ch, np.where(e0 != ERASED, e0, e1)).astype(np.int8)
    failure |= np.any(
        (e0 != ERASED) & (e1 != ERASED) & (e0 != e1), axis=1
    ) | np.any((ch != ERASED) & (e0 != ERASED) & (ch != e0), axis=1)
    return DecodeResult(decoded, converged, iterations, failure, residual, history)


def _check_constraints(code, bits):
    """Do hard decisions satisfy both trellis constraints on kept parities?"""
    B = bits.shape[0]
    ok = np.ones(B, dtype=bool)
    for j in range(2):
        L = len(code.sys_vn[j])
        if L == 0:
            continue
        tr = _trellis_for(code.gens[j])
        u = bits[:, code.sys_vn[j]]
        kept = code.par_vn[j] >= 0
        p_hat = np.empty((B, L), dtype=np.int8)
        s = np.zeros(B, dtype=np.int64)
        for t in range(L):
            ut = u[:, t]
            p_hat[:, t] = tr.parity[s, ut]
            s = tr.next_state[s, ut]
        ok &= np.all(
            p_hat[:, kept] == bits[:, code.par_vn[j][kept]], axis=1
        )
    return ok


def decode_awgn(code, obs, max_iter=100):
    """Iterative BP over a lifted code with AWGN channel LLRs.

    obs: (B, transmit_length) or (transmit_length,) array of channel LLRs
    (log P0 - log P1, i.e. 2y/sigma^2 for BPSK mapping 0 -> +1).
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    B, n_tx = obs.shape
    assert n_tx == code.transmit_length
    idx = _decoder_index(code)
    n = code.n
    ch = obs[:, :n]

    ext = np.zeros((B, 2 * n))
    active = np.arange(B)
    iterations = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    decoded = np.zeros((B, n), dtype=np.int8)
    ch_slot = ch[:, idx["vn_of_slot"]]

    for it in range(1, max_iter + 1):
        if len(active) == 0:
            break
        msg = ch_slot[active] + ext[active][:, idx["other"]]
        new_ext = ext[active]
        for j in range(2):
            if len(code.sys_vn[j]) == 0:
                continue
            gen = code.gens[j]
            tail_s, tail_p = _tail_obs(code, obs[active], j)
            sys_llr = np.concatenate([msg[:, idx["slot_sys"][j]], tail_s], axis=1)
            sp = idx["slot_par"][j]
            kept = sp >= 0
            par_body = np.zeros((len(active), len(sp)))
            par_body[:, kept] = msg[:, sp[kept]]
            par_llr = np.concatenate([par_body, tail_p], axis=1)
            es, ep = awgn_bcjr(gen, sys_llr, par_llr)
            body = len(sp)
            new_ext[:, idx["slot_sys"][j]] = es[:, :body]
            new_ext[:, sp[kept]] = ep[:, :body][:, kept]
        ext[active] = new_ext

        pair_ext = new_ext[:, idx["vn_slots"]]
        total = ch[active] + pair_ext.sum(axis=2)
        bits = (total < 0).astype(np.int8)
        decoded[active] = bits
        iterations[active] = it
        ok = _check_constraints(code, bits)
        converged[active] |= ok
        active = active[~ok]

    return DecodeResult(decoded, converged, iterations,
                        np.zeros(B, dtype=bool))


def decode(code, obs, max_iter=100, channel=None, trace=False):
    """Decode one frame or a batch; channel inferred from dtype if not given."""
    obs = np.asarray(obs)
    if channel is None:
        channel = "bec" if obs.dtype.kind in "iu" else "awgn"
    if channel == "bec":
        res = decode_bec(code, obs, max_iter=max_iter, trace=trace)
    elif channel == "awgn":
        res = decode_awgn(code, obs, max_iter=max_iter)
    else:
        raise ValueError(f"unknown channel {channel!r}")
    return res.single() if obs.ndim == 1 else res
