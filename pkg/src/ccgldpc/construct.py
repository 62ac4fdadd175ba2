"""Finite-length code construction.

A finite instance consists of two long punctured RSC trellises, one per
component type, whose edge sockets (systematic bits plus surviving parity
bits) are paired up by a uniform random permutation into degree-2 variable
nodes. Each VN is one transmitted code bit seen by both of its sockets.
Both trellises are terminated separately; the tail bits are transmitted
unpunctured and belong to no VN.
"""

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .ensemble import EnsembleParams, design_rate
from .errors import InfeasibleError
from .trellis import GeneratorSpec


def best_rational(r, max_denominator):
    """Best rational approximation to a component rate, clamped to [1/2, 1)."""
    f = Fraction(r).limit_denominator(max_denominator)
    if f < Fraction(1, 2):
        f = Fraction(1, 2)
    if f >= 1:
        f = Fraction(max_denominator - 1, max_denominator)
    return f.numerator, f.denominator


@dataclass(frozen=True)
class CodeSpec:
    """Integer realization of an ensemble point at a finite length."""

    gen1: GeneratorSpec
    gen2: GeneratorSpec
    k1: int
    n1: int
    k2: int
    n2: int
    N1: int
    N2: int
    perm_seed: int = 0
    punct_seed: int = 0
    target: EnsembleParams = None

    def __post_init__(self):
        for k, n in ((self.k1, self.n1), (self.k2, self.n2)):
            if not (k <= n <= 2 * k):
                raise ValueError(f"component rate {k}/{n} outside [1/2, 1]")
        if self.N1 < 0 or self.N2 < 0 or self.N1 + self.N2 == 0:
            raise ValueError("section counts must be nonnegative, not both zero")
        if (self.edges1 + self.edges2) % 2:
            raise ValueError("total socket count must be even")
        if self.target is not None:
            step = self._rho_step()
            if abs(self.rho_realized - self.target.rho) > max(step, 1.0 / (2 * self.n)) + 1e-12:
                raise ValueError("realized rho misses target by more than the grid allows")

    def _rho_step(self):
        if self.N1 == 0 or self.N2 == 0:
            return 0.0
        g = math.gcd(self.n1, self.n2)
        return (self.n1 * self.n2 // g) / (2.0 * self.n)

    @property
    def edges1(self):
        return self.n1 * self.N1

    @property
    def edges2(self):
        return self.n2 * self.N2

    @property
    def n(self):
        return (self.edges1 + self.edges2) // 2

    @property
    def rho_realized(self):
        return self.edges1 / (2.0 * self.n)

    @property
    def rate_realized(self):
        """Overall rate including the termination loss of both tails."""
        info = self.k1 * self.N1 + self.k2 * self.N2 - self.n
        return info / self.transmit_length

    @property
    def transmit_length(self):
        tails = 2 * self.gen1.memory * (self.N1 > 0) + 2 * self.gen2.memory * (self.N2 > 0)
        return self.n + tails

    def params_realized(self):
        return EnsembleParams(
            self.rho_realized,
            self.k1 / self.n1,
            self.k2 / self.n2,
            self.gen1.memory,
            self.gen2.memory,
        )

    def deviations(self):
        """Realized-minus-target differences for reporting."""
        if self.target is None:
            return {}
        t = self.target
        return {
            "rho": self.rho_realized - t.rho,
            "r1": self.k1 / self.n1 - t.r1,
            "r2": self.k2 / self.n2 - t.r2,
            "R": self.rate_realized - design_rate(t),
        }

    def to_json(self):
        d = {
            "gen1": list(self.gen1.octal),
            "gen2": list(self.gen2.octal),
            "k1": self.k1, "n1": self.n1, "k2": self.k2, "n2": self.n2,
            "N1": self.N1, "N2": self.N2,
            "perm_seed": self.perm_seed, "punct_seed": self.punct_seed,
        }
        if self.target is not None:
            d["target"] = self.target.as_dict()
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        target = None
        if "target" in d:
            t = d["target"]
            target = EnsembleParams(t["rho"], t["r1"], t["r2"], int(t["m1"]), int(t["m2"]))
        return cls(
            gen1=GeneratorSpec.from_octal(*d["gen1"]),
            gen2=GeneratorSpec.from_octal(*d["gen2"]),
            k1=int(d["k1"]), n1=int(d["n1"]), k2=int(d["k2"]), n2=int(d["n2"]),
            N1=int(d["N1"]), N2=int(d["N2"]),
            perm_seed=int(d["perm_seed"]), punct_seed=int(d["punct_seed"]),
            target=target,
        )


def rationalize(params, target_n, max_denominator=64, perm_seed=0, punct_seed=0,
                rate_tol=0.01):
    """Integer section counts and rational rates approximating an ensemble point.

    Component rates become best rational approximations with denominator at
    most max_denominator; the section counts are then chosen to hit the total
    edge count 2*target_n and the edge fraction rho as closely as possible.
    """
    if target_n < 100:
        raise ValueError("target_n must be at least 100")
    k1, n1 = best_rational(params.r1, max_denominator)
    k2, n2 = best_rational(params.r2, max_denominator)
    g1 = GeneratorSpec.from_memory(params.m1)
    g2 = GeneratorSpec.from_memory(params.m2)
    total = 2 * target_n

    if params.rho == 0.0 or params.rho == 1.0:
        nc = n1 if params.rho == 1.0 else n2
        if nc % 2:
            N = max(2, 2 * round(total / (2 * nc)))  # odd length needs even count
        else:
            N = max(1, round(total / nc))
        N1, N2 = (N, 0) if params.rho == 1.0 else (0, N)
        cand = CodeSpec(g1, g2, k1, n1, k2, n2, N1, N2, perm_seed, punct_seed, params)
        return _check_rate(cand, params, rate_tol)

    best = None
    best_key = None
    for N1 in range(1, (total - n2) // n1 + 1):
        rem = total - n1 * N1
        for N2 in (rem // n2, rem // n2 + 1):
            if N2 < 1:
                continue
            if (n1 * N1 + n2 * N2) % 2:
                # nudge N2 to keep the VN count integral
                N2 += 1
            if (n1 * N1 + n2 * N2) % 2:
                continue
            ne = n1 * N1 + n2 * N2
            rho_dev = abs(n1 * N1 / ne - params.rho)
            n_dev = abs(ne // 2 - target_n)
            if n_dev > 0.01 * target_n:
                continue
            key = (round(rho_dev * 4 * target_n), n_dev, N1)
            if best_key is None or key < best_key:
                best_key = key
                best = (N1, N2)
    if best is None:
        raise InfeasibleError(
            f"no integer section counts within 1% of n={target_n} "
            f"for rates {k1}/{n1}, {k2}/{n2}"
        )
    spec = CodeSpec(g1, g2, k1, n1, k2, n2, best[0], best[1],
                    perm_seed, punct_seed, params)
    return _check_rate(spec, params, rate_tol)


def _check_rate(spec, params, rate_tol):
    R = design_rate(params)
    if abs(spec.rate_realized - R) > rate_tol:
        raise InfeasibleError(
            f"realized rate {spec.rate_realized:.5f} deviates from target "
            f"{R:.5f} by more than {rate_tol}"
        )
    return spec


class LiftedCode:
    """Materialized finite-length code.

    Arrays describe, per component trellis, which VN each trellis position
    is attached to: sys_vn[j][t] is the VN of the systematic bit of mother
    section t, par_vn[j][t] the VN of its parity bit or -1 if punctured.
    Transmitted word layout: n VN bits, then the tail bits of trellis 1
    (sys, parity per tail section), then those of trellis 2.
    """

    def __init__(self, spec: CodeSpec):
        self.spec = spec
        self.n = spec.n
        rng_p = np.random.default_rng(spec.punct_seed)
        kept = []
        for (k, n_c, N) in ((spec.k1, spec.n1, spec.N1), (spec.k2, spec.n2, spec.N2)):
            keep = np.zeros((N, k), dtype=bool)
            n_keep = n_c - k
            for i in range(N):
                if n_keep:
                    keep[i, rng_p.choice(k, size=n_keep, replace=False)] = True
            kept.append(keep.reshape(-1))
        self.parity_kept = kept  # per mother section, both trellises

        # socket order: per combined section, systematic bits then kept parities
        sockets = []  # (trellis, section, is_parity)
        for j, (k, N) in enumerate(((spec.k1, spec.N1), (spec.k2, spec.N2))):
            for i in range(N):
                for t in range(i * k, (i + 1) * k):
                    sockets.append((j, t, 0))
                for t in range(i * k, (i + 1) * k):
                    if kept[j][t]:
                        sockets.append((j, t, 1))
        sockets = np.array(sockets, dtype=np.int64).reshape(-1, 3)
        assert len(sockets) == 2 * self.n

        rng_e = np.random.default_rng(spec.perm_seed)
        perm = rng_e.permutation(2 * self.n)
        vn_of_socket = np.empty(2 * self.n, dtype=np.int64)
        vn_of_socket[perm] = np.arange(2 * self.n) // 2

        L1 = spec.k1 * spec.N1
        L2 = spec.k2 * spec.N2
        self.sys_vn = [np.full(L1, -1, dtype=np.int64), np.full(L2, -1, dtype=np.int64)]
        self.par_vn = [np.full(L1, -1, dtype=np.int64), np.full(L2, -1, dtype=np.int64)]
        for s in range(2 * self.n):
            j, t, isp = sockets[s]
            if isp:
                self.par_vn[j][t] = vn_of_socket[s]
            else:
                self.sys_vn[j][t] = vn_of_socket[s]
        self.gens = (spec.gen1, spec.gen2)
        self.tail_sections = (spec.gen1.memory if spec.N1 else 0,
                              spec.gen2.memory if spec.N2 else 0)
        self.transmit_length = spec.transmit_length

    def degree_histogram(self):
        deg = np.zeros(self.n, dtype=np.int64)
        for j in range(2):
            for arr in (self.sys_vn[j], self.par_vn[j]):
                v = arr[arr >= 0]
                np.add.at(deg, v, 1)
        vals, counts = np.unique(deg, return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))

    def tail_offsets(self):
        """Slices of the transmitted word holding each trellis tail."""
        o1 = self.n
        o2 = o1 + 2 * self.tail_sections[0]
        return (o1, o2, o2 + 2 * self.tail_sections[1])


def construct(spec: CodeSpec) -> LiftedCode:
    return LiftedCode(spec)
