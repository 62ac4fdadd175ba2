"""Rate-1/2 recursive systematic convolutional mother codes and their trellises.

Generator polynomials are written in octal. The binary expansion of the octal
number is read most-significant-bit first, and that first bit is the
coefficient of D^0. So "13" -> 1011 -> 1 + D^2 + D^3 and "15" -> 1101 ->
1 + D + D^3. The code memory is the largest degree appearing in either
polynomial.

The encoder state after step t packs the last `memory` feedback-adder outputs
w: state bit i-1 holds w_{t-i}, i.e. state = (w_{t-1} ... w_{t-m}) with
w_{t-1} in the most significant position after the shift below. Concretely
the update is state' = ((state << 1) | w) & (2^m - 1).
"""

from dataclasses import dataclass

import numpy as np


def _parse_octal(text):
    """Octal string -> tap mask with bit i = coefficient of D^i."""
    value = int(str(text), 8)
    if value <= 0:
        raise ValueError(f"generator polynomial must be positive, got {text!r}")
    bits = bin(value)[2:]
    mask = 0
    for i, b in enumerate(bits):
        if b == "1":
            mask |= 1 << i
    return mask


def _degree(mask):
    return mask.bit_length() - 1


@dataclass(frozen=True)
class GeneratorSpec:
    """A rate-1/2 systematic generator (1, ff/fb), taps as D-degree masks."""

    feedforward: int
    feedback: int
    memory: int
    octal: tuple[str, str]

    def __post_init__(self):
        if self.memory != max(_degree(self.feedforward), _degree(self.feedback)):
            raise ValueError("memory must equal the largest tap degree")
        if not (self.feedback & 1):
            raise ValueError("feedback polynomial must have a D^0 term")
        if self.memory < 1 or self.memory > 16:
            raise ValueError("memory out of supported range [1, 16]")

    @classmethod
    def from_octal(cls, feedforward, feedback):
        ff = _parse_octal(feedforward)
        fb = _parse_octal(feedback)
        mem = max(_degree(ff), _degree(fb))
        return cls(ff, fb, mem, (str(feedforward), str(feedback)))

    @classmethod
    def from_memory(cls, memory):
        """The mother code used for each memory: (1,1/3), (1,5/7), (1,13/15)."""
        table = {1: ("1", "3"), 2: ("5", "7"), 3: ("13", "15")}
        if memory not in table:
            raise ValueError(f"no mother code defined for memory {memory}")
        return cls.from_octal(*table[memory])


class ComponentTrellis:
    """State-transition and parity tables for a GeneratorSpec.

    next_state[s, u] and parity[s, u] are indexed by current state and
    systematic input bit.
    """

    def __init__(self, gen: GeneratorSpec):
        self.generator = gen
        m = gen.memory
        self.memory = m
        self.num_states = 1 << m
        mask = self.num_states - 1
        # state bit i holds w_{t-(i+1)}; tap for D^(i+1) is bit i+1 of the
        # polynomial, so the state contribution uses the mask shifted right.
        fb_state = gen.feedback >> 1
        ff_state = gen.feedforward >> 1
        ff0 = gen.feedforward & 1
        ns = np.zeros((self.num_states, 2), dtype=np.int64)
        par = np.zeros((self.num_states, 2), dtype=np.int64)
        for s in range(self.num_states):
            fb_bit = bin(s & fb_state).count("1") & 1
            ff_bit = bin(s & ff_state).count("1") & 1
            for u in (0, 1):
                w = u ^ fb_bit
                ns[s, u] = ((s << 1) | w) & mask
                par[s, u] = (ff0 & w) ^ ff_bit
        self.next_state = ns
        self.parity = par
        # reverse map: predecessors[s'] lists the (s, u) pairs entering s'
        pred = [[] for _ in range(self.num_states)]
        for s in range(self.num_states):
            for u in (0, 1):
                pred[ns[s, u]].append((s, u))
        self.predecessors = pred

    def termination_input(self, state):
        """Systematic bit that drives the feedback adder output w to zero."""
        fb_state = self.generator.feedback >> 1
        return bin(state & fb_state).count("1") & 1


def encode(trellis: ComponentTrellis, info_bits, terminate=True):
    """Encode systematic bits, returning (sys_out, parity_out, final_state).

    With terminate=True, `memory` extra steps are appended whose inputs force
    the register back to the all-zero state; the returned arrays include the
    tail positions.
    """
    info_bits = np.asarray(info_bits, dtype=np.int64)
    n = len(info_bits)
    m = trellis.memory
    total = n + (m if terminate else 0)
    sys_out = np.zeros(total, dtype=np.int64)
    par_out = np.zeros(total, dtype=np.int64)
    s = 0
    for t in range(n):
        u = int(info_bits[t])
        sys_out[t] = u
        par_out[t] = trellis.parity[s, u]
        s = trellis.next_state[s, u]
    if terminate:
        for t in range(n, total):
            u = trellis.termination_input(s)
            sys_out[t] = u
            par_out[t] = trellis.parity[s, u]
            s = trellis.next_state[s, u]
        if s != 0:
            raise AssertionError("termination failed to reach the zero state")
    return sys_out, par_out, s


@dataclass(frozen=True)
class PuncturingPattern:
    """Which parity slots survive in one combined section of k mother steps.

    A combined (k, n) section carries its k systematic bits plus n - k of the
    k parity bits; `kept` lists the surviving parity slot indices.
    """

    k: int
    n: int
    kept: tuple[int, ...]

    def __post_init__(self):
        if not (self.k < self.n <= 2 * self.k):
            raise ValueError("need k < n <= 2k for a rate k/n section")
        if len(self.kept) != self.n - self.k:
            raise ValueError("kept slot count must equal n - k")
        if len(set(self.kept)) != len(self.kept):
            raise ValueError("kept slots must be distinct")
        if any(not (0 <= i < self.k) for i in self.kept):
            raise ValueError("kept slots must index the k parity positions")


def make_puncturing(k, n, seed=None):
    """Draw a uniformly random PuncturingPattern for a (k, n) section."""
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(k, size=n - k, replace=False))
    return PuncturingPattern(k, n, tuple(int(i) for i in kept))


def erasure_subset_tables(trellis: ComponentTrellis):
    """Per-state successor image masks for erasure-channel set propagation.

    Returns a (num_states, 9) int array `img` where column index encodes the
    observation pair (sys, parity) as 3*sys_code + par_code with codes
    0: observed 0, 1: observed 1, 2: erased. img[s, c] is the bitmask of
    states reachable from s under transitions consistent with observation c.
    The same table serves backward propagation: state s is alive at time t
    iff img[s, c_t] intersects the alive-set at t+1.
    """
    S = trellis.num_states
    img = np.zeros((S, 9), dtype=np.int64)
    for s in range(S):
        for u in (0, 1):
            ns = int(trellis.next_state[s, u])
            p = int(trellis.parity[s, u])
            for sc in (u, 2):
                for pc in (p, 2):
                    img[s, 3 * sc + pc] |= 1 << ns
    return img
