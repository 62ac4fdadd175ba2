"""Ensemble parameterization and grid enumeration.

An ensemble has degree-2 variable nodes and two constraint-node types built
from rate-1/2 RSC mother codes punctured to rates r1, r2 in [1/2, 1), with a
fraction rho of edges attached to type 1. The design rate is
R = 2*(rho*r1 + (1-rho)*r2) - 1, so for fixed R and rho the pair (r1, r2) has
one free parameter.

Swapping the two types with rho -> 1-rho yields the same ensemble; the
canonical orientation puts the smaller component rate first (ties: larger m1,
then smaller rho).
"""

from dataclasses import dataclass, replace
from itertools import product

from .errors import InfeasibleError

_RATE_TOL = 1e-9


@dataclass(frozen=True)
class EnsembleParams:
    rho: float
    r1: float
    r2: float
    m1: int
    m2: int

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        for name, r in (("r1", self.r1), ("r2", self.r2)):
            if not (0.5 - _RATE_TOL <= r < 1.0):
                raise ValueError(f"{name} must lie in [1/2, 1), got {r}")
        for name, m in (("m1", self.m1), ("m2", self.m2)):
            if not (isinstance(m, int) and 1 <= m <= 16):
                raise ValueError(f"{name} must be an integer memory >= 1")

    def mirror(self):
        return EnsembleParams(1.0 - self.rho, self.r2, self.r1, self.m2, self.m1)

    def canonical(self):
        """The preferred orientation among this point and its mirror."""
        other = self.mirror()
        for a, b in (
            (self.r1, other.r1),
            (other.m1, self.m1),  # larger m1 preferred, hence swapped
            (self.rho, other.rho),
        ):
            if a < b:
                return self
            if b < a:
                return other
        return self

    def as_dict(self):
        return {
            "rho": self.rho,
            "r1": self.r1,
            "r2": self.r2,
            "m1": self.m1,
            "m2": self.m2,
        }


def average_component_rate(params: EnsembleParams):
    return params.rho * params.r1 + (1.0 - params.rho) * params.r2


def design_rate(params: EnsembleParams):
    return 2.0 * average_component_rate(params) - 1.0


def r2_for_target(R, rho, r1):
    """The type-2 rate making the design rate equal R, given rho and r1."""
    if rho >= 1.0:
        raise ValueError("rho = 1 leaves no type-2 edges; r2 is undefined")
    rc = (R + 1.0) / 2.0
    r2 = (rc - rho * r1) / (1.0 - rho)
    if not (0.5 - _RATE_TOL <= r2 < 1.0 - _RATE_TOL / 2):
        raise InfeasibleError(
            f"no feasible r2 for R={R}, rho={rho}, r1={r1} (got {r2})"
        )
    return min(max(r2, 0.5), 1.0)


@dataclass(frozen=True)
class GridSpec:
    n_edges: int = 512
    r1_resolution: float = 1.0 / 512
    memories: tuple = (1, 2, 3)
    include_endpoints: bool = True

    def __post_init__(self):
        if self.n_edges < 8 or self.n_edges % 2:
            raise ValueError("n_edges must be even and at least 8")
        if not (0 < self.r1_resolution <= 0.25):
            raise ValueError("r1_resolution out of range")
        if not self.memories or any(m < 1 for m in self.memories):
            raise ValueError("memories must be positive integers")


def enumerate_grid(R, spec: GridSpec = GridSpec()):
    """Yield canonical ensemble points for design rate R on the search grid.

    rho runs over {2/n, ..., (n-2)/n}; for each rho the type-1 rate runs from
    the balanced value rc = (R+1)/2 upward in steps of r1_resolution while the
    induced r2 stays feasible. Every raw point therefore has r1 >= rc >= r2
    and is emitted in canonical orientation (smaller rate first); the
    balanced diagonal r1 = r2 = rc, where a point and its mirror both occur,
    is deduplicated by the canonical tie rules. With include_endpoints, the
    degenerate single-type ensembles (rho = 0) are emitted once per memory.
    """
    if not (0.0 < R < 1.0):
        raise ValueError("design rate must lie in (0, 1)")
    rc = (R + 1.0) / 2.0
    if rc >= 1.0 - _RATE_TOL:
        raise InfeasibleError("design rate too close to 1 for component rates < 1")
    n = spec.n_edges
    mems = tuple(spec.memories)
    if spec.include_endpoints:
        for m in mems:
            yield EnsembleParams(0.0, rc, rc, m, m)
    for j in range(2, n - 1):
        rho = j / n
        k = 0
        while True:
            r1 = rc + k * spec.r1_resolution
            if r1 >= 1.0 - _RATE_TOL:
                break
            try:
                r2 = r2_for_target(R, rho, r1)
            except InfeasibleError:
                break
            diagonal = k == 0
            for m1, m2 in product(mems, mems):
                if diagonal:
                    # point == (rho, rc, rc, m1, m2); mirror occurs at 1-rho
                    if m1 < m2:
                        continue
                    if m1 == m2 and rho > 0.5:
                        continue
                    yield EnsembleParams(rho, r1, r2, m1, m2)
                else:
                    # canonical orientation: smaller rate as type 1
                    yield EnsembleParams(1.0 - rho, r2, r1, m2, m1)
            k += 1
