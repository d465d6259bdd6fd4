"""Stochastic coalescents and the random configuration model.

The event loops are plain Python with O(1) work per event. Arm-weighted
particle selection is done by drawing a uniformly random free stub: the
particle owning it is then chosen with probability proportional to its arm
count. Uniform variates are drawn from a numpy ``Generator`` in batches so a
given seed fixes the whole event sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .branching import ArmMeasure, Pmf

REJECTION_CAP = 10**6
_BATCH = 1 << 16


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the single supported source of randomness."""
    return np.random.Generator(np.random.PCG64(seed))


def replica_seed(seed: int, replica: int) -> int:
    """Child seed for a replica: seed XOR replica index (injective in the index)."""
    if replica < 0:
        raise ValueError("replica index must be nonnegative")
    return (seed ^ replica) & 0xFFFFFFFFFFFFFFFF


class _Uniforms:
    """Uniform variates in [0, 1) served one at a time from numpy batches."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._buf: list[float] = []
        self._i = 0
        self._next = 64

    def __call__(self) -> float:
        if self._i == len(self._buf):
            # small first batches keep tiny systems cheap
            self._buf = self.rng.random(self._next).tolist()
            self._next = min(2 * self._next, _BATCH)
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u


# ---------------------------------------------------------------- data types


@dataclass
class DegreeSequence:
    degrees: np.ndarray

    def __post_init__(self):
        self.degrees = np.asarray(self.degrees, dtype=np.int64)
        if self.degrees.ndim != 1:
            raise ValueError("degrees must be one-dimensional")
        if self.degrees.size and self.degrees.min() < 1:
            raise ValueError("every vertex needs at least one stub")

    @property
    def n(self) -> int:
        return int(self.degrees.size)

    @property
    def total_stubs(self) -> int:
        return int(self.degrees.sum())

    def empirical_law(self) -> dict[int, float]:
        vals, counts = np.unique(self.degrees, return_counts=True)
        return {int(v): c / self.n for v, c in zip(vals, counts)}


@dataclass
class ParticleSystem:
    """Population of (arms, size) particles in solution plus the gel."""

    arms: np.ndarray
    sizes: np.ndarray
    n: int
    gel_mass: int = 0
    clock: float = 0.0
    absorbed: bool = False
    events: int = 0

    @property
    def total_arms(self) -> int:
        return int(self.arms.sum())

    def check(self):
        if int(self.sizes.sum()) + self.gel_mass != self.n:
            raise AssertionError("mass balance violated")
        if np.any(self.arms < 0) or np.any(self.sizes < 1):
            raise AssertionError("invalid particle")


@dataclass
class ConfigGraph:
    """Multigraph from a uniform stub matching; ``edges`` rows are vertex pairs."""

    n: int
    degrees: np.ndarray
    edges: np.ndarray
    # vertex holding the unmatched stub when the stub total is odd, else -1
    unmatched: int = -1


@dataclass
class ClusterCensus:
    sizes: np.ndarray
    free_arms: np.ndarray
    edge_counts: np.ndarray
    n: int
    gel_mass: int = 0

    @property
    def is_tree(self) -> np.ndarray:
        return self.edge_counts == self.sizes - 1

    def size_counts(self) -> dict[int, int]:
        v, c = np.unique(self.sizes, return_counts=True)
        return dict(zip(v.tolist(), c.tolist()))

    def class_counts(self) -> dict[tuple[int, int], int]:
        """(free_arms, size) -> number of clusters."""
        if self.sizes.size == 0:
            return {}
        pairs = np.stack([self.free_arms, self.sizes], axis=1)
        v, c = np.unique(pairs, axis=0, return_counts=True)
        return {(int(a), int(m)): int(k) for (a, m), k in zip(v, c)}

    def check(self):
        if int(self.sizes.sum()) + self.gel_mass != self.n:
            raise AssertionError("mass balance violated")


@dataclass
class SolutionTrace:
    """Solution fraction m_t and used-arm law pi_t of in-solution atoms at sample times."""

    times: list[float] = field(default_factory=list)
    solution_fraction: list[float] = field(default_factory=list)
    used_arm_laws: list[Pmf] = field(default_factory=list)


# ---------------------------------------------------------------- degrees


def sample_degrees(mu: ArmMeasure, n: int, rng: np.random.Generator | None = None,
                   mode: str = "random") -> DegreeSequence:
    """n degrees from the normalised arm law.

    ``mode="quota"`` is deterministic: floor(n mu(i)) copies of each degree,
    with the remaining slots given to the largest fractional parts.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = mu.normalized().weights
    support = np.flatnonzero(p)
    if mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        return DegreeSequence(rng.choice(support, size=n, p=p[support] / p[support].sum()))
    if mode == "quota":
        exact = n * p[support]
        counts = np.floor(exact).astype(np.int64)
        rest = n - int(counts.sum())
        # stable sort: ties go to the smaller degree
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:rest]] += 1
        return DegreeSequence(np.repeat(support, counts))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- limited coalescent


class LimitedCoalescent:
    """Marcus-Lushnikov coalescent with limited aggregations.

    Distinct particles with a and a' free arms merge at rate a a' / n into
    (a + a' - 2, m + m'). With ``alpha`` set, a particle heavier than alpha
    drops into the gel at once and its free arms leave the system.
    """

    def __init__(self, degrees: DegreeSequence, rng: np.random.Generator, alpha: int | None = None):
        deg = degrees.degrees.tolist()
        n = len(deg)
        self.n = n
        self.alpha = alpha
        self.uniform = _Uniforms(rng)
        self.degree = deg
        self.stub_start = [0] * (n + 1)
        for k, d in enumerate(deg):
            self.stub_start[k + 1] = self.stub_start[k] + d
        total = self.stub_start[n]
        self.stub_atom = [0] * total
        for k in range(n):
            for s in range(self.stub_start[k], self.stub_start[k + 1]):
                self.stub_atom[s] = k
        self.free = list(range(total))
        self.pos = list(range(total))
        self.owner = list(range(n))
        self.members: list[list[int] | None] = [[k] for k in range(n)]
        self.arms = list(deg)
        self.used = [0] * n
        self.hist = [0] * (max(deg, default=0) + 1)
        self.hist[0] = n
        self.in_solution = n
        self.S = total
        self.sumsq = sum(d * d for d in deg)
        self.gel_mass = 0
        self.gel_arms = 0
        self.t = 0.0
        self.events = 0
        self.absorbed = False

    @property
    def rate(self) -> float:
        """Total merger rate (S^2 - sum a_i^2) / (2n) over distinct particle pairs."""
        return (self.S * self.S - self.sumsq) / (2.0 * self.n)

    def _drop_stub(self, s: int):
        free, pos = self.free, self.pos
        i = pos[s]
        last = free.pop()
        if last != s:
            free[i] = last
            pos[last] = i
        pos[s] = -1

    def _to_gel(self, p: int):
        atoms = self.members[p]
        pos, start, hist, used = self.pos, self.stub_start, self.hist, self.used
        for k in atoms:
            for s in range(start[k], start[k + 1]):
                if pos[s] >= 0:
                    self._drop_stub(s)
            hist[used[k]] -= 1
        a = self.arms[p]
        self.gel_arms += a
        self.S -= a
        self.sumsq -= a * a
        self.arms[p] = 0
        self.gel_mass += len(atoms)
        self.in_solution -= len(atoms)
        self.members[p] = None

    def _snapshot(self, t: float, trace: SolutionTrace):
        trace.times.append(t)
        trace.solution_fraction.append(self.in_solution / self.n)
        h = np.array(self.hist, dtype=float)
        if self.in_solution:
            h /= self.in_solution
        trace.used_arm_laws.append(Pmf(h, 0))

    def run(self, t_end: float = math.inf, sample_times=()) -> SolutionTrace:
        if t_end < 0:
            raise ValueError("t_end must be nonnegative")
        samples = sorted(float(s) for s in sample_times)
        if samples and samples[0] < self.t:
            raise ValueError("sample times before the current clock")
        trace = SolutionTrace()
        si = 0
        u = self.uniform
        free, owner, stub_atom = self.free, self.owner, self.stub_atom
        arms, members, used, hist = self.arms, self.members, self.used, self.hist
        n2 = 2.0 * self.n
        alpha = self.alpha
        while True:
            rate = (self.S * self.S - self.sumsq) / n2
            if rate <= 0:
                self.absorbed = True
                break
            t_next = self.t - math.log(1.0 - u()) / rate
            if t_next > t_end:
                self.t = t_end
                break
            while si < len(samples) and samples[si] < t_next:
                self._snapshot(samples[si], trace)
                si += 1
            self.t = t_next
            S = self.S
            for _ in range(REJECTION_CAP):
                si_ = free[int(u() * S)]
                sj_ = free[int(u() * S)]
                p = owner[stub_atom[si_]]
                q = owner[stub_atom[sj_]]
                if p != q:
                    break
            else:
                self.absorbed = True
                break
            self._drop_stub(si_)
            self._drop_stub(sj_)
            for k in (stub_atom[si_], stub_atom[sj_]):
                hist[used[k]] -= 1
                used[k] += 1
                if used[k] == len(hist):
                    hist.append(0)
                hist[used[k]] += 1
            ap, aq = arms[p], arms[q]
            a_new = ap + aq - 2
            self.S -= 2
            self.sumsq += a_new * a_new - ap * ap - aq * aq
            mp, mq = members[p], members[q]
            if len(mp) < len(mq):
                p, q, mp, mq = q, p, mq, mp
            for k in mq:
                owner[k] = p
            mp.extend(mq)
            members[q] = None
            arms[q] = 0
            arms[p] = a_new
            self.events += 1
            if alpha is not None and len(mp) > alpha:
                self._to_gel(p)
        # the state is frozen from here on
        while si < len(samples) and samples[si] <= t_end:
            self._snapshot(samples[si], trace)
            si += 1
        return trace

    def state(self) -> ParticleSystem:
        live = [p for p, mem in enumerate(self.members) if mem is not None]
        return ParticleSystem(
            arms=np.array([self.arms[p] for p in live], dtype=np.int64),
            sizes=np.array([len(self.members[p]) for p in live], dtype=np.int64),
            n=self.n,
            gel_mass=self.gel_mass,
            clock=self.t,
            absorbed=self.absorbed,
            events=self.events,
        )


def coalesce_limited(degrees: DegreeSequence, t_end: float, rng: np.random.Generator) -> ParticleSystem:
    """Run the limited-aggregation coalescent up to t_end or absorption."""
    sim = LimitedCoalescent(degrees, rng)
    sim.run(t_end)
    return sim.state()


def default_alpha(n: int) -> int:
    return math.ceil(n ** (2.0 / 3.0))


def coalesce_threshold(degrees: DegreeSequence, alpha: int | None, t_end: float,
                       rng: np.random.Generator, sample_times=()) -> tuple[SolutionTrace, ParticleSystem]:
    """Limited coalescent where particles heavier than alpha fall into the gel."""
    n = degrees.n
    if alpha is None:
        alpha = default_alpha(n)
    if alpha >= n:
        raise ValueError("threshold must be macroscopic-excluding (alpha < n)")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    sim = LimitedCoalescent(degrees, rng, alpha=alpha)
    trace = sim.run(t_end, sample_times)
    return trace, sim.state()


# ---------------------------------------------------------------- multiplicative coalescent


def coalesce_mono(n: int, t_end: float, rng: np.random.Generator) -> ParticleSystem:
    """Multiplicative Marcus-Lushnikov coalescent from n unit masses.

    Clusters of sizes m and m' merge at rate m m' / n; choosing two atoms
    uniformly and rejecting same-cluster pairs realises exactly these rates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    u = _Uniforms(rng)
    owner = list(range(n))
    members: list[list[int] | None] = [[k] for k in range(n)]
    sumsq = n
    t = 0.0
    events = 0
    n2 = 2.0 * n
    absorbed = False
    while True:
        rate = (n * n - sumsq) / n2
        if rate <= 0:
            absorbed = True
            break
        t_next = t - math.log(1.0 - u()) / rate
        if t_next > t_end:
            t = t_end
            break
        t = t_next
        while True:
            p = owner[int(u() * n)]
            q = owner[int(u() * n)]
            if p != q:
                break
        mp, mq = members[p], members[q]
        if len(mp) < len(mq):
            p, q, mp, mq = q, p, mq, mp
        sumsq += 2 * len(mp) * len(mq)
        for k in mq:
            owner[k] = p
        mp.extend(mq)
        members[q] = None
        events += 1
    sizes = np.array([len(m) for m in members if m is not None], dtype=np.int64)
    return ParticleSystem(arms=np.zeros(sizes.size, dtype=np.int64), sizes=sizes, n=n,
                          clock=t, absorbed=absorbed, events=events)


# ---------------------------------------------------------------- configuration model


def random_configuration(degrees: DegreeSequence, rng: np.random.Generator) -> ConfigGraph:
    """Uniform perfect matching of stubs by shuffling and pairing neighbours.

    Loops and multiple edges are kept. With an odd stub total the last stub
    of the shuffled order, a uniformly chosen one, stays unmatched.
    """
    stubs = np.repeat(np.arange(degrees.n, dtype=np.int64), degrees.degrees)
    stubs = rng.permutation(stubs)
    unmatched = -1
    if stubs.size % 2:
        unmatched = int(stubs[-1])
        stubs = stubs[:-1]
    return ConfigGraph(degrees.n, degrees.degrees.copy(), stubs.reshape(-1, 2), unmatched)


class UnionFind:
    """Disjoint sets over 0..n-1 with union by size and path halving."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, x: int, y: int) -> int:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return rx
        if self.size[rx] < self.size[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        self.size[rx] += self.size[ry]
        return rx

    def roots(self) -> np.ndarray:
        return np.array([self.find(x) for x in range(len(self.parent))], dtype=np.int64)


def _graph_labels(graph: ConfigGraph) -> np.ndarray:
    uf = UnionFind(graph.n)
    for v, w in graph.edges.tolist():
        uf.union(v, w)
    roots = uf.roots()
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def census(obj) -> ClusterCensus:
    """Per-cluster size, free arms and edge count of a ParticleSystem or ConfigGraph."""
    if isinstance(obj, ParticleSystem):
        # coalescent particles are trees by construction
        return ClusterCensus(obj.sizes.copy(), obj.arms.copy(), obj.sizes - 1, obj.n, obj.gel_mass)
    if isinstance(obj, ConfigGraph):
        labels = _graph_labels(obj)
        k = int(labels.max()) + 1 if labels.size else 0
        sizes = np.bincount(labels, minlength=k)
        edges = np.bincount(labels[obj.edges[:, 0]], minlength=k) if obj.edges.size else np.zeros(k, np.int64)
        free = np.zeros(k, dtype=np.int64)
        if obj.unmatched >= 0:
            free[labels[obj.unmatched]] += 1
        return ClusterCensus(sizes, free, edges, obj.n, 0)
    raise TypeError(f"cannot take a census of {type(obj).__name__}")


@dataclass
class EdgeRootedLaw:
    """Law of (|C_e|, C_e is a tree) for a uniform oriented edge e.

    Arrays are indexed by cluster size up to ``m_max``; ``overflow`` holds the
    mass on larger clusters.
    """

    tree: np.ndarray
    nontree: np.ndarray
    tree_stderr: np.ndarray
    nontree_stderr: np.ndarray
    overflow: float
    overflow_nontree: float
    oriented_edges: int

    @property
    def nontree_fraction(self) -> float:
        return float(self.nontree.sum()) + self.overflow_nontree


def edge_rooted_size_law(graph: ConfigGraph, m_max: int, rng: np.random.Generator | None = None,
                         samples: int | None = None) -> EdgeRootedLaw:
    """Size and tree flag of the cluster containing a uniform oriented edge.

    Without ``samples`` every oriented edge is counted. Standard errors then
    treat clusters as the independent units (ratio-estimator variance);
    with ``samples`` they are binomial over the sampled edges.
    """
    if m_max < 2:
        raise ValueError("m_max must be >= 2")
    if graph.edges.shape[0] == 0:
        raise ValueError("graph has no edges")
    labels = _graph_labels(graph)
    c = census(graph)
    tree = c.is_tree
    cl_of_edge = labels[graph.edges[:, 0]]
    if samples is None:
        w = 2.0 * c.edge_counts
    else:
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        picks = rng.integers(0, 2 * graph.edges.shape[0], size=samples) // 2
        w = np.bincount(cl_of_edge[picks], minlength=c.sizes.size).astype(float)
    W = w.sum()
    out = {}
    for name, flag in (("tree", tree), ("nontree", ~tree)):
        p = np.zeros(m_max + 1)
        se = np.zeros(m_max + 1)
        for m in range(1, m_max + 1):
            ind = (c.sizes == m) & flag
            p[m] = w[ind].sum() / W
            if samples is None:
                k = w.size
                var = np.sum(w**2 * (ind - p[m]) ** 2) / W**2 * (k / max(k - 1, 1))
                se[m] = math.sqrt(var)
            else:
                se[m] = math.sqrt(p[m] * (1 - p[m]) / samples)
        out[name] = (p, se)
    big = c.sizes > m_max
    overflow = float(w[big].sum() / W)
    return EdgeRootedLaw(out["tree"][0], out["nontree"][0], out["tree"][1], out["nontree"][1],
                         overflow, float(w[big & ~tree].sum() / W), int(2 * graph.edges.shape[0]))


# ---------------------------------------------------------------- statistics


def soc_statistic(pi: Pmf) -> float:
    """sum_i i (i - 2) pi(i); negative below criticality, zero at it."""
    k = pi.support.astype(float)
    return math.fsum(k * (k - 2.0) * pi.probabilities())


def empirical_concentrations(c: ClusterCensus, n: int | None = None) -> dict[tuple[int, int], tuple[float, float]]:
    """(arms, size) -> (count / n, binomial standard error)."""
    n = c.n if n is None else n
    if n <= 0:
        raise ValueError("n must be positive")
    out = {}
    for key, k in sorted(c.class_counts().items()):
        p = k / n
        out[key] = (p, math.sqrt(p * (1.0 - p) / n))
    return out
