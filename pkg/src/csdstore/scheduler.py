"""Compression-aware chunk placement for a cluster of storage nodes.

Nodes are points on a plane of logical usage (x) against physical usage (y).
A node whose compression ratio is below ``c_l`` fills its physical space
first and strands logical space; above ``c_h`` the opposite happens. The
planner moves chunks between such nodes until every node in the logical
usage band sits inside ``[c_l, c_h]`` or no legal move helps.

Record formats (one record per line, tab separated ``key=value``, fields in
the order listed):

    node   node_id logical_used physical_used logical_capacity physical_capacity ratio zone
    step   step moves in_range zone_a zone_b zone_c zone_d wasted_logical_pct
           wasted_physical_pct below_avg_pct above_avg_pct violation
    sweep  c_l c_h moves bytes_moved in_range
"""

from __future__ import annotations

import copy
import enum
import math
import random
from dataclasses import dataclass, field

from .errors import ClusterFull, ConfigError, IllegalMove
from .metrics import format_record

GIB = 1 << 30


class Zone(enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"


@dataclass(frozen=True)
class ChunkStats:
    chunk_id: int
    logical_bytes: int
    physical_bytes: int

    def __post_init__(self):
        if self.physical_bytes <= 0:
            raise ValueError("a chunk occupies some physical space")
        if self.logical_bytes < 0:
            raise ValueError("negative logical size")

    @property
    def ratio(self) -> float:
        return self.logical_bytes / self.physical_bytes


@dataclass
class NodeState:
    node_id: int
    logical_capacity: int
    physical_capacity: int
    chunks: list = field(default_factory=list)

    @property
    def logical_used(self) -> int:
        return sum(c.logical_bytes for c in self.chunks)

    @property
    def physical_used(self) -> int:
        return sum(c.physical_bytes for c in self.chunks)

    @property
    def logical_frac(self) -> float:
        return self.logical_used / self.logical_capacity

    @property
    def physical_frac(self) -> float:
        return self.physical_used / self.physical_capacity

    @property
    def ratio(self) -> float | None:
        p = self.physical_used
        return self.logical_used / p if p else None


@dataclass
class Cluster:
    nodes: list

    def node(self, node_id: int) -> NodeState:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise IllegalMove(f"no node {node_id}")

    @property
    def w_avg(self) -> float:
        return sum(n.logical_frac for n in self.nodes) / len(self.nodes)

    @property
    def c_avg(self) -> float:
        phys = sum(n.physical_used for n in self.nodes)
        return sum(n.logical_used for n in self.nodes) / phys if phys else 0.0

    def totals(self) -> tuple[int, int]:
        return (sum(n.logical_used for n in self.nodes), sum(n.physical_used for n in self.nodes))

    def copy(self) -> "Cluster":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class SchedulerConfig:
    c_l: float = 3.15
    c_h: float = 3.85
    delta: float = 0.05  # half-width of the logical band, fraction of capacity
    block_threshold: float = 0.75
    migrate_trigger: float = 0.10  # relative excess over w_avg that starts logical balancing

    def __post_init__(self):
        if not self.c_l < self.c_h:
            raise ConfigError(f"c_l ({self.c_l}) must be below c_h ({self.c_h})")
        if not 0 < self.block_threshold <= 1:
            raise ConfigError("block_threshold must be in (0, 1]")
        if self.delta < 0 or self.migrate_trigger < 0:
            raise ConfigError("delta and migrate_trigger must be non-negative")

    def check_average(self, c_avg: float) -> None:
        if not self.c_l < c_avg < self.c_h:
            raise ConfigError(f"cluster average ratio {c_avg:.3f} is not inside "
                              f"({self.c_l}, {self.c_h})")


@dataclass(frozen=True)
class Migration:
    chunk_id: int
    src: int
    dst: int
    kind: str = "ratio"  # or "logical"


@dataclass(frozen=True)
class MoveStats:
    moves: int = 0
    logical_bytes: int = 0
    physical_bytes: int = 0


# ---- classification

def in_band(node: NodeState, w_avg: float, delta: float) -> bool:
    return w_avg - delta <= node.logical_frac <= w_avg + delta


def classify_zone(node: NodeState, config: SchedulerConfig, c_avg: float) -> Zone:
    r = node.ratio
    if r is None:
        return Zone.B
    if r < config.c_l:
        return Zone.A
    if r > config.c_h:
        return Zone.D
    return Zone.B if r <= c_avg else Zone.C


def node_violation(node: NodeState, config: SchedulerConfig) -> float:
    r = node.ratio
    if r is None:
        return 0.0
    return node.logical_frac * max(0.0, config.c_l - r, r - config.c_h)


def violation(cluster: Cluster, config: SchedulerConfig) -> float:
    """Usage-weighted distance of node ratios outside ``[c_l, c_h]``."""
    return math.fsum(node_violation(n, config) for n in cluster.nodes)


def in_range_fraction(cluster: Cluster, config: SchedulerConfig) -> float:
    used = [n for n in cluster.nodes if n.ratio is not None]
    if not used:
        return 1.0
    return sum(config.c_l <= n.ratio <= config.c_h for n in used) / len(used)


# ---- moves

def _fits(node: NodeState, chunk: ChunkStats, threshold: float) -> bool:
    return ((node.logical_used + chunk.logical_bytes) <= threshold * node.logical_capacity
            and (node.physical_used + chunk.physical_bytes) <= threshold * node.physical_capacity)


def _move(cluster: Cluster, m: Migration) -> ChunkStats:
    src, dst = cluster.node(m.src), cluster.node(m.dst)
    if m.src == m.dst:
        raise IllegalMove(f"chunk {m.chunk_id} moved onto its own node")
    for i, c in enumerate(src.chunks):
        if c.chunk_id == m.chunk_id:
            break
    else:
        raise IllegalMove(f"chunk {m.chunk_id} is not on node {m.src}")
    if (dst.logical_used + c.logical_bytes > dst.logical_capacity
            or dst.physical_used + c.physical_bytes > dst.physical_capacity):
        raise IllegalMove(f"node {m.dst} cannot hold chunk {m.chunk_id}")
    src.chunks.pop(i)
    dst.chunks.append(c)
    return c


def apply_plan(cluster: Cluster, plan) -> tuple[Cluster, MoveStats]:
    """Apply moves in order to a copy; raises IllegalMove on a stale plan."""
    out = cluster.copy()
    moves = lbytes = pbytes = 0
    for m in plan:
        c = _move(out, m)
        moves += 1
        lbytes += c.logical_bytes
        pbytes += c.physical_bytes
    return out, MoveStats(moves, lbytes, pbytes)


def invert_plan(plan) -> list[Migration]:
    return [Migration(m.chunk_id, m.dst, m.src, m.kind) for m in reversed(plan)]


# ---- placement

def allocate_chunk(cluster: Cluster, chunk: ChunkStats, config: SchedulerConfig) -> int:
    """Place a new chunk on the least logically used unblocked node."""
    eligible = [n for n in cluster.nodes
                if n.logical_frac < config.block_threshold
                and n.physical_frac < config.block_threshold
                and n.logical_used + chunk.logical_bytes <= n.logical_capacity
                and n.physical_used + chunk.physical_bytes <= n.physical_capacity]
    if not eligible:
        raise ClusterFull("every node is above the block threshold")
    best = min(eligible, key=lambda n: (n.logical_used, n.node_id))
    best.chunks.append(chunk)
    return best.node_id


def plan_logical_balance(cluster: Cluster, config: SchedulerConfig,
                         max_moves: int = 10_000) -> list[Migration]:
    """Move chunks off nodes whose logical usage exceeds w_avg by the trigger.

    Every move goes to the least used node and must leave it below the
    source, so the sum of squared logical usage falls each time.
    """
    work = cluster.copy()
    w_avg = work.w_avg
    plan = []
    while len(plan) < max_moves:
        hot = sorted((n for n in work.nodes if n.logical_frac > w_avg * (1 + config.migrate_trigger)),
                     key=lambda n: (-n.logical_frac, n.node_id))
        moved = False
        for src in hot:
            for dst in sorted(work.nodes, key=lambda n: (n.logical_frac, n.node_id)):
                if dst is src:
                    continue
                for c in sorted(src.chunks, key=lambda c: (-c.logical_bytes, c.chunk_id)):
                    if not _fits(dst, c, config.block_threshold):
                        continue
                    if (dst.logical_used + c.logical_bytes) / dst.logical_capacity >= \
                            (src.logical_used - c.logical_bytes) / src.logical_capacity + 1e-12:
                        continue
                    m = Migration(c.chunk_id, src.node_id, dst.node_id, "logical")
                    _move(work, m)
                    plan.append(m)
                    moved = True
                    break
                if moved:
                    break
            if moved:
                break
        if not moved:
            break
    return plan


_DEST_ORDER = {Zone.A: (Zone.D, Zone.C, Zone.B), Zone.D: (Zone.A, Zone.B, Zone.C)}


def plan_migrations(cluster: Cluster, config: SchedulerConfig,
                    max_moves: int = 100_000) -> list[Migration]:
    """Greedy ratio balancing among nodes in the logical band.

    Each round the worst violator sheds one chunk (lowest ratio from an A
    node, highest from a D node) to the first destination, by zone
    preference, that stays under the block threshold and strictly lowers the
    violation measure.
    """
    work = cluster.copy()
    w_avg, c_avg = work.w_avg, work.c_avg
    band = [n for n in work.nodes if in_band(n, w_avg, config.delta)]
    plan = []
    while len(plan) < max_moves:
        zones = {n.node_id: classify_zone(n, config, c_avg) for n in band}
        violators = sorted((n for n in band if zones[n.node_id] in (Zone.A, Zone.D)),
                           key=lambda n: (-node_violation(n, config), n.node_id))
        if not violators:
            break
        found = None
        for src in violators:
            zone = zones[src.node_id]
            chunks = sorted(src.chunks, key=lambda c: (c.ratio, c.chunk_id),
                            reverse=(zone is Zone.D))
            dests = sorted((n for n in band if n is not src),
                           key=lambda n: (_DEST_ORDER[zone].index(zones[n.node_id])
                                          if zones[n.node_id] in _DEST_ORDER[zone] else 9,
                                          n.logical_frac, n.node_id))
            dests = [d for d in dests if zones[d.node_id] in _DEST_ORDER[zone]]
            for c in chunks:
                for dst in dests:
                    if not _fits(dst, c, config.block_threshold):
                        continue
                    before = node_violation(src, config) + node_violation(dst, config)
                    m = Migration(c.chunk_id, src.node_id, dst.node_id)
                    _move(work, m)
                    after = node_violation(src, config) + node_violation(dst, config)
                    if after < before - 1e-12:
                        found = m
                        break
                    _move(work, Migration(c.chunk_id, dst.node_id, src.node_id))
                if found:
                    break
            if found:
                break
        if found is None:
            break
        plan.append(found)
    return plan


# ---- imbalance metrics

@dataclass(frozen=True)
class Imbalance:
    wasted_logical_pct: float
    wasted_physical_pct: float
    below_avg_pct: float
    above_avg_pct: float


def imbalance(cluster: Cluster, threshold: float = 0.75) -> Imbalance:
    """Space stranded if every node were filled, shape kept, up to the threshold.

    A node whose physical usage fraction is the larger one hits the threshold
    on that axis first and strands ``threshold * Lcap * (1 - uL/uP)`` logical
    bytes; the other case strands ``threshold * Pcap * (1 - uP/uL)``
    physical bytes. Totals are percentages of cluster capacity on each axis.
    """
    wl = wp = 0.0
    for n in cluster.nodes:
        ul, up = n.logical_frac, n.physical_frac
        if ul == 0 and up == 0:
            continue
        if up > ul:
            wl += threshold * n.logical_capacity * (1 - ul / up)
        elif ul > up:
            wp += threshold * n.physical_capacity * (1 - up / ul)
    lcap = sum(n.logical_capacity for n in cluster.nodes)
    pcap = sum(n.physical_capacity for n in cluster.nodes)
    c_avg = cluster.c_avg
    used = [n for n in cluster.nodes if n.ratio is not None]
    below = sum(n.ratio < c_avg for n in used)
    above = sum(n.ratio > c_avg for n in used)
    count = len(cluster.nodes)
    return Imbalance(100 * wl / lcap, 100 * wp / pcap, 100 * below / count, 100 * above / count)


# ---- simulation

@dataclass(frozen=True)
class PopulationSpec:
    nodes: int = 100
    chunks_per_node: int = 20
    chunk_logical_bytes: int = 10 * GIB
    ratio_avg: float = 3.5  # byte-weighted cluster ratio the population is centred on
    ratio_sigma: float = 0.5
    node_sigma: float = 0.0  # extra per-node lognormal factor on chunk ratios
    fill: float = 0.6  # mean logical usage after placement
    min_ratio: float = 1.0

    @property
    def logical_capacity(self) -> int:
        return math.ceil(self.chunks_per_node * self.chunk_logical_bytes / self.fill)

    @property
    def physical_capacity(self) -> int:
        # balanced for a node at the cluster average
        return math.ceil(self.logical_capacity / self.ratio_avg)

    @property
    def mu(self) -> float:
        # physical bytes go as 1/ratio, and E[1/X] = exp(-mu + sigma^2/2) for lognormal X
        return math.log(self.ratio_avg) + self.ratio_sigma ** 2 / 2


def build_population(spec: PopulationSpec, config: SchedulerConfig, seed: int = 0) -> Cluster:
    """Chunks placed one by one on the least logically used node."""
    rng = random.Random(seed)
    cluster = Cluster([NodeState(i, spec.logical_capacity, spec.physical_capacity)
                       for i in range(spec.nodes)])
    mu = spec.mu
    chunk_id = 0
    for _ in range(spec.chunks_per_node):
        # one arrival per node per round; node factors model per-node tenant mixes
        for node in range(spec.nodes):
            ratio = max(spec.min_ratio, rng.lognormvariate(mu, spec.ratio_sigma))
            chunk = ChunkStats(chunk_id, spec.chunk_logical_bytes,
                               max(1, round(spec.chunk_logical_bytes / ratio)))
            chunk_id += 1
            allocate_chunk(cluster, chunk, config)
    if spec.node_sigma > 0:
        factors = [rng.lognormvariate(0.0, spec.node_sigma) for _ in cluster.nodes]
        for node, f in zip(cluster.nodes, factors):
            node.chunks = [ChunkStats(c.chunk_id, c.logical_bytes,
                                      max(1, round(c.logical_bytes / max(spec.min_ratio, c.ratio * f))))
                           for c in node.chunks]
    return cluster


@dataclass(frozen=True)
class StepReport:
    step: int
    moves: int
    in_range: float
    zones: dict
    imbalance: Imbalance
    violation: float


def _report(step, moves, cluster, config) -> StepReport:
    w_avg, c_avg = cluster.w_avg, cluster.c_avg
    zones = {z.value: 0 for z in Zone}
    for n in cluster.nodes:
        if in_band(n, w_avg, config.delta):
            zones[classify_zone(n, config, c_avg).value] += 1
    return StepReport(step, moves, in_range_fraction(cluster, config), zones,
                      imbalance(cluster, config.block_threshold), violation(cluster, config))


def schedule_round(cluster: Cluster, config: SchedulerConfig) -> tuple[Cluster, list[Migration]]:
    """Logical balancing first, then ratio balancing."""
    logical = plan_logical_balance(cluster, config)
    cluster, _ = apply_plan(cluster, logical)
    ratio = plan_migrations(cluster, config)
    cluster, _ = apply_plan(cluster, ratio)
    return cluster, logical + ratio


def simulate(spec: PopulationSpec, config: SchedulerConfig, steps: int = 1, seed: int = 0,
             growth: int = 0) -> tuple[list[StepReport], Cluster, Cluster]:
    """Step 0 is the initial placement; each later step optionally adds
    ``growth`` chunks and runs one scheduling round.

    Returns the time series and the initial and final clusters.
    """
    initial = build_population(spec, config, seed)
    rng = random.Random(seed + 1)
    cluster = initial
    series = [_report(0, 0, cluster, config)]
    next_id = sum(len(n.chunks) for n in cluster.nodes)
    mu = spec.mu
    for step in range(1, steps + 1):
        cluster = cluster.copy()
        for _ in range(growth):
            ratio = max(spec.min_ratio, rng.lognormvariate(mu, spec.ratio_sigma))
            try:
                allocate_chunk(cluster, ChunkStats(next_id, spec.chunk_logical_bytes,
                                                   max(1, round(spec.chunk_logical_bytes / ratio))),
                               config)
            except ClusterFull:
                break
            next_id += 1
        cluster, plan = schedule_round(cluster, config)
        series.append(_report(step, len(plan), cluster, config))
    return series, initial, cluster


def sweep_bounds(spec: PopulationSpec, candidates, seed: int = 0, base: SchedulerConfig | None = None):
    """Move count and resulting in-range fraction for each (c_l, c_h) pair."""
    base = base or SchedulerConfig()
    rows = []
    for c_l, c_h in candidates:
        cfg = SchedulerConfig(c_l, c_h, base.delta, base.block_threshold, base.migrate_trigger)
        initial = build_population(spec, cfg, seed)
        plan = plan_migrations(initial, cfg)
        final, stats = apply_plan(initial, plan)
        rows.append({"c_l": c_l, "c_h": c_h, "moves": stats.moves,
                     "bytes_moved": stats.logical_bytes,
                     "in_range": in_range_fraction(final, cfg)})
    return rows


# ---- records

def node_record(node: NodeState, config: SchedulerConfig, c_avg: float) -> str:
    r = node.ratio
    return format_record("node", [
        ("node_id", node.node_id), ("logical_used", node.logical_used),
        ("physical_used", node.physical_used), ("logical_capacity", node.logical_capacity),
        ("physical_capacity", node.physical_capacity),
        ("ratio", float(r) if r is not None else "none"),
        ("zone", classify_zone(node, config, c_avg).value)])


def step_record(rep: StepReport) -> str:
    im = rep.imbalance
    return format_record("step", [
        ("step", rep.step), ("moves", rep.moves), ("in_range", rep.in_range),
        ("zone_a", rep.zones["A"]), ("zone_b", rep.zones["B"]),
        ("zone_c", rep.zones["C"]), ("zone_d", rep.zones["D"]),
        ("wasted_logical_pct", im.wasted_logical_pct),
        ("wasted_physical_pct", im.wasted_physical_pct),
        ("below_avg_pct", im.below_avg_pct), ("above_avg_pct", im.above_avg_pct),
        ("violation", rep.violation)])


def sweep_record(row: dict) -> str:
    return format_record("sweep", [(k, row[k]) for k in ("c_l", "c_h", "moves", "bytes_moved", "in_range")])
