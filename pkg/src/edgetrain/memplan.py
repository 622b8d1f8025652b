"""Static memory planning: liveness, GEMM tiling, offset assignment and DMA accounting.

Allocation treats every tensor as a rectangle (live interval x bytes) and
packs the rectangles into a level with a greedy best-fit-decreasing
heuristic. Two placement policies exist:

``l2-first``
    Everything starts in L2; when the packed L2 peak exceeds its capacity,
    tensors move to L3 in order of descending ``bytes * lifetime`` until L2
    fits.
``l3-home``
    L3 is the home of every tensor and L2 only stages the operands of the
    node currently executing. This is the configuration for models whose
    weights plus training state do not fit L2 as a whole (the CCT).

L1 only ever holds tiles.

Transfer counting rule (L3 <-> L2): an L3-resident tensor is written once
by its producer and read once by every consumer node. Initializers and
graph inputs are read per consumer; an SGD update of an L3-resident weight
writes it back once. L2 <-> L1 traffic follows the tile plans: a tiled GEMM
refetches its A panel once per column of tiles and its B panel once per
row of tiles; other ops stream their operands once.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

from .ir import DTYPE_WIDTH, GEMM_LIKE, Graph, NodeSpec, ValidationError

LEVELS = ("L1", "L2", "L3")
STATIC_KINDS = ("input", "weight", "bias", "constant", "optimizer-state")
DYNAMIC_KINDS = ("activation", "gradient")


class PlanError(ValueError):
    pass


class CapacityError(PlanError):
    pass


@dataclass(frozen=True)
class MemHierarchy:
    l1: int = 131072
    l2: int = 2097152
    l3: int = 33554432

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3) <= 0:
            raise PlanError("memory capacities must be positive")
        if not self.l1 < self.l2 < self.l3:
            raise PlanError("memory capacities must satisfy L1 < L2 < L3")

    def capacity(self, level: str) -> int:
        return {"L1": self.l1, "L2": self.l2, "L3": self.l3}[level]

    @classmethod
    def parse(cls, text: str) -> "MemHierarchy":
        """Parse ``L1=131072,L2=2097152,L3=33554432`` (any subset, K/M suffixes allowed)."""
        vals = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            key, sep, val = item.partition("=")
            key = key.strip().upper()
            if not sep or key not in LEVELS:
                raise PlanError(f"bad memory spec item {item!r}; expected L1=..,L2=..,L3=..")
            vals[key.lower()] = _parse_bytes(val)
        return cls(**vals)


def _parse_bytes(val: str) -> int:
    val = val.strip().upper()
    mult = {"K": 1024, "M": 1024 ** 2}.get(val[-1:], 1)
    if mult != 1:
        val = val[:-1]
    try:
        return int(val) * mult
    except ValueError:
        raise PlanError(f"bad byte count {val!r}") from None


# ---------------------------------------------------------------------------
# liveness


@dataclass(frozen=True)
class LiveInterval:
    tensor: str
    first_def: int
    last_use: int  # inclusive
    bytes: int
    kind: str = "activation"
    alias_of: str | None = None  # shares storage with another tensor (SGD outputs)

    def overlaps(self, other: "LiveInterval") -> bool:
        return self.first_def <= other.last_use and other.first_def <= self.last_use

    @property
    def length(self) -> int:
        return self.last_use - self.first_def + 1


def liveness(tg) -> list[LiveInterval]:
    """One interval per tensor of a training graph, in schedule coordinates.

    Initializers and graph inputs span the whole step. A produced tensor lives
    from its producer to its last consumer (graph outputs to the end). SGD
    outputs alias the weight they update.
    """
    g: Graph = tg.graph
    schedule = tg.schedule
    end = max(len(schedule) - 1, 0)
    defined: dict[str, int] = {}
    last: dict[str, int] = {}
    static = set(g.inputs) | set(g.initializers)
    for t in static:
        defined[t] = 0
        last[t] = end
    alias = {}
    for i, n in enumerate(schedule):
        for t in n.inputs:
            if t not in defined:
                raise ValidationError(f"tensor {t!r} used before it is defined", n.name)
            last[t] = max(last[t], i)
        for t in n.outputs:
            if t in defined:
                raise ValidationError(f"tensor {t!r} defined twice", n.name)
            defined[t] = last[t] = i
        if n.op == "SgdUpdate":
            alias[n.outputs[0]] = n.inputs[0]
    for t in list(g.outputs) + ([g.loss] if g.loss else []):
        if t in last:
            last[t] = end
    out = []
    for name in g.tensors:
        if name not in defined:
            continue
        spec = g.tensors[name]
        out.append(LiveInterval(name, defined[name], last[name], spec.byte_size, spec.kind, alias.get(name)))
    return out


def max_live_bytes(intervals) -> int:
    """Largest sum of live bytes at any schedule index (a lower bound on any packing)."""
    events = []
    for iv in intervals:
        if iv.alias_of is None:
            events.append((iv.first_def, 0, iv.bytes))
            events.append((iv.last_use, 1, -iv.bytes))
    best = cur = 0
    for _, _, b in sorted(events):
        cur += b
        best = max(best, cur)
    return best


# ---------------------------------------------------------------------------
# offset assignment


# orderings tried by the greedy packer; the lowest peak wins (first on ties)
PACK_ORDERS = (
    lambda iv: (-iv.bytes, -iv.length, iv.tensor),
    lambda iv: (-iv.length, -iv.bytes, iv.tensor),
    lambda iv: (-iv.bytes * iv.length, iv.tensor),
    lambda iv: (iv.first_def, -iv.bytes, iv.tensor),
)


def pack(intervals, align: int = 1) -> tuple[dict[str, int], int]:
    """Greedy best-fit strip packing; returns (offsets, peak).

    Each ordering in :data:`PACK_ORDERS` is placed best-fit and the packing
    with the lowest peak is kept.
    """
    items = [iv for iv in intervals if iv.alias_of is None]
    best = None
    for key in PACK_ORDERS:
        res = _best_fit(sorted(items, key=key), align)
        if best is None or res[1] < best[1]:
            best = res
    return best


def _best_fit(items, align):
    placed: list[tuple[LiveInterval, int]] = []
    offsets: dict[str, int] = {}
    peak = 0
    for iv in items:
        size = _round_up(iv.bytes, align)
        busy = sorted((off, off + _round_up(o.bytes, align)) for o, off in placed if o.overlaps(iv))
        best = None
        cursor = 0
        for lo, hi in busy:
            gap = lo - cursor
            if gap >= size and (best is None or gap < best[1]):
                best = (cursor, gap)
            cursor = max(cursor, hi)
        off = best[0] if best is not None else cursor
        offsets[iv.tensor] = off
        placed.append((iv, off))
        peak = max(peak, off + size)
    return offsets, peak


def _round_up(x: int, a: int) -> int:
    return -(-x // a) * a


def optimal_peak(intervals) -> int:
    """Exact minimum packing peak by branch and bound (small instances only).

    Any packing can be compacted downwards until every rectangle rests at 0
    or on top of a time-overlapping rectangle, so it suffices to enumerate
    placements in offset order with offsets drawn from those resting points.
    """
    items = [iv for iv in intervals if iv.alias_of is None and iv.bytes > 0]
    n = len(items)
    if n == 0:
        return 0
    if n > 10:
        raise PlanError("exact packing oracle limited to 10 tensors")
    lower = max_live_bytes(items)
    best = [pack(items)[1]]
    over = [[a.overlaps(b) for b in items] for a in items]
    offs = [-1] * n

    def dfs(count: int, min_off: int, peak: int) -> bool:
        if peak >= best[0]:
            return False
        if count == n:
            best[0] = peak
            return peak == lower
        for i in range(n):
            if offs[i] >= 0:
                continue
            cands = {0} | {offs[j] + items[j].bytes for j in range(n) if offs[j] >= 0 and over[i][j]}
            for c in sorted(cands):
                if c < min_off:
                    continue
                top = c + items[i].bytes
                if any(offs[j] >= 0 and over[i][j] and offs[j] < top and c < offs[j] + items[j].bytes
                       for j in range(n)):
                    continue
                offs[i] = c
                done = dfs(count + 1, c, max(peak, top))
                offs[i] = -1
                if done:
                    return True
        return False

    if best[0] > lower:
        dfs(0, 0, 0)
    return best[0]


@dataclass(frozen=True)
class Placement:
    level: str
    offset: int
    interval: LiveInterval


@dataclass
class AllocationPlan:
    placements: dict[str, Placement]
    peaks: dict[str, int]
    hierarchy: MemHierarchy
    policy: str = "l2-first"
    spilled: list[str] = field(default_factory=list)

    def level_of(self, tensor: str) -> str:
        return self.placements[tensor].level

    def check(self) -> None:
        """Raise if two live-overlapping tensors share addresses or a level overflows."""
        by_level: dict[str, list[Placement]] = {}
        for p in self.placements.values():
            if p.interval.alias_of is None:
                by_level.setdefault(p.level, []).append(p)
        for level, ps in by_level.items():
            top = max((p.offset + p.interval.bytes for p in ps), default=0)
            if top > self.hierarchy.capacity(level):
                raise CapacityError(f"{level} peak {top} exceeds capacity {self.hierarchy.capacity(level)}")
            ps = sorted(ps, key=lambda p: p.offset)
            for a, b in itertools.combinations(ps, 2):
                if a.interval.overlaps(b.interval) and a.offset < b.offset + b.interval.bytes \
                        and b.offset < a.offset + a.interval.bytes:
                    raise PlanError(f"{a.interval.tensor!r} and {b.interval.tensor!r} overlap in {level}")

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "hierarchy": asdict(self.hierarchy),
            "peaks": self.peaks,
            "spilled": self.spilled,
            "placements": {k: {"level": p.level, "offset": p.offset, **_iv_dict(p.interval)}
                           for k, p in sorted(self.placements.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationPlan":
        hier = MemHierarchy(**d["hierarchy"])
        pl = {}
        for k, v in d["placements"].items():
            iv = LiveInterval(k, v["first_def"], v["last_use"], v["bytes"], v["kind"], v["alias_of"])
            pl[k] = Placement(v["level"], v["offset"], iv)
        return cls(pl, dict(d["peaks"]), hier, d["policy"], list(d["spilled"]))


def _iv_dict(iv: LiveInterval) -> dict:
    return {"first_def": iv.first_def, "last_use": iv.last_use, "bytes": iv.bytes,
            "kind": iv.kind, "alias_of": iv.alias_of}


POLICIES = ("l2-first", "l3-home")


def allocate(intervals, hier: MemHierarchy = MemHierarchy(), policy: str = "l2-first",
             staging: int = 0) -> AllocationPlan:
    """Assign every tensor a (level, offset).

    ``staging`` is the L2 working set reported for the ``l3-home`` policy
    (see :func:`staging_bytes`).
    """
    if policy not in POLICIES:
        raise PlanError(f"unknown allocation policy {policy!r}; choose from {POLICIES}")
    intervals = list(intervals)
    names = [iv.tensor for iv in intervals]
    if len(set(names)) != len(names):
        raise PlanError("duplicate tensor in interval list")
    by_name = {iv.tensor: iv for iv in intervals}
    for iv in intervals:
        if iv.first_def > iv.last_use:
            raise PlanError(f"interval of {iv.tensor!r} ends before it starts")
        if iv.alias_of is not None and iv.alias_of not in by_name:
            raise PlanError(f"{iv.tensor!r} aliases unknown tensor {iv.alias_of!r}")
    roots = [iv for iv in intervals if iv.alias_of is None]
    # an alias extends the storage lifetime of its target
    ext = {iv.tensor: iv for iv in roots}
    for iv in intervals:
        if iv.alias_of is not None:
            t = ext[iv.alias_of]
            ext[t.tensor] = LiveInterval(t.tensor, t.first_def, max(t.last_use, iv.last_use), t.bytes, t.kind)
    roots = [ext[iv.tensor] for iv in roots]

    if policy == "l3-home":
        if staging > hier.l2:
            raise CapacityError(f"staging working set {staging} exceeds L2 ({hier.l2})")
        in_l2, in_l3 = [], list(roots)
    else:
        in_l2, in_l3 = list(roots), []
    order = sorted(roots, key=lambda iv: (-iv.bytes * iv.length, iv.tensor))
    k = 0
    # skip packings that cannot possibly fit
    while policy == "l2-first" and max_live_bytes(in_l2) > hier.l2:
        in_l3.append(order[k])
        k += 1
        in_l2 = [iv for iv in in_l2 if iv is not order[k - 1]]
    off2, peak2 = pack(in_l2)
    while policy == "l2-first" and peak2 > hier.l2:
        in_l3.append(order[k])
        k += 1
        in_l2 = [iv for iv in in_l2 if iv is not order[k - 1]]
        off2, peak2 = pack(in_l2)
    off3, peak3 = pack(in_l3)
    if peak3 > hier.l3:
        raise CapacityError(f"demand exceeds L2+L3: L3 peak {peak3} > {hier.l3}")
    placements = {}
    for iv in roots:
        lvl, off = ("L2", off2[iv.tensor]) if iv.tensor in off2 else ("L3", off3[iv.tensor])
        placements[iv.tensor] = Placement(lvl, off, by_name[iv.tensor])
    for iv in intervals:
        if iv.alias_of is not None:
            tgt = placements[iv.alias_of]
            placements[iv.tensor] = Placement(tgt.level, tgt.offset, iv)
    if policy == "l3-home":
        peak2 = staging
    spilled = sorted(iv.tensor for iv in in_l3) if policy == "l2-first" else []
    return AllocationPlan(placements, {"L1": 0, "L2": peak2, "L3": peak3}, hier, policy, spilled)


def staging_bytes(tg) -> int:
    """Largest per-node operand footprint, i.e. the L2 staging area needed under ``l3-home``."""
    g = tg.graph
    return max((sum(g.tensors[t].byte_size for t in set(n.inputs) | set(n.outputs)) for n in tg.schedule),
               default=0)


def dynamic_peak(intervals) -> int:
    """Packed peak of activations and gradients alone (weights and inputs excluded)."""
    return pack([iv for iv in intervals if iv.kind in DYNAMIC_KINDS and iv.alias_of is None])[1]


def peak_report(plan: AllocationPlan) -> dict:
    ivs = [p.interval for p in plan.placements.values()]
    return {
        "peak_bytes": dict(plan.peaks),
        "dynamic_peak": dynamic_peak(ivs),
        "static_bytes": sum(iv.bytes for iv in ivs if iv.kind in STATIC_KINDS and iv.alias_of is None),
        "max_live": max_live_bytes(ivs),
    }


# ---------------------------------------------------------------------------
# tiling


def gemm_dims(node: NodeSpec, g: Graph) -> tuple[int, int, int, int]:
    """(batch, M, N, K) of a GEMM-like node, convolutions taken after im2col."""
    shp = lambda t: g.tensors[t].shape  # noqa: E731
    a = node.attrs
    if node.op == "Gemm":
        sa, sb = shp(node.inputs[0]), shp(node.inputs[1])
        m, k = (sa[-1], sa[-2]) if a["transA"] else (sa[-2], sa[-1])
        n = sb[-2] if a["transB"] else sb[-1]
        batch = math.prod(shp(node.outputs[0])[:-2])
        return batch, m, n, k
    kk = a["kernel"] ** 2
    if node.op == "Conv2D":
        x, y = shp(node.inputs[0]), shp(node.outputs[0])
        return x[0], y[2] * y[3], y[1], x[1] * kk
    if node.op == "Conv2DGradInput":
        w, dy = shp(node.inputs[0]), shp(node.inputs[1])
        return dy[0], dy[2] * dy[3], w[1] * kk, w[0]
    if node.op == "Conv2DGradWeight":
        x, dy = shp(node.inputs[0]), shp(node.inputs[1])
        return 1, dy[1], x[1] * kk, dy[0] * dy[2] * dy[3]
    raise PlanError(f"{node.op} is not GEMM-like")


def _candidates(n: int) -> list[int]:
    c = {n}
    p = 1
    while p < n:
        c.add(p)
        p *= 2
    return sorted(c, reverse=True)


@dataclass(frozen=True)
class TilePlan:
    node: str
    batch: int
    m: int
    n: int
    k: int
    mt: int
    nt: int
    kt: int
    width: int
    buffers: int = 2
    accel: bool = False

    @property
    def split_k(self) -> bool:
        return self.kt < self.k

    @property
    def tile_bytes(self) -> int:
        """L1 bytes of one buffer set (A, B and C tiles, plus an accumulator when K is split)."""
        b = (self.mt * self.kt + self.kt * self.nt + self.mt * self.nt) * self.width
        if self.split_k:
            b += self.mt * self.nt * self.width
        return b

    @property
    def l1_bytes(self) -> int:
        return self.tile_bytes * self.buffers

    @property
    def iterations(self) -> tuple[int, int, int]:
        return (-(-self.m // self.mt), -(-self.n // self.nt), -(-self.k // self.kt))

    @property
    def tile_count(self) -> int:
        return self.batch * math.prod(self.iterations)

    def tiles(self):
        """Yield ``(m0, m1, n0, n1, k0, k1)`` for one batch entry; remainders are clamped."""
        for m0 in range(0, self.m, self.mt):
            for n0 in range(0, self.n, self.nt):
                for k0 in range(0, self.k, self.kt):
                    yield m0, min(m0 + self.mt, self.m), n0, min(n0 + self.nt, self.n), k0, min(k0 + self.kt, self.k)

    def l2_l1_bytes(self, bias: bool = False) -> int:
        """Operand traffic between L2 and L1 implied by the tile loop order."""
        im, in_, _ = self.iterations
        w = self.width
        per = self.m * self.k * in_ + self.k * self.n * im + self.m * self.n
        if bias:
            per += self.n * im
        return self.batch * per * w


def tile_gemm(node: NodeSpec, g: Graph, hier: MemHierarchy = MemHierarchy(), accel: bool = False,
              buffers: int = 2) -> TilePlan:
    """Largest tile volume under ``buffers * tile_bytes <= L1``; ties prefer larger Mt, Nt, Kt."""
    batch, m, n, k = gemm_dims(node, g)
    width = DTYPE_WIDTH[g.tensors[node.outputs[0]].dtype]
    return _search_tiles(node.name, batch, m, n, k, width, hier.l1, accel, buffers)


def _search_tiles(name, batch, m, n, k, width, l1, accel, buffers) -> TilePlan:
    best = None
    best_key = None
    for mt in _candidates(m):
        for nt in _candidates(n):
            for kt in _candidates(k):
                plan = TilePlan(name, batch, m, n, k, mt, nt, kt, width, buffers, accel)
                if plan.l1_bytes > l1:
                    continue
                key = (mt * nt * kt, mt, nt, kt)
                if best_key is None or key > best_key:
                    best, best_key = plan, key
                break  # smaller kt only lowers the volume for this (mt, nt)
    if best is None:
        raise PlanError(f"no feasible tile for {name!r}: a single element exceeds L1 ({l1} B)")
    return best


def plan_tiles(tg, hier: MemHierarchy = MemHierarchy(), accel: bool = False) -> dict[str, TilePlan]:
    g = tg.graph
    return {n.name: tile_gemm(n, g, hier, accel) for n in tg.schedule if n.op in GEMM_LIKE}


def tiles_to_dict(tiles: dict[str, TilePlan]) -> dict:
    return {k: asdict(v) for k, v in sorted(tiles.items())}


def tiles_from_dict(d: dict) -> dict[str, TilePlan]:
    return {k: TilePlan(**v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# transfers


@dataclass(frozen=True)
class Transfer:
    tensor: str
    src: str
    dst: str
    bytes: int
    index: int


@dataclass
class TransferLedger:
    rows: list[Transfer]

    def total(self, a: str, b: str) -> int:
        """Bytes moved between levels ``a`` and ``b`` in either direction."""
        return sum(r.bytes for r in self.rows if {r.src, r.dst} == {a, b})

    def totals(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            key = f"{r.src}->{r.dst}"
            out[key] = out.get(key, 0) + r.bytes
        return dict(sorted(out.items()))

    def per_node(self, a: str, b: str) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.rows:
            if {r.src, r.dst} == {a, b}:
                out[r.index] = out.get(r.index, 0) + r.bytes
        return out

    def to_dict(self) -> dict:
        return {"totals": self.totals(), "rows": [asdict(r) for r in self.rows]}


def transfer_volume(tg, plan: AllocationPlan, tiles: dict[str, TilePlan]) -> TransferLedger:
    g = tg.graph
    rows: list[Transfer] = []
    for i, node in enumerate(tg.schedule):
        for t in dict.fromkeys(node.inputs):
            if plan.level_of(t) == "L3":
                rows.append(Transfer(t, "L3", "L2", g.tensors[t].byte_size, i))
        for t in node.outputs:
            if plan.level_of(t) == "L3":
                rows.append(Transfer(t, "L2", "L3", g.tensors[t].byte_size, i))
        if node.op in GEMM_LIKE:
            tp = tiles.get(node.name)
            if tp is None:
                raise PlanError(f"missing tile plan for {node.name!r}")
            has_bias = node.op == "Gemm" and len(node.inputs) > 2
            moved = tp.l2_l1_bytes(bias=has_bias)
            out_b = g.tensors[node.outputs[0]].byte_size
            rows.append(Transfer(node.name, "L2", "L1", moved - out_b, i))
            rows.append(Transfer(node.name, "L1", "L2", out_b, i))
        else:
            rows.append(Transfer(node.name, "L2", "L1", sum(g.tensors[t].byte_size for t in node.inputs), i))
            rows.append(Transfer(node.name, "L1", "L2", sum(g.tensors[t].byte_size for t in node.outputs), i))
    return TransferLedger(rows)


def plan_training_graph(tg, hier: MemHierarchy = MemHierarchy(), accel: bool = False, policy: str = "l2-first"):
    """Convenience: liveness, allocation, tiling and transfer ledger in one call."""
    ivs = liveness(tg)
    plan = allocate(ivs, hier, policy, staging_bytes(tg) if policy == "l3-home" else 0)
    tiles = plan_tiles(tg, hier, accel)
    return plan, tiles, transfer_volume(tg, plan, tiles)


def plan_to_json(plan: AllocationPlan, tiles: dict[str, TilePlan], ledger: TransferLedger | None = None) -> str:
    doc = {"allocation": plan.to_dict(), "tiles": tiles_to_dict(tiles)}
    if ledger is not None:
        doc["transfers"] = ledger.to_dict()
    return json.dumps(doc, indent=1, sort_keys=True)
