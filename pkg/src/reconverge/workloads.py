"""Synthetic CFG generators (hammock, nested diamond, loop, random reducible)
with construction-time merge ground truth emitted as a sidecar."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .program import (
    ALU,
    BRANCH,
    LOAD,
    NOP,
    AlwaysNotTaken,
    AlwaysTaken,
    BasicBlock,
    Bernoulli,
    CondBranch,
    Fallthrough,
    Fixed,
    Halt,
    InstrTemplate,
    Jump,
    LoadMissProb,
    Pattern,
    ProgramModel,
    regmask,
)

HAMMOCK = "hammock"
NESTED = "nested_diamond"
LOOP = "loop_with_exit"
RANDOM = "random_reducible"
SHAPES = (HAMMOCK, NESTED, LOOP, RANDOM)


@dataclass
class GenParams:
    shape: str = HAMMOCK
    block_size_range: tuple = (2, 4)
    branch_bias: list = field(default_factory=list)  # per-site, cycled; empty -> shape default
    seed: int = 0
    reg_pressure: float = 0.5
    arch_reg_count: int = 16
    wrap: bool = True  # loop the whole shape so runs can retire unbounded counts
    trip_count: int = 10  # loop_with_exit iterations per pattern period
    eps: float = 0.0  # nested_diamond: probability of the rarely-taken inner edges
    branch_load_miss: float = 0.0  # >0 feeds the main branch from a probabilistic-miss load
    load_miss_cycles: int = 200
    num_blocks: Optional[int] = None  # random_reducible target; None -> seeded 5..50


@dataclass
class TruthSite:
    """Construction-time merge facts for one branch site.

    kind: "merge" (merge_pc/distances exact), "no_merge" (provably none
    within the distance cap), or "unknown" (instance-dependent; skipped by
    the agreement check). Distances are 1-based dynamic positions of the
    merge instruction after the branch, walking the named direction.
    """

    site_id: int
    branch_pc: int
    kind: str
    merge_pc: Optional[int] = None
    dist_taken: Optional[int] = None
    dist_nottaken: Optional[int] = None
    regs_taken: int = 0
    regs_nottaken: int = 0


@dataclass
class GroundTruth:
    shape: str
    sites: dict  # site_id -> TruthSite


def save_truth(truth: GroundTruth, sink) -> None:
    data = {
        "format": 1,
        "shape": truth.shape,
        "sites": {
            str(t.site_id): {
                "branch_pc": t.branch_pc,
                "kind": t.kind,
                "merge_pc": t.merge_pc,
                "dist_taken": t.dist_taken,
                "dist_nottaken": t.dist_nottaken,
                "regs_taken": t.regs_taken,
                "regs_nottaken": t.regs_nottaken,
            }
            for t in truth.sites.values()
        },
    }
    text = json.dumps(data, indent=1, sort_keys=True)
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w") as f:
            f.write(text)


def load_truth(source) -> GroundTruth:
    if hasattr(source, "read"):
        data = json.loads(source.read())
    else:
        with open(source) as f:
            data = json.load(f)
    sites = {}
    for sid, raw in data["sites"].items():
        sites[int(sid)] = TruthSite(
            int(sid),
            raw["branch_pc"],
            raw["kind"],
            raw["merge_pc"],
            raw["dist_taken"],
            raw["dist_nottaken"],
            raw["regs_taken"],
            raw["regs_nottaken"],
        )
    return GroundTruth(data["shape"], sites)


class _Builder:
    """Accumulates blocks with seeded instruction bodies."""

    def __init__(self, params: GenParams):
        self.p = params
        self.rng = random.Random(params.seed)
        self.blocks: list[BasicBlock] = []
        self.sources = {}
        self.next_site = 0
        self._next_id = 0

    def block_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def body(self, size: Optional[int] = None) -> list[InstrTemplate]:
        lo, hi = self.p.block_size_range
        n = size if size is not None else self.rng.randint(lo, hi)
        n = max(1, n)
        nregs = self.p.arch_reg_count
        if self.p.reg_pressure > 0:
            pool = self.rng.sample(range(nregs), max(1, min(nregs, round(self.p.reg_pressure * nregs))))
        else:
            pool = []
        out = []
        for _ in range(n):
            if pool:
                dest = regmask([self.rng.choice(pool)])
                src = regmask(self.rng.sample(range(nregs), self.rng.randint(1, 2)))
                out.append(InstrTemplate(0, ALU, dest, src, Fixed(1)))
            else:
                out.append(InstrTemplate(0, NOP, 0, 0, Fixed(1)))
        return out

    def branch_instr(self, src_reg: Optional[int] = None) -> InstrTemplate:
        src = regmask([src_reg]) if src_reg is not None else regmask(
            [self.rng.randrange(self.p.arch_reg_count)]
        )
        return InstrTemplate(0, BRANCH, 0, src, Fixed(1))

    def feeder_load(self, dest_reg: int) -> InstrTemplate:
        lat = LoadMissProb(self.p.branch_load_miss, 3, self.p.load_miss_cycles)
        addr = regmask([self.rng.randrange(self.p.arch_reg_count)])
        return InstrTemplate(0, LOAD, regmask([dest_reg]), addr, lat)

    def site(self, source) -> int:
        sid = self.next_site
        self.next_site += 1
        self.sources[sid] = source
        return sid

    def bias_for(self, ordinal: int, default: float) -> float:
        if self.p.branch_bias:
            return self.p.branch_bias[ordinal % len(self.p.branch_bias)]
        return default

    def add(self, bid: int, instrs, term) -> BasicBlock:
        blk = BasicBlock(bid, instrs, term)
        self.blocks.append(blk)
        return blk

    def finish(self, entry: int) -> ProgramModel:
        return ProgramModel(self.blocks, entry, self.sources, self.p.arch_reg_count)


def _writes(block: BasicBlock) -> int:
    m = 0
    for ins in block.instrs:
        m |= ins.dest_regs
    return m


def _cond_block_body(b: _Builder, load_fed: bool) -> list[InstrTemplate]:
    # body whose final branch sources either a feeder load or a local ALU reg
    instrs = b.body()
    if load_fed:
        feed = b.rng.randrange(b.p.arch_reg_count)
        instrs = [b.feeder_load(feed)] + instrs + [b.branch_instr(feed)]
    else:
        instrs = instrs + [b.branch_instr()]
    return instrs


def _append_wrap(b: _Builder, tail_instrs: list, entry_id: int):
    """Give the closing block a statically-exiting loop-back branch."""
    wrap_site = b.site(AlwaysTaken())
    halt_id = b.block_id()
    tail = tail_instrs + [b.branch_instr()]
    return tail, wrap_site, halt_id, CondBranch(entry_id, halt_id, wrap_site)


def gen_hammock(params: GenParams):
    """A -> {B, C} -> D with D the unique merge of A's branch."""
    b = _Builder(params)
    a_id, b_id, c_id, d_id = b.block_id(), b.block_id(), b.block_id(), b.block_id()
    site = b.site(Bernoulli(b.bias_for(0, 0.5), seed=1))
    a = b.add(a_id, _cond_block_body(b, params.branch_load_miss > 0), CondBranch(b_id, c_id, site))
    arm_b = b.add(b_id, b.body(), Jump(d_id))
    arm_c = b.add(c_id, b.body(), Jump(d_id))
    if params.wrap:
        tail, _, halt_id, term = _append_wrap(b, b.body(), a_id)
        d = b.add(d_id, tail, term)
        b.add(halt_id, [InstrTemplate(0, NOP, 0, 0, Fixed(1))], Halt())
    else:
        d = b.add(d_id, b.body(), Halt())
    model = b.finish(a_id)
    branch_pc = a.instrs[-1].pc
    sites = {
        site: TruthSite(
            site,
            branch_pc,
            "merge",
            merge_pc=d.instrs[0].pc,
            dist_taken=len(arm_b.instrs) + 1,
            dist_nottaken=len(arm_c.instrs) + 1,
            regs_taken=_writes(arm_b),
            regs_nottaken=_writes(arm_c),
        )
    }
    if params.wrap:
        wrap_site = site + 1
        sites[wrap_site] = TruthSite(wrap_site, d.instrs[-1].pc, "no_merge")
    return model, GroundTruth(HAMMOCK, sites)


def gen_nested(params: GenParams):
    """Fig-style nested diamond A->{B,C}, B->{D,E}, C->{D,E}, D->F, E->F.

    The inner not-taken edges (to E) fire with probability eps; at eps 0 the
    first dynamic merge of A is D while the static postdominator stays F.
    """
    b = _Builder(params)
    ids = {k: b.block_id() for k in "ABCDEF"}
    site_a = b.site(Bernoulli(b.bias_for(0, 0.5), seed=1))
    site_b = b.site(Bernoulli(1.0 - params.eps, seed=2))
    site_c = b.site(Bernoulli(1.0 - params.eps, seed=3))
    a = b.add(ids["A"], _cond_block_body(b, params.branch_load_miss > 0), CondBranch(ids["B"], ids["C"], site_a))
    blk_b = b.add(ids["B"], b.body() + [b.branch_instr()], CondBranch(ids["D"], ids["E"], site_b))
    blk_c = b.add(ids["C"], b.body() + [b.branch_instr()], CondBranch(ids["D"], ids["E"], site_c))
    blk_d = b.add(ids["D"], b.body(), Jump(ids["F"]))
    blk_e = b.add(ids["E"], b.body(), Jump(ids["F"]))
    if params.wrap:
        tail, _, halt_id, term = _append_wrap(b, b.body(), ids["A"])
        blk_f = b.add(ids["F"], tail, term)
        b.add(halt_id, [InstrTemplate(0, NOP, 0, 0, Fixed(1))], Halt())
    else:
        blk_f = b.add(ids["F"], b.body(), Halt())
    model = b.finish(ids["A"])

    sites = {}
    if params.eps == 0.0:
        inner_target, inner_dist_extra = blk_d, 0
        merge_a = blk_d.instrs[0].pc
    elif params.eps == 1.0:
        inner_target, inner_dist_extra = blk_e, 0
        merge_a = blk_e.instrs[0].pc
    else:
        merge_a = None
    if merge_a is not None:
        sites[site_a] = TruthSite(
            site_a,
            a.instrs[-1].pc,
            "merge",
            merge_pc=merge_a,
            dist_taken=len(blk_b.instrs) + 1,
            dist_nottaken=len(blk_c.instrs) + 1,
            regs_taken=_writes(blk_b),
            regs_nottaken=_writes(blk_c),
        )
    else:
        sites[site_a] = TruthSite(site_a, a.instrs[-1].pc, "unknown")
    # inner sites always merge at F regardless of eps: arms D and E are plain
    f_pc = blk_f.instrs[0].pc
    for sid, blk in ((site_b, blk_b), (site_c, blk_c)):
        sites[sid] = TruthSite(
            sid,
            blk.instrs[-1].pc,
            "merge",
            merge_pc=f_pc,
            dist_taken=len(blk_d.instrs) + 1,
            dist_nottaken=len(blk_e.instrs) + 1,
            regs_taken=_writes(blk_d),
            regs_nottaken=_writes(blk_e),
        )
    if params.wrap:
        wrap_site = site_c + 1
        sites[wrap_site] = TruthSite(wrap_site, blk_f.instrs[-1].pc, "no_merge")
    return model, GroundTruth(NESTED, sites)


def gen_loop(params: GenParams):
    """Preheader -> body (back-edge conditional) -> exit block.

    The back-edge pattern runs trip_count-1 taken then one not-taken, so the
    branch pc recurs on the wrong path well before any merge when unwrapped.
    """
    b = _Builder(params)
    p_id, body_id, e_id = b.block_id(), b.block_id(), b.block_id()
    bits = tuple([1] * (params.trip_count - 1) + [0])
    site = b.site(Pattern(bits))
    pre = b.add(p_id, b.body(), Fallthrough())
    body = b.add(body_id, _cond_block_body(b, params.branch_load_miss > 0), CondBranch(body_id, e_id, site))
    if params.wrap:
        tail, _, halt_id, term = _append_wrap(b, b.body(), p_id)
        exit_blk = b.add(e_id, tail, term)
        b.add(halt_id, [InstrTemplate(0, NOP, 0, 0, Fixed(1))], Halt())
    else:
        exit_blk = b.add(e_id, b.body(), Halt())
    model = b.finish(p_id)
    branch_pc = body.instrs[-1].pc
    sites = {}
    if params.wrap:
        # loop body re-entry is the merge: it executes next whether the
        # branch loops or exits-and-wraps
        back_dist = len(exit_blk.instrs) + len(pre.instrs) + 1
        sites[site] = TruthSite(
            site,
            branch_pc,
            "merge",
            merge_pc=body.instrs[0].pc,
            dist_taken=1,
            dist_nottaken=back_dist,
            regs_taken=0,
            regs_nottaken=_writes(exit_blk) | _writes(pre),
        )
        wrap_site = site + 1
        sites[wrap_site] = TruthSite(wrap_site, exit_blk.instrs[-1].pc, "no_merge")
    else:
        sites[site] = TruthSite(site, branch_pc, "no_merge")
    return model, GroundTruth(LOOP, sites)


def gen_random_reducible(params: GenParams):
    """Seeded structured-random reducible CFG with a unique halt block."""
    b = _Builder(params)
    target = params.num_blocks if params.num_blocks is not None else b.rng.randint(5, 50)
    target = max(5, min(50, target))
    sites: dict[int, TruthSite] = {}
    # reserve ids for entry / closing / halt so the wrap edge is known early
    entry_id = b.block_id()
    chunks: list[tuple] = []  # (first_block_id, blocks) per structured region
    budget = [target - 3]

    def plain() -> BasicBlock:
        bid = b.block_id()
        budget[0] -= 1
        return b.add(bid, b.body(), Jump(-1))  # successor patched by caller

    def region(depth: int) -> tuple:
        """Emit one region; returns (entry_id, exit_block) with exit.term
        left as Jump(-1) to be patched to the continuation."""
        roll = b.rng.random()
        if depth > 2 or budget[0] < 4 or roll < 0.25:
            blk = plain()
            return blk.id, blk
        if roll < 0.70:  # diamond
            cid = b.block_id()
            budget[0] -= 1
            sid = b.site(Bernoulli(b.bias_for(len(sites), b.rng.uniform(0.1, 0.9)), seed=b.rng.randrange(1 << 20)))
            simple = b.rng.random() < 0.6 or budget[0] < 8
            if simple:
                t_entry, t_exit = (lambda blk: (blk.id, blk))(plain())
                n_entry, n_exit = (lambda blk: (blk.id, blk))(plain())
            else:
                t_entry, t_exit = region(depth + 1)
                n_entry, n_exit = region(depth + 1)
            join = plain()
            cond = b.add(cid, b.body() + [b.branch_instr()], CondBranch(t_entry, n_entry, sid))
            t_exit.term = Jump(join.id)
            n_exit.term = Jump(join.id)
            if simple:
                t_blk = b.blocks[b.block_index_of(t_entry)] if hasattr(b, "block_index_of") else None
            # exact truth only when both arms are single plain blocks
            if simple:
                tb = next(x for x in b.blocks if x.id == t_entry)
                nb = next(x for x in b.blocks if x.id == n_entry)
                sites[sid] = TruthSite(
                    sid,
                    cond.instrs[-1].pc,  # pc placeholder; re-resolved after finish
                    "merge",
                    merge_pc=None,  # patched after pc assignment
                    dist_taken=len(tb.instrs) + 1,
                    dist_nottaken=len(nb.instrs) + 1,
                    regs_taken=_writes(tb),
                    regs_nottaken=_writes(nb),
                )
                sites[sid]._blocks = (cond, next(x for x in b.blocks if x.id == join.id))  # type: ignore
            else:
                sites[sid] = TruthSite(sid, 0, "unknown")
                sites[sid]._blocks = (cond, None)  # type: ignore
            return cid, join
        # while-style loop: entry body block with a back edge
        head = plain()
        cid = b.block_id()
        budget[0] -= 1
        sid = b.site(Bernoulli(b.rng.uniform(0.6, 0.9), seed=b.rng.randrange(1 << 20)))
        cond = b.add(cid, b.body() + [b.branch_instr()], CondBranch(head.id, -1, sid))
        head.term = Jump(cid)
        sites[sid] = TruthSite(sid, 0, "unknown")
        sites[sid]._blocks = (cond, None)  # type: ignore
        tail = plain()
        cond.term = CondBranch(head.id, tail.id, sid)
        return head.id, tail

    first_region, prev_exit = region(0)
    entry = b.add(entry_id, b.body(), Jump(first_region))
    b.blocks.remove(entry)
    b.blocks.insert(0, entry)
    while budget[0] > 1:
        nxt_entry, nxt_exit = region(0)
        prev_exit.term = Jump(nxt_entry)
        prev_exit = nxt_exit
    close_id = b.block_id()
    halt_id = b.block_id()
    wrap_site = b.site(AlwaysTaken())
    closing = b.add(close_id, b.body() + [b.branch_instr()], CondBranch(entry_id, halt_id, wrap_site))
    prev_exit.term = Jump(close_id)
    b.add(halt_id, [InstrTemplate(0, NOP, 0, 0, Fixed(1))], Halt())
    model = b.finish(entry_id)
    # resolve pcs recorded before assignment
    resolved = {}
    for sid, t in sites.items():
        cond, join = t._blocks  # type: ignore
        del t._blocks  # type: ignore
        t.branch_pc = cond.instrs[-1].pc
        if t.kind == "merge":
            t.merge_pc = join.instrs[0].pc
        resolved[sid] = t
    resolved[wrap_site] = TruthSite(wrap_site, closing.instrs[-1].pc, "no_merge")
    return model, GroundTruth(RANDOM, resolved)


_GENERATORS = {
    HAMMOCK: gen_hammock,
    NESTED: gen_nested,
    LOOP: gen_loop,
    RANDOM: gen_random_reducible,
}


def generate(params: GenParams):
    """Dispatch on params.shape; returns (ProgramModel, GroundTruth)."""
    if params.shape not in _GENERATORS:
        raise ValueError(f"unknown shape {params.shape!r}")
    return _GENERATORS[params.shape](params)


def gen_mixed_sites(seed: int = 0, arch_reg_count: int = 16, load_miss: float = 0.5,
                    miss_cycles: int = 200, biased: float = 0.9):
    """Three hammocks in one loop: a load-fed 50/50 site, an always-taken
    low-latency site, and a load-fed biased site. Used by the
    confidence-cost selectivity experiments."""
    params = GenParams(shape=HAMMOCK, seed=seed, arch_reg_count=arch_reg_count,
                       branch_load_miss=load_miss, load_miss_cycles=miss_cycles)
    b = _Builder(params)
    ids = [b.block_id() for _ in range(13)]
    (a0, b0, c0, d0, a1, b1, c1, d1, a2, b2, c2, d2, h) = ids
    s_rand = b.site(Bernoulli(0.5, seed=11))
    s_at = b.site(AlwaysTaken())
    s_bias = b.site(Bernoulli(biased, seed=13))
    s_wrap = b.site(AlwaysTaken())
    b.add(a0, _cond_block_body(b, True), CondBranch(b0, c0, s_rand))
    b.add(b0, b.body(), Jump(d0))
    b.add(c0, b.body(), Jump(d0))
    b.add(d0, b.body(), Jump(a1))
    b.add(a1, b.body() + [b.branch_instr()], CondBranch(b1, c1, s_at))
    b.add(b1, b.body(), Jump(d1))
    b.add(c1, b.body(), Jump(d1))
    b.add(d1, b.body(), Jump(a2))
    b.add(a2, _cond_block_body(b, True), CondBranch(b2, c2, s_bias))
    b.add(b2, b.body(), Jump(d2))
    b.add(c2, b.body(), Jump(d2))
    b.add(d2, b.body() + [b.branch_instr()], CondBranch(a0, h, s_wrap))
    b.add(h, [InstrTemplate(0, NOP, 0, 0, Fixed(1))], Halt())
    model = b.finish(a0)
    site_kinds = {s_rand: "random", s_at: "always_taken", s_bias: "biased_highlat", s_wrap: "wrap"}
    return model, site_kinds
