"""Executable CFG workload model: blocks, register effects, branch outcome
sources, and deterministic walkers for the committed path and forced-direction
alternate paths."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Union

# instruction classes
ALU = "alu"
LOAD = "load"
STORE = "store"
BRANCH = "branch"
NOP = "nop"
INSTR_CLASSES = (ALU, LOAD, STORE, BRANCH, NOP)

_M64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """Fixed 64-bit finalizer (splitmix-style); used for all index/seed
    derivation so runs are reproducible across platforms."""
    x &= _M64
    x ^= x >> 33
    x = (x * 0xFF51AFD7ED558CCD) & _M64
    x ^= x >> 33
    x = (x * 0xC4CEB9FE1A85EC53) & _M64
    x ^= x >> 33
    return x


def regmask(regs) -> int:
    """Pack an iterable of register ids into a bitmask."""
    m = 0
    for r in regs:
        m |= 1 << r
    return m


def mask_regs(mask: int) -> list[int]:
    """Unpack a register bitmask into a sorted id list."""
    out = []
    r = 0
    while mask:
        if mask & 1:
            out.append(r)
        mask >>= 1
        r += 1
    return out


class MalformedModelError(Exception):
    """Walking reached a state a valid model cannot produce."""


class ModelFormatError(ValueError):
    """CFG file rejected; message carries the offending location."""


@dataclass(frozen=True, slots=True)
class Fixed:
    cycles: int = 1


@dataclass(frozen=True, slots=True)
class LoadMissProb:
    miss_prob: float
    hit_cycles: int
    miss_cycles: int


Latency = Union[Fixed, LoadMissProb]


@dataclass(frozen=True, slots=True)
class InstrTemplate:
    pc: int
    cls: str
    dest_regs: int  # bitmask
    src_regs: int  # bitmask
    latency: Latency = Fixed(1)


@dataclass(frozen=True, slots=True)
class Fallthrough:
    pass


@dataclass(frozen=True, slots=True)
class Jump:
    succ: int


@dataclass(frozen=True, slots=True)
class CondBranch:
    taken_succ: int
    nottaken_succ: int
    source_id: int


@dataclass(frozen=True, slots=True)
class Halt:
    pass


Terminator = Union[Fallthrough, Jump, CondBranch, Halt]


@dataclass(frozen=True, slots=True)
class Bernoulli:
    bias: float  # P(taken)
    seed: int = 0


@dataclass(frozen=True, slots=True)
class Pattern:
    bits: tuple  # repeating taken/not-taken sequence


@dataclass(frozen=True, slots=True)
class AlwaysTaken:
    pass


@dataclass(frozen=True, slots=True)
class AlwaysNotTaken:
    pass


OutcomeSource = Union[Bernoulli, Pattern, AlwaysTaken, AlwaysNotTaken]


@dataclass(slots=True)
class BasicBlock:
    id: int
    instrs: list  # InstrTemplate, pcs assigned by ProgramModel
    term: Terminator


@dataclass(slots=True)
class DynInstr:
    """One dynamic instruction produced by a walker."""

    pc: int
    cls: str
    dest_regs: int
    src_regs: int
    seq_no: int
    taken: Optional[bool] = None  # branches only
    target_pc: Optional[int] = None


class ProgramModel:
    """Immutable-after-construction CFG with per-site branch outcome sources.

    PCs are abstract integers assigned densely per block in declaration
    order; terminators other than conditional branches are pure edges and
    occupy no pc.
    """

    def __init__(self, blocks, entry, sources, arch_reg_count=16):
        self.blocks: list[BasicBlock] = list(blocks)
        self.entry: int = entry
        self.sources: dict[int, OutcomeSource] = dict(sources)
        self.arch_reg_count: int = arch_reg_count
        self.reg_mask_all: int = (1 << arch_reg_count) - 1
        self._assign_pcs()
        self._index()

    def _assign_pcs(self):
        pc = 0
        for blk in self.blocks:
            fresh = []
            for ins in blk.instrs:
                fresh.append(
                    InstrTemplate(pc, ins.cls, ins.dest_regs, ins.src_regs, ins.latency)
                )
                pc += 1
            blk.instrs = fresh

    def _index(self):
        self.block_index = {b.id: i for i, b in enumerate(self.blocks)}
        self.pc_map = {}
        for i, b in enumerate(self.blocks):
            for j, ins in enumerate(b.instrs):
                self.pc_map[ins.pc] = (i, j)
        # branch site <-> pc maps (last instruction of a CondBranch block)
        self.site_pc = {}
        self.pc_site = {}
        for b in self.blocks:
            if isinstance(b.term, CondBranch) and b.instrs:
                bpc = b.instrs[-1].pc
                self.site_pc[b.term.source_id] = bpc
                self.pc_site[bpc] = b.term.source_id
        self.block_entry_pc = {}
        for b in self.blocks:
            self.block_entry_pc[b.id] = self._first_pc_from(b.id)

    def _first_pc_from(self, block_id: int) -> Optional[int]:
        # entry pc of a block, skipping empty fallthrough/jump blocks
        seen = 0
        bid = block_id
        while seen <= len(self.blocks):
            idx = self.block_index.get(bid)
            if idx is None:
                return None
            blk = self.blocks[idx]
            if blk.instrs:
                return blk.instrs[0].pc
            t = blk.term
            if isinstance(t, Jump):
                bid = t.succ
            elif isinstance(t, Fallthrough):
                if idx + 1 >= len(self.blocks):
                    return None
                bid = self.blocks[idx + 1].id
            else:
                return None
            seen += 1
        return None

    def succ_block_id(self, block_idx: int) -> Optional[int]:
        """Successor of a non-branching block (None at Halt)."""
        t = self.blocks[block_idx].term
        if isinstance(t, Jump):
            return t.succ
        if isinstance(t, Fallthrough):
            if block_idx + 1 >= len(self.blocks):
                raise MalformedModelError("fallthrough off the end of the block list")
            return self.blocks[block_idx + 1].id
        if isinstance(t, Halt):
            return None
        raise MalformedModelError("conditional block walked past its branch")

    def branch_block(self, branch_pc: int) -> BasicBlock:
        loc = self.pc_map.get(branch_pc)
        if loc is None:
            raise MalformedModelError(f"no instruction at pc {branch_pc}")
        blk = self.blocks[loc[0]]
        if not isinstance(blk.term, CondBranch) or blk.instrs[-1].pc != branch_pc:
            raise MalformedModelError(f"pc {branch_pc} is not a conditional branch site")
        return blk


def validate_model(model: ProgramModel) -> list[str]:
    """Check all structural invariants; empty list means runnable."""
    errs = []
    ids = [b.id for b in model.blocks]
    if len(set(ids)) != len(ids):
        errs.append("duplicate block ids")
    known = set(ids)
    if model.entry not in known:
        errs.append(f"entry block {model.entry} does not exist")
    seen_pcs = set()
    for i, b in enumerate(model.blocks):
        t = b.term
        if isinstance(t, Jump) and t.succ not in known:
            errs.append(f"block {b.id}: jump successor {t.succ} does not exist")
        if isinstance(t, Fallthrough) and i + 1 >= len(model.blocks):
            errs.append(f"block {b.id}: fallthrough has no following block")
        if isinstance(t, CondBranch):
            for s in (t.taken_succ, t.nottaken_succ):
                if s not in known:
                    errs.append(f"block {b.id}: branch successor {s} does not exist")
            if not b.instrs:
                errs.append(f"block {b.id}: conditional block has no branch instruction")
            elif b.instrs[-1].cls != BRANCH:
                errs.append(f"block {b.id}: last instruction is not branch-class")
            if t.source_id not in model.sources:
                errs.append(f"block {b.id}: no outcome source {t.source_id}")
        for j, ins in enumerate(b.instrs):
            if ins.pc in seen_pcs:
                errs.append(f"block {b.id}: duplicate pc {ins.pc}")
            seen_pcs.add(ins.pc)
            if ins.cls == BRANCH and not (
                isinstance(t, CondBranch) and j == len(b.instrs) - 1
            ):
                errs.append(f"block {b.id}: branch-class instruction not a terminator")
            if (ins.dest_regs | ins.src_regs) & ~model.reg_mask_all:
                errs.append(f"block {b.id}: pc {ins.pc} uses register >= {model.arch_reg_count}")
    for sid, src in model.sources.items():
        if isinstance(src, Bernoulli) and not 0.0 <= src.bias <= 1.0:
            errs.append(f"source {sid}: bias {src.bias} outside [0,1]")
        if isinstance(src, Pattern) and not src.bits:
            errs.append(f"source {sid}: empty pattern")
    return errs


def site_seed(master_seed: int, site_id: int, source_seed: int) -> int:
    # per-site streams are independent of every other site
    return mix64(master_seed ^ mix64((site_id + 1) * 0x9E3779B97F4A7C15 + source_seed))


class _OutcomeState:
    """Per-site outcome stream, consumed one bit per dynamic branch."""

    __slots__ = ("source", "rng", "pos")

    def __init__(self, source: OutcomeSource, master_seed: int, sid: int):
        self.source = source
        self.pos = 0
        self.rng = None
        if isinstance(source, Bernoulli):
            self.rng = random.Random(site_seed(master_seed, sid, source.seed))

    def next(self) -> bool:
        s = self.source
        if isinstance(s, Bernoulli):
            return self.rng.random() < s.bias
        if isinstance(s, Pattern):
            bit = s.bits[self.pos % len(s.bits)]
            self.pos += 1
            return bool(bit)
        if isinstance(s, AlwaysTaken):
            return True
        return False


def static_bias_direction(source: OutcomeSource) -> bool:
    """Most likely direction of a source; ties go not-taken."""
    if isinstance(source, Bernoulli):
        return source.bias > 0.5
    if isinstance(source, Pattern):
        return sum(1 for b in source.bits if b) * 2 > len(source.bits)
    return isinstance(source, AlwaysTaken)


class ArchWalker:
    """Deterministic committed-path walker; one DynInstr per step()."""

    def __init__(self, model: ProgramModel, master_seed: int = 0):
        self.model = model
        self.seq = 0
        self._block_idx = model.block_index[model.entry]
        self._instr_idx = 0
        self._halted = False
        self.outcomes = {
            sid: _OutcomeState(src, master_seed, sid) for sid, src in model.sources.items()
        }

    def step(self) -> Optional[DynInstr]:
        if self._halted:
            return None
        m = self.model
        skipped = 0
        while True:
            blk = m.blocks[self._block_idx]
            if self._instr_idx < len(blk.instrs):
                ins = blk.instrs[self._instr_idx]
                dyn = DynInstr(ins.pc, ins.cls, ins.dest_regs, ins.src_regs, self.seq)
                self.seq += 1
                last = self._instr_idx == len(blk.instrs) - 1
                if last and isinstance(blk.term, CondBranch):
                    t = blk.term
                    taken = self.outcomes[t.source_id].next()
                    succ = t.taken_succ if taken else t.nottaken_succ
                    dyn.taken = taken
                    dyn.target_pc = m.block_entry_pc.get(succ)
                    nxt = m.block_index.get(succ)
                    if nxt is None:
                        raise MalformedModelError(f"branch at pc {ins.pc} targets missing block {succ}")
                    self._block_idx = nxt
                    self._instr_idx = 0
                else:
                    self._instr_idx += 1
                return dyn
            # block exhausted without a conditional: follow the edge
            succ = m.succ_block_id(self._block_idx)
            if succ is None:
                self._halted = True
                return None
            nxt = m.block_index.get(succ)
            if nxt is None:
                raise MalformedModelError(f"block {blk.id} targets missing block {succ}")
            self._block_idx = nxt
            self._instr_idx = 0
            skipped += 1
            if skipped > len(m.blocks):
                raise MalformedModelError("cycle of empty blocks")


def step_architectural(model: ProgramModel, walker: ArchWalker) -> Optional[DynInstr]:
    """Next committed-path instruction, or None at Halt."""
    return walker.step()


def walk_wrong_path(
    model: ProgramModel,
    branch_pc: int,
    forced_taken: bool,
    max_len: int,
    direction_fn: Optional[Callable[[int, int], bool]] = None,
    start_seq: int = 0,
) -> Iterator[DynInstr]:
    """Bounded alternate-direction stream from a branch site.

    Subsequent conditionals follow direction_fn(site_id, pc) when given
    (predictor-directed), else each source's static bias.
    """
    blk = model.branch_block(branch_pc)
    t = blk.term
    succ = t.taken_succ if forced_taken else t.nottaken_succ
    block_idx = model.block_index.get(succ)
    if block_idx is None:
        raise MalformedModelError(f"branch at pc {branch_pc} targets missing block {succ}")
    instr_idx = 0
    seq = start_seq
    emitted = 0
    skipped = 0
    while emitted < max_len:
        blk = model.blocks[block_idx]
        if instr_idx < len(blk.instrs):
            ins = blk.instrs[instr_idx]
            dyn = DynInstr(ins.pc, ins.cls, ins.dest_regs, ins.src_regs, seq)
            seq += 1
            emitted += 1
            skipped = 0
            last = instr_idx == len(blk.instrs) - 1
            if last and isinstance(blk.term, CondBranch):
                tt = blk.term
                if direction_fn is not None:
                    taken = direction_fn(tt.source_id, ins.pc)
                else:
                    taken = static_bias_direction(model.sources[tt.source_id])
                nxt_id = tt.taken_succ if taken else tt.nottaken_succ
                dyn.taken = taken
                dyn.target_pc = model.block_entry_pc.get(nxt_id)
                nxt = model.block_index.get(nxt_id)
                if nxt is None:
                    raise MalformedModelError(f"branch at pc {ins.pc} targets missing block {nxt_id}")
                block_idx = nxt
                instr_idx = 0
            else:
                instr_idx += 1
            yield dyn
            continue
        succ_id = model.succ_block_id(block_idx)
        if succ_id is None:
            return
        nxt = model.block_index.get(succ_id)
        if nxt is None:
            raise MalformedModelError(f"block {blk.id} targets missing block {succ_id}")
        block_idx = nxt
        instr_idx = 0
        skipped += 1
        if skipped > len(model.blocks):
            raise MalformedModelError("cycle of empty blocks")


# ---------------------------------------------------------------------------
# CFG file format (format: 1). Instructions are (class, dests, srcs, latency)
# tuples; latency is ["fixed", cycles] or ["load_miss", p, hit, miss].
# ---------------------------------------------------------------------------

_TERM_SAVERS = {
    Fallthrough: lambda t: {"kind": "fallthrough"},
    Jump: lambda t: {"kind": "jump", "succ": t.succ},
    CondBranch: lambda t: {
        "kind": "cond",
        "taken": t.taken_succ,
        "nottaken": t.nottaken_succ,
        "source": t.source_id,
    },
    Halt: lambda t: {"kind": "halt"},
}


def _save_latency(lat: Latency):
    if isinstance(lat, Fixed):
        return ["fixed", lat.cycles]
    return ["load_miss", lat.miss_prob, lat.hit_cycles, lat.miss_cycles]


def _save_source(src: OutcomeSource):
    if isinstance(src, Bernoulli):
        return {"kind": "bernoulli", "bias": src.bias, "seed": src.seed}
    if isinstance(src, Pattern):
        return {"kind": "pattern", "bits": list(src.bits)}
    if isinstance(src, AlwaysTaken):
        return {"kind": "always_taken"}
    return {"kind": "always_not_taken"}


def model_to_dict(model: ProgramModel) -> dict:
    return {
        "format": 1,
        "entry": model.entry,
        "arch_reg_count": model.arch_reg_count,
        "blocks": [
            {
                "id": b.id,
                "instrs": [
                    [ins.cls, mask_regs(ins.dest_regs), mask_regs(ins.src_regs), _save_latency(ins.latency)]
                    for ins in b.instrs
                ],
                "term": _TERM_SAVERS[type(b.term)](b.term),
            }
            for b in model.blocks
        ],
        "sources": {str(sid): _save_source(src) for sid, src in sorted(model.sources.items())},
    }


def save_model(model: ProgramModel, sink) -> None:
    """Write the CFG file; sink is a path or writable file object."""
    text = json.dumps(model_to_dict(model), indent=1, sort_keys=True)
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w") as f:
            f.write(text)


def _parse_latency(raw, where: str) -> Latency:
    if not isinstance(raw, list) or not raw:
        raise ModelFormatError(f"{where}: latency must be a tagged list")
    tag = raw[0]
    if tag == "fixed":
        if len(raw) != 2:
            raise ModelFormatError(f"{where}: fixed latency takes 1 argument")
        return Fixed(int(raw[1]))
    if tag == "load_miss":
        if len(raw) != 4:
            raise ModelFormatError(f"{where}: load_miss latency takes 3 arguments")
        return LoadMissProb(float(raw[1]), int(raw[2]), int(raw[3]))
    raise ModelFormatError(f"{where}: unknown latency_class tag {tag!r}")


def _parse_term(raw, where: str) -> Terminator:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ModelFormatError(f"{where}: term must be an object with a kind")
    kind = raw["kind"]
    try:
        if kind == "fallthrough":
            return Fallthrough()
        if kind == "jump":
            return Jump(int(raw["succ"]))
        if kind == "cond":
            return CondBranch(int(raw["taken"]), int(raw["nottaken"]), int(raw["source"]))
        if kind == "halt":
            return Halt()
    except KeyError as e:
        raise ModelFormatError(f"{where}: term missing field {e.args[0]!r}") from None
    raise ModelFormatError(f"{where}: unknown term kind {kind!r}")


def _parse_source(raw, where: str) -> OutcomeSource:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ModelFormatError(f"{where}: source must be an object with a kind")
    kind = raw["kind"]
    try:
        if kind == "bernoulli":
            return Bernoulli(float(raw["bias"]), int(raw.get("seed", 0)))
        if kind == "pattern":
            bits = tuple(int(b) for b in raw["bits"])
            return Pattern(bits)
        if kind == "always_taken":
            return AlwaysTaken()
        if kind == "always_not_taken":
            return AlwaysNotTaken()
    except KeyError as e:
        raise ModelFormatError(f"{where}: source missing field {e.args[0]!r}") from None
    raise ModelFormatError(f"{where}: unknown source kind {kind!r}")


def model_from_dict(data: dict) -> ProgramModel:
    if not isinstance(data, dict):
        raise ModelFormatError("top level: expected an object")
    if data.get("format") != 1:
        raise ModelFormatError(f"top level: unsupported format {data.get('format')!r}")
    for key in ("blocks", "entry", "sources"):
        if key not in data:
            raise ModelFormatError(f"top level: missing key {key!r}")
    blocks = []
    for bi, raw in enumerate(data["blocks"]):
        where = f"blocks[{bi}]"
        if "id" not in raw:
            raise ModelFormatError(f"{where}: missing id")
        instrs = []
        for ii, tup in enumerate(raw.get("instrs", [])):
            iw = f"{where}.instrs[{ii}]"
            if not isinstance(tup, list) or len(tup) != 4:
                raise ModelFormatError(f"{iw}: expected [class, dests, srcs, latency]")
            cls = tup[0]
            if cls not in INSTR_CLASSES:
                raise ModelFormatError(f"{iw}: unknown instruction class {cls!r}")
            instrs.append(
                InstrTemplate(0, cls, regmask(tup[1]), regmask(tup[2]), _parse_latency(tup[3], iw))
            )
        blocks.append(BasicBlock(int(raw["id"]), instrs, _parse_term(raw["term"], where)))
    sources = {}
    for sid, raw in data["sources"].items():
        sources[int(sid)] = _parse_source(raw, f"sources[{sid}]")
    return ProgramModel(
        blocks, int(data["entry"]), sources, int(data.get("arch_reg_count", 16))
    )


def load_model(source) -> ProgramModel:
    """Read a CFG file; source is a path or readable file object."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as f:
            text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"line {e.lineno}: {e.msg}") from None
    return model_from_dict(data)


def models_equal(a: ProgramModel, b: ProgramModel) -> bool:
    """Structural equality, used by round-trip checks."""
    return model_to_dict(a) == model_to_dict(b)
