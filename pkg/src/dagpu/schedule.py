"""Compiler steps 3 and 4 plus emission: linearize blocks into an
instruction stream, repair read conflicts with copies, reorder against
pipeline hazards, spill when banks overflow, and resolve register
addresses by replaying the hardware's automatic write policy.

The passes exchange draft instructions whose operands are Val objects (one
register-file lifetime of one DAG node in one bank).  Register addresses do
not exist at this level: the slot a write lands in depends on the final
instruction order, so the shadow register file assigns addresses only in
the last pass (finalize), which mirrors the machine's timing exactly: an
instruction issued at cycle p commits its writes at the end of cycle
p + pipe_stages - 1, after that cycle's reads and valid_rst frees.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .arch import ArchConfig, Topology, pe_coords
from .blocks import BlockGraph, decompose
from .dag import ComputeDag, Op, binarize, require_valid
from .errors import CapacityError, ShadowOverflow
from .isa import (CompiledProgram, Copy, Exec, Instruction, Load, Nop,
                  ProgramMeta, Store, category_counts, encode)
from .mapping import Mapping, map_blocks


@dataclass(eq=False)
class Val:
    """One register-file residence of a node's value in a fixed bank.

    ``home`` is the data-memory word that backs the value: the input-region
    word for loaded inputs, the output-region word for graph outputs, or a
    spill word assigned on first eviction.  ``is_output`` marks graph
    outputs, which are stored to their home once (at eviction or in the
    final drain) instead of being spilled and re-stored.
    """
    uid: int
    node: int
    bank: int
    home: int | None = None
    is_output: bool = False


@dataclass(eq=False)
class DExec:
    block: int
    reads: tuple        # ((bank, Val), ...) sorted by bank, banks distinct
    routes: tuple       # ((leaf port, Val), ...)
    outs: tuple         # ((bank, sel, Val), ...) sorted by bank
    pe_cfg: tuple


@dataclass(eq=False)
class DCopy:
    src_bank: int
    src: Val
    dst_bank: int
    dst: Val


@dataclass(eq=False)
class DLoad:
    row: int
    writes: tuple       # ((bank, Val), ...) sorted by bank
    reload: bool = False


@dataclass(eq=False)
class DStore:
    row: int
    reads: tuple        # ((bank, Val), ...) sorted by bank
    spill: bool = False


@dataclass(eq=False)
class DNop:
    pass


Draft = DExec | DCopy | DLoad | DStore | DNop


def _read_pairs(d: Draft):
    if isinstance(d, DExec):
        return d.reads
    if isinstance(d, DCopy):
        return ((d.src_bank, d.src),)
    if isinstance(d, DStore):
        return d.reads
    return ()


def _write_pairs(d: Draft):
    if isinstance(d, DExec):
        return tuple((b, v) for b, _, v in d.outs)
    if isinstance(d, DCopy):
        return ((d.dst_bank, d.dst),)
    if isinstance(d, DLoad):
        return d.writes
    return ()


def _mem_row(d: Draft):
    if isinstance(d, (DLoad, DStore)):
        return d.row
    return None


class _ValFactory:
    def __init__(self):
        self.next_uid = 0

    def make(self, node: int, bank: int, home=None, is_output=False) -> Val:
        v = Val(self.next_uid, node, bank, home, is_output)
        self.next_uid += 1
        return v


@dataclass
class LayoutPlan:
    """Deterministic data-memory layout derived from the mapping alone:
    inputs packed at (row, word = bank) in first-consumption order, graph
    outputs packed the same way in production order right after the input
    region.  Outputs that are themselves inputs alias their input word, so
    they cost no instructions at all."""
    input_home: dict[int, int]
    output_home: dict[int, int]
    input_rows: int
    output_rows: int

    @property
    def spill_base(self) -> int:
        return self.input_rows + self.output_rows


def layout_plan(bg: BlockGraph, m: Mapping, cfg: ArchConfig) -> LayoutPlan:
    dag = bg.dag
    first_need: dict[int, int] = {}
    for blk in bg.blocks:
        for u in m.block_maps[blk.id].input_values:
            if dag.nodes[u].op is Op.INPUT and u not in first_need:
                first_need[u] = blk.id
    for o in sorted(dag.outputs):
        if dag.nodes[o].op is Op.INPUT and o not in first_need:
            first_need[o] = len(bg.blocks)
    next_row = [0] * cfg.banks
    input_home: dict[int, int] = {}
    for u in sorted(first_need, key=lambda u: (first_need[u], u)):
        bank = m.bank_of[u]
        input_home[u] = next_row[bank]
        next_row[bank] += 1
    input_rows = max(next_row, default=0)

    output_home: dict[int, int] = {}
    next_out = [input_rows] * cfg.banks
    for blk in bg.blocks:
        for o in sorted(blk.outputs & dag.outputs):
            output_home[o] = next_out[m.bank_of[o]]
            next_out[m.bank_of[o]] += 1
    for o in sorted(dag.outputs):
        if dag.nodes[o].op is Op.INPUT:
            output_home[o] = input_home[o]  # aliases the input word
    output_rows = max(next_out, default=input_rows) - input_rows
    return LayoutPlan(input_home, output_home, input_rows, output_rows)


def linearize(bg: BlockGraph, m: Mapping, cfg: ArchConfig) -> list[Draft]:
    """One exec per block in topological order, preceded by the copies that
    repair its read conflicts and by word-masked loads of exactly the input
    values it is the first to consume.  Output stores are not emitted here:
    the spill pass stores each graph output to its layout home at eviction
    time or in the final drain."""
    dag = bg.dag
    plan = layout_plan(bg, m, cfg)
    vf = _ValFactory()
    vals: dict[int, Val] = {}
    drafts: list[Draft] = []

    row_members: dict[int, list[int]] = {}
    for u, row in plan.input_home.items():
        row_members.setdefault(row, []).append(u)
    rows_loaded: set[int] = set()

    def load_needed(needed: list[int]):
        # one vector load per row, triggered by its first consumed value;
        # first-need packing keeps the speculatively loaded neighbors close
        for row in sorted({plan.input_home[u] for u in needed}):
            if row in rows_loaded:
                continue
            rows_loaded.add(row)
            writes = []
            for u in sorted(row_members[row]):
                v = vf.make(u, m.bank_of[u], home=row, is_output=u in dag.outputs)
                vals[u] = v
                writes.append((v.bank, v))
            writes.sort(key=lambda bv: bv[0])
            drafts.append(DLoad(row, tuple(writes)))

    for blk in bg.blocks:
        bm = m.block_maps[blk.id]
        load_needed([u for u in sorted(bm.input_values)
                     if dag.nodes[u].op is Op.INPUT and u not in vals])

        # read-conflict repair: one copy per displaced operand
        groups: dict[int, list[int]] = {}
        for u in sorted(bm.input_values):
            groups.setdefault(m.bank_of[u], []).append(u)
        val_for: dict[int, Val] = {}
        used_banks = set(groups)
        for bank in sorted(groups):
            members = groups[bank]
            val_for[members[0]] = vals[members[0]]
            for u in members[1:]:
                temp_bank = next(b for b in range(cfg.banks) if b not in used_banks)
                used_banks.add(temp_bank)
                tv = vf.make(u, temp_bank)
                drafts.append(DCopy(vals[u].bank, vals[u], temp_bank, tv))
                val_for[u] = tv

        reads = sorted({(v.bank, v) for v in val_for.values()}, key=lambda bv: bv[0])
        seen_banks = [b for b, _ in reads]
        if len(seen_banks) != len(set(seen_banks)):
            raise AssertionError(f"block {blk.id} reads collide after repair")
        routes = tuple((port, val_for[u]) for port, u in bm.leaf_reads)
        outs = []
        for n in sorted(blk.outputs):
            ov = vf.make(n, m.bank_of[n], home=plan.output_home.get(n),
                         is_output=n in dag.outputs)
            pe = bm.store_slot[n]
            if cfg.topology is Topology.FULL_XBAR_BOTH:
                sel = pe
            else:
                sel = pe_coords(cfg, pe)[1]
            outs.append((ov.bank, sel, ov))
            vals[n] = ov
        outs.sort(key=lambda o: o[0])
        out_banks = [b for b, _, _ in outs]
        if len(out_banks) != len(set(out_banks)):
            raise AssertionError(f"block {blk.id} writes collide")
        drafts.append(DExec(blk.id, tuple(reads), routes, tuple(outs), bm.pe_cfg))
    return drafts


def reorder(drafts: list[Draft], cfg: ArchConfig, window: int = 300) -> list[Draft]:
    """Greedy hazard-spacing pass: producer and consumer end up at least
    pipe_stages apart.  On a stall, the next ``window`` instructions are
    searched for the earliest hoistable independent one; nops fill the rest.
    Instructions touching the same data-memory row keep their order."""
    pipe = cfg.pipe_stages
    pend = deque(drafts)
    out: list[Draft] = []
    writer_pos: dict[int, int] = {}

    def ready(d: Draft) -> bool:
        here = len(out)
        for _, v in _read_pairs(d):
            p = writer_pos.get(v.uid)
            if p is None or here - p < pipe:
                return False
        return True

    while pend:
        skipped: list[Draft] = []
        blocked_rows: set[int] = set()
        found = None
        limit = min(len(pend), window + 1)
        for _ in range(limit):
            d = pend.popleft()
            row = _mem_row(d)
            if (row is None or row not in blocked_rows) and ready(d):
                found = d
                break
            skipped.append(d)
            if row is not None:
                blocked_rows.add(row)
        pend.extendleft(reversed(skipped))
        if found is None:
            out.append(DNop())
            continue
        pos = len(out)
        out.append(found)
        for _, v in _write_pairs(found):
            writer_pos[v.uid] = pos
    return out


def insert_spills(drafts: list[Draft], cfg: ArchConfig) -> list[Draft]:
    """Forward pass with a timing-exact occupancy shadow.

    When a write would leave no empty slot in its bank, the resident value
    with the furthest next use is evicted through a store to its backing
    word: graph outputs and loaded inputs go to their layout home (for a
    fully consumed output that simply is its one required store), other
    values get a spill word.  Evicted values still needed are reloaded
    ahead of their next consumer, padding with nops only when no slack
    exists.  A final drain stores the graph outputs still resident."""
    pipe = cfg.pipe_stages
    R = cfg.regs_per_bank

    uses: dict[int, deque[int]] = {}
    max_row = -1
    for i, d in enumerate(drafts):
        for _, v in _read_pairs(d):
            uses.setdefault(v.uid, deque()).append(i)
        row = _mem_row(d)
        if row is not None:
            max_row = max(max_row, row)
        for _, v in _write_pairs(d):
            if v.home is not None:
                max_row = max(max_row, v.home)
            uses.setdefault(v.uid, deque())

    spill_base = max_row + 1
    next_spill_row = [spill_base] * cfg.banks
    spilled: dict[int, int] = {}       # uid -> row to reload from
    stored_home: set[int] = set()      # output uids already written home

    occ = [0] * cfg.banks
    inflight = [0] * cfg.banks
    resident: list[dict[int, Val]] = [dict() for _ in range(cfg.banks)]
    pending: deque[tuple[int, int, Val]] = deque()
    out: list[Draft] = []

    def pending_store(v: Val) -> bool:
        return v.is_output and v.uid not in stored_home

    def emit(d: Draft):
        p = len(out)
        out.append(d)
        if isinstance(d, DStore) and d.spill:
            for bank, v in d.reads:
                resident[bank].pop(v.uid)
                occ[bank] -= 1
        else:
            for bank, v in _read_pairs(d):
                q = uses[v.uid]
                q.popleft()
                if not q and not pending_store(v):
                    resident[bank].pop(v.uid)
                    occ[bank] -= 1
        for bank, v in _write_pairs(d):
            pending.append((p + pipe - 1, bank, v))
            inflight[bank] += 1
        while pending and pending[0][0] == p:
            _, bank, v = pending.popleft()
            inflight[bank] -= 1
            occ[bank] += 1
            resident[bank][v.uid] = v

    def evict(bank: int, victim: Val):
        if victim.home is None:
            victim.home = next_spill_row[bank]
            next_spill_row[bank] += 1
        if victim.is_output:
            stored_home.add(victim.uid)
        if uses[victim.uid]:
            spilled[victim.uid] = victim.home
        emit(DStore(victim.home, ((bank, victim),), spill=True))

    def ensure_capacity(bank: int, protected: set[int]):
        while occ[bank] + inflight[bank] >= R:
            victims = [v for uid, v in resident[bank].items() if uid not in protected]
            if not victims:
                raise CapacityError(
                    f"bank {bank} cannot hold the working set (R={R})")
            victim = max(victims, key=lambda v: (
                uses[v.uid][0] if uses[v.uid] else 1 << 60, v.node, v.uid))
            evict(bank, victim)

    for d in drafts:
        protected = {v.uid for _, v in _read_pairs(d)}
        reload_positions = []
        for bank, v in _read_pairs(d):
            if v.uid in spilled:
                row = spilled.pop(v.uid)
                ensure_capacity(bank, protected)
                reload_positions.append(len(out))
                emit(DLoad(row, ((bank, v),), reload=True))
        if reload_positions:
            while len(out) - max(reload_positions) < pipe:
                emit(DNop())
        for bank, _ in _write_pairs(d):
            ensure_capacity(bank, protected)
        emit(d)

    # final drain: wait for in-flight writes, then store the remaining
    # graph outputs home, batching values that share a row
    while pending:
        emit(DNop())
    leftovers: dict[int, list[tuple[int, Val]]] = {}
    for bank in range(cfg.banks):
        for uid, v in resident[bank].items():
            if pending_store(v):
                leftovers.setdefault(v.home, []).append((bank, v))
    for row in sorted(leftovers):
        reads = tuple(sorted(leftovers[row], key=lambda bv: bv[0]))
        emit(DStore(row, reads, spill=True))
        for _, v in reads:
            stored_home.add(v.uid)
    return out


@dataclass
class ScheduleState:
    """Shadow register file replicating the hardware write policy: per-bank
    slot arrays plus the in-flight pipeline write queue."""
    slots: list[list[Val | None]]
    pos_of: dict[int, int] = field(default_factory=dict)
    pending: deque = field(default_factory=deque)


def _rst_sets(drafts: list[Draft]) -> list[set[int]]:
    """Per instruction, the val uids whose read is the last of the lifetime
    (next event is a re-write or nothing): these reads carry valid_rst."""
    last_event: dict[int, str] = {}
    rst: list[set[int]] = [set() for _ in drafts]
    for i in range(len(drafts) - 1, -1, -1):
        d = drafts[i]
        for _, v in _write_pairs(d):
            last_event[v.uid] = "w"
        for _, v in _read_pairs(d):
            if last_event.get(v.uid) != "r":
                rst[i].add(v.uid)
            last_event[v.uid] = "r"
    return rst


def finalize(drafts: list[Draft], cfg: ArchConfig):
    """Resolve register addresses by replaying the lowest-empty-slot policy
    with exact pipeline timing; returns (instructions, write trace,
    predicted cycles, per-bank occupancy peaks)."""
    B, R, pipe = cfg.banks, cfg.regs_per_bank, cfg.pipe_stages
    rst = _rst_sets(drafts)
    st = ScheduleState(slots=[[None] * R for _ in range(B)])
    trace: list[tuple[int, int, int, int]] = []
    peak = [0] * B
    level = [0] * B
    instrs: list[Instruction] = []

    zeros = (0,) * B
    falses = (False,) * B

    for p, d in enumerate(drafts):
        if isinstance(d, DNop):
            instrs.append(Nop())
        elif isinstance(d, DExec):
            read_addr = [0] * B
            read_en = [False] * B
            valid_rst = [False] * B
            for bank, v in d.reads:
                read_addr[bank] = st.pos_of[v.uid]
                read_en[bank] = True
                valid_rst[bank] = v.uid in rst[p]
            in_route = [0] * B
            for port, v in d.routes:
                in_route[port] = v.bank
            out_sel = [(False, 0)] * B
            for bank, sel, _ in d.outs:
                out_sel[bank] = (True, sel)
            instrs.append(Exec(d.pe_cfg, tuple(read_addr), tuple(read_en),
                               tuple(valid_rst), tuple(in_route), tuple(out_sel)))
        elif isinstance(d, DCopy):
            read_addr = [0] * B
            read_en = [False] * B
            valid_rst = [False] * B
            route = [0] * B
            write_en = [False] * B
            read_addr[d.src_bank] = st.pos_of[d.src.uid]
            read_en[d.src_bank] = True
            valid_rst[d.src_bank] = d.src.uid in rst[p]
            route[d.dst_bank] = d.src_bank
            write_en[d.dst_bank] = True
            instrs.append(Copy(tuple(read_addr), tuple(read_en), tuple(valid_rst),
                               tuple(route), tuple(write_en)))
        elif isinstance(d, DLoad):
            mask = [False] * B
            for bank, _ in d.writes:
                mask[bank] = True
            instrs.append(Load(d.row, tuple(mask)))
        elif isinstance(d, DStore):
            mask = [False] * B
            read_addr = [0] * B
            valid_rst = [False] * B
            for bank, v in d.reads:
                mask[bank] = True
                read_addr[bank] = st.pos_of[v.uid]
                valid_rst[bank] = v.uid in rst[p]
            instrs.append(Store(d.row, tuple(mask), tuple(read_addr), tuple(valid_rst)))
        else:
            raise AssertionError(f"unknown draft {d!r}")

        for bank, v in _read_pairs(d):
            if v.uid in rst[p]:
                st.slots[bank][st.pos_of.pop(v.uid)] = None
                level[bank] -= 1
        writes = sorted(_write_pairs(d), key=lambda bv: bv[0])
        if writes:
            st.pending.append((p + pipe - 1, p, writes))
        while st.pending and st.pending[0][0] == p:
            _, issue, ws = st.pending.popleft()
            for bank, v in ws:
                slot = _first_free(st.slots[bank])
                if slot is None:
                    raise ShadowOverflow(f"bank {bank} full at instruction {p}")
                st.slots[bank][slot] = v
                st.pos_of[v.uid] = slot
                level[bank] += 1
                peak[bank] = max(peak[bank], level[bank])
                trace.append((issue, bank, slot, v.node))

    while st.pending:
        _, issue, ws = st.pending.popleft()
        for bank, v in ws:
            slot = _first_free(st.slots[bank])
            if slot is None:
                raise ShadowOverflow(f"bank {bank} full during drain")
            st.slots[bank][slot] = v
            st.pos_of[v.uid] = slot
            level[bank] += 1
            peak[bank] = max(peak[bank], level[bank])
            trace.append((issue, bank, slot, v.node))

    cycles = len(drafts) + pipe - 1 if drafts else 0
    return instrs, trace, cycles, peak


def _first_free(slots) -> int | None:
    for i, s in enumerate(slots):
        if s is None:
            return i
    return None


def predict_writes(instrs: list[Instruction], cfg: ArchConfig) -> list[tuple[int, int, int]]:
    """Replay the automatic write policy over concrete instructions and
    return (issuing instruction index, bank, slot) per committed write."""
    trace, violations = _replay_concrete(instrs, cfg)
    return trace


def check_static_hazards(instrs: list[Instruction], cfg: ArchConfig) -> list[tuple]:
    """Static hazard check over the final stream: every read must hit an
    occupied slot whose write issued at least pipe_stages earlier."""
    _, violations = _replay_concrete(instrs, cfg)
    return violations


def _instr_reads(ins: Instruction, banks: int):
    if isinstance(ins, (Exec, Copy)):
        return [(b, ins.read_addr[b], ins.valid_rst[b])
                for b in range(banks) if ins.read_en[b]]
    if isinstance(ins, Store):
        return [(b, ins.read_addr[b], ins.valid_rst[b])
                for b in range(banks) if ins.mask[b]]
    return []


def _instr_write_banks(ins: Instruction, banks: int):
    if isinstance(ins, Exec):
        return [b for b in range(banks) if ins.out_sel[b][0]]
    if isinstance(ins, Copy):
        return [b for b in range(banks) if ins.write_en[b]]
    if isinstance(ins, Load):
        return [b for b in range(banks) if ins.mask[b]]
    return []


def _replay_concrete(instrs: list[Instruction], cfg: ArchConfig):
    B, pipe = cfg.banks, cfg.pipe_stages
    occupant: list[list[int | None]] = [[None] * cfg.regs_per_bank for _ in range(B)]
    pending: deque = deque()
    trace: list[tuple[int, int, int]] = []
    violations: list[tuple] = []
    for p, ins in enumerate(instrs):
        for bank, addr, do_rst in _instr_reads(ins, B):
            issued = occupant[bank][addr]
            if issued is None:
                violations.append((p, bank, addr, "read of empty slot"))
            elif p - issued < pipe:
                violations.append((p, bank, addr, "raw spacing"))
            if do_rst:
                occupant[bank][addr] = None
        wbanks = _instr_write_banks(ins, B)
        if wbanks:
            pending.append((p + pipe - 1, p, wbanks))
        while pending and pending[0][0] == p:
            _, issue, banks_w = pending.popleft()
            for bank in banks_w:
                slot = _first_free(occupant[bank])
                if slot is None:
                    raise ShadowOverflow(f"bank {bank} full at instruction {p}")
                occupant[bank][slot] = issue
                trace.append((issue, bank, slot))
    while pending:
        _, issue, banks_w = pending.popleft()
        for bank in banks_w:
            slot = _first_free(occupant[bank])
            if slot is None:
                raise ShadowOverflow(f"bank {bank} full during drain")
            occupant[bank][slot] = issue
            trace.append((issue, bank, slot))
    return trace, violations


def compile_dag(dag: ComputeDag, cfg: ArchConfig, seed: int = 0,
                fitness_lambda: float = 0.002, window: int = 300) -> CompiledProgram:
    """End-to-end compilation: binarize, decompose, map, linearize, reorder,
    spill, resolve addresses and encode.  Deterministic per seed."""
    stats_raw = require_valid(dag)
    bdag = binarize(dag)
    stats_bin = require_valid(bdag)
    bg = decompose(bdag, cfg, fitness_lambda, seed)
    m = map_blocks(bg, cfg, seed)
    plan = layout_plan(bg, m, cfg)
    drafts = linearize(bg, m, cfg)
    drafts = reorder(drafts, cfg, window)
    drafts = insert_spills(drafts, cfg)
    instrs, trace, cycles, peak = finalize(drafts, cfg)

    predicted = predict_writes(instrs, cfg)
    if [(t[0], t[1], t[2]) for t in trace] != predicted:
        raise AssertionError("write-trace replay mismatch between finalize and predict_writes")

    spill_rows: set[int] = set()
    spill_stores = 0
    spill_loads = 0
    for d in drafts:
        if isinstance(d, DLoad) and d.reload:
            spill_loads += 1
        elif isinstance(d, DStore) and d.spill:
            if d.row >= plan.spill_base:
                spill_rows.add(d.row)
            if any(not v.is_output for _, v in d.reads):
                spill_stores += 1

    total_rows = plan.spill_base + len(spill_rows)
    if total_rows > cfg.data_mem_rows:
        raise CapacityError(f"workload needs {total_rows} data rows, memory has {cfg.data_mem_rows}")

    meta = ProgramMeta(
        cfg=cfg,
        stats_raw=stats_raw,
        stats_bin=stats_bin,
        input_layout={n: (row, m.bank_of[n]) for n, row in plan.input_home.items()},
        output_layout={n: (row, m.bank_of[n]) for n, row in plan.output_home.items()},
        const_values={n: v for n, v in dag.values.items()
                      if dag.nodes[n].op is Op.INPUT},
        counts=category_counts(instrs),
        conflict_count=len(m.conflicts),
        spill_stores=spill_stores,
        spill_loads=spill_loads,
        input_rows=plan.input_rows,
        output_rows=plan.output_rows,
        spill_rows=len(spill_rows),
        predicted_cycles=cycles,
        bank_peak=peak,
        seed=seed,
        fitness_lambda=fitness_lambda,
        reorder_window=window,
    )
    return CompiledProgram(instrs, encode(instrs, cfg), trace, meta)


def program_footprint_bytes(prog: CompiledProgram) -> int:
    """Instruction bytes plus the data-memory bytes actually used."""
    instr_bytes = (prog.bitstream.bit_len + 7) // 8
    rows = prog.meta.input_rows + prog.meta.output_rows + prog.meta.spill_rows
    return instr_bytes + rows * prog.cfg.banks * 4
