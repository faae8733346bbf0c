"""Cycle-accurate functional model of the machine: decodes the dense
bitstream and executes it with valid-bit register banks, priority-encoder
write addressing, the input crossbar and the D+1-stage pipeline.

Timing contract (mirrored by the compiler's shadow state, implemented
independently here): one instruction issues per cycle; its register reads
observe the state at the start of the cycle; valid_rst clears slots right
after the reads; writes issued at cycle c commit at the end of cycle
c + pipe_stages - 1, each into the lowest empty slot of its bank, so a
consumer placed pipe_stages after its producer reads the committed value.
Arithmetic is IEEE binary32.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

from .arch import ArchConfig, Topology, pe_coords, span_pe
from .errors import BankFull, InvalidRead, MissingInput
from .isa import CompiledProgram, Copy, Exec, Instruction, Load, Nop, PeOp, Store, decode

_PACK = struct.Struct("<f")
_F32_MAX = 3.4028234663852886e38


def f32(x: float) -> float:
    """Round a Python float to IEEE binary32."""
    if x != x:  # NaN
        return x
    if x > _F32_MAX:
        return float("inf")
    if x < -_F32_MAX:
        return float("-inf")
    return _PACK.unpack(_PACK.pack(x))[0]


def priority_encode(valid_bits) -> int:
    """Lowest index holding 0; the hardware write-address generator."""
    for i, v in enumerate(valid_bits):
        if not v:
            return i
    raise BankFull(-1)


@dataclass
class MachineState:
    cfg: ArchConfig
    values: list[list[float]] = field(default_factory=list)
    valid: list[list[bool]] = field(default_factory=list)
    data_mem: dict[int, list[float]] = field(default_factory=dict)
    pending: deque = field(default_factory=deque)  # (due, issue, [(bank, value), ...])
    cycle: int = 0
    runtime_write_trace: list[tuple[int, int, int]] = field(default_factory=list)
    hazard_violations: list[tuple[int, int, int]] = field(default_factory=list)
    bank_level: list[int] = field(default_factory=list)
    bank_peak: list[int] = field(default_factory=list)
    trace: list[dict] | None = None

    def __post_init__(self):
        if not self.values:
            b, r = self.cfg.banks, self.cfg.regs_per_bank
            self.values = [[0.0] * r for _ in range(b)]
            self.valid = [[False] * r for _ in range(b)]
            self.bank_level = [0] * b
            self.bank_peak = [0] * b

    def mem_row(self, row: int) -> list[float]:
        r = self.data_mem.get(row)
        if r is None:
            r = [0.0] * self.cfg.banks
            self.data_mem[row] = r
        return r


@dataclass
class SimResult:
    outputs: dict[int, float]
    cycles: int
    stats: dict[str, int]
    runtime_write_trace: list[tuple[int, int, int]]
    hazard_violations: list[tuple[int, int, int]]
    bank_peak: list[int]
    trace: list[dict] | None = None


def _read_bank(state: MachineState, bank: int, addr: int, trace_reads) -> float:
    if not state.valid[bank][addr]:
        if any(bank == b for _, _, ws in state.pending for b, _ in ws):
            # value still in the pipeline: a RAW hazard, recoverable for diagnosis
            state.hazard_violations.append((state.cycle, bank, addr))
            return 0.0
        raise InvalidRead(state.cycle, bank, addr)
    if trace_reads is not None:
        trace_reads.append((bank, addr))
    return state.values[bank][addr]


def _commit_due(state: MachineState, trace_writes):
    while state.pending and state.pending[0][0] == state.cycle:
        _, issue, writes = state.pending.popleft()
        for bank, value in writes:
            try:
                slot = priority_encode(state.valid[bank])
            except BankFull:
                raise BankFull(bank, state.cycle) from None
            state.values[bank][slot] = value
            state.valid[bank][slot] = True
            state.bank_level[bank] += 1
            state.bank_peak[bank] = max(state.bank_peak[bank], state.bank_level[bank])
            state.runtime_write_trace.append((issue, bank, slot))
            if trace_writes is not None:
                trace_writes.append((bank, slot, value))


def step(state: MachineState, instr: Instruction) -> None:
    """Advance one cycle: read, apply valid_rst, evaluate, schedule writes,
    then commit the pipeline writes that fall due this cycle."""
    cfg = state.cfg
    B = cfg.banks
    trace_entry = None
    if state.trace is not None:
        trace_entry = {"cycle": state.cycle, "kind": type(instr).__name__.lower(),
                       "reads": [], "writes": []}
        state.trace.append(trace_entry)
    t_reads = trace_entry["reads"] if trace_entry else None
    t_writes = trace_entry["writes"] if trace_entry else None

    writes: list[tuple[int, float]] = []
    if isinstance(instr, Nop):
        pass
    elif isinstance(instr, Exec):
        read_val: dict[int, float] = {}
        for b in range(B):
            if instr.read_en[b]:
                read_val[b] = _read_bank(state, b, instr.read_addr[b], t_reads)
        for b in range(B):
            if instr.read_en[b] and instr.valid_rst[b]:
                if state.valid[b][instr.read_addr[b]]:
                    state.valid[b][instr.read_addr[b]] = False
                    state.bank_level[b] -= 1
        width = 1 << cfg.depth
        port_vals = [read_val.get(instr.in_route[i], 0.0) for i in range(B)]
        tree_layers: list[list[list[float]]] = []
        pe_base = 0
        for t in range(cfg.trees):
            cur = port_vals[t * width:(t + 1) * width]
            layers = []
            for d in range(1, cfg.depth + 1):
                nxt = []
                for pos in range(1 << (cfg.depth - d)):
                    op = instr.pe_cfg[pe_base]
                    pe_base += 1
                    a, b2 = cur[2 * pos], cur[2 * pos + 1]
                    if op == PeOp.ADD:
                        nxt.append(f32(a + b2))
                    elif op == PeOp.MUL:
                        nxt.append(f32(a * b2))
                    elif op == PeOp.PASS_LEFT:
                        nxt.append(a)
                    else:
                        nxt.append(b2)
                layers.append(nxt)
                cur = nxt
            tree_layers.append(layers)
        for b in range(B):
            we, sel = instr.out_sel[b]
            if not we:
                continue
            pe = sel if cfg.topology is Topology.FULL_XBAR_BOTH else span_pe(cfg, b, sel)
            tree, layer, pos = pe_coords(cfg, pe)
            writes.append((b, tree_layers[tree][layer - 1][pos]))
    elif isinstance(instr, Copy):
        read_val = {}
        for b in range(B):
            if instr.read_en[b]:
                read_val[b] = _read_bank(state, b, instr.read_addr[b], t_reads)
        for b in range(B):
            if instr.read_en[b] and instr.valid_rst[b]:
                if state.valid[b][instr.read_addr[b]]:
                    state.valid[b][instr.read_addr[b]] = False
                    state.bank_level[b] -= 1
        for b in range(B):
            if instr.write_en[b]:
                writes.append((b, read_val.get(instr.route[b], 0.0)))
    elif isinstance(instr, Load):
        row = state.mem_row(instr.mem_addr)
        for b in range(B):
            if instr.mask[b]:
                writes.append((b, row[b]))
    elif isinstance(instr, Store):
        row = state.mem_row(instr.mem_addr)
        for b in range(B):
            if instr.mask[b]:
                value = _read_bank(state, b, instr.read_addr[b], t_reads)
                if instr.valid_rst[b] and state.valid[b][instr.read_addr[b]]:
                    state.valid[b][instr.read_addr[b]] = False
                    state.bank_level[b] -= 1
                row[b] = value
    else:
        raise TypeError(f"unknown instruction {instr!r}")

    if writes:
        writes.sort(key=lambda bv: bv[0])
        state.pending.append((state.cycle + cfg.pipe_stages - 1, state.cycle, writes))
    _commit_due(state, t_writes)
    state.cycle += 1


def run(program: CompiledProgram, input_values: dict[int, float] | None = None,
        record_trace: bool = False) -> SimResult:
    """Decode the program's bitstream and execute it to completion.

    ``input_values`` supplies free inputs by node id; constants baked at
    compile time fill the rest.  Outputs are read back from data memory
    through the compiler's layout.
    """
    cfg = program.cfg
    instrs = decode(program.bitstream, cfg, count=len(program.instrs) or None)
    meta = program.meta
    merged = dict(meta.const_values)
    if input_values:
        merged.update(input_values)
    state = MachineState(cfg)
    if record_trace:
        state.trace = []
    for node, (row, word) in sorted(meta.input_layout.items()):
        if node not in merged:
            raise MissingInput(node)
        state.mem_row(row)[word] = f32(merged[node])

    for instr in instrs:
        step(state, instr)
    end = len(instrs) + cfg.pipe_stages - 1 if instrs else 0
    while state.cycle < end:
        _commit_due(state, None)
        state.cycle += 1
    if state.pending:
        raise AssertionError("pipeline writes left after drain")

    outputs = {}
    for node, (row, word) in sorted(meta.output_layout.items()):
        outputs[node] = state.mem_row(row)[word]
    stats = {"exec": 0, "copy": 0, "load": 0, "store": 0, "nop": 0}
    for i in instrs:
        stats[{Exec: "exec", Copy: "copy", Load: "load", Store: "store", Nop: "nop"}[type(i)]] += 1
    return SimResult(outputs, state.cycle, stats, state.runtime_write_trace,
                     state.hazard_violations, state.bank_peak,
                     state.trace)


def throughput_gops(node_count: int, cycles: int, freq_hz: float) -> float:
    """Operations per second in GOPS for a workload of ``node_count`` nodes
    finishing in ``cycles`` cycles at ``freq_hz``."""
    if cycles <= 0:
        raise ValueError("cycles must be positive")
    return node_count * freq_hz / cycles / 1e9
