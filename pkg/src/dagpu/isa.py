"""Instruction set, bit-exact variable-length encoding and the program file.

Five instruction kinds: exec (one pass through the PE trees), copy (bank to
bank shuffle through the input crossbar), load/store (vector moves between
data memory and the banks) and nop.  No instruction carries a register
write address: writes land at the lowest empty slot of their bank, and a
per-bank valid_rst bit marks the last read of a value instead.

Instructions are packed back to back in a dense bitstream, fields
most-significant-first in declaration order, 3-bit opcode first.  Bit
lengths per kind (A = ceil(log2 data_mem_rows), default topology):

    nop   = 3
    load  = 3 + A + B
    store = 3 + A + B + B*log2(R) + B
    copy  = 3 + B*(log2(R) + 2) + B*(log2(B) + 1)
    exec  = 3 + #PE*2 + B*(log2(R) + 2) + B*log2(B) + B*(1 + ceil(log2 D))

Under FULL_XBAR_BOTH the exec out_sel selector addresses a PE instead of a
layer (ceil(log2 #PE) bits per bank); the per-layer formula above is the
normative one for the swept design space.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .arch import ArchConfig, Topology, clog2, derive_config
from .dag import DagStats
from .errors import DecodeError, EncodeError


class PeOp:
    ADD = 0
    MUL = 1
    PASS_LEFT = 2
    PASS_RIGHT = 3


OPC_NOP = 0
OPC_EXEC = 1
OPC_COPY = 2
OPC_LOAD = 3
OPC_STORE = 4
OPCODE_BITS = 3


@dataclass(frozen=True)
class Exec:
    """pe_cfg: one 2-bit op per PE (global pe order).
    out_sel: per bank (write_en, sel); sel is the source layer (1-based)
    under the per-layer topology, or a global PE id under FULL_XBAR_BOTH."""
    pe_cfg: tuple[int, ...]
    read_addr: tuple[int, ...]
    read_en: tuple[bool, ...]
    valid_rst: tuple[bool, ...]
    in_route: tuple[int, ...]
    out_sel: tuple[tuple[bool, int], ...]


@dataclass(frozen=True)
class Copy:
    read_addr: tuple[int, ...]
    read_en: tuple[bool, ...]
    valid_rst: tuple[bool, ...]
    route: tuple[int, ...]
    write_en: tuple[bool, ...]


@dataclass(frozen=True)
class Load:
    mem_addr: int
    mask: tuple[bool, ...]


@dataclass(frozen=True)
class Store:
    mem_addr: int
    mask: tuple[bool, ...]
    read_addr: tuple[int, ...]
    valid_rst: tuple[bool, ...]


@dataclass(frozen=True)
class Nop:
    pass


Instruction = Exec | Copy | Load | Store | Nop

_KIND_NAMES = {Exec: "exec", Copy: "copy", Load: "load", Store: "store", Nop: "nop"}


def kind_name(instr: Instruction) -> str:
    return _KIND_NAMES[type(instr)]


def _out_sel_bits(cfg: ArchConfig) -> int:
    if cfg.topology is Topology.FULL_XBAR_BOTH:
        return clog2(cfg.pe_count)
    return clog2(cfg.depth)


def instr_bit_length(kind: str | type, cfg: ArchConfig) -> int:
    """Closed-form bit length per instruction kind for a configuration."""
    if isinstance(kind, type):
        kind = _KIND_NAMES[kind]
    b = cfg.banks
    lr = clog2(cfg.regs_per_bank)
    lb = clog2(cfg.banks)
    a = clog2(cfg.data_mem_rows)
    if kind == "nop":
        return OPCODE_BITS
    if kind == "load":
        return OPCODE_BITS + a + b
    if kind == "store":
        return OPCODE_BITS + a + b + b * lr + b
    if kind == "copy":
        return OPCODE_BITS + b * (lr + 2) + b * (lb + 1)
    if kind == "exec":
        return OPCODE_BITS + cfg.pe_count * 2 + b * (lr + 2) + b * lb + b * (1 + _out_sel_bits(cfg))
    raise ValueError(f"unknown instruction kind {kind!r}")


def counterfactual_bit_length(kind: str | type, cfg: ArchConfig) -> int:
    """Length under the hypothetical encoding with explicit write addresses:
    valid_rst fields vanish and every register-writing kind (exec, copy,
    load) gains a log2(R)-bit write address per bank."""
    if isinstance(kind, type):
        kind = _KIND_NAMES[kind]
    base = instr_bit_length(kind, cfg)
    b = cfg.banks
    lr = clog2(cfg.regs_per_bank)
    if kind == "nop":
        return base
    if kind == "load":
        return base + b * lr
    if kind == "store":
        return base - b
    return base - b + b * lr  # exec, copy


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    bit_len: int


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0
        self.bit_len = 0

    def put(self, value: int, width: int):
        if width == 0:
            if value:
                raise EncodeError("nonzero value in zero-width field")
            return
        if not (0 <= value < (1 << width)):
            raise EncodeError(f"value {value} does not fit in {width} bits")
        self.acc = (self.acc << width) | value
        self.nbits += width
        self.bit_len += width
        while self.nbits >= 8:
            self.nbits -= 8
            self.out.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def finish(self) -> Bitstream:
        if self.nbits:
            self.out.append((self.acc << (8 - self.nbits)) & 0xFF)
        return Bitstream(bytes(self.out), self.bit_len)


class _BitReader:
    def __init__(self, bs: Bitstream):
        self.data = bs.data
        self.bit_len = bs.bit_len
        self.pos = 0
        self.acc = 0
        self.nbits = 0
        self.bytepos = 0

    def remaining(self) -> int:
        return self.bit_len - self.pos

    def take(self, width: int) -> int:
        if width == 0:
            return 0
        if self.pos + width > self.bit_len:
            raise DecodeError(f"truncated stream: need {width} bits, {self.remaining()} left")
        while self.nbits < width:
            self.acc = (self.acc << 8) | self.data[self.bytepos]
            self.bytepos += 1
            self.nbits += 8
        self.nbits -= width
        value = (self.acc >> self.nbits) & ((1 << width) - 1)
        self.acc &= (1 << self.nbits) - 1
        self.pos += width
        return value


def _put_bits(w: _BitWriter, flags) -> None:
    for f in flags:
        w.put(1 if f else 0, 1)


def encode(instrs: list[Instruction], cfg: ArchConfig) -> Bitstream:
    """Pack instructions back to back; the stream length is exactly the sum
    of the per-kind bit lengths (no padding between instructions)."""
    b = cfg.banks
    lr = clog2(cfg.regs_per_bank)
    lb = clog2(cfg.banks)
    a = clog2(cfg.data_mem_rows)
    osel = _out_sel_bits(cfg)
    w = _BitWriter()
    for ins in instrs:
        if isinstance(ins, Nop):
            w.put(OPC_NOP, OPCODE_BITS)
        elif isinstance(ins, Exec):
            if len(ins.pe_cfg) != cfg.pe_count or len(ins.read_addr) != b:
                raise EncodeError("exec field widths do not match config")
            w.put(OPC_EXEC, OPCODE_BITS)
            for op in ins.pe_cfg:
                w.put(op, 2)
            for addr in ins.read_addr:
                w.put(addr, lr)
            _put_bits(w, ins.read_en)
            _put_bits(w, ins.valid_rst)
            for src in ins.in_route:
                w.put(src, lb)
            for we, sel in ins.out_sel:
                w.put(1 if we else 0, 1)
                if cfg.topology is Topology.FULL_XBAR_BOTH:
                    w.put(sel if we else 0, osel)
                else:
                    w.put((sel - 1) if we else 0, osel)
        elif isinstance(ins, Copy):
            w.put(OPC_COPY, OPCODE_BITS)
            for addr in ins.read_addr:
                w.put(addr, lr)
            _put_bits(w, ins.read_en)
            _put_bits(w, ins.valid_rst)
            for src in ins.route:
                w.put(src, lb)
            _put_bits(w, ins.write_en)
        elif isinstance(ins, Load):
            w.put(OPC_LOAD, OPCODE_BITS)
            w.put(ins.mem_addr, a)
            _put_bits(w, ins.mask)
        elif isinstance(ins, Store):
            w.put(OPC_STORE, OPCODE_BITS)
            w.put(ins.mem_addr, a)
            _put_bits(w, ins.mask)
            for addr in ins.read_addr:
                w.put(addr, lr)
            _put_bits(w, ins.valid_rst)
        else:
            raise EncodeError(f"unknown instruction {ins!r}")
    return w.finish()


def decode(bs: Bitstream, cfg: ArchConfig, count: int | None = None) -> list[Instruction]:
    """Inverse of encode.  Reads ``count`` instructions, or until the stream
    is exhausted when ``count`` is None.  Raises DecodeError on truncated
    streams, bad opcodes or out-of-range selector fields."""
    b = cfg.banks
    lr = clog2(cfg.regs_per_bank)
    lb = clog2(cfg.banks)
    a = clog2(cfg.data_mem_rows)
    osel = _out_sel_bits(cfg)
    r = _BitReader(bs)
    out: list[Instruction] = []

    def flags(n):
        return tuple(bool(r.take(1)) for _ in range(n))

    while (len(out) < count) if count is not None else (r.remaining() > 0):
        opc = r.take(OPCODE_BITS)
        if opc == OPC_NOP:
            out.append(Nop())
        elif opc == OPC_EXEC:
            pe_cfg = tuple(r.take(2) for _ in range(cfg.pe_count))
            read_addr = tuple(r.take(lr) for _ in range(b))
            read_en = flags(b)
            valid_rst = flags(b)
            in_route = tuple(r.take(lb) for _ in range(b))
            out_sel = []
            for _ in range(b):
                we = bool(r.take(1))
                sel = r.take(osel)
                if cfg.topology is Topology.FULL_XBAR_BOTH:
                    if we and sel >= cfg.pe_count:
                        raise DecodeError(f"out_sel pe {sel} out of range")
                    out_sel.append((we, sel if we else 0))
                else:
                    layer = sel + 1
                    if we and layer > cfg.depth:
                        raise DecodeError(f"out_sel layer {layer} exceeds depth {cfg.depth}")
                    out_sel.append((we, layer if we else 0))
            out.append(Exec(pe_cfg, read_addr, read_en, valid_rst, in_route, tuple(out_sel)))
        elif opc == OPC_COPY:
            read_addr = tuple(r.take(lr) for _ in range(b))
            read_en = flags(b)
            valid_rst = flags(b)
            route = tuple(r.take(lb) for _ in range(b))
            write_en = flags(b)
            out.append(Copy(read_addr, read_en, valid_rst, route, write_en))
        elif opc == OPC_LOAD:
            mem_addr = r.take(a)
            if mem_addr >= cfg.data_mem_rows:
                raise DecodeError(f"load row {mem_addr} outside data memory")
            out.append(Load(mem_addr, flags(b)))
        elif opc == OPC_STORE:
            mem_addr = r.take(a)
            if mem_addr >= cfg.data_mem_rows:
                raise DecodeError(f"store row {mem_addr} outside data memory")
            mask = flags(b)
            read_addr = tuple(r.take(lr) for _ in range(b))
            valid_rst = flags(b)
            out.append(Store(mem_addr, mask, read_addr, valid_rst))
        else:
            raise DecodeError(f"bad opcode {opc}")
    return out


@dataclass
class ProgramMeta:
    cfg: ArchConfig
    stats_raw: DagStats | None = None
    stats_bin: DagStats | None = None
    input_layout: dict[int, tuple[int, int]] = field(default_factory=dict)
    output_layout: dict[int, tuple[int, int]] = field(default_factory=dict)
    const_values: dict[int, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    conflict_count: int = 0
    spill_stores: int = 0
    spill_loads: int = 0
    input_rows: int = 0
    output_rows: int = 0
    spill_rows: int = 0
    predicted_cycles: int = 0
    bank_peak: list[int] = field(default_factory=list)
    seed: int = 0
    fitness_lambda: float = 0.002
    reorder_window: int = 300


@dataclass
class CompiledProgram:
    """Final artifact: the instruction list, its dense bitstream, the
    compile-time write-address prediction trace (instr index, bank, slot,
    node id) and bookkeeping metadata."""
    instrs: list[Instruction]
    bitstream: Bitstream
    write_trace: list[tuple[int, int, int, int]]
    meta: ProgramMeta

    @property
    def cfg(self) -> ArchConfig:
        return self.meta.cfg


MAGIC = b"DPU2"
VERSION = 1
_TOPO_CODES = {Topology.INPUT_XBAR_OUTPUT_PER_LAYER: 0, Topology.FULL_XBAR_BOTH: 1}
_TOPO_FROM = {v: k for k, v in _TOPO_CODES.items()}
_HEADER = struct.Struct("<4sHBBHHIIQ")


def write_program(prog: CompiledProgram, path: str | Path) -> None:
    """Write the binary program file plus a JSON sidecar (``<path>.json``)
    holding the write trace, layouts and statistics."""
    path = Path(path)
    cfg = prog.cfg
    header = _HEADER.pack(
        MAGIC, VERSION, cfg.depth, _TOPO_CODES[cfg.topology], cfg.banks,
        cfg.regs_per_bank, len(prog.instrs), cfg.data_mem_words,
        prog.bitstream.bit_len,
    )
    path.write_bytes(header + prog.bitstream.data)
    m = prog.meta
    sidecar = {
        "write_trace": [list(t) for t in prog.write_trace],
        "input_layout": {str(k): list(v) for k, v in m.input_layout.items()},
        "output_layout": {str(k): list(v) for k, v in m.output_layout.items()},
        "const_values": {str(k): v for k, v in m.const_values.items()},
        "counts": m.counts,
        "conflict_count": m.conflict_count,
        "spill_stores": m.spill_stores,
        "spill_loads": m.spill_loads,
        "input_rows": m.input_rows,
        "output_rows": m.output_rows,
        "spill_rows": m.spill_rows,
        "predicted_cycles": m.predicted_cycles,
        "bank_peak": m.bank_peak,
        "seed": m.seed,
        "fitness_lambda": m.fitness_lambda,
        "reorder_window": m.reorder_window,
        "freq_hz": cfg.freq_hz,
        "stats_raw": None if m.stats_raw is None else vars(m.stats_raw).copy(),
        "stats_bin": None if m.stats_bin is None else vars(m.stats_bin).copy(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_program(path: str | Path) -> CompiledProgram:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DecodeError("program file shorter than header")
    magic, version, depth, topo, banks, regs, count, dmw, bit_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    if topo not in _TOPO_FROM:
        raise DecodeError(f"bad topology code {topo}")
    cfg = derive_config(depth, banks, regs, _TOPO_FROM[topo], data_mem_words=dmw)
    data = blob[_HEADER.size:]
    if len(data) * 8 < bit_len:
        raise DecodeError("program file truncated")
    bs = Bitstream(data, bit_len)
    instrs = decode(bs, cfg, count=count)
    meta = ProgramMeta(cfg=cfg)
    trace: list[tuple[int, int, int, int]] = []
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        side = json.loads(sidecar_path.read_text())
        meta.input_layout = {int(k): (v[0], v[1]) for k, v in side["input_layout"].items()}
        meta.output_layout = {int(k): (v[0], v[1]) for k, v in side["output_layout"].items()}
        meta.const_values = {int(k): float(v) for k, v in side["const_values"].items()}
        meta.counts = side["counts"]
        meta.conflict_count = side["conflict_count"]
        meta.spill_stores = side["spill_stores"]
        meta.spill_loads = side["spill_loads"]
        meta.input_rows = side["input_rows"]
        meta.output_rows = side["output_rows"]
        meta.spill_rows = side["spill_rows"]
        meta.predicted_cycles = side["predicted_cycles"]
        meta.bank_peak = side["bank_peak"]
        meta.seed = side["seed"]
        meta.fitness_lambda = side["fitness_lambda"]
        meta.reorder_window = side["reorder_window"]
        if side.get("stats_raw"):
            meta.stats_raw = DagStats(**side["stats_raw"])
        if side.get("stats_bin"):
            meta.stats_bin = DagStats(**side["stats_bin"])
        trace = [tuple(t) for t in side["write_trace"]]
    return CompiledProgram(instrs, bs, trace, meta)


def program_bits(instrs: list[Instruction], cfg: ArchConfig) -> int:
    return sum(instr_bit_length(kind_name(i), cfg) for i in instrs)


def counterfactual_program_bits(instrs: list[Instruction], cfg: ArchConfig) -> int:
    return sum(counterfactual_bit_length(kind_name(i), cfg) for i in instrs)


def category_counts(instrs: list[Instruction]) -> dict[str, int]:
    counts = {"exec": 0, "copy": 0, "load": 0, "store": 0, "nop": 0}
    for i in instrs:
        counts[kind_name(i)] += 1
    return counts
