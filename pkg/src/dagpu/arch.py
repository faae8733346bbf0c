"""Architecture template: a parameterized machine with T parallel trees of
processing elements (D layers each), B single-ported register banks with R
registers, an input crossbar and a configurable output interconnect.

PE identifiers are global integers.  Within a tree, layers are numbered
1 (leaves) to D (root); layer d holds 2^(D-d) PEs.  The PE at (tree, layer,
pos) covers the leaf span [pos*2^d, (pos+1)*2^d) of its tree, and under the
per-layer output topology can write exactly the banks of that span.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import GeometryError


class Topology(str, Enum):
    INPUT_XBAR_OUTPUT_PER_LAYER = "input_xbar_output_per_layer"
    FULL_XBAR_BOTH = "full_xbar_both"


def clog2(x: int) -> int:
    """Bits needed to address x distinct values (clog2(1) == 0)."""
    if x < 1:
        raise ValueError("clog2 of non-positive value")
    return (x - 1).bit_length()


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class ArchConfig:
    depth: int
    banks: int
    regs_per_bank: int
    topology: Topology = Topology.INPUT_XBAR_OUTPUT_PER_LAYER
    data_mem_words: int = 131072
    freq_hz: float = 3.0e8

    @property
    def trees(self) -> int:
        return self.banks // (1 << self.depth)

    @property
    def pipe_stages(self) -> int:
        return self.depth + 1

    @property
    def pes_per_tree(self) -> int:
        return (1 << self.depth) - 1

    @property
    def pe_count(self) -> int:
        return self.trees * self.pes_per_tree

    @property
    def data_mem_rows(self) -> int:
        return max(1, self.data_mem_words // self.banks)

    def key(self) -> tuple[int, int, int]:
        return (self.depth, self.banks, self.regs_per_bank)


def derive_config(depth: int, banks: int, regs_per_bank: int,
                  topology: Topology | str = Topology.INPUT_XBAR_OUTPUT_PER_LAYER,
                  data_mem_words: int = 131072, freq_hz: float = 3.0e8) -> ArchConfig:
    """Validate the geometry and build an ArchConfig.

    Requires banks = trees * 2^depth with trees >= 1 (one bank per tree
    input), banks and regs_per_bank powers of two and depth >= 1.
    """
    if isinstance(topology, str):
        topology = Topology(topology)
    if depth < 1:
        raise GeometryError(f"depth must be >= 1, got {depth}")
    if not _is_pow2(banks):
        raise GeometryError(f"banks must be a power of two, got {banks}")
    if not _is_pow2(regs_per_bank):
        raise GeometryError(f"regs_per_bank must be a power of two, got {regs_per_bank}")
    if banks < (1 << depth):
        raise GeometryError(f"banks={banks} smaller than tree width 2^{depth}")
    if data_mem_words < banks:
        raise GeometryError("data memory smaller than one row")
    return ArchConfig(depth, banks, regs_per_bank, topology, data_mem_words, freq_hz)


# PE numbering: pe = tree * pes_per_tree + layer_offset(layer) + pos,
# with layer_offset(1) = 0 and layer d holding 2^(D-d) PEs.

def _layer_offset(cfg: ArchConfig, layer: int) -> int:
    # sum of 2^(D-k) for k in 1..layer-1
    return (1 << cfg.depth) - (1 << (cfg.depth - layer + 1))


def pe_id(cfg: ArchConfig, tree: int, layer: int, pos: int) -> int:
    if not (1 <= layer <= cfg.depth):
        raise ValueError(f"layer {layer} outside 1..{cfg.depth}")
    if not (0 <= pos < (1 << (cfg.depth - layer))):
        raise ValueError(f"pos {pos} outside layer {layer}")
    if not (0 <= tree < cfg.trees):
        raise ValueError(f"tree {tree} outside 0..{cfg.trees - 1}")
    return tree * cfg.pes_per_tree + _layer_offset(cfg, layer) + pos


def pe_coords(cfg: ArchConfig, pe: int) -> tuple[int, int, int]:
    """Inverse of pe_id: global pe -> (tree, layer, pos)."""
    if not (0 <= pe < cfg.pe_count):
        raise ValueError(f"pe {pe} outside 0..{cfg.pe_count - 1}")
    tree, rem = divmod(pe, cfg.pes_per_tree)
    layer = 1
    while rem >= (1 << (cfg.depth - layer)):
        rem -= 1 << (cfg.depth - layer)
        layer += 1
    return tree, layer, rem


def writable_banks(pe: int, cfg: ArchConfig) -> set[int]:
    """Banks reachable from a PE through the output interconnect.

    FULL_XBAR_BOTH reaches every bank.  Under the per-layer topology a PE at
    (tree, layer d, pos) reaches exactly the banks of its leaf span, so each
    bank sees exactly one PE per layer.
    """
    if cfg.topology is Topology.FULL_XBAR_BOTH:
        return set(range(cfg.banks))
    tree, layer, pos = pe_coords(cfg, pe)
    base = tree * (1 << cfg.depth) + pos * (1 << layer)
    return set(range(base, base + (1 << layer)))


def span_pe(cfg: ArchConfig, bank: int, layer: int) -> int:
    """The unique PE at ``layer`` whose leaf span covers ``bank`` (per-layer
    output topology); used by the decoder to resolve out_sel."""
    if not (0 <= bank < cfg.banks):
        raise ValueError(f"bank {bank} outside 0..{cfg.banks - 1}")
    tree, leaf = divmod(bank, 1 << cfg.depth)
    return pe_id(cfg, tree, layer, leaf >> layer)
