"""Toolchain for a tree-datapath VLIW DAG processor: workload ingestion,
a conflict-aware compiler, a bit-exact cycle-accurate simulator and a
design-space exploration harness."""

from .arch import ArchConfig, Topology, clog2, derive_config, writable_banks
from .dag import (ComputeDag, DagStats, Node, Op, ValidationReport, binarize,
                  csr_footprint_bytes, dfs_order, evaluate_reference, validate)
from .ingest import (SparseMatrix, parse_json_dag, parse_matrix_market,
                     parse_psdd, random_dag, sptrsv_dag, write_json_dag)
from .isa import (Bitstream, CompiledProgram, Copy, Exec, Instruction, Load,
                  Nop, ProgramMeta, Store, decode, encode, instr_bit_length,
                  read_program, write_program)
from .blocks import (Block, BlockGraph, Subgraph, block_fitness, decompose,
                     find_schedulable_subgraphs, validate_blocks)
from .mapping import (Mapping, bank_occupancy_profile, count_conflicts,
                      map_blocks, random_map)
from .schedule import (ScheduleState, check_static_hazards, compile_dag,
                       finalize, insert_spills, linearize, predict_writes,
                       program_footprint_bytes, reorder)
from .simulator import (MachineState, SimResult, priority_encode, run, step,
                        throughput_gops)
from .dse import (energy_proxy, edp_proxy, report_breakdown, report_throughput,
                  sweep)

__version__ = "0.1.0"
