"""Compiler step 2: assign block nodes to physical PEs and block inputs/
outputs to register banks while minimizing bank conflicts.

PE placement is deterministic: each subgraph claims an aligned leaf span
(buddy allocation over the trees) and unrolls recursively, replicating
shared nodes and threading external inputs up through pass-through PEs.
Bank assignment then follows a least-compatible-banks-first greedy with
seeded random choice among compatible banks (balance objective).  Writes
never violate reachability: within a block the stored outputs are matched
to banks with an augmenting-path repair, which always succeeds because a
PE's span strictly exceeds the stored nodes below it.  Remaining conflicts
are therefore read conflicts, each later repaired by one copy instruction.
"""
from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from .arch import ArchConfig, pe_coords, pe_id, writable_banks
from .blocks import BlockGraph
from .dag import Op
from .isa import PeOp


@dataclass(frozen=True)
class Conflict:
    block: int
    node: int
    reason: str  # read | write_share | write_reach


@dataclass
class BlockMap:
    block_id: int
    pe_cfg: tuple[int, ...]
    leaf_reads: list[tuple[int, int]]   # (global leaf port, value node id)
    store_slot: dict[int, int]          # node -> chosen storing PE
    first_slot: dict[int, int]          # node -> first (lowest) PE occurrence
    input_values: set[int]
    op_slots: dict[int, tuple[int, ...]] = None  # node -> every computing PE


@dataclass
class Mapping:
    pe_of: dict[int, tuple[int, int]]
    bank_of: dict[int, int]
    conflicts: list[Conflict]
    block_maps: dict[int, BlockMap]
    io_nodes: set[int]
    bg: BlockGraph
    cfg: ArchConfig
    seed: int


def _sub_closure(dag, sink: int, universe: frozenset[int]) -> set[int]:
    """Ancestors of sink within the subgraph node set, sink included."""
    sub = {sink}
    stack = [sink]
    while stack:
        v = stack.pop()
        for u in dag.nodes[v].operands:
            if u in universe and u not in sub:
                sub.add(u)
                stack.append(u)
    return sub


def _unroll(dag, cfg, tree: int, sink: int, depth: int, anchor_pos: int, sub,
            slots, pe_cfg, leaf_reads) -> bool:
    """Recursively place the subgraph ``sub`` with its sink at
    (tree, depth, anchor_pos), replicating shared nodes and threading
    external operands up through pass-through PEs.  Returns False without
    side effects if any needed PE is already occupied."""
    width = 1 << cfg.depth
    staged: dict[int, tuple[str, int, int]] = {}  # pe -> (kind, value, op)
    reads: list[tuple[int, int]] = []

    def claim(pe, kind, value, op) -> bool:
        if pe in slots or pe in staged:
            return False
        staged[pe] = (kind, value, op)
        return True

    def chain_up(value_node: int, layer: int, pos: int) -> bool:
        leaf = pos << layer
        reads.append((tree * width + leaf, value_node))
        for k in range(1, layer + 1):
            if not claim(pe_id(cfg, tree, k, leaf >> k), "pass", value_node, PeOp.PASS_LEFT):
                return False
        return True

    def place(v: int, layer: int, pos: int) -> bool:
        op = PeOp.ADD if dag.nodes[v].op is Op.SUM else PeOp.MUL
        if not claim(pe_id(cfg, tree, layer, pos), "op", v, op):
            return False
        for side, u in enumerate(dag.nodes[v].operands):
            cpos = 2 * pos + side
            if u in sub:
                if not place(u, layer - 1, cpos):
                    return False
            elif layer == 1:
                reads.append((tree * width + cpos, u))
            elif not chain_up(u, layer - 1, cpos):
                return False
        return True

    if not place(sink, depth, anchor_pos):
        return False
    for pe, (kind, value, op) in staged.items():
        slots[pe] = (kind, value)
        pe_cfg[pe] = op
    leaf_reads.extend(reads)
    return True


def _place_block(blk, dag, cfg: ArchConfig) -> BlockMap:
    pe_cfg = [PeOp.PASS_LEFT] * cfg.pe_count
    slots: dict[int, tuple[str, int]] = {}
    leaf_reads: list[tuple[int, int]] = []
    width = 1 << cfg.depth
    free = [(1 << width) - 1 for _ in range(cfg.trees)]

    # Rotate the tree search origin per block so that consecutive blocks
    # spread their outputs over different bank groups.
    rot = blk.id % cfg.trees
    tree_order = [(rot + i) % cfg.trees for i in range(cfg.trees)]

    def find_span(size: int):
        # bit-reversed offset order spreads equal-size subgraphs under
        # different ancestor PEs, keeping lift paths unobstructed
        mask = (1 << size) - 1
        nslots = width // size
        bits = max(1, (nslots - 1).bit_length())
        order = sorted(range(nslots),
                       key=lambda i: int(format(i, f"0{bits}b")[::-1], 2))
        for t in tree_order:
            for slot_i in order:
                off = slot_i * size
                if (free[t] >> off) & mask == mask:
                    yield t, off

    home_sub: dict[int, frozenset[int]] = {}
    for sg in sorted(blk.subgraphs, key=lambda s: (-s.depth, s.sink)):
        placed = False
        for tree, off in find_span(1 << sg.depth):
            if _unroll(dag, cfg, tree, sg.sink, sg.depth, off >> sg.depth,
                       sg.nodes, slots, pe_cfg, leaf_reads):
                free[tree] &= ~(((1 << (1 << sg.depth)) - 1) << off)
                placed = True
                break
        if not placed:
            raise AssertionError(f"block {blk.id} leaf budget violated during placement")
        for v in sg.nodes:
            home_sub.setdefault(v, sg.nodes)

    store_slot: dict[int, int] = {}
    first_slot: dict[int, int] = {}
    by_layer: dict[int, list[tuple[int, int]]] = {}
    for pe in sorted(slots):
        kind, v = slots[pe]
        if kind != "op":
            continue
        first_slot.setdefault(v, pe)
        by_layer.setdefault(v, []).append((pe_coords(cfg, pe)[1], pe))
    for v, occ in by_layer.items():
        occ.sort(key=lambda lp: (-lp[0], lp[1]))  # highest layer, then lowest pe
        store_slot[v] = occ[0][1]

    def lift(n: int) -> None:
        # climb through idle ancestor PEs as pass-throughs: the value can
        # then be tapped at a higher layer, widening the writable bank span
        tree, layer, pos = pe_coords(cfg, store_slot[n])
        while layer < cfg.depth:
            parent = pe_id(cfg, tree, layer + 1, pos >> 1)
            if parent in slots:
                break
            slots[parent] = ("pass", n)
            pe_cfg[parent] = PeOp.PASS_LEFT if pos % 2 == 0 else PeOp.PASS_RIGHT
            layer += 1
            pos >>= 1
            store_slot[n] = parent

    stored = sorted(blk.outputs & store_slot.keys(),
                    key=lambda n: (pe_coords(cfg, store_slot[n])[1], n))
    for n in stored:
        lift(n)

    # Outputs still tappable only at a narrow span (their tree parent is
    # their own in-tree consumer) are recomputed in a free subtree: the
    # replica's sink has an idle ancestor chain and lifts toward the tree
    # root.  The input crossbar broadcasts reads, so the replica adds no
    # bank traffic, only idle PEs.
    for n in sorted(stored, key=lambda x: (pe_coords(cfg, store_slot[x])[1], x)):
        if pe_coords(cfg, store_slot[n])[1] >= cfg.depth:
            continue
        sub = _sub_closure(dag, n, home_sub[n])
        depth = max(_unroll_depths(dag, sub).values())
        for tree, off in find_span(1 << depth):
            if _unroll(dag, cfg, tree, n, depth, off >> depth, sub,
                       slots, pe_cfg, leaf_reads):
                free[tree] &= ~(((1 << (1 << depth)) - 1) << off)
                store_slot[n] = pe_id(cfg, tree, depth, off >> depth)
                lift(n)
                break

    input_values = {u for _, u in leaf_reads}
    op_slots: dict[int, list[int]] = {}
    for pe in sorted(slots):
        kind, v = slots[pe]
        if kind == "op":
            op_slots.setdefault(v, []).append(pe)
    return BlockMap(blk.id, tuple(pe_cfg), sorted(leaf_reads), store_slot,
                    first_slot, input_values,
                    {v: tuple(pes) for v, pes in op_slots.items()})


def _unroll_depths(dag, sub) -> dict[int, int]:
    depth: dict[int, int] = {}
    remaining = set(sub)
    while remaining:
        progressed = False
        for v in sorted(remaining):
            ops = [u for u in dag.nodes[v].operands if u in sub]
            if all(u in depth for u in ops):
                depth[v] = 1 + max((depth[u] for u in ops), default=0)
                remaining.discard(v)
                progressed = True
        if not progressed:
            raise AssertionError("cycle inside subgraph")
    return depth


def _placements(bg: BlockGraph, cfg: ArchConfig) -> dict[int, BlockMap]:
    return {blk.id: _place_block(blk, bg.dag, cfg) for blk in bg.blocks}


def _io_nodes(bg: BlockGraph, bmaps) -> set[int]:
    io: set[int] = set()
    for blk in bg.blocks:
        io |= blk.outputs
        io |= bmaps[blk.id].input_values
    for o in bg.dag.outputs:
        io.add(o)
    return io


def _scan_conflicts(bg: BlockGraph, bmaps, bank_of, cfg: ArchConfig) -> list[Conflict]:
    conflicts: list[Conflict] = []
    for blk in bg.blocks:
        groups: dict[int, list[int]] = {}
        for u in sorted(bmaps[blk.id].input_values):
            groups.setdefault(bank_of[u], []).append(u)
        for bank in sorted(groups):
            for n in groups[bank][1:]:
                conflicts.append(Conflict(blk.id, n, "read"))
        ogroups: dict[int, list[int]] = {}
        for n in sorted(blk.outputs):
            ogroups.setdefault(bank_of[n], []).append(n)
        for bank in sorted(ogroups):
            for n in ogroups[bank][1:]:
                conflicts.append(Conflict(blk.id, n, "write_share"))
        for n in sorted(blk.outputs):
            pe = bmaps[blk.id].store_slot[n]
            if bank_of[n] not in writable_banks(pe, cfg):
                conflicts.append(Conflict(blk.id, n, "write_reach"))
    return conflicts


def map_blocks(bg: BlockGraph, cfg: ArchConfig, seed: int = 0) -> Mapping:
    """Algorithm: map io nodes one per iteration, always the node with the
    fewest remaining compatible banks, choosing uniformly among compatible
    banks; when none remain, fall back to the least-conflict bank, and for
    stored outputs repair reachability with an augmenting path.  Two seeded
    restarts are run and the lower-conflict assignment kept."""
    dag = bg.dag
    bmaps = _placements(bg, cfg)
    io = _io_nodes(bg, bmaps)

    producer_block: dict[int, int] = dict(bg.node_block)
    allowed: dict[int, frozenset[int]] = {}
    f_partners: dict[int, set[int]] = {n: set() for n in io}
    g_partners: dict[int, set[int]] = {n: set() for n in io}
    for blk in bg.blocks:
        ins = bmaps[blk.id].input_values
        for u in ins:
            f_partners[u] |= ins - {u}
        for n in blk.outputs:
            g_partners[n] |= blk.outputs - {n}
    all_banks = frozenset(range(cfg.banks))
    for n in sorted(io):
        if dag.nodes[n].op is Op.INPUT:
            allowed[n] = all_banks
        else:
            pe = bmaps[producer_block[n]].store_slot[n]
            allowed[n] = frozenset(writable_banks(pe, cfg))

    best = None
    for attempt in range(2):
        bank_of = _assign_banks(bg, cfg, bmaps, io, allowed, f_partners,
                                g_partners, producer_block,
                                random.Random(seed * 1000003 + attempt))
        conflicts = _scan_conflicts(bg, bmaps, bank_of, cfg)
        if best is None or len(conflicts) < len(best[1]):
            best = (bank_of, conflicts)
    bank_of, conflicts = best

    pe_of = {}
    for blk in bg.blocks:
        bm = bmaps[blk.id]
        for n in blk.nodes:
            pe_of[n] = (blk.id, bm.store_slot.get(n, bm.first_slot.get(n)))
    return Mapping(pe_of, bank_of, conflicts, bmaps, io, bg, cfg, seed)


def _assign_banks(bg, cfg, bmaps, io, allowed, f_partners, g_partners,
                  producer_block, rng) -> dict[int, int]:
    dag = bg.dag
    bank_of: dict[int, int] = {}
    holders: dict[int, dict[int, int]] = {blk.id: {} for blk in bg.blocks}
    # per node, how many already-assigned read partners sit on each bank
    partner_load: dict[int, list[int]] = {n: [0] * cfg.banks for n in io}

    def eff_banks(n: int) -> set[int]:
        load = partner_load[n]
        s = {b for b in allowed[n] if load[b] == 0}
        for m in g_partners[n]:
            if m in bank_of:
                s.discard(bank_of[m])
        return s

    def f_cost(n: int, bank: int) -> int:
        return partner_load[n][bank]

    def settle(n: int, bank: int):
        old = bank_of.get(n)
        if old is not None:
            for p in f_partners[n]:
                partner_load[p][old] -= 1
        bank_of[n] = bank
        for p in f_partners[n]:
            partner_load[p][bank] += 1
        if dag.nodes[n].op is not Op.INPUT:
            holders[producer_block[n]][bank] = n

    def augment(n: int) -> bool:
        # Reassign banks among this block's stored outputs so that n also
        # gets a reachable bank; spans are nested with spare capacity, so a
        # path always exists.  Banks adding read conflicts are tried last.
        held = holders[producer_block[n]]
        visited: set[int] = set()

        def relocate(u: int, bank: int):
            old = bank_of.get(u)
            if old is not None and held.get(old) == u:
                del held[old]
            settle(u, bank)

        def try_take(u: int) -> bool:
            for bank in sorted(allowed[u], key=lambda b: (f_cost(u, b), b)):
                if bank in visited:
                    continue
                visited.add(bank)
                holder = held.get(bank)
                if holder is None:
                    relocate(u, bank)
                    return True
                if holder != u and try_take(holder):
                    relocate(u, bank)
                    return True
            return False

        return try_take(n)

    buckets: dict[int, deque[int]] = {}
    for n in sorted(io):
        buckets.setdefault(len(allowed[n]), deque()).append(n)

    remaining = len(io)
    while remaining:
        k = min(size for size, dq in buckets.items() if dq)
        n = buckets[k].popleft()
        if n in bank_of:
            continue
        s = eff_banks(n)
        if len(s) < k:
            buckets.setdefault(len(s), deque()).append(n)
            continue
        if s:
            settle(n, rng.choice(sorted(s)))
        else:
            s2 = set(allowed[n])
            for m in g_partners[n]:
                if m in bank_of:
                    s2.discard(bank_of[m])
            if s2:
                best = min(f_cost(n, b) for b in s2)
                settle(n, rng.choice(sorted(b for b in s2 if f_cost(n, b) == best)))
            else:
                if not augment(n):
                    # span exhausted beyond repair; park anywhere reachable
                    settle(n, rng.choice(sorted(allowed[n])))
        remaining -= 1

    # Local repair descent: walk every read-collision group and move its
    # most flexible member to a bank with strictly fewer colliding consumer
    # blocks; failing that, vacate a bank in its span by relocating the
    # single partner sitting there to a bank free of that partner's own
    # read partners.  Every successful move lowers the total conflict count
    # and keeps G/H intact.
    consumer_blocks: dict[int, list[int]] = {n: [] for n in io}
    block_bank_count: dict[int, list[int]] = {}
    for blk in bg.blocks:
        block_bank_count[blk.id] = [0] * cfg.banks
        for u in bmaps[blk.id].input_values:
            consumer_blocks[u].append(blk.id)
            block_bank_count[blk.id][bank_of[u]] += 1

    def true_cost(n: int, bank: int) -> int:
        # consumer blocks where some co-input already sits on this bank
        cost = 0
        own = 1 if bank_of[n] == bank else 0
        for q in consumer_blocks[n]:
            if block_bank_count[q][bank] - own > 0:
                cost += 1
        return cost

    def move_to(n: int, bank: int):
        old = bank_of[n]
        for q in consumer_blocks[n]:
            counts = block_bank_count[q]
            counts[old] -= 1
            counts[bank] += 1
        settle(n, bank)

    def held_map(n: int):
        return holders.get(producer_block[n]) if dag.nodes[n].op is not Op.INPUT else None

    def relocate_checked(n: int, bank: int) -> bool:
        held = held_map(n)
        if held is not None:
            if held.get(bank) is not None:
                return False
            del held[bank_of[n]]
        move_to(n, bank)
        return True

    def try_move(n: int) -> bool:
        cur_cost = true_cost(n, bank_of[n])
        if cur_cost == 0:
            return False
        held = held_map(n)
        candidates = sorted(set(allowed[n]), key=lambda b: (partner_load[n][b], b))
        for bank in candidates:
            if bank == bank_of[n]:
                continue
            if held is not None and held.get(bank) is not None:
                continue
            if true_cost(n, bank) < cur_cost:
                return relocate_checked(n, bank)
        return False

    def try_cascade(n: int) -> bool:
        held = held_map(n)
        load = partner_load[n]
        by_bank: dict[int, int] = {}
        for m in f_partners[n]:
            b = bank_of.get(m)
            if b is not None and b not in by_bank:
                by_bank[b] = m
        for b in sorted(allowed[n]):
            if load[b] != 1 or b == bank_of[n]:
                continue
            if held is not None and held.get(b) is not None:
                continue
            m = by_bank.get(b)
            if m is None:
                continue
            # move the lone blocker m somewhere free of m's own partners
            target = next((t for t in sorted(allowed[m])
                           if t != b and partner_load[m][t] == 0
                           and (held_map(m) is None or held_map(m).get(t) is None)), None)
            if target is None:
                continue
            if relocate_checked(m, target) and partner_load[n][b] == 0:
                return relocate_checked(n, b)
        return False

    for _ in range(8):
        moved = False
        for blk in bg.blocks:
            groups: dict[int, list[int]] = {}
            for u in sorted(bmaps[blk.id].input_values):
                groups.setdefault(bank_of[u], []).append(u)
            for bank in sorted(groups):
                ns = groups[bank]
                if len(ns) < 2:
                    continue
                for n in sorted(ns, key=lambda x: (-len(allowed[x]), x)):
                    if try_move(n) or try_cascade(n):
                        moved = True
                        break
        if not moved:
            break

    return bank_of


def random_map(bg: BlockGraph, cfg: ArchConfig, seed: int = 0) -> Mapping:
    """Baseline for the conflict comparison: identical deterministic PE
    placement, banks drawn uniformly while ignoring the conflict
    constraints."""
    rng = random.Random(seed)
    bmaps = _placements(bg, cfg)
    io = _io_nodes(bg, bmaps)
    bank_of = {n: rng.randrange(cfg.banks) for n in sorted(io)}
    conflicts = _scan_conflicts(bg, bmaps, bank_of, cfg)
    pe_of = {}
    for blk in bg.blocks:
        bm = bmaps[blk.id]
        for n in blk.nodes:
            pe_of[n] = (blk.id, bm.store_slot.get(n, bm.first_slot.get(n)))
    return Mapping(pe_of, bank_of, conflicts, bmaps, io, bg, cfg, seed)


def count_conflicts(m: Mapping, cfg: ArchConfig) -> int:
    """Copy operations needed to repair every constraint violation, one per
    misplaced operand or result."""
    return len(_scan_conflicts(m.bg, m.block_maps, m.bank_of, cfg))


def bank_occupancy_profile(m: Mapping, bg: BlockGraph, cfg: ArchConfig) -> dict[int, list[int]]:
    """Live register-file values per bank at block-step granularity.

    Step t covers the execution of block t; inputs are live from step 0,
    a block's outputs from the following step, and values stay live through
    their last consuming block (graph outputs to the final store step)."""
    steps = len(bg.blocks) + 1
    birth: dict[int, int] = {}
    death: dict[int, int] = {}
    dag = bg.dag
    for n in sorted(m.io_nodes):
        if dag.nodes[n].op is Op.INPUT:
            birth[n] = 0
        else:
            birth[n] = bg.node_block[n] + 1
        last = steps - 1 if n in dag.outputs else -1
        death[n] = last
    for blk in bg.blocks:
        for u in m.block_maps[blk.id].input_values:
            death[u] = max(death[u], blk.id)
    profile = {b: [0] * steps for b in range(cfg.banks)}
    for n, b in m.bank_of.items():
        if n not in birth:
            continue
        for t in range(birth[n], death[n] + 1):
            profile[b][t] += 1
    return profile


def balance_metric(profile: dict[int, list[int]]) -> float:
    """Max over banks of time-averaged occupancy divided by the mean."""
    means = [sum(series) / max(1, len(series)) for series in profile.values()]
    total = sum(means) / max(1, len(means))
    if total == 0:
        return 1.0
    return max(means) / total
