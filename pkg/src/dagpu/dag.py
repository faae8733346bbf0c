"""Compute-DAG data model: validation, binarization, reference evaluation,
traversal orders and the CSR footprint baseline.

A DAG node is either an INPUT (a value supplied at run time or a baked-in
constant) or a SUM/PRODUCT over two or more operands.  All compiler passes
require the DAG to be binarized first (every operator has exactly two
operands); :func:`binarize` rewrites multi-input operators into trees of
binary ones without changing the computed values.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import BadArity, CycleDetected, DanglingRef, DeadNode, MissingInput


class Op(str, Enum):
    INPUT = "input"
    SUM = "sum"
    PRODUCT = "product"


@dataclass(frozen=True)
class Node:
    id: int
    op: Op
    operands: tuple[int, ...] = ()


@dataclass
class ComputeDag:
    """Workload graph: nodes keyed by dense integer id plus designated outputs.

    ``values`` holds constants baked into INPUT nodes (e.g. folded matrix
    coefficients); the remaining INPUT nodes expect values at evaluation time.
    """

    nodes: dict[int, Node]
    outputs: set[int]
    values: dict[int, float] = field(default_factory=dict)

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def input_ids(self) -> list[int]:
        return sorted(n.id for n in self.nodes.values() if n.op is Op.INPUT)

    def op_ids(self) -> list[int]:
        return sorted(n.id for n in self.nodes.values() if n.op is not Op.INPUT)

    def consumers(self) -> dict[int, list[int]]:
        """Consumer lists with multiplicity (an operand used twice counts twice)."""
        cons: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for u in n.operands:
                if u in cons:
                    cons[u].append(n.id)
        return cons

    def edge_count(self) -> int:
        return sum(len(n.operands) for n in self.nodes.values())

    def topo_order(self) -> list[int]:
        """Deterministic Kahn order (ready nodes processed in ascending id)."""
        indeg = {nid: 0 for nid in self.nodes}
        cons = self.consumers()
        for n in self.nodes.values():
            indeg[n.id] = len(n.operands)
        ready = [nid for nid in sorted(self.nodes) if indeg[nid] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            v = heapq.heappop(ready)
            order.append(v)
            for c in cons[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(order) != len(self.nodes):
            raise CycleDetected(*_find_back_edge(self))
        return order


@dataclass(frozen=True)
class DagStats:
    node_count: int
    longest_path: int
    parallelism_ratio: float
    max_outdegree: int


@dataclass
class Issue:
    kind: str  # cycle | bad_arity | dangling_ref | dead_node
    message: str


@dataclass
class ValidationReport:
    valid: bool
    issues: list[Issue]
    stats: DagStats | None

    def raise_first(self):
        if self.valid:
            return
        issue = self.issues[0]
        exc = {"cycle": CycleDetected, "bad_arity": BadArity,
               "dangling_ref": DanglingRef, "dead_node": DeadNode}[issue.kind]
        if issue.kind == "cycle":
            raise CycleDetected(*issue.message.split("->"))
        raise exc(issue.message)


def _find_back_edge(dag: ComputeDag) -> tuple[int, int]:
    """Locate one operand edge that closes a cycle (iterative DFS, gray/black)."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {nid: WHITE for nid in dag.nodes}
    for root in sorted(dag.nodes):
        if color[root] != WHITE:
            continue
        stack = [(root, iter(dag.nodes[root].operands))]
        color[root] = GRAY
        while stack:
            v, it = stack[-1]
            advanced = False
            for u in it:
                if u not in dag.nodes:
                    continue
                if color[u] == GRAY:
                    return (u, v)  # operand edge u -> v closes the cycle
                if color[u] == WHITE:
                    color[u] = GRAY
                    stack.append((u, iter(dag.nodes[u].operands)))
                    advanced = True
                    break
            if not advanced:
                color[v] = BLACK
                stack.pop()
    raise AssertionError("no cycle present")


def validate(dag: ComputeDag) -> ValidationReport:
    """Check acyclicity, arities, operand references and dead nodes.

    Returns stats (node count, longest path in nodes, parallelism ratio,
    max outdegree) when the DAG is valid.
    """
    issues: list[Issue] = []
    for n in dag.nodes.values():
        if n.id != dag.nodes[n.id].id:
            issues.append(Issue("dangling_ref", f"node key {n.id} mismatch"))
        for u in n.operands:
            if u not in dag.nodes:
                issues.append(Issue("dangling_ref", f"node {n.id} references missing node {u}"))
        if n.op is Op.INPUT and n.operands:
            issues.append(Issue("bad_arity", f"input node {n.id} has operands"))
        if n.op is not Op.INPUT and len(n.operands) < 2:
            issues.append(Issue("bad_arity", f"{n.op.value} node {n.id} has arity {len(n.operands)}"))
    for out in dag.outputs:
        if out not in dag.nodes:
            issues.append(Issue("dangling_ref", f"output {out} is not a node"))
    if issues:
        return ValidationReport(False, issues, None)

    # Acyclicity via Kahn; name a concrete back edge on failure.
    indeg = {n.id: len(n.operands) for n in dag.nodes.values()}
    cons = dag.consumers()
    ready = deque(nid for nid in sorted(dag.nodes) if indeg[nid] == 0)
    seen = 0
    depth: dict[int, int] = {}
    order = []
    while ready:
        v = ready.popleft()
        seen += 1
        order.append(v)
        for c in cons[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if seen != len(dag.nodes):
        u, v = _find_back_edge(dag)
        issues.append(Issue("cycle", f"{u}->{v}"))
        return ValidationReport(False, issues, None)

    for nid, cs in cons.items():
        if not cs and nid not in dag.outputs:
            issues.append(Issue("dead_node", f"node {nid} has no consumer and is not an output"))
    if issues:
        return ValidationReport(False, issues, None)

    for v in order:
        ops = dag.nodes[v].operands
        depth[v] = 1 + (max(depth[u] for u in ops) if ops else 0)
    longest = max(depth.values())
    outdeg = max((len(cs) for cs in cons.values()), default=0)
    stats = DagStats(
        node_count=len(dag.nodes),
        longest_path=longest,
        parallelism_ratio=len(dag.nodes) / longest,
        max_outdegree=outdeg,
    )
    return ValidationReport(True, [], stats)


def require_valid(dag: ComputeDag) -> DagStats:
    report = validate(dag)
    if not report.valid:
        report.raise_first()
    return report.stats


def node_depths(dag: ComputeDag) -> dict[int, int]:
    """Longest path (in nodes, inputs count) from any source to each node."""
    depth: dict[int, int] = {}
    for v in dag.topo_order():
        ops = dag.nodes[v].operands
        depth[v] = 1 + (max(depth[u] for u in ops) if ops else 0)
    return depth


def binarize(dag: ComputeDag) -> ComputeDag:
    """Rewrite every k-input operator (k > 2) into k-1 binary operators.

    Operands are merged Huffman-style by critical-path depth: the two
    shallowest pending operands combine first, so deep operands attach near
    the root and the overall longest path stays minimal.  The original node
    id is kept for the root of each merge tree, so consumers and outputs are
    unaffected.  A k-input node grows the DAG by exactly k-2 fresh nodes.
    """
    require_valid(dag)
    new_nodes: dict[int, Node] = {}
    depth: dict[int, int] = {}
    next_id = max(dag.nodes) + 1 if dag.nodes else 0
    for v in dag.topo_order():
        node = dag.nodes[v]
        if node.op is Op.INPUT:
            new_nodes[v] = node
            depth[v] = 1
            continue
        if len(node.operands) == 2:
            new_nodes[v] = node
            depth[v] = 1 + max(depth[u] for u in node.operands)
            continue
        heap = [(depth[u], i, u) for i, u in enumerate(node.operands)]
        heapq.heapify(heap)
        tiebreak = len(node.operands)
        while len(heap) > 2:
            d1, _, a = heapq.heappop(heap)
            d2, _, b = heapq.heappop(heap)
            mid = next_id
            next_id += 1
            new_nodes[mid] = Node(mid, node.op, (a, b))
            depth[mid] = 1 + max(d1, d2)
            heapq.heappush(heap, (depth[mid], tiebreak, mid))
            tiebreak += 1
        d1, _, a = heapq.heappop(heap)
        d2, _, b = heapq.heappop(heap)
        new_nodes[v] = Node(v, node.op, (a, b))
        depth[v] = 1 + max(d1, d2)
    return ComputeDag(new_nodes, set(dag.outputs), dict(dag.values))


def evaluate_reference(dag: ComputeDag, inputs: dict[int, float] | None = None) -> dict[int, float]:
    """Evaluate every node in topological order and return all node values.

    Arithmetic is whatever the supplied values use (floats give IEEE double;
    fractions stay exact).  Constants in ``dag.values`` are used unless
    overridden by ``inputs``.
    """
    supplied = dict(dag.values)
    if inputs:
        supplied.update(inputs)
    val: dict[int, float] = {}
    for v in dag.topo_order():
        node = dag.nodes[v]
        if node.op is Op.INPUT:
            if v not in supplied:
                raise MissingInput(v)
            val[v] = supplied[v]
        elif node.op is Op.SUM:
            acc = val[node.operands[0]]
            for u in node.operands[1:]:
                acc = acc + val[u]
            val[v] = acc
        else:
            acc = val[node.operands[0]]
            for u in node.operands[1:]:
                acc = acc * val[u]
            val[v] = acc
    return val


def dfs_order(dag: ComputeDag) -> dict[int, int]:
    """Post-order depth-first index, a bijection onto 0..n-1.

    Traversal starts from the output nodes in ascending id; operands are
    visited in their stored order before the node itself is numbered.  The
    result is a fixed function of the DAG.
    """
    require_valid(dag)
    idx: dict[int, int] = {}
    seen: set[int] = set()
    counter = 0
    for root in sorted(dag.outputs):
        if root in seen:
            continue
        stack: list[tuple[int, bool]] = [(root, False)]
        while stack:
            v, expanded = stack.pop()
            if expanded:
                idx[v] = counter
                counter += 1
                continue
            if v in seen:
                continue
            seen.add(v)
            stack.append((v, True))
            for u in reversed(dag.nodes[v].operands):
                if u not in seen:
                    stack.append((u, False))
    return idx


def csr_footprint_bytes(dag: ComputeDag) -> int:
    """Bytes of the CSR baseline: (n+1) row pointers, one column index per
    edge and one operator/value word per node, all 4-byte words."""
    n = len(dag.nodes)
    edges = dag.edge_count()
    return 4 * ((n + 1) + edges + n)
