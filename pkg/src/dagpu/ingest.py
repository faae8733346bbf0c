"""Workload ingestion: MatrixMarket matrices, triangular-solve DAGs,
probabilistic-circuit (psdd) files, a JSON graph format and seeded random
DAG generation for property tests."""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

from .dag import ComputeDag, Node, Op, require_valid
from .errors import ParseError, SchemaError, UnsupportedLineKind, ZeroDiagonal


@dataclass
class SparseMatrix:
    """Lower-triangular part of a square sparse matrix.

    ``entries`` holds (row, col, value) with row >= col, 0-indexed, at most
    one entry per coordinate; ``diagonal`` maps every row to its (nonzero)
    diagonal value.
    """

    dim: int
    entries: list[tuple[int, int, float]]
    diagonal: dict[int, float] = field(default_factory=dict)


def parse_matrix_market(text: str) -> SparseMatrix:
    """Parse MatrixMarket coordinate text and keep the lower triangle.

    Supports real/integer/pattern fields and general/symmetric symmetry.
    Pattern entries get value 1.0.  Symmetric storage is expanded before the
    triangle is extracted, so either stored half yields the same matrix.
    """
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    header = lines[0].strip().split()
    if len(header) < 5 or header[0].lower() != "%%matrixmarket" or header[1].lower() != "matrix":
        raise ParseError("missing %%MatrixMarket matrix header", 1)
    fmt, fld, sym = header[2].lower(), header[3].lower(), header[4].lower()
    if fmt != "coordinate":
        raise ParseError(f"unsupported format {fmt!r}", 1)
    if fld not in ("real", "integer", "pattern"):
        raise ParseError(f"unsupported field {fld!r}", 1)
    if sym not in ("general", "symmetric"):
        raise ParseError(f"unsupported symmetry {sym!r}", 1)

    lineno = 1
    size_line = None
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        s = raw.strip()
        if not s or s.startswith("%"):
            continue
        size_line = s
        lineno = i
        body_start = i
        break
    if size_line is None:
        raise ParseError("missing size line", len(lines))
    parts = size_line.split()
    if len(parts) != 3:
        raise ParseError("size line must be 'rows cols nnz'", lineno)
    try:
        rows, cols, nnz = (int(p) for p in parts)
    except ValueError:
        raise ParseError("non-integer size line", lineno) from None
    if rows != cols:
        raise ParseError(f"matrix must be square, got {rows}x{cols}", lineno)
    if rows < 1:
        raise ParseError("matrix dimension must be positive", lineno)

    raw_entries: list[tuple[int, int, float]] = []
    count = 0
    for i, raw in enumerate(lines[body_start:], start=body_start + 1):
        s = raw.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        want = 2 if fld == "pattern" else 3
        if len(parts) < want:
            raise ParseError("truncated entry line", i)
        try:
            r = int(parts[0])
            c = int(parts[1])
            v = 1.0 if fld == "pattern" else float(parts[2])
        except ValueError:
            raise ParseError("malformed entry line", i) from None
        if not (1 <= r <= rows and 1 <= c <= cols):
            raise ParseError(f"entry ({r},{c}) outside {rows}x{cols}", i)
        raw_entries.append((r - 1, c - 1, v))
        count += 1
    if count != nnz:
        raise ParseError(f"expected {nnz} entries, found {count}", len(lines))

    expanded = list(raw_entries)
    if sym == "symmetric":
        expanded.extend((c, r, v) for r, c, v in raw_entries if r != c)

    seen: set[tuple[int, int]] = set()
    entries: list[tuple[int, int, float]] = []
    for r, c, v in expanded:
        if r < c:
            continue
        if (r, c) in seen:
            raise ParseError(f"duplicate entry at ({r + 1},{c + 1})")
        seen.add((r, c))
        entries.append((r, c, v))
    entries.sort(key=lambda e: (e[0], e[1]))

    diagonal = {r: v for r, c, v in entries if r == c}
    for r in range(rows):
        if diagonal.get(r, 0.0) == 0.0:
            raise ZeroDiagonal(r)
    return SparseMatrix(dim=rows, entries=entries, diagonal=diagonal)


def sptrsv_dag(m: SparseMatrix) -> ComputeDag:
    """Build the compute DAG of the forward substitution L*x = b.

    Row i computes x_i = (1/L_ii) * (b_i + sum_{j<i} (-L_ij) * x_j).  The
    reciprocal and the negated coefficients are folded into constant INPUT
    nodes so the DAG uses only SUM and PRODUCT operators.  The b_i are free
    INPUT nodes; every x_i is an output.
    """
    for r in range(m.dim):
        if m.diagonal.get(r, 0.0) == 0.0:
            raise ZeroDiagonal(r)
    off = {r: [] for r in range(m.dim)}
    for r, c, v in m.entries:
        if r != c:
            off[r].append((c, v))
    for r in off:
        off[r].sort()

    nodes: dict[int, Node] = {}
    values: dict[int, float] = {}
    nid = 0

    def fresh(op: Op, operands=(), const=None) -> int:
        nonlocal nid
        nodes[nid] = Node(nid, op, tuple(operands))
        if const is not None:
            values[nid] = const
        nid += 1
        return nid - 1

    b = [fresh(Op.INPUT) for _ in range(m.dim)]
    x: list[int] = []
    for i in range(m.dim):
        recip = fresh(Op.INPUT, const=1.0 / m.diagonal[i])
        terms = [b[i]]
        for j, lij in off[i]:
            coef = fresh(Op.INPUT, const=-lij)
            terms.append(fresh(Op.PRODUCT, (coef, x[j])))
        acc = terms[0] if len(terms) == 1 else fresh(Op.SUM, terms)
        x.append(fresh(Op.PRODUCT, (recip, acc)))
    return ComputeDag(nodes, set(x), values)


def parse_psdd(text: str) -> ComputeDag:
    """Parse a psdd circuit file into a sum/product DAG.

    Line kinds follow the circuit-model-zoo convention: ``L id vtree lit``
    and ``T id vtree var log-prob`` are leaves and become INPUT nodes (T
    leaves get constant 1.0, the marginalized value); ``D id vtree k (prime
    sub log-theta)*k`` becomes a SUM over k PRODUCTs, with each log-space
    parameter exponentiated into a constant INPUT factor.
    """
    nodes: dict[int, Node] = {}
    values: dict[int, float] = {}
    nid = 0

    def fresh(op: Op, operands=(), const=None) -> int:
        nonlocal nid
        nodes[nid] = Node(nid, op, tuple(operands))
        if const is not None:
            values[nid] = const
        nid += 1
        return nid - 1

    by_psdd_id: dict[int, int] = {}
    last: int | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("c"):
            continue
        parts = s.split()
        kind = parts[0]
        try:
            if kind == "psdd":
                continue
            if kind == "L":
                pid = int(parts[1])
                by_psdd_id[pid] = fresh(Op.INPUT)
            elif kind == "T":
                pid = int(parts[1])
                by_psdd_id[pid] = fresh(Op.INPUT, const=1.0)
            elif kind == "D":
                pid = int(parts[1])
                k = int(parts[3])
                if k < 1 or len(parts) < 4 + 3 * k:
                    raise ParseError("decision line with too few elements", lineno)
                products = []
                for e in range(k):
                    p, sub, logth = parts[4 + 3 * e: 7 + 3 * e]
                    prime_n = by_psdd_id[int(p)]
                    sub_n = by_psdd_id[int(sub)]
                    theta = fresh(Op.INPUT, const=math.exp(float(logth)))
                    products.append(fresh(Op.PRODUCT, (prime_n, sub_n, theta)))
                by_psdd_id[pid] = products[0] if k == 1 else fresh(Op.SUM, products)
            else:
                raise UnsupportedLineKind(f"unknown line kind {kind!r}", lineno)
            last = by_psdd_id[pid]
        except UnsupportedLineKind:
            raise
        except ParseError:
            raise
        except (ValueError, IndexError, KeyError) as e:
            raise ParseError(f"malformed {kind!r} line: {e}", lineno) from None
    if last is None:
        raise ParseError("no psdd nodes in file")
    return ComputeDag(nodes, {last}, values)


_JSON_OPS = {"input": Op.INPUT, "sum": Op.SUM, "product": Op.PRODUCT}


def parse_json_dag(text: str) -> ComputeDag:
    """Parse the JSON DAG document described in the README schema."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict) or "nodes" not in doc or "outputs" not in doc:
        raise SchemaError("document must have 'nodes' and 'outputs'")
    nodes: dict[int, Node] = {}
    for item in doc["nodes"]:
        if not isinstance(item, dict) or "id" not in item or "op" not in item:
            raise SchemaError(f"bad node entry: {item!r}")
        op_name = item["op"]
        if op_name not in _JSON_OPS:
            raise SchemaError(f"unknown op {op_name!r}")
        nid = int(item["id"])
        if nid in nodes:
            raise SchemaError(f"duplicate node id {nid}")
        operands = tuple(int(u) for u in item.get("operands", []))
        nodes[nid] = Node(nid, _JSON_OPS[op_name], operands)
    outputs = {int(o) for o in doc["outputs"]}
    values = {int(k): float(v) for k, v in doc.get("values", {}).items()}
    return ComputeDag(nodes, outputs, values)


def write_json_dag(dag: ComputeDag) -> str:
    doc = {
        "nodes": [
            {"id": n.id, "op": n.op.value, "operands": list(n.operands)}
            for n in sorted(dag.nodes.values(), key=lambda n: n.id)
        ],
        "outputs": sorted(dag.outputs),
    }
    if dag.values:
        doc["values"] = {str(k): dag.values[k] for k in sorted(dag.values)}
    return json.dumps(doc, indent=1, sort_keys=True)


def random_dag(n: int, arity_max: int = 2, parallelism: float = 20.0,
               seed: int = 0) -> ComputeDag:
    """Generate a valid n-node DAG, deterministic per seed.

    Nodes are placed on levels; every operator takes at least one operand
    from the level directly below, so the longest path equals the level
    count and n/longest_path lands near ``parallelism``.  Product nodes
    multiply exactly one non-input operand (like coefficient scaling in
    triangular solves or parameter factors in probabilistic circuits), so
    node values stay single-exponential in the depth and evaluations with
    inputs near 1.0 remain inside float32 range.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    if n == 1:
        return ComputeDag({0: Node(0, Op.INPUT)}, {0})
    levels = max(2, min(n, round(n / max(parallelism, 1e-9))))

    weights = [0.5 + rng.random() for _ in range(levels)]
    total = sum(weights)
    sizes = [max(1, int(n * w / total)) for w in weights]
    while sum(sizes) > n:
        sizes[sizes.index(max(sizes))] -= 1
    while sum(sizes) < n:
        sizes[rng.randrange(levels)] += 1

    nodes: dict[int, Node] = {}
    level_members: list[list[int]] = []
    nid = 0
    input_uses: dict[int, int] = {}

    def pick_input() -> int:
        # bounded reuse keeps leaf fanout near real workloads' instead of
        # funneling every product through a handful of hub inputs
        pool = level_members[0]
        for _ in range(4):
            cand = pool[rng.randrange(len(pool))]
            if input_uses.get(cand, 0) < 6:
                break
        input_uses[cand] = input_uses.get(cand, 0) + 1
        return cand

    for lvl in range(levels):
        members = []
        for _ in range(sizes[lvl]):
            if lvl == 0:
                nodes[nid] = Node(nid, Op.INPUT)
            else:
                arity = rng.randint(2, max(2, arity_max))
                first = rng.choice(level_members[lvl - 1])
                operands = [first]
                op = rng.choice((Op.SUM, Op.PRODUCT))
                for _ in range(arity - 1):
                    if op is Op.PRODUCT:
                        operands.append(pick_input())
                    else:
                        src_lvl = rng.randrange(max(0, lvl - 4), lvl)
                        operands.append(rng.choice(level_members[src_lvl]))
                nodes[nid] = Node(nid, op, tuple(operands))
            members.append(nid)
            nid += 1
        level_members.append(members)

    consumed: set[int] = set()
    for node in nodes.values():
        consumed.update(node.operands)
    outputs = {nid for nid in nodes if nid not in consumed}
    dag = ComputeDag(nodes, outputs)
    require_valid(dag)
    return dag
