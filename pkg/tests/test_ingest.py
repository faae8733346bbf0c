import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagpu.dag import Op, evaluate_reference, validate
from dagpu.errors import ParseError, SchemaError, UnsupportedLineKind, ZeroDiagonal
from dagpu.ingest import (parse_json_dag, parse_matrix_market, parse_psdd,
                          random_dag, sptrsv_dag, write_json_dag)
from workloads import band_matrix_text, synth_psdd_text


# --- MatrixMarket -------------------------------------------------------------

def test_identity_2x2():
    text = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n2 2 1.0\n"
    m = parse_matrix_market(text)
    assert m.dim == 2
    assert len(m.entries) == 2
    assert m.diagonal == {0: 1.0, 1: 1.0}


def test_lower_triangular_entries_kept():
    text = ("%%MatrixMarket matrix coordinate real general\n3 3 3\n"
            "1 1 2.0\n2 1 -1.0\n2 2 4.0\n")
    with pytest.raises(ZeroDiagonal):
        parse_matrix_market(text)  # row 3 has no diagonal
    text = ("%%MatrixMarket matrix coordinate real general\n2 2 3\n"
            "1 1 2.0\n2 1 -1.0\n2 2 4.0\n")
    m = parse_matrix_market(text)
    assert len(m.entries) == 3


def test_upper_entry_dropped():
    # oracle: keep exactly the entries with row >= col
    text = ("%%MatrixMarket matrix coordinate real general\n2 2 4\n"
            "1 1 2.0\n1 2 5.0\n2 1 -1.0\n2 2 4.0\n")
    m = parse_matrix_market(text)
    assert len(m.entries) == 3
    assert all(r >= c for r, c, _ in m.entries)


def test_pattern_and_symmetric():
    text = "%%MatrixMarket matrix coordinate pattern symmetric\n2 2 2\n1 1\n2 2\n"
    m = parse_matrix_market(text)
    assert all(v == 1.0 for _, _, v in m.entries)
    # symmetric stored as the upper triangle still yields the lower part
    text = ("%%MatrixMarket matrix coordinate real symmetric\n2 2 3\n"
            "1 1 2.0\n1 2 -1.0\n2 2 4.0\n")
    m = parse_matrix_market(text)
    assert (1, 0, -1.0) in m.entries


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError) as e:
        parse_matrix_market("not a header\n")
    assert e.value.line == 1
    with pytest.raises(ParseError):
        parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 3 1\n1 1 1.0\n")
    with pytest.raises(ParseError):
        parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 nope 1.0\n")
    with pytest.raises(ParseError):
        parse_matrix_market("%%MatrixMarket matrix coordinate real general\n"
                            "2 2 2\n1 1 1.0\n1 1 2.0\n")


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=200))
def test_parser_never_crashes_on_fuzz(text):
    try:
        parse_matrix_market(text)
    except (ParseError, ZeroDiagonal):
        pass


# --- sptrsv -------------------------------------------------------------------

def test_sptrsv_diagonal_matrix():
    text = "%%MatrixMarket matrix coordinate real general\n3 3 3\n1 1 2.0\n2 2 4.0\n3 3 8.0\n"
    dag = sptrsv_dag(parse_matrix_market(text))
    rep = validate(dag)
    assert rep.valid
    assert rep.stats.longest_path == 2
    b = dag.input_ids()[:0]  # free inputs are the b_i, constants carry values
    free = [n for n in dag.input_ids() if n not in dag.values]
    vals = evaluate_reference(dag, dict(zip(free, (2.0, 8.0, 16.0))))
    assert [vals[o] for o in sorted(dag.outputs)] == [1.0, 2.0, 2.0]


def test_sptrsv_dense_2x2_forward_substitution():
    # oracle by hand: L=[[2,0],[-1,4]], b=(6,7): x0=3, x1=(7+3)/4=2.5
    text = ("%%MatrixMarket matrix coordinate real general\n2 2 3\n"
            "1 1 2.0\n2 1 -1.0\n2 2 4.0\n")
    dag = sptrsv_dag(parse_matrix_market(text))
    free = [n for n in dag.input_ids() if n not in dag.values]
    vals = evaluate_reference(dag, dict(zip(free, (6.0, 7.0))))
    assert [vals[o] for o in sorted(dag.outputs)] == [3.0, 2.5]


def _forward_substitution(dim, entries, diag, b):
    x = [0.0] * dim
    by_row = {i: [] for i in range(dim)}
    for r, c, v in entries:
        if r != c:
            by_row[r].append((c, v))
    for i in range(dim):
        acc = b[i]
        for j, lij in by_row[i]:
            acc -= lij * x[j]
        x[i] = acc / diag[i]
    return x


def test_sptrsv_matches_dense_substitution_oracle():
    for seed in range(3):
        dim = 60 + 40 * seed
        m = parse_matrix_market(band_matrix_text(dim, 3 + seed, seed))
        dag = sptrsv_dag(m)
        rng = random.Random(seed)
        b = [rng.uniform(-2, 2) for _ in range(dim)]
        free = [n for n in dag.input_ids() if n not in dag.values]
        vals = evaluate_reference(dag, dict(zip(free, b)))
        want = _forward_substitution(m.dim, m.entries, m.diagonal, b)
        got = [vals[o] for o in sorted(dag.outputs)]
        assert all(abs(g - w) <= 1e-12 * max(1.0, abs(w))
                   for g, w in zip(got, want))


# --- psdd ---------------------------------------------------------------------

def test_psdd_single_literal_line():
    dag = parse_psdd("c comment\npsdd 1\nL 0 0 1\n")
    assert len(dag.nodes) == 1
    assert dag.nodes[0].op is Op.INPUT


def test_psdd_single_true_line():
    dag = parse_psdd("T 0 0 1 -0.693147\n")
    assert len(dag.nodes) == 1
    assert dag.values[0] == 1.0


def test_psdd_decision_two_elements_structure():
    # oracle: structural count from the line format, 1 sum over 2 products
    text = "L 0 0 1\nL 1 0 -1\nD 2 0 2 0 1 -0.693147 1 0 -0.693147\n"
    dag = parse_psdd(text)
    sums = [n for n in dag.nodes.values() if n.op is Op.SUM]
    products = [n for n in dag.nodes.values() if n.op is Op.PRODUCT]
    assert len(sums) == 1 and len(products) == 2
    assert all(len(p.operands) == 3 for p in products)


def test_psdd_parameters_exponentiated():
    text = "L 0 0 1\nL 1 0 -1\nD 2 0 2 0 1 " + f"{math.log(0.25):.9f}" + " 1 0 " + f"{math.log(0.75):.9f}" + "\n"
    dag = parse_psdd(text)
    vals = evaluate_reference(dag, {0: 1.0, 1: 1.0})
    root = max(dag.outputs)
    assert abs(vals[root] - 1.0) < 1e-9  # 0.25*1*1 + 0.75*1*1


def test_psdd_bad_lines():
    with pytest.raises(UnsupportedLineKind):
        parse_psdd("X 0 0 1\n")
    with pytest.raises(ParseError) as e:
        parse_psdd("L 0 0\n")
    assert e.value.line == 1
    with pytest.raises(ParseError):
        parse_psdd("")


def test_psdd_synthetic_circuit_valid():
    dag = parse_psdd(synth_psdd_text(12, 3, 20, 5))
    rep = validate(dag)
    assert rep.valid
    free = {n: 1.0 for n in dag.input_ids() if n not in dag.values}
    vals = evaluate_reference(dag, free)
    assert vals[max(dag.outputs)] > 0.0


# --- JSON DAG -----------------------------------------------------------------

def test_json_minimal_document():
    dag = parse_json_dag('{"nodes":[{"id":0,"op":"input"}],"outputs":[0]}')
    assert len(dag.nodes) == 1 and dag.outputs == {0}


def test_json_unknown_op_named():
    with pytest.raises(SchemaError) as e:
        parse_json_dag('{"nodes":[{"id":0,"op":"minus"}],"outputs":[0]}')
    assert "minus" in str(e.value)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=120), st.integers(min_value=0, max_value=999))
def test_json_roundtrip_identity(n, seed):
    dag = random_dag(n, arity_max=3, parallelism=7.0, seed=seed)
    back = parse_json_dag(write_json_dag(dag))
    assert back.nodes == dag.nodes
    assert back.outputs == dag.outputs
    assert back.values == dag.values
    assert write_json_dag(back) == write_json_dag(dag)


# --- random_dag ---------------------------------------------------------------

def test_random_dag_deterministic_per_seed():
    a = random_dag(200, arity_max=3, parallelism=12.0, seed=5)
    b = random_dag(200, arity_max=3, parallelism=12.0, seed=5)
    assert a.nodes == b.nodes and a.outputs == b.outputs
    c = random_dag(200, arity_max=3, parallelism=12.0, seed=6)
    assert c.nodes != a.nodes


def test_random_dag_single_node():
    dag = random_dag(1)
    assert len(dag.nodes) == 1
    assert dag.nodes[0].op is Op.INPUT


def test_random_dag_parallelism_steering():
    dag = random_dag(10000, arity_max=3, parallelism=400.0, seed=0)
    stats = validate(dag).stats
    assert stats.node_count == 10000
    assert 200 <= stats.parallelism_ratio <= 800
