"""Design-space sweep over the (D, B, R) grid, metric aggregation and
CSV/SVG report emission.

Energy is reported only as a user-weighted proxy over instruction-category
counts (see data/default_weights.json and its banner); cycle counts are the
normative latency metric.  Charts are hand-emitted SVG so that reruns are
byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .arch import Topology, derive_config
from .dag import ComputeDag
from .errors import DagError
from .schedule import compile_dag, program_footprint_bytes
from .simulator import throughput_gops

DEFAULT_GRID = {"D": (1, 2, 3), "B": (8, 16, 32, 64), "R": (16, 32, 64, 128)}
CATEGORIES = ("exec", "copy", "load", "store", "nop")


def default_weights() -> dict[str, float]:
    text = resources.files("dagpu").joinpath("data/default_weights.json").read_text()
    doc = json.loads(text)
    return {k: float(v) for k, v in doc.items() if not k.startswith("_")}


def energy_proxy(stats: dict[str, int], weights: dict[str, float]) -> float:
    """Weighted instruction-count proxy; a ranking aid, not joules."""
    if any(w < 0 for w in weights.values()):
        raise ValueError("weights must be nonnegative")
    return float(sum(stats.get(k, 0) * weights.get(k, 0.0) for k in CATEGORIES))


def edp_proxy(stats: dict[str, int], cycles: int, weights: dict[str, float]) -> float:
    return energy_proxy(stats, weights) * cycles


@dataclass
class WorkloadMetrics:
    nodes_raw: int = 0
    nodes_bin: int = 0
    cycles: float = 0.0
    gops_raw: float = 0.0
    gops_bin: float = 0.0
    counts: dict[str, float] = field(default_factory=dict)
    conflicts: float = 0.0
    spill_stores: float = 0.0
    spill_loads: float = 0.0
    program_bits: float = 0.0
    footprint_bytes: float = 0.0
    error: str = ""


@dataclass
class SweepPoint:
    depth: int
    banks: int
    regs: int
    workloads: dict[str, WorkloadMetrics] = field(default_factory=dict)

    def key(self):
        return (self.depth, self.banks, self.regs)

    def mean_cycles_per_op(self, binarized: bool = False) -> float:
        vals = []
        for wm in self.workloads.values():
            if wm.error:
                continue
            nodes = wm.nodes_bin if binarized else wm.nodes_raw
            if nodes:
                vals.append(wm.cycles / nodes)
        return sum(vals) / len(vals) if vals else float("nan")

    def mean_energy_proxy(self, weights) -> float:
        vals = [energy_proxy(wm.counts, weights)
                for wm in self.workloads.values() if not wm.error]
        return sum(vals) / len(vals) if vals else float("nan")

    def mean_edp_proxy(self, weights) -> float:
        vals = [edp_proxy(wm.counts, int(wm.cycles), weights)
                for wm in self.workloads.values() if not wm.error]
        return sum(vals) / len(vals) if vals else float("nan")


def _eval_point(d, b, r, workloads, seeds, topology, data_mem_words, freq_hz):
    point = SweepPoint(d, b, r)
    cfg = derive_config(d, b, r, topology, data_mem_words, freq_hz)
    for name, dag in workloads.items():
        wm = WorkloadMetrics()
        try:
            cycles = []
            for seed in seeds:
                prog = compile_dag(dag, cfg, seed=seed)
                cycles.append(prog.meta.predicted_cycles)
            m = prog.meta
            wm.nodes_raw = m.stats_raw.node_count
            wm.nodes_bin = m.stats_bin.node_count
            wm.cycles = sum(cycles) / len(cycles)
            wm.gops_raw = throughput_gops(wm.nodes_raw, max(1, int(wm.cycles)), cfg.freq_hz)
            wm.gops_bin = throughput_gops(wm.nodes_bin, max(1, int(wm.cycles)), cfg.freq_hz)
            wm.counts = dict(m.counts)
            wm.conflicts = m.conflict_count
            wm.spill_stores = m.spill_stores
            wm.spill_loads = m.spill_loads
            wm.program_bits = prog.bitstream.bit_len
            wm.footprint_bytes = program_footprint_bytes(prog)
        except DagError as e:
            wm.error = f"{type(e).__name__}: {e}"
        point.workloads[name] = wm
    return point


def sweep(workloads: dict[str, ComputeDag], grid: dict | None = None,
          seeds=(0,), parallel: int = 1,
          topology: Topology = Topology.INPUT_XBAR_OUTPUT_PER_LAYER,
          data_mem_words: int = 131072, freq_hz: float = 3.0e8,
          csv_path: str | Path | None = None) -> list[SweepPoint]:
    """Compile every workload at every feasible grid point.

    Points are independent work items; ``parallel`` sizes the worker pool.
    Results are ordered by (D, B, R) regardless of worker count, and
    identical seeds reproduce every number exactly.  Per-point failures are
    recorded in the point and the sweep continues.
    """
    grid = grid or DEFAULT_GRID
    keys = []
    for d in grid["D"]:
        for b in grid["B"]:
            for r in grid["R"]:
                if b < (1 << d):
                    continue  # infeasible geometry
                keys.append((d, b, r))
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_eval_point, d, b, r, workloads, seeds,
                                   topology, data_mem_words, freq_hz)
                       for d, b, r in keys]
            points = [f.result() for f in futures]
    else:
        points = [_eval_point(d, b, r, workloads, seeds, topology,
                              data_mem_words, freq_hz) for d, b, r in keys]
    points.sort(key=SweepPoint.key)
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.write_text(sweep_csv(points))
        agg = csv_path.with_name(csv_path.stem + "_aggregates.csv")
        agg.write_text(aggregates_csv(points))
    return points


def sweep_csv(points: list[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["D", "B", "R", "workload", "nodes_raw", "nodes_bin", "cycles",
                "gops_raw", "gops_bin", *CATEGORIES, "conflicts",
                "spill_stores", "spill_loads", "program_bits",
                "footprint_bytes", "error"])
    for p in points:
        for name in sorted(p.workloads):
            wm = p.workloads[name]
            w.writerow([p.depth, p.banks, p.regs, name, wm.nodes_raw,
                        wm.nodes_bin, _num(wm.cycles), _num(wm.gops_raw),
                        _num(wm.gops_bin),
                        *[_num(wm.counts.get(c, 0)) for c in CATEGORIES],
                        _num(wm.conflicts), _num(wm.spill_stores),
                        _num(wm.spill_loads), _num(wm.program_bits),
                        _num(wm.footprint_bytes), wm.error])
    return buf.getvalue()


def aggregates_csv(points: list[SweepPoint], weights: dict | None = None) -> str:
    """Workload-averaged latency per operation (both node-count
    normalizations) and the energy/EDP proxies, one row per configuration."""
    weights = weights or default_weights()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["D", "B", "R", "cycles_per_raw_node", "cycles_per_bin_node",
                "energy_proxy", "edp_proxy"])
    for p in points:
        w.writerow([p.depth, p.banks, p.regs,
                    _num(p.mean_cycles_per_op(False)),
                    _num(p.mean_cycles_per_op(True)),
                    _num(p.mean_energy_proxy(weights)),
                    _num(p.mean_edp_proxy(weights))])
    return buf.getvalue()


def _num(x) -> str:
    if isinstance(x, float):
        if x != x:
            return "nan"
        if x == int(x) and abs(x) < 1e15:
            return str(int(x))
        return format(x, ".6g")
    return str(x)


def points_to_json(points: list[SweepPoint]) -> str:
    doc = []
    for p in points:
        doc.append({
            "D": p.depth, "B": p.banks, "R": p.regs,
            "workloads": {name: vars(wm).copy() for name, wm in sorted(p.workloads.items())},
        })
    return json.dumps(doc, indent=1, sort_keys=True)


def points_from_json(text: str) -> list[SweepPoint]:
    points = []
    for entry in json.loads(text):
        p = SweepPoint(entry["D"], entry["B"], entry["R"])
        for name, wmdoc in entry["workloads"].items():
            p.workloads[name] = WorkloadMetrics(**wmdoc)
        points.append(p)
    points.sort(key=SweepPoint.key)
    return points


def min_edp_point(points: list[SweepPoint], weights: dict | None = None) -> SweepPoint:
    weights = weights or default_weights()
    ok = [p for p in points if any(not wm.error for wm in p.workloads.values())]
    return min(ok, key=lambda p: (p.mean_edp_proxy(weights), p.key()))


def min_latency_point(points: list[SweepPoint]) -> SweepPoint:
    ok = [p for p in points if any(not wm.error for wm in p.workloads.values())]
    return min(ok, key=lambda p: (p.mean_cycles_per_op(), p.key()))


# --- deterministic SVG emission -------------------------------------------

_PALETTE = {"exec": "#4878cf", "copy": "#ee854a", "load": "#6acc64",
            "store": "#d65f5f", "nop": "#956cb4"}


def _svg_header(width, height, title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:g}" y="18" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{title}</text>',
    ]


def write_stacked_breakdown_svg(path, labels: list[str],
                                shares: dict[str, dict[str, float]], title: str):
    """Stacked percentage bars, one per workload, categories bottom-up."""
    bar_w, gap, h, base, left = 46, 18, 240, 300, 60
    width = left + len(labels) * (bar_w + gap) + 140
    out = _svg_header(width, base + 60, title)
    for frac, lab in ((0.0, "0%"), (0.5, "50%"), (1.0, "100%")):
        y = base - frac * h
        out.append(f'<line x1="{left - 6}" y1="{y:g}" x2="{left}" y2="{y:g}" stroke="#000"/>')
        out.append(f'<text x="{left - 10}" y="{y + 4:g}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{lab}</text>')
    for i, lab in enumerate(labels):
        x = left + i * (bar_w + gap)
        y = base
        for cat in CATEGORIES:
            frac = shares[lab].get(cat, 0.0)
            hh = frac * h
            y -= hh
            out.append(f'<rect x="{x}" y="{y:.2f}" width="{bar_w}" height="{hh:.2f}" '
                       f'fill="{_PALETTE[cat]}"/>')
        out.append(f'<text x="{x + bar_w / 2:g}" y="{base + 14}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{lab}</text>')
    lx = left + len(labels) * (bar_w + gap) + 16
    for j, cat in enumerate(CATEGORIES):
        ly = 40 + j * 18
        out.append(f'<rect x="{lx}" y="{ly}" width="12" height="12" fill="{_PALETTE[cat]}"/>')
        out.append(f'<text x="{lx + 18}" y="{ly + 10}" font-family="sans-serif" '
                   f'font-size="11">{cat}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def write_bar_svg(path, labels: list[str], values: list[float], title: str,
                  unit: str = ""):
    bar_w, gap, h, base, left = 46, 18, 240, 300, 60
    width = left + len(labels) * (bar_w + gap) + 60
    top = max(values) if values else 1.0
    top = top if top > 0 else 1.0
    out = _svg_header(width, base + 60, title)
    for frac in (0.0, 0.5, 1.0):
        y = base - frac * h
        out.append(f'<line x1="{left - 6}" y1="{y:g}" x2="{left}" y2="{y:g}" stroke="#000"/>')
        out.append(f'<text x="{left - 10}" y="{y + 4:g}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{_num(frac * top)}{unit}</text>')
    for i, (lab, val) in enumerate(zip(labels, values)):
        x = left + i * (bar_w + gap)
        hh = h * val / top
        out.append(f'<rect x="{x}" y="{base - hh:.2f}" width="{bar_w}" height="{hh:.2f}" '
                   f'fill="#4878cf"/>')
        out.append(f'<text x="{x + bar_w / 2:g}" y="{base + 14}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{lab}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def report_breakdown(points: list[SweepPoint], out_dir, config=None,
                     weights: dict | None = None):
    """Per-workload instruction-category percentages at one configuration
    (min-EDP-proxy by default); returns (csv_path, svg_path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = _pick(points, config) if config else min_edp_point(points, weights)
    labels = sorted(name for name, wm in p.workloads.items() if not wm.error)
    shares = {}
    rows = []
    for name in labels:
        wm = p.workloads[name]
        total = sum(wm.counts.get(c, 0) for c in CATEGORIES)
        shares[name] = {c: (wm.counts.get(c, 0) / total if total else 0.0)
                        for c in CATEGORIES}
        rows.append([name, *[_num(100.0 * shares[name][c]) for c in CATEGORIES]])
    csv_path = out_dir / "instruction_breakdown.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workload", *[f"{c}_pct" for c in CATEGORIES]])
    w.writerows(rows)
    csv_path.write_text(buf.getvalue())
    svg_path = out_dir / "instruction_breakdown.svg"
    write_stacked_breakdown_svg(svg_path, labels, shares,
                                f"Instruction breakdown at D={p.depth} B={p.banks} R={p.regs}")
    return csv_path, svg_path


def report_throughput(points: list[SweepPoint], freq_hz: float, out_dir,
                      config=None):
    """Per-workload GOPS at one configuration (min mean latency per op by
    default); returns (csv_path, svg_path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = _pick(points, config) if config else min_latency_point(points)
    labels = sorted(name for name, wm in p.workloads.items() if not wm.error)
    rows = []
    values = []
    for name in labels:
        wm = p.workloads[name]
        gops = throughput_gops(wm.nodes_raw, max(1, int(wm.cycles)), freq_hz)
        rows.append([name, wm.nodes_raw, _num(wm.cycles), _num(gops)])
        values.append(gops)
    csv_path = out_dir / "throughput.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workload", "nodes", "cycles", "gops"])
    w.writerows(rows)
    csv_path.write_text(buf.getvalue())
    svg_path = out_dir / "throughput.svg"
    write_bar_svg(svg_path, labels, values,
                  f"Throughput (GOPS) at D={p.depth} B={p.banks} R={p.regs}")
    return csv_path, svg_path


def _pick(points, config):
    for p in points:
        if p.key() == tuple(config):
            return p
    raise KeyError(f"no sweep point {config}")
