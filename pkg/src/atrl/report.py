"""Figures and tables from the results store.

Everything here reads ExperimentRecord lists only, so a report can be
rebuilt from the JSON-lines store alone. Files are rendered in memory
first and then moved into place, so a failure leaves nothing behind.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from itertools import product
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .training import ExperimentRecord

SUMMARY_COLUMNS = ("experiment", "alpha", "r", "m_h", "seed", "train_mse", "test_mse", "slope", "agreement")
REPORT_KINDS = ("sweep", "table1", "gravity")

# reference single-run values, shown next to ours, never used as tolerances
TABLE1_REFERENCE = {
    ("rnn", "with", "original"): 2.29e-11,
    ("transformer", "with", "original"): 1.13e-5,
    ("rnn", "with", "permuted"): 3.57e-2,
    ("transformer", "with", "permuted"): 9.02e-6,
    ("rnn", "without", "original"): 5.58,
    ("transformer", "without", "original"): 4.19e-4,
    ("rnn", "without", "permuted"): 5.24,
    ("transformer", "without", "permuted"): 4.16e-4,
}


class MissingRecordsError(ValueError):
    pass


def _atomic_write_all(files: dict[Path, str]) -> None:
    staged = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# summary CSV


def summary_rows(records: list[ExperimentRecord], experiment: str) -> list[dict]:
    """One row per (config hash, seed), metrics spread into the fixed columns."""
    rows: dict = {}
    for r in records:
        if r.experiment != experiment or isinstance(r.value, list):
            continue
        key = (r.config_hash, r.seed)
        row = rows.setdefault(key, {c: "" for c in SUMMARY_COLUMNS})
        row["experiment"] = experiment
        row["seed"] = r.seed
        for k in ("alpha", "r", "m_h"):
            if k in r.params:
                row[k] = r.params[k]
        if r.metric in ("train_mse", "test_mse", "slope", "agreement"):
            row[r.metric] = repr(float(r.value))
    return list(rows.values())


def summary_csv(records: list[ExperimentRecord], experiment: str) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in summary_rows(records, experiment):
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# SVG primitives


class _Svg:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, size=12, anchor="start", **attrs) -> None:
        extra = "".join(f' {k.replace("_", "-")}="{v}"' for k, v in attrs.items())
        self.add(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>')

    def render(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif">'
        )
        return "\n".join([head, f'<rect width="{self.width}" height="{self.height}" fill="white"/>', *self.parts, "</svg>"]) + "\n"


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _decades(lo: float, hi: float) -> tuple[float, float]:
    return math.floor(math.log10(lo)), math.ceil(math.log10(hi))


# ---------------------------------------------------------------------------
# width sweep figure


def sweep_curves(records: list[ExperimentRecord], metric: str = "train_mse") -> dict:
    curves: dict = {}
    for r in records:
        if r.experiment == "sweep" and r.metric == metric:
            curves.setdefault((r.params["alpha"], str(r.params["r"])), {}).setdefault(r.params["m_h"], []).append(r.value)
    return curves


def _check_sweep_grid(records: list[ExperimentRecord]) -> None:
    pts = [r for r in records if r.experiment == "sweep" and r.metric == "train_mse"]
    if not pts:
        raise MissingRecordsError("no sweep train_mse records")
    have = {(r.params["alpha"], str(r.params["r"]), r.params["m_h"], r.seed) for r in pts}
    axes = [sorted({h[i] for h in have}, key=str) for i in range(4)]
    missing = [c for c in product(*axes) if c not in have]
    if missing:
        cells = ", ".join(f"(alpha={a}, r={r}, m_h={m}, seed={s})" for a, r, m, s in missing)
        raise MissingRecordsError(f"sweep records missing for {cells}")


def sweep_svg(records: list[ExperimentRecord], metric: str = "train_mse") -> str:
    """Log-log error against m_h, one panel per alpha, one line per rank.

    Each panel also draws the reference m_h^(1 - 2 alpha) anchored at the
    first point of the infinite-rank curve (or the first curve if absent).
    """
    curves = sweep_curves(records, metric)
    alphas = sorted({a for a, _ in curves})
    W, H, pad = 420, 340, 60
    svg = _Svg(W * len(alphas), H)
    all_m = sorted({m for c in curves.values() for m in c})
    all_v = [float(np.median(v)) for c in curves.values() for v in c.values()]
    lo, hi = _decades(min(all_v), max(all_v))
    if hi == lo:
        hi = lo + 1
    mlo, mhi = math.log10(min(all_m)), math.log10(max(all_m))
    if mhi == mlo:
        mhi = mlo + 1

    for pi, alpha in enumerate(alphas):
        ox = pi * W

        def X(m):
            return ox + pad + (math.log10(m) - mlo) / (mhi - mlo) * (W - 1.5 * pad)

        def Y(v):
            return H - pad + -(math.log10(v) - lo) / (hi - lo) * (H - 1.6 * pad)

        svg.add(f'<g class="panel" data-alpha="{alpha}">')
        svg.add(f'<rect x="{ox + pad}" y="{0.6 * pad}" width="{W - 1.5 * pad}" height="{H - 1.6 * pad}" fill="none" stroke="#444"/>')
        for e in range(lo, hi + 1):
            y = Y(10.0**e)
            svg.add(f'<line x1="{ox + pad}" y1="{y:.2f}" x2="{ox + W - 0.5 * pad}" y2="{y:.2f}" stroke="#ddd"/>')
            svg.text(ox + pad - 6, y + 4, f"1e{e}", 10, "end")
        for m in all_m:
            svg.text(X(m), H - pad + 16, m, 10, "middle")
        svg.text(ox + pad + (W - 1.5 * pad) / 2, H - pad + 34, "m_h", 12, "middle")
        svg.text(ox + pad + (W - 1.5 * pad) / 2, 0.6 * pad - 8, f"sigma_k = k^-{alpha:g}", 13, "middle")

        ranks = sorted({r for a, r in curves if a == alpha}, key=lambda r: (r == "inf", int(r) if r != "inf" else 0))
        for ci, r in enumerate(ranks):
            c = curves[(alpha, r)]
            ms = sorted(c)
            pts = " ".join(f"{X(m):.3f},{Y(float(np.median(c[m]))):.3f}" for m in ms)
            color = PALETTE[ci % len(PALETTE)]
            svg.add(f'<polyline class="curve" data-r="{r}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            for m in ms:
                svg.add(f'<circle cx="{X(m):.3f}" cy="{Y(float(np.median(c[m]))):.3f}" r="3" fill="{color}"/>')
            svg.text(ox + W - 0.5 * pad - 4, 0.6 * pad + 16 + 15 * ci, f"r = {r}", 11, "end", fill=color)

        anchor_rank = "inf" if "inf" in ranks else ranks[0]
        c = curves[(alpha, anchor_rank)]
        m0 = min(c)
        v0 = float(np.median(c[m0]))
        p = 1 - 2 * alpha
        ref = [(m, v0 * (m / m0) ** p) for m in (m0, max(all_m))]
        pts = " ".join(f"{X(m):.3f},{Y(v):.3f}" for m, v in ref)
        svg.add(f'<polyline class="reference" data-exponent="{p:g}" points="{pts}" fill="none" stroke="#888" stroke-dasharray="6,4"/>')
        svg.text(ox + W - 0.5 * pad - 4, 0.6 * pad + 16 + 15 * len(ranks), f"m_h^{p:g}", 11, "end", fill="#888")
        svg.add("</g>")
    return svg.render()


# ---------------------------------------------------------------------------
# gravity heatmaps


def _heatmap(svg: _Svg, ox: float, oy: float, size: float, a: np.ndarray, label: str) -> None:
    tau = a.shape[0]
    cell = size / tau
    vmax = float(a.max()) or 1.0
    svg.add(f'<g class="heatmap" data-label="{escape(label)}">')
    for i in range(tau):
        for j in range(tau):
            level = int(round(255 * (1 - a[i, j] / vmax)))
            svg.add(
                f'<rect x="{ox + j * cell:.2f}" y="{oy + i * cell:.2f}" width="{cell:.2f}" height="{cell:.2f}" '
                f'fill="rgb({level},{level},255)" data-value="{a[i, j]:.6g}"/>'
            )
    svg.add(f'<rect x="{ox}" y="{oy}" width="{size}" height="{size}" fill="none" stroke="#444"/>')
    svg.add("</g>")
    svg.text(ox + size / 2, oy - 6, label, 11, "middle")


def gravity_pairs(records: list[ExperimentRecord]) -> list[tuple[np.ndarray, np.ndarray]]:
    truth = {r.params["sample"]: np.array(r.value) for r in records if r.experiment == "gravity" and r.metric == "graph_truth"}
    learned = {r.params["sample"]: np.array(r.value) for r in records if r.experiment == "gravity" and r.metric == "graph_learned"}
    missing = sorted(set(truth) ^ set(learned))
    if missing:
        raise MissingRecordsError(f"gravity graph pairs incomplete for samples {missing}")
    if not truth:
        raise MissingRecordsError("no gravity graph records")
    return [(truth[i], learned[i]) for i in sorted(truth)]


def gravity_svg(records: list[ExperimentRecord]) -> str:
    """Truth graphs on the top row, learned attention graphs below."""
    pairs = gravity_pairs(records)
    size, gap = 140, 40
    svg = _Svg(len(pairs) * (size + gap) + gap, 2 * (size + gap) + gap)
    for i, (t, l) in enumerate(pairs):
        ox = gap + i * (size + gap)
        _heatmap(svg, ox, gap, size, t, f"inverse-square graph {i}")
        _heatmap(svg, ox, 2 * gap + size, size, l, f"learned attention {i}")
    return svg.render()


# ---------------------------------------------------------------------------
# temporal-order table


TABLE1_ORDER = [(o, m) for o in ("with", "without") for m in ("rnn", "transformer")]


def table1_text(records: list[ExperimentRecord], metric: str = "test_mse") -> str:
    cells = {
        (r.params["model"], r.params["order"], r.params["variant"]): r.value
        for r in records
        if r.experiment == "table1" and r.metric == metric
    }
    need = [(m, o, v) for v in ("original", "permuted") for o, m in TABLE1_ORDER]
    missing = [c for c in need if c not in cells]
    if missing:
        raise MissingRecordsError("table1 records missing for " + ", ".join(f"(model={m}, order={o}, variant={v})" for m, o, v in missing))
    head = "| | with order: RNN | with order: transformer | without order: RNN | without order: transformer |"
    lines = [f"MSE ({metric})", "", head, "|---|---|---|---|---|"]
    for v in ("original", "permuted"):
        lines.append(f"| {v} | " + " | ".join(f"{cells[(m, o, v)]:.2e}" for o, m in TABLE1_ORDER) + " |")
    lines += ["", "Reference values:", "", head, "|---|---|---|---|---|"]
    for v in ("original", "permuted"):
        lines.append(f"| {v} | " + " | ".join(f"{TABLE1_REFERENCE[(m, o, v)]:.2e}" for o, m in TABLE1_ORDER) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


def emit_report(records: list[ExperimentRecord], kind: str, out_dir) -> list[Path]:
    """Write the figure/table and summary CSV for ``kind``; returns the paths."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"report kind must be one of {REPORT_KINDS}, got {kind!r}")
    if not records:
        raise MissingRecordsError("no records to report")
    out = Path(out_dir)
    if kind == "sweep":
        _check_sweep_grid(records)
        files = {out / "fig2_sweep.svg": sweep_svg(records), out / "sweep_summary.csv": summary_csv(records, "sweep")}
    elif kind == "gravity":
        files = {out / "fig1_gravity.svg": gravity_svg(records), out / "gravity_summary.csv": summary_csv(records, "gravity")}
    else:
        files = {out / "table1.md": table1_text(records), out / "table1_summary.csv": summary_csv(records, "table1")}
    _atomic_write_all(files)
    return list(files)
