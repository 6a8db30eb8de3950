import csv
import re

import numpy as np
import pytest

from atrl.report import (
    SUMMARY_COLUMNS,
    MissingRecordsError,
    emit_report,
    summary_csv,
    sweep_svg,
    table1_text,
)
from atrl.training import ExperimentRecord

GRID = (1, 2, 4, 8, 16)


def sweep_records(alpha=1.0, ranks=("inf",), seeds=(0, 1, 2), err=lambda m, r, s: m**-1.0):
    recs = []
    for r in ranks:
        for s in seeds:
            for m in GRID:
                p = {"alpha": alpha, "r": r, "m_h": m}
                recs.append(ExperimentRecord("sweep", f"h{r}{m}", s, "train_mse", err(m, r, s), p))
                recs.append(ExperimentRecord("sweep", f"h{r}{m}", s, "test_mse", 2 * err(m, r, s), p))
    return recs


def polyline(svg, cls):
    m = re.search(rf'<polyline class="{cls}"[^>]*points="([^"]+)"', svg)
    return np.array([[float(v) for v in p.split(",")] for p in m.group(1).split()])


def pixel_slope(pts):
    return np.polyfit(pts[:, 0], pts[:, 1], 1)[0]


def test_exact_power_law_parallel_to_reference():
    svg = sweep_svg(sweep_records(alpha=1.0))
    curve, ref = polyline(svg, "curve"), polyline(svg, "reference")
    assert abs(pixel_slope(curve) - pixel_slope(ref)) < 0.01


def test_reference_slope_tracks_alpha():
    svg = sweep_svg(sweep_records(alpha=0.55, err=lambda m, r, s: m**-0.1))
    assert 'data-exponent="-0.1"' in svg
    assert abs(pixel_slope(polyline(svg, "curve")) - pixel_slope(polyline(svg, "reference"))) < 1e-5


def test_empty_records_leave_no_files(tmp_path):
    out = tmp_path / "out"
    for kind in ("sweep", "table1", "gravity"):
        with pytest.raises(MissingRecordsError):
            emit_report([], kind, out)
    assert not out.exists()


def test_missing_sweep_cells_listed(tmp_path):
    recs = [r for r in sweep_records(ranks=("2", "inf")) if not (r.seed == 1 and r.params["m_h"] == 4 and r.params["r"] == "2")]
    with pytest.raises(MissingRecordsError, match=r"r=2, m_h=4, seed=1"):
        emit_report(recs, "sweep", tmp_path)
    assert list(tmp_path.iterdir()) == []


def table1_records(drop=None):
    recs = []
    for model in ("rnn", "transformer"):
        for order in ("with", "without"):
            for variant in ("original", "permuted"):
                if (model, order, variant) == drop:
                    continue
                v = {"rnn": 1.5e-11, "transformer": 2.25e-5}[model] * (1 + (variant == "permuted"))
                recs.append(ExperimentRecord("table1", "h", 0, "test_mse", v, {"model": model, "order": order, "variant": variant}))
    return recs


def test_table1_eight_cells_scientific():
    text = table1_text(table1_records())
    ours = text.split("Reference values")[0]
    cells = re.findall(r"\d\.\d\de[-+]\d\d", ours)
    assert len(cells) == 8
    assert "1.50e-11" in ours and "4.50e-05" in ours
    assert "2.29e-11" in text  # reference row


def test_table1_missing_cell(tmp_path):
    with pytest.raises(MissingRecordsError, match="model=rnn, order=without, variant=permuted"):
        emit_report(table1_records(drop=("rnn", "without", "permuted")), "table1", tmp_path)


def gravity_records(n=2, tau=3):
    rng = np.random.default_rng(0)
    recs = [ExperimentRecord("gravity", "g", 0, "agreement", 0.9), ExperimentRecord("gravity", "g", 0, "train_mse", 1.0)]
    for i in range(n):
        for metric in ("graph_truth", "graph_learned"):
            a = rng.random((tau, tau))
            recs.append(ExperimentRecord("gravity", "g", 0, metric, (a / a.sum(1, keepdims=True)).tolist(), {"sample": i}))
    return recs


def test_gravity_heatmaps(tmp_path):
    paths = emit_report(gravity_records(n=2, tau=3), "gravity", tmp_path)
    svg = paths[0].read_text()
    assert svg.count('class="heatmap"') == 4
    assert svg.count("<rect x=") >= 4 * 9
    with pytest.raises(MissingRecordsError):
        emit_report(gravity_records()[:-1], "gravity", tmp_path / "x")


def test_summary_csv_columns_and_rows():
    text = summary_csv(sweep_records(), "sweep")
    rows = list(csv.DictReader(text.splitlines()))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert len(rows) == 3 * len(GRID)
    assert float(rows[0]["test_mse"]) == 2 * float(rows[0]["train_mse"])


def test_report_is_deterministic(tmp_path):
    recs = sweep_records(ranks=("2", "6", "inf"))
    a = emit_report(recs, "sweep", tmp_path / "a")
    b = emit_report(list(reversed(recs)), "sweep", tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.name == pb.name
    assert a[0].read_bytes() == b[0].read_bytes()


def test_unknown_kind(tmp_path):
    with pytest.raises(ValueError):
        emit_report(sweep_records(), "fig9", tmp_path)
