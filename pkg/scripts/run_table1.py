"""RNN against transformer on convolution data with and without temporal order."""

from _common import main

from atrl.experiments import TemporalConfig, check_table1, table1_cells


def summarize(recs, cfg):
    for name, ok in check_table1(table1_cells(recs)).items():
        yield f"{'PASS' if ok else 'FAIL'} {name}"


if __name__ == "__main__":
    main("table1", TemporalConfig(), summarize)
