"""Error against head width m_h for spectral targets of decay k^-alpha and rank r."""

from dataclasses import asdict

from _common import main

from atrl.experiments import SweepConfig, analyze_sweep


def summarize(recs, cfg):
    for c in analyze_sweep(recs, cfg.slope_window):
        yield {k: v for k, v in asdict(c).items() if k != "m_h"}


if __name__ == "__main__":
    main("sweep", SweepConfig(), summarize)
