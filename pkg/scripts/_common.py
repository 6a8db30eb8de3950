"""Shared driver for the experiment scripts."""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from atrl.config import load_config
from atrl.experiments import recipe_store, recorded_run
from atrl.report import emit_report

ROOT = Path(__file__).resolve().parent.parent


def main(kind: str, default_cfg, summarize) -> None:
    p = argparse.ArgumentParser(description=f"run the {kind} recipe and write its report")
    p.add_argument("--config", type=Path, help=f"JSON config of kind {kind!r}; defaults otherwise")
    p.add_argument("--results", type=Path, default=ROOT / "results", help="directory for stores and reports")
    p.add_argument("--rerun", action="store_true", help="recompute even if a finished store exists")
    a = p.parse_args()
    cfg = load_config(a.config, kind)[0] if a.config else default_cfg
    path = recipe_store(kind, cfg, a.results)
    if a.rerun:
        path.with_name(path.name + ".done").unlink(missing_ok=True)
    recs = recorded_run(kind, cfg, a.results)
    print(f"store: {path}")
    for out in emit_report(recs, kind, a.results / kind):
        print(f"wrote {out}")
    for line in summarize(recs, cfg):
        print(line if isinstance(line, str) else json.dumps(line))
