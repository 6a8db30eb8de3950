"""Compare the trained attention graph on gravity data with the inverse-square graph."""

from _common import main

from atrl.experiments import GravityConfig

SCALARS = ("agreement", "agreement_untrained", "agreement_raw", "train_mse", "test_mse")


def summarize(recs, cfg):
    for r in recs:
        if r.metric in SCALARS:
            yield {"metric": r.metric, "value": r.value}


if __name__ == "__main__":
    main("gravity", GravityConfig(), summarize)
