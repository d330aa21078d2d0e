import numpy as np
import pandas as pd
import pytest

from stcvit.checkpoint import load_checkpoint
from stcvit.cli import run_training
from stcvit.config import SUPPORTED_VARIANTS
from stcvit.data_pipeline import LatLonGrid, generate_synthetic
from stcvit.physics import MetricsReport
from stcvit.run_config import parse_run_config
from stcvit.trainer import PERSISTENCE, evaluate

SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def rotation():
    return generate_synthetic(LatLonGrid.equiangular(8, 16), 200, seed=1, regime="solid_rotation")


def desk_run(tmp_path, sequence, seed, variant="full"):
    cfg = parse_run_config(f"seed = {seed}\nvariant = {variant}\n")
    return run_training(cfg, sequence, tmp_path / f"{variant}-{seed}")


def test_desk_model_beats_persistence(tmp_path, rotation):
    combined = MetricsReport()
    for seed in SEEDS:
        run = desk_run(tmp_path, rotation, seed)
        trained = load_checkpoint(run.checkpoint)
        combined.extend(evaluate(trained.model, run.test, trained.stats, [6.0]))

    medians = combined.to_frame().groupby(["variant", "variable"]).rmse.median().unstack("variant")
    assert len(medians) == 4
    for variable, row in medians.iterrows():
        assert row["full"] < row[PERSISTENCE], variable


def test_variant_validation_loss_ordering(tmp_path, rotation):
    losses = pd.DataFrame(
        [(variant, seed, desk_run(tmp_path, rotation, seed, variant).result.best_val_loss)
         for variant in SUPPORTED_VARIANTS for seed in SEEDS],
        columns=["variant", "seed", "val_loss"],
    )
    median = losses.groupby("variant").val_loss.median()

    def at_most(a, b):
        # within 2% counts as a tie
        return median[a] <= median[b] * 1.02

    assert at_most("full", "continuous_attention_only"), median.to_dict()
    assert at_most("continuous_attention_only", "vanilla_vit"), median.to_dict()
    assert at_most("full", "vanilla_attention_plus_node"), median.to_dict()
