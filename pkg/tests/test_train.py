import csv

import numpy as np
import pytest

from oplanes.model import ModelConfig, OPlanesModel, load_checkpoint
from oplanes.synth import SceneSpec, generate_scene
from oplanes.train import (PreparedSample, TrainConfig, TrainingDiverged, fit,
                           prepare_sample, write_loss_log)


@pytest.fixture(scope="module")
def sphere_scene():
    return generate_scene(SceneSpec(shape="sphere"), seed=11)


@pytest.fixture(scope="module")
def overfit_log(sphere_scene):
    """One 200-iteration single-scene run shared by the trend assertions."""
    model = OPlanesModel(ModelConfig.desk(), seed=0)
    cfg = TrainConfig(iterations=200, seed=0)
    return fit(model, [sphere_scene], cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_planes=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_prepare_sample_frustum(sphere_scene):
    ps = prepare_sample(sphere_scene, ModelConfig.desk())
    z_min = float(sphere_scene.depth[sphere_scene.mask].min())
    assert ps.frustum.z_min == z_min
    assert abs(ps.frustum.z_max - (z_min + sphere_scene.z_range)) < 1e-12
    assert ps.mask_fine.shape == (64, 64)
    assert ps.mask_coarse.shape == (32, 32)


def test_prepare_sample_resolution_mismatch(sphere_scene):
    with pytest.raises(ValueError):
        prepare_sample(sphere_scene, ModelConfig.desk(height=256, width=256))


def test_fit_empty_dataset():
    model = OPlanesModel(ModelConfig.desk(), seed=0)
    with pytest.raises(ValueError):
        fit(model, [], TrainConfig())


def test_overfit_final_loss_under_quarter(overfit_log):
    first = overfit_log[0]["total"]
    final = overfit_log[-1]["total"]
    assert final < 0.25 * first


def test_overfit_loss_trend_monotone(overfit_log):
    # per-iteration totals are noisy (10 fresh random plane depths each step),
    # so the trend check median-filters the 20-iteration window medians
    from scipy.ndimage import median_filter
    totals = np.array([row["total"] for row in overfit_log])
    block_medians = np.median(totals.reshape(-1, 20), axis=1)
    filtered = median_filter(block_medians, size=3, mode="nearest")
    assert np.all(np.diff(filtered) <= 1e-9)


def test_divergence_aborts_with_diagnostics(sphere_scene):
    model = OPlanesModel(ModelConfig.desk(), seed=0)
    model.p.params["spatial.2.bias"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        fit(model, [sphere_scene], TrainConfig(iterations=1))


def test_same_seed_bitwise_identical_checkpoints(tmp_path, sphere_scene):
    ps = prepare_sample(sphere_scene, ModelConfig.desk())
    ckpts = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        model = OPlanesModel(ModelConfig.desk(), seed=0)
        fit(model, [ps], TrainConfig(iterations=5, seed=3), out_dir=str(out))
        ckpts.append((out / "final.opck").read_bytes())
    assert ckpts[0] == ckpts[1]


def test_resume_continues_iteration_numbering(tmp_path, sphere_scene):
    ps = prepare_sample(sphere_scene, ModelConfig.desk())
    model = OPlanesModel(ModelConfig.desk(), seed=0)
    out = tmp_path / "run"
    out.mkdir()
    fit(model, [ps], TrainConfig(iterations=3, seed=0), out_dir=str(out))
    loaded, extra = load_checkpoint(out / "final.opck")
    assert extra["iteration"] == "3"
    log = fit(loaded, [ps], TrainConfig(iterations=3, seed=0), out_dir=str(out),
              start_iteration=int(extra["iteration"]))
    assert [row["iteration"] for row in log] == [3, 4, 5]
    _, extra2 = load_checkpoint(out / "final.opck")
    assert extra2["iteration"] == "6"


def test_loss_log_csv_round_trip(tmp_path, overfit_log):
    path = tmp_path / "loss.csv"
    write_loss_log(overfit_log[:10], path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    assert set(rows[0]) == {"iteration", "epoch", "bce_fine", "dice_fine",
                            "bce_coarse", "dice_coarse", "total"}
    for row, ref in zip(rows, overfit_log):
        assert int(row["iteration"]) == ref["iteration"]
        assert abs(float(row["total"]) - ref["total"]) < 1e-7


def test_coarse_loss_ablation_trains(sphere_scene):
    ps = prepare_sample(sphere_scene, ModelConfig.desk())
    model = OPlanesModel(ModelConfig.desk(), seed=0)
    log = fit(model, [ps], TrainConfig(iterations=2, use_coarse_loss=False))
    assert all(row["bce_coarse"] == 0.0 and row["dice_coarse"] == 0.0 for row in log)
    assert np.isfinite(log[-1]["total"])
