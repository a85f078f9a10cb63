import json

import numpy as np
import pytest

import ressfl


def test_synthetic_data_is_deterministic_and_in_range():
    x, y = ressfl.synth_dataset(40, 10, [1, 16, 16], seed=3)
    x2, y2 = ressfl.synth_dataset(40, 10, [1, 16, 16], seed=3)
    assert x.shape == (40, 1, 16, 16)
    assert np.array_equal(x, x2) and y == y2
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert sorted(set(y)) == list(range(10))


def test_metric_identities():
    x, _ = ressfl.synth_dataset(4, 2, [1, 16, 16], seed=1)
    assert ressfl.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    y = np.clip(x + 0.1, 0, 1)
    assert ressfl.psnr(x, y) == pytest.approx(10 * np.log10(1 / ressfl.mse(x, y)), rel=1e-12)
    const = ressfl.ssim(np.full((1, 1, 8, 8), 0.2), np.full((1, 1, 8, 8), 0.8))
    assert const == pytest.approx(0.4707, abs=1e-3)


def test_distance_correlation_affine_is_one():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 1, 4, 4))
    assert ressfl.distance_correlation(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-9)


def test_perturbations():
    a = np.ones((100, 100))
    dropped = ressfl.perturb(a, "dropout", 0.2, seed=1)
    assert abs((dropped == 0).mean() - 0.2) < 0.02
    kept = ressfl.perturb(np.array([[1.0, -2.0, 3.0, -4.0]]), "topk", 50)
    assert kept.tolist() == [[0.0, 0.0, 3.0, -4.0]]
    with pytest.raises(ressfl.ConfigError):
        ressfl.perturb(a, "blur", 0.1)


def test_tier_flops_increase():
    flops = [ressfl.inversion_flops(t, [16, 4, 4], [1, 16, 16], 4) for t in ("L0", "L1", "L2", "L3")]
    assert flops == sorted(flops) and len(set(flops)) == 4


def test_config_errors_name_the_path():
    with pytest.raises(ressfl.ConfigError, match=r"\$\.sfl\.num_clientz"):
        ressfl.resolved_config('{"seed": 1, "sfl": {"num_clientz": 2}}')
    resolved = json.loads(ressfl.resolved_config('{"sfl": {}}', seed=5))
    assert resolved["seed"] == 5
    assert resolved["attack"]["epochs"] == [resolved["sfl"]["epochs"]]


def test_tiny_attack_run(tmp_path):
    cfg = {
        "seed": 2,
        "dataset": {"samples": 120},
        "sfl": {"num_clients": 2, "epochs": 2, "batch_size": 16},
        "attack": {"tiers": ["L0"], "inversion_epochs": 2, "base_width": 2, "eval_samples": 8},
    }
    out = ressfl.run(json.dumps(cfg), mode="attack", out=str(tmp_path))
    assert out["mode"] == "attack"
    (row,) = out["summary"]
    assert row["attacked"] and row["mse_best"] > 0
    header = (tmp_path / "attack.csv").read_text().splitlines()[0]
    assert header == "epoch,tier,mse,ssim,psnr,mse_best,verdict"
