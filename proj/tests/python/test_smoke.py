import math

import numpy as np
import pytest

import dpe


def test_kl_and_priors():
    assert dpe.gaussian_kl(0, 1, 0, 1) == 0.0
    assert dpe.gaussian_kl(0, 1, 0, 2) == pytest.approx((1 - math.log(2)) / 2, abs=1e-12)
    assert dpe.conv_prior(3, 16, 3, 3) == pytest.approx((0.0, 2 / 144))
    assert dpe.dense_prior(32, 10) == pytest.approx((0.0, 0.2))
    assert dpe.batchnorm_prior(True) == (1.0, 0.01)
    assert dpe.bias_prior() == (0.0, 0.01)
    with pytest.raises(ValueError):
        dpe.conv_prior(0, 1, 1, 1)


def test_omega_and_gradient():
    values = np.array([[0.1], [-0.1], [0.2], [-0.2]])
    assert dpe.omega(values, 0.0, 0.25) == pytest.approx(6.311120545886064, rel=1e-12)

    rng = np.random.default_rng(0)
    values = rng.normal(size=(4, 5))
    grad = dpe.omega_gradient(values, 0.1, 0.5)
    assert grad.shape == (4, 5)
    h = 1e-6
    for e, i in [(0, 0), (2, 3), (3, 4)]:
        up, down = values.copy(), values.copy()
        up[e, i] += h
        down[e, i] -= h
        numeric = (dpe.omega(up, 0.1, 0.5) - dpe.omega(down, 0.1, 0.5)) / (2 * h)
        assert grad[e, i] == pytest.approx(numeric, rel=1e-5)


def test_entropy_and_ranking():
    assert dpe.prediction_entropy(np.full(10, 0.1)) == pytest.approx(math.log(10))
    assert dpe.prediction_entropy(np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        dpe.prediction_entropy(np.array([0.5, 0.6]))
    assert dpe.acquire_top_k(np.array([0.2, 1.1, 0.7]), 1, [3, 7, 9]) == [7]
    assert dpe.acquire_top_k(np.array([0.5, 0.5, 0.1]), 2) == [0, 1]
    assert dpe.relative_performance(82.88, 95.2) == pytest.approx(87.06, abs=0.1)


def test_generators():
    x, y = dpe.gen_blobs(200, classes=4, dim=3, spread=1.0, seed=1)
    assert x.shape == (200, 3)
    assert np.bincount(y).tolist() == [50, 50, 50, 50]
    x2, _ = dpe.gen_blobs(200, classes=4, dim=3, spread=1.0, seed=1)
    assert np.array_equal(x, x2)
    x, y = dpe.gen_moons(100, noise=0.0)
    assert y.sum() == 50


def test_ensemble_train_predict(tmp_path):
    x, y = dpe.gen_blobs(300, classes=3, dim=2, spread=1.0, seed=5)
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    ens = dpe.Ensemble("dense:16,relu,dense:3", [2], members=4, beta=1 / 300, seed=2)
    assert ens.size == 4
    log = ens.train(x, y, epochs=15, seed=1)
    assert len(log) == 15
    assert log[-1]["sum_ce"] < log[0]["sum_ce"]
    assert math.isfinite(ens.omega())
    p = ens.predict_mean(x)
    assert p.shape == (300, 3)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert (p.argmax(axis=1) == y).mean() > 0.9

    path = str(tmp_path / "m.dpe")
    ens.save(path)
    back = dpe.Ensemble.load(path)
    assert np.array_equal(back.predict_mean(x), p)
    assert back.layers == ens.layers


def test_compare_strategies_small():
    x, y = dpe.gen_blobs(300, classes=3, dim=2, spread=2.0, seed=5)
    rows = dpe.compare_strategies(x, y, strategies=["random", "dpe"], n_seeds=1, members=2,
                                  epochs=3, fractions=[0.08, 0.16])
    assert len(rows) == 6
    assert all(r["std_accuracy"] == 0.0 for r in rows)
    assert {r["strategy"] for r in rows} == {"random", "dpe"}
