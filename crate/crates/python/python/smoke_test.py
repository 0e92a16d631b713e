"""Smoke test for the ecst_py extension module.

Build and run:
    maturin develop --release -m crates/python/Cargo.toml
    python crates/python/python/smoke_test.py
"""

import math
import os
import tempfile

import ecst_py


def check_numerics():
    p = ecst_py.softmax([1.0, 2.0, 3.0])
    assert abs(sum(p) - 1.0) < 1e-12
    assert abs(ecst_py.log_sum_exp([0.0, 0.0]) - math.log(2.0)) < 1e-12


def check_model():
    net = ecst_py.Mlp([2, 8, 3], seed=1)
    assert net.layer_dims == [2, 8, 3]
    x = [0.3, -1.2]
    z = net.forward(x)
    p = net.predict_proba(x)
    e = net.energy(x)
    # exp(f[k] + E) recovers the class probabilities
    for zk, pk in zip(z, p):
        assert abs(math.exp(zk + e) - pk) < 1e-10
    assert net.predict(x) == max(range(3), key=lambda k: p[k])
    assert len(net.energy_grad_input(x)) == 2
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.ckpt")
        net.save(path)
        assert ecst_py.Mlp.load(path).to_flat() == net.to_flat()
    try:
        net.forward([1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("wrong input size accepted")


def check_selection():
    lam = ecst_py.thresholds_from_predictions([(0, 0.9), (0, 0.8), (1, 0.7), (1, 0.6)], 2, 0.5)
    assert lam == [0.8, 0.6]
    assert ecst_py.select_class([0.85, 0.15], lam) == 0
    assert ecst_py.select_class([0.8, 0.2], lam) is None


def check_pipeline():
    data = ecst_py.two_moons(200, 30.0, 0.1, seed=0)
    assert len(data["source_x"]) == 200 and len(data["target_y"]) == 200
    zero = ecst_py.Mlp.zeros([2, 4, 2])
    res = ecst_py.evaluate(zero, data["target_x"], data["target_y"])
    assert res["mean_class_accuracy"] == 0.5
    net = ecst_py.Mlp([2, 4, 2])
    labels = ecst_py.solve_pseudo_labels(net, data["target_x"], 0.2)
    assert len(labels) == 200
    config = """
n_rounds = 2
[data]
kind = "two_moons"
n_per_domain = 200
rotation_degrees = 30.0
noise_std = 0.1
[pretrain]
epochs = 5
[selftrain]
epochs_per_round = 2
"""
    summary = ecst_py.run_experiment(config)
    assert len(summary["round_mean_acc"]) == 3
    assert summary["budget_violations"] == 0
    assert ecst_py.gradcheck_max_error(5) < 1e-6


if __name__ == "__main__":
    check_numerics()
    check_model()
    check_selection()
    check_pipeline()
    print("ecst_py smoke test passed")
