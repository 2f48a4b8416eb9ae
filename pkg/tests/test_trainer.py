"""Training loop: determinism, divergence detection, checkpoint resume."""

import csv
import math
import os

import numpy as np
import pytest

from pdeblur import pde_layer, schedule, toy_net, trainer
from pdeblur.data_synth import DatasetConfig, generate_dataset
from pdeblur.metrics import GradNormRecord


@pytest.fixture(scope="module")
def tiny_data():
    cfg = DatasetConfig(n_train=8, n_val=2, n_test=0, size=16, seed=0)
    return generate_dataset(cfg)


def _net():
    return toy_net.NetConfig(base_channels=4, pde_layers=1, in_channels=3,
                             input_size=(16, 16))


def _cfg(**kw):
    defaults = dict(epochs=2, batch_size=4,
                    schedule=schedule.default_schedule(0.2), seed=0)
    defaults.update(kw)
    return trainer.TrainConfig(**defaults)


def test_loss_functions_value_and_gradient():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(2, 1, 3, 3))
    target = rng.normal(size=pred.shape)
    for fn in (lambda p, t: trainer.charbonnier_loss(p, t, 1e-3),
               trainer.l1_loss):
        val, grad = fn(pred, target)
        eps = 1e-7
        flat = pred.reshape(-1)
        gf = grad.reshape(-1)
        i = 5
        orig = flat[i]
        flat[i] = orig + eps
        vp = fn(pred, target)[0]
        flat[i] = orig - eps
        vm = fn(pred, target)[0]
        flat[i] = orig
        assert gf[i] == pytest.approx((vp - vm) / (2 * eps), rel=1e-4)


def test_charbonnier_approaches_l1_far_from_zero():
    pred = np.full((1, 1, 2, 2), 5.0)
    target = np.zeros_like(pred)
    c, _ = trainer.charbonnier_loss(pred, target, 1e-3)
    l, _ = trainer.l1_loss(pred, target)
    assert c == pytest.approx(l, rel=1e-6)


def test_zero_epochs_is_noop(tiny_data):
    model = toy_net.build(_net(), seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    params, log = trainer.train(model, tiny_data.train, _cfg(epochs=0))
    assert not log.rows
    for k in before:
        np.testing.assert_array_equal(params[k], before[k])


def test_zero_learning_rate_keeps_params(tiny_data):
    model = toy_net.build(_net(), seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    _, log = trainer.train(model, tiny_data.train, _cfg(learning_rate=0.0))
    assert log.status == "completed"
    assert log.rows
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_detect_divergence_triggers():
    ok = GradNormRecord(0, 0, 999.0)
    assert trainer.detect_divergence(ok, 0.5, 1000.0).ok
    over = GradNormRecord(0, 0, 1001.0)
    st = trainer.detect_divergence(over, 0.5, 1000.0)
    assert not st.ok and "1001" in st.reason
    nan_loss = trainer.detect_divergence(ok, math.nan, 1000.0)
    assert not nan_loss.ok and "non-finite loss" in nan_loss.reason
    bad_grad = GradNormRecord(0, 0, math.inf, finite=False)
    assert not trainer.detect_divergence(bad_grad, 0.5, 1000.0).ok


def test_injected_gradient_amplification_halts_within_one_step(tiny_data, tmp_path):
    model = toy_net.build(_net(), seed=0)
    calls = {"n": 0}

    def amplify(grads):
        calls["n"] += 1
        if calls["n"] == 3:  # poison the third step
            return {k: g * 1e9 for k, g in grads.items()}
        return grads

    before_step3 = None
    cfg = _cfg(epochs=2)
    _, log = trainer.train(model, tiny_data.train, cfg, grad_hook=amplify,
                           checkpoint_dir=tmp_path)
    assert log.status == "diverged"
    assert "grad_norm" in log.divergence_reason
    # 8 samples / batch 4 = 2 steps per epoch; the third step is (1, 0)
    assert (log.divergence_epoch, log.divergence_step) == (1, 0)
    assert log.rows[-1]["status"] == "diverged"
    assert (tmp_path / "diverged.ckpt").exists()
    # the poisoned update was never applied: norms before it are sane
    assert all(r["grad_norm"] < 1e3 for r in log.rows[:-1])


def test_runlog_csv_schema(tiny_data, tmp_path):
    model = toy_net.build(_net(), seed=0)
    _, log = trainer.train(model, tiny_data.train, _cfg())
    path = tmp_path / "log.csv"
    log.write_csv(path)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert rows
    assert tuple(rows[0].keys()) == trainer.RUNLOG_COLUMNS
    for r in rows:
        k = int(r["k"])
        dt = float(r["delta_t"])
        assert abs(k * dt - 1.0) <= 1e-3


def test_phase_transitions_update_k(tiny_data):
    model = toy_net.build(_net(), seed=0)
    _, log = trainer.train(model, tiny_data.train, _cfg(epochs=6))
    by_epoch = {}
    for r in log.rows:
        by_epoch.setdefault(r["epoch"], set()).add(r["k"])
    assert by_epoch[0] == {1} and by_epoch[1] == {1}
    assert by_epoch[2] == {3} and by_epoch[3] == {3}
    assert by_epoch[4] == {5} and by_epoch[5] == {5}


def test_checkpoint_roundtrip_bit_exact(tiny_data, tmp_path):
    model = toy_net.build(_net(), seed=0)
    cfg = _cfg(epochs=2)
    opt = trainer.Optimizer(cfg, model.params)
    trainer.train(model, tiny_data.train, cfg, optimizer=opt)
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(path, model, opt, 2, cfg, "rt")
    loaded, header, opt_arrays = trainer.load_checkpoint(path)
    assert header["epoch_next"] == 2
    assert header["run_id"] == "rt"
    for k, v in model.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
    for k, v in opt.state_arrays().items():
        np.testing.assert_array_equal(opt_arrays[k], v)


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    cfg = _cfg(epochs=5)
    # uninterrupted
    m_full = toy_net.build(_net(), seed=0)
    trainer.train(m_full, tiny_data.train, cfg)
    # interrupted after epoch 2, checkpointed, resumed
    m_part = toy_net.build(_net(), seed=0)
    cfg2 = _cfg(epochs=2)
    opt = trainer.Optimizer(cfg2, m_part.params)
    trainer.train(m_part, tiny_data.train, cfg2, optimizer=opt)
    path = tmp_path / "part.ckpt"
    trainer.save_checkpoint(path, m_part, opt, 2, cfg, "resume")
    m_res, log = trainer.resume(path, tiny_data.train, cfg)
    for k in m_full.params:
        np.testing.assert_array_equal(m_res.params[k], m_full.params[k],
                                      err_msg=k)


def test_corrupt_checkpoint_detected(tmp_path):
    model = toy_net.build(_net(), seed=0)
    path = tmp_path / "c.ckpt"
    trainer.save_checkpoint(path, model, None, 0, None)
    data = path.read_bytes()
    path.write_bytes(data[:-8])  # drop the last array element
    with pytest.raises(ValueError, match="corrupt"):
        trainer.load_checkpoint(path)


def test_evaluate_reports_blurred_baseline(tiny_data):
    model = toy_net.build(_net(), seed=0)
    ev = trainer.evaluate(model, tiny_data.val,
                          pde_layer.Discretization(delta_t=1.0, k=1))
    assert set(ev) >= {"psnr_restored", "psnr_blurred", "ssim_restored",
                       "ssim_mode", "count"}
    assert ev["count"] == 2
    assert ev["psnr_blurred"] > 0


def test_stability_experiment_format(tiny_data, tmp_path):
    base = _cfg(epochs=5)
    report = trainer.stability_experiment(
        tiny_data.train, tiny_data.val, _net(), base, out_dir=tmp_path)
    lines = report.summary_lines()
    assert "strategy" in lines[0] and "max_grad_norm" in lines[0]
    assert lines[1].startswith("direct")
    assert lines[2].startswith("progressive")
    assert (tmp_path / "direct.csv").exists()
    assert (tmp_path / "progressive.csv").exists()
    assert (tmp_path / "summary.txt").exists()
    # direct run holds K=5 from epoch 0; progressive starts at K=1
    with open(tmp_path / "direct.csv") as f:
        first = next(csv.DictReader(f))
        assert first["k"] == "5"
    with open(tmp_path / "progressive.csv") as f:
        first = next(csv.DictReader(f))
        assert first["k"] == "1"


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        trainer.TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        trainer.TrainConfig(loss="mse")
    with pytest.raises(ValueError):
        trainer.TrainConfig(divergence_threshold=0.0)
