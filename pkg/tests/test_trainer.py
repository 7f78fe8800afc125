import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taco.autodiff import Tensor
from taco.exceptions import ConfigError, TrainingError
from taco.model import TokenAutoEncoder, checkpoint_bytes, load_checkpoint
from taco.synthdata import generate_cohort
from taco.trainer import (
    LOSS_LOG_HEADER,
    OptimizerState,
    TrainConfig,
    adamw_step,
    fit_model,
    inter_pairing,
    lr_schedule,
    parse_config_text,
    train,
)


def param(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# --- adamw -----------------------------------------------------------------------

def test_adamw_first_step_example():
    w = param([1.0])
    adamw_step([w], [np.array([1.0])], OptimizerState.zeros_like([w]), 0.1, 0.0)
    assert w.values[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_grad_no_decay_is_noop():
    w = param([[0.3, -2.0]])
    before = w.values.copy()
    state = OptimizerState.zeros_like([w])
    for _ in range(3):
        adamw_step([w], [np.zeros((1, 2))], state, 0.1, 0.0)
    np.testing.assert_array_equal(w.values, before)
    assert state.step == 3


def test_adamw_decoupled_decay():
    w = param([2.0, -4.0])
    adamw_step([w], [np.zeros(2)], OptimizerState.zeros_like([w]), 0.1, 0.5)
    np.testing.assert_allclose(w.values, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_rejects_non_finite():
    w = param([1.0])
    state = OptimizerState.zeros_like([w])
    with pytest.raises(TrainingError):
        adamw_step([w], [np.array([np.nan])], state, 0.1, 0.0)
    assert w.values[0] == 1.0 and state.step == 0


def test_adamw_matches_hand_recurrence():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=4)
    grads = rng.normal(size=(5, 4))
    w = param(w0)
    state = OptimizerState.zeros_like([w])
    m = v = np.zeros(4)
    ref = w0.copy()
    for t, g in enumerate(grads, start=1):
        adamw_step([w], [g], state, 0.01, 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(w.values, ref, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adamw_step_reduces_random_quadratic(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 4))
    h = a @ a.T + 0.5 * np.eye(4)
    c = rng.normal(size=4)
    f = lambda x: 0.5 * (x - c) @ h @ (x - c)
    w = param(rng.normal(size=4) + c)
    before = f(w.values)
    adamw_step([w], [h @ (w.values - c)], OptimizerState.zeros_like([w]), 1e-3, 0.0)
    assert f(w.values) < before


# --- schedule -------------------------------------------------------------------

def test_lr_schedule_examples():
    assert lr_schedule(0, 100, 1e-3, 0.1) == 0.0
    assert lr_schedule(10, 100, 1e-3, 0.1) == pytest.approx(1e-3, abs=1e-18)
    assert abs(lr_schedule(100, 100, 1e-3, 0.1)) < 1e-12
    assert lr_schedule(5, 100, 1e-3, 0.1) == pytest.approx(5e-4)
    assert lr_schedule(55, 100, 1e-3, 0.1) == pytest.approx(5e-4)


def test_lr_schedule_without_warmup_starts_at_base():
    assert lr_schedule(0, 10, 2.0, 0.0) == 2.0


@settings(max_examples=200, deadline=None)
@given(total=st.integers(1, 5000), frac=st.floats(0, 0.99), data=st.data())
def test_lr_schedule_shape(total, frac, data):
    step = data.draw(st.integers(0, total))
    lr = lr_schedule(step, total, 1.0, frac)
    assert 0.0 <= lr <= 1.0
    warmup = int(round(frac * total))
    if step >= warmup and step < total:
        assert lr_schedule(step + 1, total, 1.0, frac) <= lr + 1e-15
    elif step < warmup:
        assert lr == pytest.approx(step / warmup)


# --- config -----------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.iterations, c.batch_instances) == (3e-4, 1e-5, 2000, 2)
    assert (c.omega, c.delta, c.warmup_fraction) == (5, 0.3, 0.1)


def test_config_text_round_trip(tmp_path):
    text = "# comment\nlearning_rate = 0.001  # inline\n\niterations=50\nuse_inter = false\n"
    assert parse_config_text(text) == {"learning_rate": "0.001", "iterations": "50", "use_inter": "false"}
    p = tmp_path / "c.cfg"
    p.write_text(text)
    c = TrainConfig.from_file(p, seed=4)
    assert c.learning_rate == 0.001 and c.iterations == 50 and c.use_inter is False and c.seed == 4
    p.write_text(c.to_text())
    assert TrainConfig.from_file(p) == c


@pytest.mark.parametrize("values", [
    {"learning_rate": "0"}, {"warmup_fraction": "1.0"}, {"omega": "0"}, {"delta": "-0.1"},
    {"bogus": "1"}, {"iterations": "ten"}, {"use_intra": "maybe"}, {"batch_instances": "0"},
])
def test_config_errors(values):
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping(values)


def test_config_line_without_equals():
    with pytest.raises(ConfigError):
        parse_config_text("iterations 10\n")


# --- pairing ----------------------------------------------------------------------

def test_round_robin_pairing():
    pairs = inter_pairing([3, 1, 5], [0, 1, 2], seed=0, step=4)
    assert [(h, g) for h, _, g, _ in pairs] == [(3, 1), (1, 5), (5, 3)]
    assert pairs == inter_pairing([3, 1, 5], [0, 1, 2], seed=0, step=4)
    assert inter_pairing([2], [0, 1], 0, 1) == []


def test_full_pairing_enumerates_everything():
    pairs = inter_pairing([0, 1], [0, 1], 0, 1, full=True)
    assert len(pairs) == 8 and all(h != g for h, _, g, _ in pairs)


# --- training loop ----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_volumes():
    cohort = generate_cohort(n_instances=3, modalities=2, volume_shape=(16, 16, 16), seed=2)
    return {s.instance_id: s.volumes for s in cohort}


def small_config(**kw):
    base = dict(iterations=6, patch_size=4, feature_dim=8, depth=2, omega=3, seed=1,
                checkpoint_every=0, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_returns_initialization(small_volumes, tmp_path):
    cfg = small_config(iterations=0, out=str(tmp_path))
    res = train(cfg, small_volumes)
    init = TokenAutoEncoder.create((16, 16, 16), 4, 8, 2, 2, True, seed=1)
    assert checkpoint_bytes(res.model) == checkpoint_bytes(init)
    assert (tmp_path / "checkpoint.bin").read_bytes() == checkpoint_bytes(init, 1, 0)
    assert (tmp_path / "loss_log.csv").read_text() == LOSS_LOG_HEADER + "\n"


def test_training_is_bit_deterministic(small_volumes, tmp_path):
    a = train(small_config(out=str(tmp_path / "a")), small_volumes)
    b = train(small_config(out=str(tmp_path / "b")), small_volumes)
    for name in ("checkpoint.bin", "loss_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    c = train(small_config(seed=2), small_volumes)
    assert checkpoint_bytes(c.model) != checkpoint_bytes(a.model)


def test_loss_log_contents(small_volumes, tmp_path):
    res = train(small_config(out=str(tmp_path)), small_volumes)
    rows = (tmp_path / "loss_log.csv").read_text().splitlines()
    assert rows[0] == LOSS_LOG_HEADER and len(rows) == 7
    for k, (row, rep) in enumerate(zip(rows[1:], res.log), start=1):
        step, uni, intra, inter, total, lr = row.split(",")
        assert int(step) == k
        assert float(total) == rep.l_total
        assert math.isclose(float(uni) + float(intra) + float(inter), float(total), rel_tol=1e-12)
    assert float(rows[-1].split(",")[-1]) == pytest.approx(0.0, abs=1e-12)


def test_checkpoint_snapshots_and_reload(small_volumes, tmp_path):
    res = train(small_config(iterations=5, checkpoint_every=2, out=str(tmp_path)), small_volumes)
    assert res.checkpoints == [2, 4, 5]
    assert (tmp_path / "checkpoint_000002.bin").exists() and (tmp_path / "checkpoint_000004.bin").exists()
    model, header = load_checkpoint(tmp_path / "checkpoint.bin")
    assert header["step"] == 5
    assert checkpoint_bytes(model, 1, 5) == (tmp_path / "checkpoint.bin").read_bytes()


def test_ablation_switches(small_volumes):
    res = fit_model(small_volumes, small_config(use_intra=False, use_inter=False, iterations=3))
    assert all(r.l_intra == 0.0 and r.l_inter == 0.0 for r in res.log)
    res = fit_model(small_volumes, small_config(use_inter=False, iterations=3))
    assert all(r.l_intra > 0.0 and r.l_inter == 0.0 for r in res.log)


def test_empty_inter_pairing_trains(small_volumes):
    # batch of one instance: no cross-instance pair, inter contributes exactly zero
    res = fit_model(small_volumes, small_config(batch_instances=1, iterations=4))
    assert all(r.l_inter == 0.0 for r in res.log)
    assert all(np.isfinite(r.l_total) for r in res.log)


def test_loss_decreases_on_tiny_run(small_volumes):
    res = fit_model(small_volumes, small_config(iterations=60, learning_rate=3e-3))
    first = np.mean([r.l_uni for r in res.log[:10]])
    last = np.mean([r.l_uni for r in res.log[-10:]])
    assert last < first


def test_fit_errors(small_volumes):
    with pytest.raises(ConfigError):
        fit_model(small_volumes, small_config(batch_instances=4))
    with pytest.raises(ConfigError):
        fit_model({}, small_config())
    with pytest.raises(ConfigError):
        train(small_config())
