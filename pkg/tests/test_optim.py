"""AdamW update math, the warmup/linear-decay schedule, and gradient clipping."""

import numpy as np
import pytest

from elastic_moe.errors import ConfigurationError
from elastic_moe.optim import (
    OptimizerConfig,
    Parameter,
    adamw_step,
    clip_global_norm,
    lr_at,
)
from elastic_moe.tensor import Tensor


def make_param(values):
    return Parameter("p", Tensor(np.asarray(values, dtype=np.float64)))


def test_zero_grad_zero_decay_leaves_parameter_unchanged():
    p = make_param([1.5, -2.0])
    p.value.zero_grad()
    cfg = OptimizerConfig(lr_peak=0.1, warmup_steps=0, total_steps=10, weight_decay=0.0)
    adamw_step([p], cfg, step=1)
    np.testing.assert_allclose(p.value.data, [1.5, -2.0])


def test_single_scalar_step_matches_hand_formula():
    cfg = OptimizerConfig(lr_peak=0.1, warmup_steps=0, total_steps=10,
                          beta1=0.9, beta2=0.95, eps=1e-9, weight_decay=0.0)
    p = make_param([1.0])
    p.value.grad = np.array([0.5])
    adamw_step([p], cfg, step=1)
    lr = lr_at(cfg, 1)  # 0.1 * 9/10
    m = 0.1 * 0.5
    v = 0.05 * 0.25
    m_hat = m / (1 - 0.9)
    v_hat = v / (1 - 0.95)
    expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + 1e-9)
    assert p.value.data[0] == pytest.approx(expected, rel=1e-12)


def test_decoupled_weight_decay_applies_even_with_zero_grad():
    cfg = OptimizerConfig(lr_peak=0.1, warmup_steps=0, total_steps=10, weight_decay=0.1)
    p = make_param([2.0])
    p.value.zero_grad()
    adamw_step([p], cfg, step=1)
    lr = lr_at(cfg, 1)
    assert p.value.data[0] == pytest.approx(2.0 * (1 - lr * 0.1), rel=1e-12)


def test_lr_schedule_endpoints():
    cfg = OptimizerConfig(lr_peak=3e-4, warmup_steps=100, total_steps=1000)
    assert lr_at(cfg, 100) == pytest.approx(3e-4)
    assert lr_at(cfg, 1000) == pytest.approx(0.0)
    assert lr_at(cfg, 50) == pytest.approx(1.5e-4)
    assert lr_at(cfg, 550) == pytest.approx(1.5e-4)


def test_step_count_updates():
    p = make_param([1.0])
    p.value.zero_grad()
    cfg = OptimizerConfig(lr_peak=0.1, warmup_steps=0, total_steps=4)
    adamw_step([p], cfg, step=1)
    adamw_step([p], cfg, step=2)
    assert p.step_count == 2


def test_moment_buffers_match_value_shape():
    p = make_param(np.zeros((3, 4)))
    assert p.adam_m.shape == (3, 4) and p.adam_v.shape == (3, 4)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(beta1=0.99, beta2=0.9).validate()
    with pytest.raises(ConfigurationError):
        OptimizerConfig(eps=0.0).validate()
    with pytest.raises(ConfigurationError):
        OptimizerConfig(warmup_steps=11, total_steps=10).validate()
    OptimizerConfig().validate()


def test_clip_global_norm_scales_all_grads():
    a = make_param([3.0])
    b = make_param([4.0])
    a.value.grad = np.array([3.0])
    b.value.grad = np.array([4.0])
    norm = clip_global_norm([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(a.value.grad[0] ** 2 + b.value.grad[0] ** 2)
    assert total == pytest.approx(1.0)


def test_clip_noop_under_threshold():
    a = make_param([1.0])
    a.value.grad = np.array([0.25])
    clip_global_norm([a], 1.0)
    assert a.value.grad[0] == pytest.approx(0.25)


def test_adamw_deterministic_across_runs():
    def run():
        cfg = OptimizerConfig(lr_peak=0.05, warmup_steps=2, total_steps=20)
        p = Parameter("w", Tensor(np.linspace(-1, 1, 8, dtype=np.float32)))
        rng = np.random.default_rng(7)
        for step in range(1, 11):
            p.value.grad = rng.normal(size=8).astype(np.float32)
            adamw_step([p], cfg, step)
        return p.value.data.tobytes()

    assert run() == run()
