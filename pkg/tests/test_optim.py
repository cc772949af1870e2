import numpy as np
import pytest

from softpivot import autodiff as ad
from softpivot.autodiff import Tensor
from softpivot.optim import Adam, OptimConfig, clip_grad_norm, inverse_sqrt_lr


def test_schedule_shape():
    assert inverse_sqrt_lr(1, 1e-3, 100) == pytest.approx(1e-5)
    assert inverse_sqrt_lr(100, 1e-3, 100) == pytest.approx(1e-3)
    assert inverse_sqrt_lr(400, 1e-3, 100) == pytest.approx(5e-4)
    assert inverse_sqrt_lr(7, 2e-4, 0) == 2e-4


def test_clip_scales_to_max_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == 5.0
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)


def test_adam_minimises_a_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], OptimConfig(peak_lr=0.1, warmup_steps=1, weight_decay=0.0, clip_norm=0.0))
    for _ in range(500):
        opt.zero_grad()
        ad.tsum(x * x).backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-2


def test_first_adam_step_is_lr_times_sign():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Adam([x], OptimConfig(peak_lr=0.01, warmup_steps=1, weight_decay=0.0, clip_norm=0.0))
    ad.tsum(x * 3.0).backward()
    opt.step()
    np.testing.assert_allclose(x.data, [0.99, -1.01], atol=1e-9)
