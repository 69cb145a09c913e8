import numpy as np
import pytest

from lewisgame.optim import (Adam, Sgd, clip_global_norm, grad_global_norm,
                             make_optimizer)
from lewisgame.params import ParameterSet
from lewisgame.tensor import Tensor


def _params(**named):
    ps = ParameterSet()
    for name, (data, grad) in named.items():
        t = Tensor(data, requires_grad=True)
        if grad is not None:
            t.grad = np.asarray(grad, np.float32)
        ps.add(name, t)
    return ps


def test_sgd_basic_step():
    ps = _params(w=([1.0], [2.0]))
    Sgd(0.1).step(ps)
    assert np.allclose(ps["w"].data, [0.8], atol=1e-7)


def test_sgd_zero_gradient_leaves_params():
    ps = _params(w=([1.5], [0.0]))
    before = ps["w"].data.tobytes()
    Sgd(0.1).step(ps)
    assert ps["w"].data.tobytes() == before


def test_sgd_zero_lr_bitwise_noop():
    ps = _params(w=([1.5, -2.5], [0.3, -0.7]))
    before = ps["w"].data.tobytes()
    Sgd(0.0).step(ps)
    assert ps["w"].data.tobytes() == before


def test_adam_first_step_unit_update():
    # bias correction at t=1 makes the step -lr * g/(|g| + eps)
    ps = _params(w=([0.0], [1.0]))
    Adam(0.1).step(ps)
    assert abs(float(ps["w"].data[0]) + 0.1 / (1 + 1e-8)) < 1e-6


def test_adam_state_lazily_initialized():
    ps = _params(a=([0.0], [1.0]), b=([0.0], None))
    opt = Adam(0.01)
    opt.step(ps)  # b has no grad: no state, no update
    assert float(ps["b"].data[0]) == 0.0
    state = opt.state_arrays()
    assert "m.a" in state and "m.b" not in state


def test_adam_state_roundtrip():
    ps = _params(w=([0.5], [0.2]))
    opt = Adam(0.05)
    opt.step(ps)
    opt.step(ps)
    clone = Adam(0.05)
    clone.load_state_arrays({k: v.copy() for k, v in
                             opt.state_arrays().items()})
    assert clone.t == 2
    ps2 = _params(w=(ps["w"].data.copy(), [0.2]))
    opt.step(ps)
    clone.step(ps2)
    assert ps["w"].data.tobytes() == ps2["w"].data.tobytes()


def test_clip_noop_below_max():
    ps = _params(w=([0.3, 0.4], [0.3, 0.4]))  # norm 0.5
    scale = clip_global_norm(ps, 1.0)
    assert scale == 1.0
    assert np.allclose(ps["w"].grad, [0.3, 0.4])


def test_clip_scales_to_max():
    ps = _params(w=([0.0, 0.0], [3.0, 4.0]))  # norm 5
    scale = clip_global_norm(ps, 1.0)
    assert abs(scale - 0.2) < 1e-6
    assert np.allclose(ps["w"].grad, [0.6, 0.8], atol=1e-6)


def test_clip_postcondition_norm_bounded():
    rng = np.random.default_rng(0)
    for seed in range(20):
        g = rng.normal(0, 3, 17).astype(np.float32)
        ps = _params(w=(np.zeros(17, np.float32), g))
        clip_global_norm(ps, 1.0)
        assert grad_global_norm(ps) <= 1.0 + 1e-6


def test_clip_idempotent():
    rng = np.random.default_rng(1)
    g = rng.normal(0, 5, 33).astype(np.float32)
    ps = _params(w=(np.zeros(33, np.float32), g))
    clip_global_norm(ps, 1.0)
    once = ps["w"].grad.tobytes()
    scale2 = clip_global_norm(ps, 1.0)
    assert scale2 == 1.0
    assert ps["w"].grad.tobytes() == once


def test_clip_empty_grads_scale_one():
    ps = _params(w=([1.0], None))
    assert clip_global_norm(ps, 1.0) == 1.0


def test_make_optimizer_rejects_unknown():
    with pytest.raises(ValueError, match="unknown optimizer"):
        make_optimizer("lion", 0.1)
