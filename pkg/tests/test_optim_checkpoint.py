import numpy as np
import pytest

from mxml.checkpoint import (
    CheckpointShapeError,
    CheckpointVersionError,
    MalformedCheckpointError,
    dumps_params,
    load_params,
    loads_params,
    save_params,
)
from mxml.optim import Adam, AdamState, adam_step
from mxml.tensor import Tensor, backward


def test_zero_gradient_is_a_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step([p], [np.array([1.0])], AdamState(lr=0.1))
    assert p.data[0] == pytest.approx(-0.1, abs=1e-6)


def test_minimizes_scalar_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        backward(((x - 3.0) * (x - 3.0)).sum())
        opt.step()
    assert abs(x.data[0] - 3.0) < 0.05


def test_nan_gradient_rejected():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(FloatingPointError):
        adam_step([p], [np.array([np.nan])], AdamState())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4) * 1e-300, "s": np.array(np.pi)}
    ckpt = load_params(save_params(params, tmp_path / "c.json", "protonet", {"sizes": [3, 4]}, rng_seed=9))
    assert ckpt.model_kind == "protonet" and ckpt.rng_seed == 9 and ckpt.architecture == {"sizes": [3, 4]}
    for k, v in params.items():
        np.testing.assert_array_equal(ckpt.params[k], v)


def test_checkpoint_is_deterministic_text():
    params = {"w": np.arange(6.0).reshape(2, 3) / 7.0}
    assert dumps_params(params, "wpn") == dumps_params(params, "wpn")


def test_checkpoint_version_error():
    text = dumps_params({"w": np.ones(2)}, "wpn").replace('"format_version": 1', '"format_version": 99')
    with pytest.raises(CheckpointVersionError):
        loads_params(text)


def test_truncated_checkpoint(tmp_path):
    path = save_params({"w": np.ones((5, 5))}, tmp_path / "c.json", "wpn")
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(MalformedCheckpointError):
        load_params(path)


def test_checkpoint_shape_mismatch():
    text = dumps_params({"w": np.ones((2, 3))}, "wpn")
    with pytest.raises(CheckpointShapeError):
        loads_params(text, expected_shapes={"w": (3, 2)})
    with pytest.raises(CheckpointShapeError):
        loads_params(text, expected_shapes={"v": (2, 3)})
