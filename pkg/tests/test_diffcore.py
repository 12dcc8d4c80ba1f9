import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rldp.diffcore import (AdamState, DimensionError, NumericError, ParamStore, Tensor, adam_step, backward,
                           forward_mlp, gradient_check, hard_copy_targets, init_mlp, load_checkpoint, mlp_spec,
                           save_checkpoint, sphere_project)


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# -- forward_mlp ------------------------------------------------------------

def test_single_affine_layer():
    spec = mlp_spec(1, (), 1)
    params = ParamStore()
    params.add("f.0.weight", np.array([[2.0]]))
    params.add("f.0.bias", np.array([1.0]))
    assert forward_mlp(spec, params, np.array([[3.0]]), "f").data.tolist() == [[7.0]]


def test_zero_weights_give_zero_output():
    spec = mlp_spec(4, (5, 6), 3)
    params = init_mlp(spec, np.random.default_rng(0), "f")
    for _, t in params.items():
        t.data[...] = 0.0
    out = forward_mlp(spec, params, np.random.default_rng(1).normal(size=(7, 4)), "f")
    assert np.all(out.data == 0.0)


def test_two_layer_matches_loop_oracle():
    spec = mlp_spec(2, (3,), 1)
    params = init_mlp(spec, np.random.default_rng(3), "f")
    x = np.random.default_rng(4).normal(size=(5, 2))
    h = np.maximum(naive_matmul(x, params["f.0.weight"].data) + params["f.0.bias"].data, 0.0)
    expected = naive_matmul(h, params["f.1.weight"].data) + params["f.1.bias"].data
    np.testing.assert_allclose(forward_mlp(spec, params, x, "f").data, expected, rtol=0, atol=1e-12)


def test_width_mismatch_names_layer():
    spec = mlp_spec(3, (4,), 2)
    params = init_mlp(spec, np.random.default_rng(0), "enc")
    with pytest.raises(DimensionError, match="enc: layer 0"):
        forward_mlp(spec, params, np.zeros((2, 5)), "enc")
    params["enc.1.weight"].data = np.zeros((5, 2))
    with pytest.raises(DimensionError, match="enc: layer 1"):
        forward_mlp(spec, params, np.zeros((2, 3)), "enc")


def test_spec_rejects_bad_widths():
    with pytest.raises(ValueError):
        mlp_spec(3, (0,), 2)


def test_forward_deterministic_given_seed():
    spec = mlp_spec(3, (8,), 2, output_transform="sphere")
    x = np.random.default_rng(9).normal(size=(4, 3))
    a = forward_mlp(spec, init_mlp(spec, np.random.default_rng(5), "f"), x, "f").data
    b = forward_mlp(spec, init_mlp(spec, np.random.default_rng(5), "f"), x, "f").data
    assert a.tobytes() == b.tobytes()


# -- backward ---------------------------------------------------------------

def test_linear_derivative():
    params = ParamStore()
    w = params.add("w", np.array([2.0]))
    loss = (w * np.array([3.0])).sum()
    assert backward(loss, params)["w"].data.tolist() == [3.0]


def test_relu_subgradient():
    params = ParamStore()
    w = params.add("w", np.array([-1.0, 2.0]))
    assert backward(w.relu().sum(), params)["w"].data.tolist() == [0.0, 1.0]


def test_unreachable_params_zero_grad():
    params = ParamStore()
    w = params.add("w", np.array([1.0, 2.0]))
    params.add("unused", np.ones((2, 2)))
    grads = backward(w.square().sum(), params)
    assert np.all(grads["unused"].data == 0.0)


def test_non_scalar_loss_rejected():
    params = ParamStore()
    w = params.add("w", np.ones(3))
    with pytest.raises(DimensionError):
        backward(w * 2.0, params)


def test_mlp_mse_matches_finite_differences():
    rng = np.random.default_rng(11)
    spec = mlp_spec(3, (6, 5), 2)
    params = init_mlp(spec, rng, "f")
    x, y = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
    err = gradient_check(lambda: (forward_mlp(spec, params, x, "f") - y).square().mean(), params)
    assert err < 1e-4


@pytest.mark.parametrize("transform", ["tanh", "sphere"])
def test_output_transforms_gradcheck(transform):
    rng = np.random.default_rng(12)
    spec = mlp_spec(4, (6,), 3, output_transform=transform)
    params = init_mlp(spec, rng, "f")
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    assert gradient_check(lambda: (forward_mlp(spec, params, x, "f") - y).square().sum(), params) < 1e-4


def test_elementwise_ops_gradcheck():
    rng = np.random.default_rng(13)
    params = ParamStore()
    a = params.add("a", rng.normal(size=(3, 4)))
    b = params.add("b", rng.uniform(0.5, 2.0, size=(4,)))

    def loss():
        h = (a * b - a / b + (a ** 2.0) * 0.3).tanh()
        return (h.T @ h).mean() + h.sum(axis=0).square().sum()

    assert gradient_check(loss, params) < 1e-4


# -- sphere_project ---------------------------------------------------------

def test_sphere_project_known_value():
    out = sphere_project(Tensor(np.array([[3.0, 4.0]])), 2).data[0]
    np.testing.assert_allclose(out, [3 * math.sqrt(2) / 5, 4 * math.sqrt(2) / 5], atol=1e-12)


def test_sphere_project_zero_row_is_nudged():
    out = sphere_project(Tensor(np.zeros((1, 4)))).data[0]
    np.testing.assert_allclose(out, [2.0, 0.0, 0.0, 0.0], atol=1e-12)


rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


@settings(max_examples=60, deadline=None)
@given(rows)
def test_sphere_norm_and_idempotence(v):
    d = v.shape[1]
    once = sphere_project(Tensor(v)).data
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), math.sqrt(d), atol=1e-10)
    np.testing.assert_allclose(sphere_project(Tensor(once)).data, once, atol=1e-10)


# -- Adam -------------------------------------------------------------------

def test_adam_first_step_closed_form():
    params = ParamStore()
    params.add("w", np.array([0.5]))
    grads = ParamStore()
    grads.add("w", np.array([1.0]))
    adam_step(AdamState(learning_rate=1e-3), params, grads)
    # m_hat = g, v_hat = g^2 after bias correction
    assert params["w"].data[0] - 0.5 == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_grad_still_counts():
    params = ParamStore()
    params.add("w", np.array([0.5, -2.0]))
    grads = ParamStore()
    grads.add("w", np.zeros(2))
    state = AdamState()
    adam_step(state, params, grads)
    assert params["w"].data.tolist() == [0.5, -2.0]
    assert state.step_count == 1


def test_adam_nan_aborts_and_names_param():
    params = ParamStore()
    params.add("ok", np.ones(2))
    params.add("bad", np.ones(2))
    grads = ParamStore()
    grads.add("ok", np.ones(2))
    grads.add("bad", np.array([np.nan, 0.0]))
    state = AdamState()
    with pytest.raises(NumericError, match="bad"):
        adam_step(state, params, grads)
    assert state.step_count == 0
    assert params["ok"].data.tolist() == [1.0, 1.0]


def _adam_trajectory(seed):
    rng = np.random.default_rng(seed)
    spec = mlp_spec(3, (5,), 2)
    params = init_mlp(spec, rng, "f")
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    state = AdamState(learning_rate=1e-2)
    for _ in range(20):
        adam_step(state, params, backward((forward_mlp(spec, params, x, "f") - y).square().mean(), params))
    return b"".join(t.data.tobytes() for _, t in params.items())


def test_adam_bit_identical_runs():
    assert _adam_trajectory(4) == _adam_trajectory(4)


# -- targets and checkpoints ------------------------------------------------

def test_hard_copy_is_detached():
    src = init_mlp(mlp_spec(2, (3,), 1), np.random.default_rng(0), "f")
    tgt = hard_copy_targets(src)
    assert set(tgt.names()) == set(src.names())
    before = tgt["f.0.weight"].data.copy()
    src["f.0.weight"].data += 1.0
    np.testing.assert_array_equal(tgt["f.0.weight"].data, before)
    assert all(not t.requires_grad for _, t in tgt.items())
    assert len(hard_copy_targets(ParamStore())) == 0


def test_targets_get_no_gradient():
    src = init_mlp(mlp_spec(2, (3,), 1), np.random.default_rng(0), "f")
    tgt = hard_copy_targets(src)
    x = np.ones((2, 2))
    spec = mlp_spec(2, (3,), 1)
    loss = (forward_mlp(spec, src, x, "f") - forward_mlp(spec, tgt, x, "f")).square().sum()
    backward(loss, src)
    assert all(t.grad is None or not np.any(t.grad) for _, t in tgt.items())


def test_checkpoint_round_trip_float32(tmp_path):
    params = init_mlp(mlp_spec(3, (4,), 2), np.random.default_rng(0), "f")
    path = save_checkpoint(tmp_path / "m.ckpt", params, {"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.names() == params.names()
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name].data, t.data.astype(np.float32).astype(np.float64))
    manifest = json.loads(path.read_text())
    assert [e["name"] for e in manifest["tensors"]] == params.names()


def test_checkpoint_truncated_blob(tmp_path):
    params = init_mlp(mlp_spec(3, (4,), 2), np.random.default_rng(0), "f")
    path = save_checkpoint(tmp_path / "m.ckpt", params)
    blob = tmp_path / "m.ckpt.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="byte"):
        load_checkpoint(path)
