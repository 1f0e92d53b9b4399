import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentbridge.teacher import RotaryTable
from latentbridge.tensorkit import autograd as ag
from latentbridge.tensorkit import checkpoint, kernels
from latentbridge.tensorkit import nn as tnn
from latentbridge.tensorkit import rng as rngmod
from latentbridge.tensorkit.autograd import ShapeError, Tensor, backward
from latentbridge.tensorkit.kernels import _pykernels
from latentbridge.tensorkit.optim import (NumericError, ParamStore, TrainHyper, adamw_step,
                                          clip_grad_norm, cosine_lr, global_norm)

from helpers import fd_check

finite = st.floats(-5, 5, allow_nan=False, width=64)


# -- forward examples -------------------------------------------------------

def test_linear_identity(backend):
    y = tnn.linear(Tensor([3.0, -1.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, [3.0, -1.0])


def test_layernorm_constant_row_is_zero(backend):
    np.testing.assert_array_equal(ag.layernorm(Tensor([5.0, 5.0, 5.0])).data, [0.0, 0.0, 0.0])


def test_zero_query_attention_averages_values(backend, rng):
    v = rng.standard_normal((5, 3))
    out = tnn.attention(Tensor(np.zeros((1, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(v))
    np.testing.assert_allclose(out.data[0], v.mean(0), atol=1e-15)


def test_shape_error_names_node():
    with pytest.raises(ShapeError) as exc:
        tnn.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), node="enc.w")
    assert exc.value.node == "enc.w"


def test_forward_is_deterministic(rng):
    w, x = rng.standard_normal((6, 6)), rng.standard_normal((3, 6))
    a = ag.gelu(tnn.linear(Tensor(x), Tensor(w))).data
    b = ag.gelu(tnn.linear(Tensor(x), Tensor(w))).data
    assert a.tobytes() == b.tobytes()


# -- backward examples ------------------------------------------------------

def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.square(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_cosine_gradient_vanishes_at_equal_vectors():
    u = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    (1.0 - tnn.row_cosine(u, Tensor([0.3, -1.2, 2.0]))).backward()
    np.testing.assert_allclose(u.grad, 0.0, atol=1e-9)


def test_non_scalar_backward_needs_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_three_layer_mlp_matches_finite_differences(backend, rng):
    store = ParamStore({"w1": rng.standard_normal((5, 8)), "b1": rng.standard_normal(8),
                        "w2": rng.standard_normal((8, 8)), "w3": rng.standard_normal((8, 2))})
    x = rng.standard_normal((4, 5))

    def loss(P):
        h = ag.gelu(tnn.linear(Tensor(x), P["w1"], P["b1"]))
        h = ag.tanh(tnn.linear(h, P["w2"]))
        return ag.square(tnn.linear(h, P["w3"])).mean()

    assert max(fd_check(loss, store).values()) < 1e-6


@pytest.mark.parametrize("op", ["attention", "layernorm", "softmax", "cosine", "rope", "modulate"])
def test_kernel_gradients(backend, rng, op):
    store = ParamStore({"a": rng.standard_normal((3, 4, 8)), "b": rng.standard_normal((3, 4, 8)),
                        "c": rng.standard_normal((3, 4, 8))})
    table = RotaryTable.build(4, 8, base=3.0)
    target = rng.standard_normal((3, 4, 8))

    def loss(P):
        if op == "attention":
            y = tnn.attention(P["a"], P["b"], P["c"], mask=np.tril(np.ones((4, 4), bool)))
        elif op == "layernorm":
            y = ag.layernorm(P["a"])
        elif op == "softmax":
            y = ag.softmax(P["a"])
        elif op == "cosine":
            return (1.0 - tnn.row_cosine(P["a"], P["b"])).mean()
        elif op == "rope":
            y = ag.rope(P["a"], table.cos, table.sin)
        else:
            y = tnn.modulate(P["a"], P["b"], P["c"])
        return (ag.square(y - target) * 0.5).mean()

    worst = fd_check(loss, store)
    assert max(worst.values()) < 1e-6, worst


def test_indexing_gradient_accumulates_repeats():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


# -- kernel backends ----------------------------------------------------------

@pytest.mark.skipif("native" not in kernels.available_backends(), reason="native kernels not built")
@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)).map(lambda s: (s[0], 2 * s[1])),
              elements=finite))
def test_native_kernels_match_python(x):
    from latentbridge.tensorkit.kernels import _ckernels as nat
    g = np.linspace(-1, 1, x.size).reshape(x.shape)
    for name in ("softmax_fwd", "gelu_fwd"):
        np.testing.assert_allclose(getattr(nat, name)(x), getattr(_pykernels, name)(x), atol=1e-12)
    xh, rs = nat.layernorm_fwd(x, 1e-8)
    xh2, rs2 = _pykernels.layernorm_fwd(x, 1e-8)
    np.testing.assert_allclose(xh, xh2, atol=1e-9)
    np.testing.assert_allclose(nat.layernorm_bwd(g, xh2, rs2), _pykernels.layernorm_bwd(g, xh2, rs2),
                               rtol=1e-9, atol=1e-9)
    y = _pykernels.softmax_fwd(x)
    np.testing.assert_allclose(nat.softmax_bwd(g, y), _pykernels.softmax_bwd(g, y), atol=1e-12)
    np.testing.assert_allclose(nat.gelu_bwd(g, x), _pykernels.gelu_bwd(g, x), atol=1e-12)
    ang = np.linspace(0, 3, x.shape[-1] * x.shape[0]).reshape(x.shape)
    for name in ("rope_fwd", "rope_inv"):
        np.testing.assert_allclose(getattr(nat, name)(x, np.cos(ang), np.sin(ang)),
                                   getattr(_pykernels, name)(x, np.cos(ang), np.sin(ang)), atol=1e-12)


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


# -- optimizer ---------------------------------------------------------------

def test_adamw_zero_grads_zero_decay_is_identity():
    store = ParamStore({"p": np.array([1.0, -2.0])})
    adamw_step(store, {"p": np.zeros(2)}, TrainHyper(lr0=0.1, weight_decay=0.0), 1)
    np.testing.assert_array_equal(store["p"], [1.0, -2.0])


def test_adamw_step_moves_against_gradient():
    store = ParamStore({"p": np.array([1.0])})
    adamw_step(store, {"p": np.array([1.0])}, TrainHyper(lr0=0.1, weight_decay=0.0), 1)
    assert store["p"][0] < 1.0


def test_adamw_rejects_nan():
    store = ParamStore({"p": np.array([1.0])})
    with pytest.raises(NumericError):
        adamw_step(store, {"p": np.array([np.nan])}, TrainHyper(), 1)


def test_adamw_decreases_quadratic_bowl():
    store = ParamStore({"p": np.array([3.0, -2.0])})
    hyper = TrainHyper(lr0=0.2, weight_decay=0.0)
    losses = []
    for step in range(1, 11):
        losses.append(float((store["p"] ** 2).sum()))
        adamw_step(store, {"p": 2 * store["p"]}, hyper, step)
    assert all(b < a for a, b in zip(losses[1:], losses[2:]))


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 10, 0.3) == 0.3
    assert cosine_lr(10, 10, 0.3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(5, 10, 0.3) == pytest.approx(0.15)
    assert cosine_lr(15, 10, 0.3) == cosine_lr(10, 10, 0.3)


def test_clip_examples():
    g, _ = clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)
    np.testing.assert_array_equal(g["a"], [0.3, 0.4])
    g, norm = clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(g["a"], [0.6, 0.8])
    g, _ = clip_grad_norm({"a": np.array([0.6, 0.8])}, 1.0)
    np.testing.assert_array_equal(g["a"], [0.6, 0.8])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=finite), st.floats(0.01, 10))
def test_clip_never_increases_norm(v, max_norm):
    g, _ = clip_grad_norm({"a": v[:3], "b": v[3:]}, max_norm)
    assert global_norm(g) <= max(global_norm({"a": v}), 0) + 1e-12
    assert global_norm(g) <= max_norm + 1e-9


def test_train_hyper_validation():
    with pytest.raises(ValueError):
        TrainHyper(lr0=0.0)
    with pytest.raises(ValueError):
        TrainHyper(clip_norm=0.0)


def test_param_store_unique_names():
    store = ParamStore({"a": np.zeros(2)})
    with pytest.raises(KeyError):
        store.add("a", np.zeros(2))
    assert store.m["a"].shape == store["a"].shape


# -- rng and checkpoints --------------------------------------------------------

def test_streams_are_keyed_not_ordered():
    a = rngmod.stream(7, "x", 3).standard_normal(4)
    rngmod.stream(7, "y").standard_normal(100)
    b = rngmod.stream(7, "x", 3).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, rngmod.stream(7, "x", 4).standard_normal(4))


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    store = ParamStore({"w": rng.standard_normal((3, 4)).astype(np.float32),
                        "b": np.zeros(4, np.float32)})
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, store, "mod", seed=5, meta={"k": 1})
    back, header = checkpoint.load(path, "mod")
    assert header["seed"] == 5 and header["meta"] == {"k": 1}
    for k in store.names():
        assert back[k].tobytes() == store[k].tobytes()


def test_checkpoint_corruption_is_structured(tmp_path):
    store = ParamStore({"w": np.ones((2, 2), np.float32)})
    blob = checkpoint.encode(store, "mod")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob, "other")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"not json\n")
