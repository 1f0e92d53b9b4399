import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentbridge import kvbridge as kb
from latentbridge.kvbridge import KVBridgeConfig, KVBridgeParams, RopeStateError
from latentbridge.teacher import Backbone, BackboneConfig, KVCacheSnapshot, RotaryTable
from latentbridge.tensorkit.autograd import ShapeError

from helpers import fd_check

TABLE = RotaryTable.build(10, 8)


def _snapshot(rng, n_layers=4, state="pre"):
    return KVCacheSnapshot([rng.standard_normal((10, 8)) for _ in range(n_layers)],
                           [rng.standard_normal((10, 8)) for _ in range(n_layers)], state)


def _cond(rng):
    e = rng.standard_normal((8, 16))
    return e, rng.standard_normal((8, 16)) * 0.1, rng.standard_normal(4), rng.standard_normal(2)


def _perturbed(seed=0, cfg=None):
    params = KVBridgeParams(cfg or KVBridgeConfig(d_b=16, n_blocks=1, cond_width=16))
    g = np.random.default_rng(seed)
    for k in params.store.names():
        if not np.any(params.store[k]):
            params.store[k][...] = g.standard_normal(params.store[k].shape) * 0.3
    return params


# -- rotary -----------------------------------------------------------------------

def test_position_zero_is_identity(rng):
    k = rng.standard_normal((1, 8))
    np.testing.assert_array_equal(kb.rope_apply(k, [0], TABLE), k)
    np.testing.assert_array_equal(kb.rope_invert(k, [0], TABLE), k)


def test_quarter_turn_rotates_pair():
    # one frequency pair; a table whose angle at position 1 is pi/2
    ang = np.array([[0.0, 0.0], [np.pi / 2, np.pi / 2]])
    table = RotaryTable(np.cos(ang), np.sin(ang), 1.0)
    x, y = 0.7, -1.3
    np.testing.assert_allclose(kb.rope_apply(np.array([[x, y]]), [1], table), [[-y, x]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_round_trip_and_norm(seed):
    g = np.random.default_rng(seed)
    k = g.standard_normal((20, 8))
    pos = g.integers(0, 10, 20)
    np.testing.assert_allclose(kb.rope_apply(kb.rope_invert(k, pos, TABLE), pos, TABLE), k,
                               rtol=0, atol=1e-12 * np.abs(k).max())
    np.testing.assert_allclose(kb.rope_invert(kb.rope_apply(k, pos, TABLE), pos, TABLE), k,
                               rtol=0, atol=1e-12 * np.abs(k).max())
    np.testing.assert_allclose(np.linalg.norm(kb.rope_apply(k, pos, TABLE), axis=-1),
                               np.linalg.norm(k, axis=-1), atol=1e-12)


def test_odd_key_width_rejected():
    with pytest.raises(ValueError):
        KVBridgeConfig(d_k=7)


def test_backbone_post_cache_inverts_to_pre(rng):
    from latentbridge import env as envmod
    obs = envmod.reset(envmod.preset("base"), 0)[1]
    post = Backbone(BackboneConfig(rope_enabled=True)).forward(obs).kv
    plain = Backbone(BackboneConfig(rope_enabled=False)).forward(obs).kv
    pre = kb.to_pre(post, TABLE)
    assert pre.rope_state == "pre"
    np.testing.assert_allclose(pre.keys[0], plain.keys[0], atol=1e-12)
    with pytest.raises(RopeStateError):
        kb.to_pre(post, None)


def test_to_post_without_table_is_identity(rng):
    snap = _snapshot(rng)
    assert kb.to_post(snap, None) is snap


# -- forward ----------------------------------------------------------------------

def test_fresh_bridge_gives_zero_deltas(rng):
    params = KVBridgeParams(KVBridgeConfig())
    assert params.is_zero()
    dk, dv = kb.kv_bridge_forward(params, *_cond(rng)[:2], _snapshot(rng), *_cond(rng)[2:])
    assert len(dk) == 4 and all(not np.any(d) for d in dk + dv)


def test_forward_is_deterministic(rng):
    params = _perturbed()
    e, _, q, a = _cond(rng)
    snap = _snapshot(rng)
    one = kb.kv_bridge_forward(params, e, np.zeros_like(e), snap, q, a)
    two = kb.kv_bridge_forward(params, e, np.zeros_like(e), snap, q, a)
    for x, y in zip(one[0] + one[1], two[0] + two[1]):
        assert x.tobytes() == y.tobytes()


def test_forward_rejects_post_and_layer_mismatch(rng):
    params = KVBridgeParams(KVBridgeConfig())
    e, de, q, a = _cond(rng)
    with pytest.raises(RopeStateError):
        kb.kv_bridge_forward(params, e, de, _snapshot(rng, state="post"), q, a)
    with pytest.raises(ShapeError):
        kb.kv_bridge_forward(params, e, de, _snapshot(rng, n_layers=3), q, a)


def test_flatten_round_trip(rng):
    cfg = KVBridgeConfig()
    snap = _snapshot(rng)
    back = kb.unflatten(kb.flatten(snap), cfg)
    for x, y in zip(snap.keys + snap.values, back.keys + back.values):
        np.testing.assert_array_equal(x, y)


# -- apply ------------------------------------------------------------------------

def test_zero_deltas_give_rotated_copy(rng):
    snap = _snapshot(rng)
    zeros = ([np.zeros((10, 8))] * 4, [np.zeros((10, 8))] * 4)
    out = kb.apply_kv_delta(snap, zeros, TABLE)
    assert out.rope_state == "post"
    np.testing.assert_array_equal(out.keys[2], kb.rope_apply(snap.keys[2], np.arange(10), TABLE))
    np.testing.assert_array_equal(out.values[2], snap.values[2])


def test_true_deltas_reconstruct_next_cache(rng):
    prev, nxt = _snapshot(rng), _snapshot(rng)
    deltas = ([b - a for a, b in zip(prev.keys, nxt.keys)],
              [b - a for a, b in zip(prev.values, nxt.values)])
    out = kb.apply_kv_delta(prev, deltas, TABLE)
    want = kb.to_post(nxt, TABLE)
    for x, y in zip(out.keys + out.values, want.keys + want.values):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_apply_refuses_post_and_bad_layers(rng):
    zeros = ([np.zeros((10, 8))] * 4, [np.zeros((10, 8))] * 4)
    with pytest.raises(RopeStateError):
        kb.add_kv_delta(_snapshot(rng, state="post"), zeros)
    with pytest.raises(ShapeError):
        kb.add_kv_delta(_snapshot(rng, n_layers=2), zeros)


# -- loss -------------------------------------------------------------------------

def test_loss_examples(rng):
    x = [rng.standard_normal((10, 16)) for _ in range(4)]
    assert kb.kv_bridge_loss(x, x, 1.0).data == pytest.approx(0.0, abs=1e-15)
    got = kb.kv_bridge_loss([np.array([[1.0, 0.0]])], [np.array([[0.0, 1.0]])], 1.0)
    assert got.data == pytest.approx(2.0, abs=1e-12)


def test_loss_is_mean_over_layers(rng):
    p = [rng.standard_normal((10, 16)) for _ in range(3)]
    t = [rng.standard_normal((10, 16)) for _ in range(3)]
    per = [kb.kv_bridge_loss([a], [b], 0.5).data for a, b in zip(p, t)]
    assert kb.kv_bridge_loss(p, t, 0.5).data == pytest.approx(np.mean(per))
    with pytest.raises(ShapeError):
        kb.kv_bridge_loss(p, t[:2], 0.5)


def test_kv_bridge_gradients(rng):
    params = _perturbed(3)
    cfg = params.cfg
    rows = np.stack([kb.flatten(_snapshot(rng)) for _ in range(2)])
    e = rng.standard_normal((2, 8, 16))
    de = rng.standard_normal((2, 8, 16)) * 0.1
    q, a = rng.standard_normal((2, 4)), rng.standard_normal((2, 2))
    target = [rng.standard_normal((2, 10, 16)) for _ in range(cfg.n_layers)]
    w = cfg.d_k + cfg.d_v

    def loss(P):
        out = kb.kv_bridge_graph(P, cfg, rows, e, de, q, a)
        pred = [o + rows[..., l * w:(l + 1) * w] for l, o in enumerate(out)]
        return kb.kv_bridge_loss(pred, target, 1.0)

    worst = fd_check(loss, params.store, max_entries=4)
    assert max(worst.values()) < 1e-6, {k: v for k, v in worst.items() if v >= 1e-6}
