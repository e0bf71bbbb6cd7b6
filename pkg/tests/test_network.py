import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2fm.network import (BN_MOMENTUM, MM_WEIGHTS, AdamConfig, Batch, DivergenceError,
                          EncoderSpec, NetworkError, NetworkState, adam_step, backprop_grads,
                          decode_linear, encode_forward, forward, init_network, loss_and_grads,
                          masked_mse, mm_aggregate, update_running_stats, xavier_init)

from oracles import central_differences


def random_case(seed, mode="train"):
    """Small random network, mixed-frequency batch and partial mask."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    q = int(rng.integers(0, 2))
    width = n * (q + 1)
    h1 = int(rng.integers(2, 9))
    h2 = int(rng.integers(2, 9))
    r = int(rng.integers(1, min(h2, width - 1) + 1))
    spec = EncoderSpec(width, (h1, h2, r), (0, 1))
    net = init_network(spec, n, rng)
    p = net.params
    for k in (0, 1):
        p[f"gamma{k}"] = 1 + 0.3 * rng.standard_normal(p[f"gamma{k}"].shape)
        p[f"beta{k}"] = 0.3 * rng.standard_normal(p[f"beta{k}"].shape)
        net.running[f"mean{k}"] = 0.2 * rng.standard_normal(net.running[f"mean{k}"].shape)
        net.running[f"var{k}"] = 0.5 + rng.random(net.running[f"var{k}"].shape)
    p["b2"] = 0.3 * rng.standard_normal(r)
    p["bias"] = 0.3 * rng.standard_normal(n)
    quarterly = np.zeros(n, bool)
    quarterly[-1] = True
    B = int(rng.integers(4, 13))
    n_rows = B + 4
    windows = np.arange(B)[:, None] + np.arange(5)[None, :]
    windows[0, :2] = -1  # incomplete history for the first target row
    targets = rng.standard_normal((B, n))
    mask = rng.random((B, n)) > 0.25
    mask[0, 0] = True
    mask[0, quarterly] = False
    batch = Batch(rng.standard_normal((n_rows, width)), windows, targets, mask)
    return net, batch, quarterly, mode


def loss_of(net, batch, quarterly, mode):
    fitted, _ = forward(net, batch, quarterly, mode)
    return masked_mse(batch.targets, fitted, batch.mask)


def max_relative_error(net, batch, quarterly, mode):
    _, grads, _ = loss_and_grads(net, batch, quarterly, mode)
    worst = 0.0
    for name, g in grads.items():
        def f(x, name=name):
            trial = net.copy()
            trial.params[name] = x
            return loss_of(trial, batch, quarterly, mode)
        num = central_differences(f, net.params[name], 1e-5)
        scale = max(np.abs(g).max(), np.abs(num).max(), 1e-8)
        worst = max(worst, np.abs(g - num).max() / scale)
    return worst


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_gradients_match_finite_differences(mode):
    errors = [max_relative_error(*random_case(seed, mode)) for seed in range(20)]
    assert max(errors) < 1e-4


def test_zero_residual_gives_zero_gradients():
    net, batch, quarterly, mode = random_case(3)
    fitted, _ = forward(net, batch, quarterly, mode)
    exact = Batch(batch.inputs, batch.windows, np.nan_to_num(fitted), batch.mask)
    _, grads, _ = loss_and_grads(net, exact, quarterly, mode)
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-14)


def test_masked_row_equals_deleted_row():
    rng = np.random.default_rng(0)
    spec = EncoderSpec(6, (5, 4, 2), (0, 1))
    net = init_network(spec, 6, rng)
    x = rng.standard_normal((8, 6))
    y = rng.standard_normal((8, 6))
    mask = np.ones((8, 6), bool)
    mask[3] = False
    no_q = np.zeros(6, bool)
    _, g_masked, _ = loss_and_grads(net, Batch.static(x, y, mask), no_q, "infer")
    keep = np.arange(8) != 3
    _, g_deleted, _ = loss_and_grads(net, Batch.static(x[keep], y[keep]), no_q, "infer")
    for name in g_masked:
        np.testing.assert_allclose(g_masked[name], g_deleted[name], rtol=1e-12, atol=1e-15)


def test_non_finite_gradient_signals_divergence():
    net, batch, quarterly, _ = random_case(1)
    bad = Batch(batch.inputs, batch.windows, batch.targets * np.inf, batch.mask)
    fitted, caches = forward(net, bad, quarterly)
    with pytest.raises(DivergenceError):
        backprop_grads(net, bad, quarterly, caches)


# ---- initialisation ----------------------------------------------------------------

def test_xavier_variance_and_shape():
    W = xavier_init(100, 100, np.random.default_rng(0))
    assert W.shape == (100, 100)
    assert 0.009 <= W.var() <= 0.011
    W = xavier_init(3, 7, np.random.default_rng(0))
    assert W.shape == (7, 3)


def test_xavier_unit_case_has_unit_variance():
    draws = np.concatenate([xavier_init(1, 1, np.random.default_rng(s)).ravel()
                            for s in range(4000)])
    assert abs(draws.var() - 1.0) < 0.1


def test_xavier_determinism():
    a = xavier_init(4, 5, np.random.default_rng(3))
    b = xavier_init(4, 5, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(NetworkError):
        xavier_init(0, 3, np.random.default_rng(0))


def test_init_network_biases_zero():
    net = init_network(EncoderSpec(6, (4, 3, 2)), 6, np.random.default_rng(0))
    assert not net.params["b2"].any() and not net.params["bias"].any()
    assert not net.params["beta0"].any() and (net.params["gamma1"] == 1).all()


def test_encoder_spec_rules():
    with pytest.raises(NetworkError):
        EncoderSpec.d2fm(10, (4, 2))
    with pytest.raises(NetworkError):
        EncoderSpec(3, (4, 3, 3))
    with pytest.raises(NetworkError):
        EncoderSpec(6, (4, 3, 2), (0, 3))
    assert EncoderSpec.d2fm(10, (6, 4, 2)).batchnorm_positions == (0, 1)


# ---- forward -------------------------------------------------------------------------

def test_zero_network_gives_zero_factors():
    net = init_network(EncoderSpec(4, (3, 3, 2)), 4, np.random.default_rng(0))
    for k in range(3):
        net.params[f"W{k}"][:] = 0
    f, _ = encode_forward(net, np.random.default_rng(1).standard_normal((5, 4)), "train")
    np.testing.assert_array_equal(f, 0.0)


def test_constant_batch_normalises_to_shift():
    rng = np.random.default_rng(0)
    net = init_network(EncoderSpec(4, (3, 3, 2)), 4, rng)
    net.params["beta0"] = np.array([0.1, -0.2, 0.3])
    x = np.tile(rng.standard_normal(4), (6, 1))
    _, caches = encode_forward(net, x, "train")
    np.testing.assert_allclose(caches["layers"][0]["out"], np.tanh(np.tile([0.1, -0.2, 0.3], (6, 1))))


def test_single_unit_layer_by_hand():
    spec = EncoderSpec(2, (1,), (), "tanh")
    net = init_network(spec, 2, np.random.default_rng(0))
    net.params["W0"] = np.array([[1.0, 0.0]])
    f, _ = encode_forward(net, np.array([[0.5, 0.0]]), "infer")
    assert f[0, 0] == pytest.approx(0.4621, abs=1e-4)


def test_forward_errors():
    net = init_network(EncoderSpec(4, (3, 3, 2)), 4, np.random.default_rng(0))
    with pytest.raises(NetworkError, match="width"):
        encode_forward(net, np.zeros((3, 5)))
    with pytest.raises(NetworkError, match="at least 2"):
        encode_forward(net, np.zeros((1, 4)), "train")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 1e6), st.sampled_from(["train", "infer"]))
def test_factors_strictly_bounded(seed, scale, mode):
    rng = np.random.default_rng(seed)
    net = init_network(EncoderSpec(6, (5, 4, 3)), 6, rng)
    f, _ = encode_forward(net, scale * rng.standard_normal((8, 6)), mode)
    assert np.all(np.abs(f) < 1)


def test_running_stats_converge_on_constant_batches():
    rng = np.random.default_rng(2)
    net = init_network(EncoderSpec(4, (3, 3, 2)), 4, rng)
    x = rng.standard_normal((10, 4))
    for _ in range(300):
        _, caches = encode_forward(net, x, "train")
        net = update_running_stats(net, caches)
    c = caches["layers"][0]
    np.testing.assert_allclose(net.running["mean0"], c["mu"], atol=1e-10)
    np.testing.assert_allclose(net.running["var0"], c["var"] * 10 / 9, atol=1e-10)
    f_train, _ = encode_forward(net, x, "train")
    f_infer, _ = encode_forward(net, x, "infer")
    assert np.abs(f_train - f_infer).max() < 0.1
    assert 0 < BN_MOMENTUM < 1


def test_running_variance_stays_positive():
    net = init_network(EncoderSpec(4, (3, 3, 2)), 4, np.random.default_rng(0))
    _, caches = encode_forward(net, np.ones((5, 4)), "train")
    net = update_running_stats(net, caches)
    assert all((net.running[f"var{k}"] > 0).all() for k in (0, 1))


# ---- decoder and MM layer --------------------------------------------------------------

def test_decode_linear_examples():
    net = init_network(EncoderSpec(3, (3, 3, 2)), 2, np.random.default_rng(0))
    net.params["loadings"] = np.eye(2)
    f = np.array([[0.2, -0.4]])
    np.testing.assert_array_equal(decode_linear(net, f), f)
    net.params["bias"] = np.array([0.5, -1.0])
    np.testing.assert_array_equal(decode_linear(net, np.zeros((1, 2))), [[0.5, -1.0]])
    net1 = init_network(EncoderSpec(3, (3, 3, 2)), 1, np.random.default_rng(0))
    net1.params["loadings"] = np.array([[1.0, 1.0]])
    net1.params["bias"] = np.array([0.5])
    assert decode_linear(net1, [[0.2, 0.3]])[0, 0] == pytest.approx(1.0)
    with pytest.raises(NetworkError):
        decode_linear(net1, [[0.2, 0.3, 0.1]])


def test_mm_aggregate_examples():
    assert mm_aggregate([2.0] * 5) == pytest.approx(6.0)
    assert mm_aggregate([1.0, 0, 0, 0, 0]) == pytest.approx(1 / 3)
    assert mm_aggregate(np.zeros(5)) == 0.0
    with pytest.raises(NetworkError):
        mm_aggregate([np.nan, 1, 1, 1, 1])
    with pytest.raises(NetworkError):
        mm_aggregate([1, 1, 1, 1])
    assert not MM_WEIGHTS.flags.writeable
    np.testing.assert_array_equal(MM_WEIGHTS * 3, [1, 2, 3, 2, 1])


# ---- loss ------------------------------------------------------------------------------

def test_masked_mse_examples():
    y = np.random.default_rng(0).standard_normal((4, 3))
    assert masked_mse(y, y, np.ones_like(y, bool)) == 0.0
    assert masked_mse(np.array([1.0, 2.0]), np.zeros(2), np.array([True, False])) == 1.0
    f = y + 0.5
    assert masked_mse(y, f, np.ones_like(y, bool)) == pytest.approx(np.mean((y - f) ** 2))
    with pytest.raises(NetworkError):
        masked_mse(y, f, np.zeros_like(y, bool))


def test_masked_entries_ignore_garbage_fits():
    y = np.array([1.0, 2.0])
    assert masked_mse(y, np.array([1.0, np.nan]), np.array([True, False])) == 0.0


# ---- ADAM ------------------------------------------------------------------------------

def tiny_net():
    return init_network(EncoderSpec(2, (1,), (), "linear"), 1, np.random.default_rng(0))


def test_adam_first_step_moves_by_learning_rate():
    net = tiny_net()
    before = net.params["W0"].copy()
    after = adam_step(net, {"W0": np.full_like(before, 0.3)}, AdamConfig())
    np.testing.assert_allclose(after.params["W0"] - before, -0.001, rtol=1e-6)
    assert after.step == 1


def test_adam_zero_gradient_is_a_no_op():
    net = tiny_net()
    after = adam_step(net, {"W0": np.zeros_like(net.params["W0"])})
    np.testing.assert_array_equal(after.params["W0"], net.params["W0"])


def test_adam_matches_reference_recursion():
    net = tiny_net()
    cfg = AdamConfig(0.01, 0.8, 0.95, 1e-8)
    w = net.params["W0"].copy()
    m = v = 0.0
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.standard_normal(w.shape)
        net = adam_step(net, {"W0": g}, cfg)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        w = w - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    np.testing.assert_allclose(net.params["W0"], w, rtol=1e-13)


def test_adam_determinism_and_config_checks():
    net = tiny_net()
    g = {"W0": np.array([[0.1, -0.2]])}
    a, b = adam_step(net, g), adam_step(net, g)
    assert a.params["W0"].tobytes() == b.params["W0"].tobytes()
    with pytest.raises(NetworkError):
        AdamConfig(beta1=1.0)
    with pytest.raises(NetworkError):
        AdamConfig(learning_rate=0.0)


# ---- checkpoints -----------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net, batch, quarterly, _ = random_case(7)
    _, grads, caches = loss_and_grads(net, batch, quarterly)
    net = adam_step(update_running_stats(net, caches), grads)
    path = tmp_path / "net.json"
    net.save(path)
    back = NetworkState.load(path)
    for d1, d2 in ((net.params, back.params), (net.running, back.running),
                   (net.adam_m, back.adam_m), (net.adam_v, back.adam_v)):
        assert d1.keys() == d2.keys()
        for k in d1:
            assert d1[k].tobytes() == d2[k].tobytes()
    assert back.spec == net.spec and back.step == net.step
    back.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()
    assert json.loads(path.read_text())["spec"]["hidden_sizes"] == list(net.spec.hidden_sizes)
