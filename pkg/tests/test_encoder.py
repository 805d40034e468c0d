import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from biofuse.encoder import (AdamState, EncoderConfig, GradCheckSpec, OptimizerConfig,
                             TripletLossConfig, adam_step, batch_triplet_loss, embed,
                             encoder_backward, encoder_forward, gradient_check, init_model,
                             lstm_cell_forward, load_model, sample_masks, save_model, triplet_loss,
                             update_running_stats, zero_model)
from biofuse.errors import ChannelMismatch, ModelFormatError


def sig(a):
    return 1.0 / (1.0 + np.exp(-a))


# --- cell -----------------------------------------------------------------

def test_cell_zero():
    W, U, b = np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8)
    h, c, _ = lstm_cell_forward(W, U, b, np.zeros(3), np.zeros(2), np.zeros(2))
    assert not np.any(h) and not np.any(c)


def test_cell_one_unit_by_hand():
    # gate order i, f, g, o
    W = np.array([[0.5], [-0.3], [0.8], [0.1]])
    U = np.array([[0.2], [0.4], [-0.6], [0.3]])
    b = np.array([0.1, 1.0, 0.0, -0.2])
    h_prev, c_prev = np.array([0.25]), np.array([-0.5])
    h, c, _ = lstm_cell_forward(W, U, b, np.array([1.0]), h_prev, c_prev)
    i = sig(0.5 + 0.2 * 0.25 + 0.1)
    f = sig(-0.3 + 0.4 * 0.25 + 1.0)
    g = np.tanh(0.8 - 0.6 * 0.25)
    o = sig(0.1 + 0.3 * 0.25 - 0.2)
    c_ref = f * -0.5 + i * g
    assert c[0] == pytest.approx(c_ref, abs=1e-12)
    assert h[0] == pytest.approx(o * np.tanh(c_ref), abs=1e-12)


def test_cell_mask_of_ones_is_identity():
    rng = np.random.default_rng(0)
    W, U, b = rng.standard_normal((12, 2)), rng.standard_normal((12, 3)), rng.standard_normal(12)
    args = (rng.standard_normal(2), rng.standard_normal(3), rng.standard_normal(3))
    a = lstm_cell_forward(W, U, b, *args)
    m = lstm_cell_forward(W, U, b, *args, np.ones(3))
    assert np.array_equal(a[0], m[0]) and np.array_equal(a[1], m[1])


def test_cell_dimension_mismatch():
    with pytest.raises(ValueError):
        lstm_cell_forward(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8), np.zeros(4), np.zeros(2), np.zeros(2))


# --- forward --------------------------------------------------------------

def _oracle_forward(model, X):
    """Straight-line re-implementation of the inference recurrence."""
    P, R = model.params, model.running
    cfg = model.config
    out = []
    for x in X:
        seq = x
        for layer in range(cfg.num_layers):
            H = cfg.hidden_units
            h, c = np.zeros(H), np.zeros(H)
            hs = []
            for t in range(seq.shape[0]):
                a = P[f"W{layer}"] @ seq[t] + P[f"U{layer}"] @ h + P[f"b{layer}"]
                i, f, g, o = sig(a[:H]), sig(a[H:2 * H]), np.tanh(a[2 * H:3 * H]), sig(a[3 * H:])
                c = f * c + i * g
                h = o * np.tanh(c)
                hs.append(h)
            seq = np.array(hs)
            if layer < cfg.num_layers - 1:
                seq = (P[f"bn{layer}_gamma"] * (seq - R[f"bn{layer}_mean"])
                       / np.sqrt(R[f"bn{layer}_var"] + cfg.bn_eps) + P[f"bn{layer}_beta"])
        out.append(seq[-1])
    return np.array(out)


def test_forward_matches_oracle():
    cfg = EncoderConfig(2, 3)
    model = init_model(cfg, 5)
    rng = np.random.default_rng(1)
    model.running["bn0_mean"] = rng.standard_normal(3) * 0.1
    model.running["bn0_var"] = rng.uniform(0.5, 2, 3)
    model.params["bn0_gamma"] = rng.uniform(0.5, 1.5, 3)
    X = rng.standard_normal((4, 4, 2))
    emb, _ = encoder_forward(model, X, "infer")
    np.testing.assert_allclose(emb, _oracle_forward(model, X), atol=1e-10)


def test_infer_deterministic_and_zero():
    cfg = EncoderConfig(3, 5)
    X = np.random.default_rng(0).standard_normal((2, 7, 3))
    model = init_model(cfg, 0)
    assert np.array_equal(encoder_forward(model, X)[0], encoder_forward(model, X)[0])
    z = zero_model(cfg)
    assert not np.any(encoder_forward(z, np.zeros((1, 7, 3)))[0])


def test_batch_size_independence():
    model = init_model(EncoderConfig(4, 8), 3)
    X = np.random.default_rng(2).standard_normal((9, 11, 4))
    full = embed(model, list(X))
    for i in (0, 4, 8):
        alone = embed(model, [X[i]])
        np.testing.assert_allclose(alone[0], full[i], rtol=0, atol=1e-12)
    np.testing.assert_allclose(embed(model, list(X), batch_size=2), full, rtol=0, atol=1e-12)


def test_channel_mismatch():
    model = init_model(EncoderConfig(4, 3), 0)
    with pytest.raises(ChannelMismatch):
        encoder_forward(model, np.zeros((1, 5, 3)))


def test_init_contract():
    cfg = EncoderConfig(12, 16)
    m = init_model(cfg, 0)
    H = 16
    assert np.all(m.params["b0"][H:2 * H] == 1.0) and not np.any(m.params["b0"][:H])
    lim = np.sqrt(6 / (12 + 4 * H))
    assert np.abs(m.params["W0"]).max() <= lim
    U = m.params["U0"]  # [4H, H], orthonormal columns
    np.testing.assert_allclose(U.T @ U, np.eye(H), atol=1e-12)
    assert cfg.embedding_dim == H


def test_train_mode_uses_masks():
    cfg = EncoderConfig(3, 4)
    m = init_model(cfg, 0)
    X = np.random.default_rng(0).standard_normal((6, 5, 3))
    rng = np.random.default_rng(9)
    masks = sample_masks(cfg, 6, 5, rng)
    assert masks["rec0"].shape == (6, 4) and masks["drop0"].shape == (5, 6, 4)
    a, _ = encoder_forward(m, X, "train", masks=masks)
    b, _ = encoder_forward(m, X, "train", masks=masks)
    assert np.array_equal(a, b)
    c, _ = encoder_forward(m, X, "train", rng=np.random.default_rng(10))
    assert not np.allclose(a, c)


# --- running statistics ----------------------------------------------------

def test_running_stats_converge():
    cfg = EncoderConfig(2, 3)
    m = init_model(cfg, 0)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((64, 6, 2))
    _, cache = encoder_forward(m, X, "train", masks={})
    target_mu, target_var = cache["between"][0]["mu"], cache["between"][0]["var"]
    for _ in range(1000):
        _, cache = encoder_forward(m, X, "train", masks={})
        update_running_stats(m, cache)
    np.testing.assert_allclose(m.running["bn0_mean"], target_mu, rtol=0.05, atol=1e-3)
    np.testing.assert_allclose(m.running["bn0_var"], target_var, rtol=0.05)
    assert np.all(m.running["bn0_var"] >= 0)


# --- triplet loss -----------------------------------------------------------

def test_triplet_examples():
    a = np.zeros(3)
    n = np.array([1.0, 0, 0])
    assert triplet_loss(a, a, n, TripletLossConfig(1.0))[0] == 0.0
    assert triplet_loss(a, a, a, TripletLossConfig(1.0))[0] == 1.0
    p = np.array([1.0, 0, 0])
    n = np.array([0, np.sqrt(1.5), 0])
    assert triplet_loss(a, p, n, 1.0)[0] == pytest.approx(0.5, abs=1e-15)


def test_triplet_kink_takes_zero_branch():
    a = np.zeros(2)
    loss, grads = triplet_loss(a, a, np.array([1.0, 0.0]), 1.0)
    assert loss == 0 and all(not np.any(g) for g in grads)


emb = arrays(np.float64, 5, elements=st.floats(-10, 10))


@given(emb, emb, emb, st.floats(0.01, 5))
def test_triplet_properties(a, p, n, alpha):
    loss, (gA, gP, gN) = triplet_loss(a, p, n, alpha)
    assert loss >= 0
    if np.sum((a - n) ** 2) >= np.sum((a - p) ** 2) + alpha:
        assert loss == 0
    np.testing.assert_allclose(gA + gP + gN, 0, atol=1e-9)  # translation invariance


def test_triplet_gradient_numerical():
    rng = np.random.default_rng(0)
    a, p, n = rng.standard_normal((3, 4))
    loss, (gA, _, _) = triplet_loss(a, p, n, 3.0)
    assert loss > 0
    eps = 1e-6
    num = np.array([(triplet_loss(a + eps * e, p, n, 3.0)[0] - triplet_loss(a - eps * e, p, n, 3.0)[0]) / (2 * eps)
                    for e in np.eye(4)])
    np.testing.assert_allclose(gA, num, rtol=1e-6)


def test_batch_loss_is_mean():
    rng = np.random.default_rng(1)
    E = rng.standard_normal((9, 4))
    loss, d = batch_triplet_loss(E, 1.0)
    per, _ = triplet_loss(E[:3], E[3:6], E[6:], 1.0)
    assert loss == pytest.approx(per.mean())
    assert d.shape == E.shape


# --- backward ----------------------------------------------------------------

def test_backward_zero_upstream():
    m = init_model(EncoderConfig(3, 4), 0)
    X = np.random.default_rng(0).standard_normal((6, 5, 3))
    _, cache = encoder_forward(m, X, "train", rng=np.random.default_rng(0))
    grads = encoder_backward(m, cache, np.zeros((6, 4)))
    assert set(grads) == set(m.params)
    assert all(not np.any(g) for g in grads.values())


def test_inactive_hinge_gives_zero_gradients():
    m = init_model(EncoderConfig(3, 4), 0)
    X = np.random.default_rng(0).standard_normal((6, 5, 3))
    emb, cache = encoder_forward(m, X, "train", rng=np.random.default_rng(0))
    loss, d = batch_triplet_loss(np.concatenate([emb[:2], emb[:2], emb[:2] + 10.0]), 1.0)
    assert loss == 0 and not np.any(d)


def test_backward_needs_cache():
    m = init_model(EncoderConfig(3, 4), 0)
    with pytest.raises(ValueError):
        encoder_backward(m, None, np.zeros((1, 4)))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("dropout", [True, False])
def test_gradient_check(seed, dropout):
    rep = gradient_check(GradCheckSpec(dropout=dropout), seed=seed)
    assert rep.passed, "\n".join(rep.lines())


def test_gradient_check_catches_corrupt_backward():
    def corrupt(model, cache, d):
        g = encoder_backward(model, cache, d)
        g["U1"] = g["U1"] * 1.5
        return g

    rep = gradient_check(GradCheckSpec(), seed=0, backward=corrupt)
    assert rep.errors["U1"] > 1e-2 and not rep.passed


# --- Adam ----------------------------------------------------------------------

def test_adam_first_step():
    params = {"p": np.array([0.0])}
    state = AdamState()
    adam_step(params, {"p": np.array([1.0])}, state, OptimizerConfig(learning_rate=0.05))
    assert params["p"][0] == pytest.approx(-0.05 / (1 + 1e-8), abs=1e-15)
    assert state.t == 1


def test_adam_zero_gradient_and_state():
    params = {"p": np.array([1.0, -2.0])}
    adam_step(params, {"p": np.zeros(2)}, AdamState())
    assert params["p"].tolist() == [1.0, -2.0]
    state = AdamState()
    p = {"p": np.array([0.0])}
    adam_step(p, {"p": np.array([1.0])}, state)
    first = p["p"].copy()
    adam_step(p, {"p": np.array([1.0])}, state)
    assert state.t == 2 and p["p"][0] != first[0]


def test_adam_reference_sequence():
    rng = np.random.default_rng(0)
    cfg = OptimizerConfig(learning_rate=0.01)
    p = {"w": rng.standard_normal(4)}
    ref = p["w"].copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = AdamState()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step(p, {"w": g}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, atol=1e-14)


def test_optimizer_config_invariant():
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=0.999, beta2=0.9)


# --- model files -----------------------------------------------------------------

def test_model_round_trip(tmp_path):
    m = init_model(EncoderConfig(4, 5), 0, channels=("a", "b", "c", "d"), modality="gyroscope")
    m.running["bn0_mean"] += 0.3
    save_model(m, tmp_path / "m.bfm")
    r = load_model(tmp_path / "m.bfm")
    assert r.config == m.config and r.channels == m.channels and r.modality == "gyroscope"
    for k in m.params:
        assert np.array_equal(m.params[k], r.params[k])
    for k in m.running:
        assert np.array_equal(m.running[k], r.running[k])
    X = np.random.default_rng(0).standard_normal((2, 6, 4))
    assert np.array_equal(encoder_forward(m, X)[0], encoder_forward(r, X)[0])
    save_model(r, tmp_path / "again.bfm")
    assert (tmp_path / "m.bfm").read_bytes() == (tmp_path / "again.bfm").read_bytes()


def test_model_errors(tmp_path):
    m = init_model(EncoderConfig(4, 5), 0)
    p = tmp_path / "m.bfm"
    save_model(m, p)
    blob = p.read_bytes()
    (tmp_path / "trunc.bfm").write_bytes(blob[:-9])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "trunc.bfm")
    (tmp_path / "short.bfm").write_bytes(blob[:30])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "short.bfm")
    (tmp_path / "magic.bfm").write_bytes(b"X" + blob[1:])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "magic.bfm")
    (tmp_path / "ver.bfm").write_bytes(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "ver.bfm")
    r = load_model(p)
    with pytest.raises(ChannelMismatch):
        encoder_forward(r, np.zeros((1, 5, 3)))
