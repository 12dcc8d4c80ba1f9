import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rldp.diffcore import Tensor, backward, gradient_check
from rldp.envdata import GridWorld, exhaustive_dataset, generate_dataset, sample_segments, segments_at
from rldp.replearn import (CollapseTrace, EncoderParams, ReprConfig, cosine_similarity_mean, identity_encoder,
                           loss_dynamics, loss_laplacian, loss_ortho, loss_rldp, ortho_penalty, rollout_latent,
                           train_representation)

ENV = GridWorld()


def small_encoder(seed=0, obs_dim=4, sphere_g=True):
    return EncoderParams(obs_dim, 2, 1, 3, phi_hidden=(5,), action_proj=3, g_hidden=(6,), sphere_g=sphere_g,
                         rng=np.random.default_rng(seed))


def segment_batch(seed, B=6, H=2, obs_dim=4):
    rng = np.random.default_rng(seed)

    class Seg:
        pass

    seg = Seg()
    seg.states = rng.normal(size=(B, H + 1, obs_dim))
    seg.actions = rng.integers(0, 2, size=(B, H, 1)).astype(float)
    return seg


def plane_encoder():
    """d=2, phi(s) = sqrt(2) s/|s|, and g always predicts the direction e1."""
    enc = EncoderParams(2, 2, 1, 2, phi_hidden=(), action_proj=2, g_hidden=())
    p = enc.params
    p["phi.0.weight"].data = np.eye(2)
    p["phi.0.bias"].data = np.zeros(2)
    p["g.0.weight"].data = np.zeros((4, 2))
    p["g.0.bias"].data = np.array([1.0, 0.0])
    p["w"].data = np.eye(2)
    enc.refresh_target()
    return enc


# -- encoding ---------------------------------------------------------------

def test_encode_reproducible():
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert small_encoder(3).encode(x).tobytes() == small_encoder(3).encode(x).tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_embeddings_and_latents_on_sphere(seed):
    enc = small_encoder(seed)
    x = np.random.default_rng(seed).normal(size=(7, 4))
    np.testing.assert_allclose(np.linalg.norm(enc.encode(x), axis=1), math.sqrt(3), atol=1e-10)
    hs = rollout_latent(enc, x, np.zeros((7, 3, 1)))
    for h in hs:
        np.testing.assert_allclose(np.linalg.norm(h.data, axis=1), math.sqrt(3), atol=1e-10)


def test_batch_equals_loop():
    enc = small_encoder(2)
    x = np.random.default_rng(2).normal(size=(6, 4))
    rows = np.vstack([enc.encode(x[i:i + 1]) for i in range(6)])
    np.testing.assert_allclose(enc.encode(x), rows, rtol=0, atol=1e-12)


def test_encode_width_mismatch():
    with pytest.raises(ValueError):
        small_encoder().encode(np.zeros((2, 5)))


# -- rollout ----------------------------------------------------------------

def test_h3_rollout_equals_chained_single_steps():
    enc = small_encoder(4)
    rng = np.random.default_rng(4)
    s0 = rng.normal(size=(5, 4))
    acts = rng.integers(0, 2, size=(5, 3, 1)).astype(float)
    full = rollout_latent(enc, s0, acts)
    h = enc.phi(s0)
    for t in range(3):
        h = rollout_latent(enc, None, acts[:, t:t + 1], h0=h)[0]
        np.testing.assert_allclose(full[t].data, h.data, atol=1e-12)


def test_no_sn_leaves_latents_unprojected():
    enc = small_encoder(5, sphere_g=False)
    hs = rollout_latent(enc, np.ones((4, 4)), np.zeros((4, 1, 1)))
    assert not np.allclose(np.linalg.norm(hs[0].data, axis=1), math.sqrt(3))


# -- dynamics loss ----------------------------------------------------------

def test_perfect_prediction_gives_zero_loss():
    enc = identity_encoder(ENV.transition_tensor())
    ds = exhaustive_dataset(ENV)
    segs = segments_at(ds, np.arange(len(ds)), 1)
    assert abs(loss_dynamics(enc, segs).item()) < 1e-10


def test_hand_computed_h1_loss():
    enc = plane_encoder()
    seg = segment_batch(0, B=1, H=1, obs_dim=2)
    seg.states = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    seg.actions = np.zeros((1, 1, 1))
    # h1 = [sqrt2, 0], target phi(s1) = [0, sqrt2]: squared distance 2 + 2
    assert loss_dynamics(enc, seg).item() == pytest.approx(4.0, abs=1e-12)


def test_target_gets_no_gradient():
    enc = small_encoder(6)
    loss = loss_dynamics(enc, segment_batch(6))
    grads = backward(loss, enc.target)
    assert all(np.all(g.data == 0.0) for _, g in grads.items())


# -- orthogonality ----------------------------------------------------------

def test_ortho_orthogonal_pair():
    emb = Tensor(np.array([[math.sqrt(2), 0.0], [0.0, math.sqrt(2)]]))
    assert ortho_penalty(emb).item() == 0.0


def test_ortho_identical_pair_is_d():
    v = np.array([1.0, 2.0, 2.0])
    v *= math.sqrt(3) / np.linalg.norm(v)
    assert ortho_penalty(Tensor(np.stack([v, v]))).item() == pytest.approx(3.0, abs=1e-12)


def test_ortho_matches_pair_loop():
    emb = np.random.default_rng(7).normal(size=(8, 5))
    total = sum(emb[i] @ emb[j] for i in range(8) for j in range(8) if i != j)
    assert ortho_penalty(Tensor(emb)).item() == pytest.approx(total / 56, abs=1e-12)


def test_ortho_needs_two_states():
    with pytest.raises(ValueError):
        loss_ortho(np.zeros((1, 4)), small_encoder())


# -- combined and laplacian -------------------------------------------------

def test_rldp_reductions():
    enc = small_encoder(8)
    seg = segment_batch(8)
    l_d = loss_dynamics(enc, seg).item()
    l_r = loss_ortho(seg.states[:, 0], enc).item()
    assert loss_rldp(enc, seg, 0.0).item() == l_d
    assert loss_rldp(enc, seg, 1.0).item() == pytest.approx(l_d + l_r, abs=1e-12)


def test_laplacian_constant_features():
    enc = small_encoder(9)
    enc.params["phi.1.weight"].data[...] = 0.0
    enc.params["phi.1.bias"].data = np.array([1.0, 0.0, 0.0])
    x = np.random.default_rng(9).normal(size=(4, 4))
    # first term vanishes, second is the inner product d of identical sphere vectors
    assert loss_laplacian(enc, x, x[::-1], beta=0.7).item() == pytest.approx(0.7 * 3, abs=1e-12)


def test_laplacian_beta_zero_identical_pairs():
    enc = small_encoder(10)
    x = np.random.default_rng(10).normal(size=(4, 4))
    assert loss_laplacian(enc, x, x, beta=0.0).item() == 0.0


def test_laplacian_hand_batch():
    enc = plane_encoder()
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    s2 = np.array([[1.0, 0.0], [1.0, 0.0]])
    neg = np.array([[1.0, 0.0], [1.0, 1.0]])
    # smooth: 0.5 * mean(0, 4) = 1; negatives [sqrt2, 0] . [1, 1] = sqrt2
    value = loss_laplacian(enc, s, s2, beta=0.5, neg_states=neg).item()
    assert value == pytest.approx(1.0 + 0.5 * math.sqrt(2), abs=1e-12)


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("which", ["dynamics", "ortho", "rldp", "laplacian"])
def test_losses_gradcheck(which):
    enc = small_encoder(11)
    seg = segment_batch(11)
    fns = {
        "dynamics": lambda: loss_dynamics(enc, seg),
        "ortho": lambda: loss_ortho(seg.states[:, 0], enc),
        "rldp": lambda: loss_rldp(enc, seg, 1.0),
        "laplacian": lambda: loss_laplacian(enc, seg.states[:, 0], seg.states[:, 1], 0.5),
    }
    assert gradient_check(fns[which], enc.params) < 1e-4


# -- cosine diagnostic ------------------------------------------------------

def test_cosine_simple_cases():
    assert cosine_similarity_mean(np.array([[1.0, 2.0], [1.0, 2.0]])) == pytest.approx(1.0)
    assert cosine_similarity_mean(np.eye(2)) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity_mean(np.ones((1, 3)))


def test_cosine_matches_pair_loop():
    e = np.random.default_rng(12).normal(size=(5, 4))
    pairs = [e[i] @ e[j] / (np.linalg.norm(e[i]) * np.linalg.norm(e[j])) for i in range(5) for j in range(i + 1, 5)]
    assert cosine_similarity_mean(e) == pytest.approx(np.mean(pairs), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(2, 6), st.integers(0, 10_000))
def test_cosine_in_range(n, d, seed):
    v = cosine_similarity_mean(np.random.default_rng(seed).normal(size=(n, d)))
    assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


# -- training ---------------------------------------------------------------

DS = generate_dataset(ENV, "count_bonus", 20, 50, seed=0)
TINY = dict(d=8, H=2, phi_hidden=(16,), action_proj=4, g_hidden=(16,), batch=16, trace_every=50,
            probe_size=32)


def test_zero_steps_returns_init():
    res = train_representation(ReprConfig(total_steps=0, **TINY), DS)
    assert res.steps_done == 0 and len(res.trace.steps) == 1


def test_random_method_takes_no_steps():
    res = train_representation(ReprConfig(method="random", total_steps=500, **TINY), DS)
    assert res.steps_done == 0 and res.history == []


def test_training_finite_and_trace_length():
    res = train_representation(ReprConfig(total_steps=1000, learning_rate=1e-3, **TINY), DS)
    assert len(res.trace.steps) == 1000 // 50 + 1
    assert all(math.isfinite(h["loss"]) for h in res.history)


@pytest.mark.parametrize("method", ["rldp_no_sn", "laplacian"])
def test_other_methods_run(method):
    res = train_representation(ReprConfig(method=method, total_steps=100, learning_rate=1e-3, **TINY), DS)
    assert res.steps_done == 100 and math.isfinite(res.history[-1]["loss"])


def test_trace_csv(tmp_path):
    tr = CollapseTrace()
    tr.record(0, 0.5)
    tr.record(500, 0.25)
    tr.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines() == ["step,mean_cosine", "0,0.5", "500,0.25"]


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        ReprConfig(method="hilp")
    with pytest.raises(ValueError):
        ReprConfig(H=0)


def test_larger_lambda_never_raises_converged_ortho():
    finals = []
    for lam in (0.0, 0.01, 1.0):
        res = train_representation(ReprConfig(lam=lam, total_steps=1500, learning_rate=1e-3, seed=1, **TINY), DS)
        finals.append(np.mean([h["ortho"] for h in res.history[-5:]]))
    assert finals[0] >= finals[1] >= finals[2]
