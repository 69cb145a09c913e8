import numpy as np
import pytest

from lewisgame import tensor as T
from lewisgame.agents import (ListenerModel, ModelConfig, SpeakerPolicy,
                              listener_embed, listener_probs,
                              model_config_from_params)
from lewisgame.tensor import Tape, backward
from lewisgame.world import EOS, WorldSpec, generate_dataset


@pytest.fixture(scope="module")
def world():
    spec = WorldSpec()
    ds = generate_dataset(7, 48, spec)
    cfg = ModelConfig(vocab_size=len(ds.vocab), obs_dim=spec.input_dim,
                      d_e=32, d_o=24, n_layers=2, n_patches=3)
    speaker = SpeakerPolicy.create(cfg, 11)
    listener = ListenerModel.create(cfg, 13, encoder=speaker)
    return ds, cfg, speaker, listener


def test_sample_contract(world):
    ds, cfg, speaker, _ = world
    rng = np.random.default_rng(0)
    samples, nodes = speaker.sample(ds.model_inputs()[0], 12, 1.0, 5, rng)
    assert len(samples) == 5
    for s in samples:
        assert 1 <= s.length <= 12
        assert all(0 <= t < cfg.vocab_size for t in s.tokens)
        assert (s.logprobs <= 0).all()
        if EOS in s.tokens:
            assert s.tokens.index(EOS) == s.length - 1
    # generally distinct at temperature 1
    assert len({s.tokens for s in samples}) > 1


def test_greedy_is_deterministic(world):
    ds, _, speaker, _ = world
    a = speaker.greedy(ds.model_inputs()[3], 12)
    b = speaker.greedy(ds.model_inputs()[3], 12)
    assert a.tokens == b.tokens
    assert a.logprobs.tobytes() == b.logprobs.tobytes()


def test_sampling_deterministic_given_seed(world):
    ds, _, speaker, _ = world
    s1, _ = speaker.sample(ds.model_inputs()[1], 12, 1.0, 3,
                           np.random.default_rng(99))
    s2, _ = speaker.sample(ds.model_inputs()[1], 12, 1.0, 3,
                           np.random.default_rng(99))
    assert [m.tokens for m in s1] == [m.tokens for m in s2]


def test_rescoring_reproduces_sampled_logprobs_bitwise(world):
    ds, _, speaker, _ = world
    rng = np.random.default_rng(5)
    samples, _ = speaker.sample(ds.model_inputs()[2], 12, 1.0, 5, rng)
    for s in samples:
        lps, _ = speaker.logprobs(ds.model_inputs()[2], s.tokens)
        assert lps.tobytes() == s.logprobs.tobytes()


def test_fused_and_generic_paths_agree_bitwise(world):
    ds, _, speaker, _ = world
    obs = ds.model_inputs()[4]
    speaker.fused = True
    f1, _ = speaker.sample(obs, 10, 1.0, 3, np.random.default_rng(1))
    speaker.fused = False
    f2, _ = speaker.sample(obs, 10, 1.0, 3, np.random.default_rng(1))
    speaker.fused = True
    assert [m.tokens for m in f1] == [m.tokens for m in f2]
    for a, b in zip(f1, f2):
        assert a.logprobs.tobytes() == b.logprobs.tobytes()


def test_fused_and_generic_gradients_agree(world):
    ds, _, speaker, _ = world
    obs = ds.model_inputs()[6]
    msg, _ = speaker.sample(obs, 8, 1.0, 1, np.random.default_rng(3))
    grads = {}
    for fused in (True, False):
        speaker.fused = fused
        speaker.params.zero_grads()
        tape = Tape()
        _, node = speaker.logprobs(obs, msg[0].tokens, tape)
        backward(tape, T.mean(tape, node))
        grads[fused] = {n: t.grad.copy() for n, t in speaker.params.items()
                        if t.grad is not None}
    speaker.fused = True
    assert grads[True].keys() == grads[False].keys()
    for name in grads[True]:
        a, b = grads[True][name], grads[False][name]
        assert np.allclose(a, b, rtol=1e-4, atol=1e-6), name


def test_per_step_distribution_normalized(world):
    # exp of log-probs over the whole vocab sums to 1 at each step
    ds, cfg, speaker, _ = world
    obs = ds.model_inputs()[0]
    patches = speaker.encode(obs, None)
    keys = speaker.attention_keys(patches, None)
    hidden = speaker.initial_hidden(patches, None)
    logits, hidden, alpha = speaker._step(0, hidden, patches, keys, None)
    logp = T.log_softmax(None, logits)
    assert abs(np.exp(logp.data).sum() - 1.0) < 1e-5
    assert abs(alpha.data.sum() - 1.0) < 1e-6


def test_attention_weights_normalized_every_step(world):
    ds, cfg, speaker, _ = world
    obs = ds.model_inputs()[9]
    patches = speaker.encode(obs, None)
    keys = speaker.attention_keys(patches, None)
    hidden = speaker.initial_hidden(patches, None)
    tok = 0
    for _ in range(6):
        logits, hidden, alpha = speaker._step(tok, hidden, patches, keys,
                                              None)
        assert abs(alpha.data.sum() - 1.0) < 1e-6
        tok = int(np.argmax(logits.data))


def test_listener_embed_identical_obs_bitwise(world):
    ds, _, speaker, listener = world
    obs = ds.model_inputs()[:4].copy()
    obs[2] = obs[0]
    v_m, v_imgs = listener_embed(listener, [5, 6, 1], obs, encoder=speaker)
    rows = v_imgs.nd()
    assert rows[0].tobytes() == rows[2].tobytes()
    assert np.isfinite(v_m.data).all()


def test_listener_embed_permutation_equivariant(world):
    ds, _, speaker, listener = world
    obs = ds.model_inputs()[:5]
    perm = [3, 1, 4, 0, 2]
    _, v1 = listener_embed(listener, [4, 1], obs, encoder=speaker)
    _, v2 = listener_embed(listener, [4, 1], obs[perm], encoder=speaker)
    assert v2.nd().tobytes() == v1.nd()[perm].tobytes()


def test_listener_embed_rejects_empty_message(world):
    ds, _, speaker, listener = world
    with pytest.raises(ValueError, match="non-empty"):
        listener_embed(listener, [], ds.model_inputs()[:3], encoder=speaker)


def test_listener_probs_uniform_when_identical():
    v_m = np.ones(8, np.float32)
    vs = np.tile(np.arange(8, dtype=np.float32), (5, 1))
    p = listener_probs(v_m, vs)
    assert np.allclose(p, 0.2, atol=1e-6)


def test_listener_probs_direct_value():
    # inner products [0, ln 2] -> [1/3, 2/3]
    v_m = np.array([1.0, 0.0], np.float32)
    vs = np.array([[0.0, 5.0], [np.log(2.0), -3.0]], np.float32)
    p = listener_probs(v_m, vs)
    assert np.allclose(p, [1 / 3, 2 / 3], atol=1e-6)


def test_listener_probs_shift_invariant():
    rng = np.random.default_rng(0)
    v_m = rng.normal(0, 1, 6).astype(np.float32)
    vs = rng.normal(0, 1, (4, 6)).astype(np.float32)
    p1 = listener_probs(v_m, vs)
    # add a constant to every inner product via a rank-one shift
    shift = np.linalg.lstsq(v_m[None, :], np.array([[2.5]]), rcond=None)[0]
    vs2 = vs + shift.T
    p2 = listener_probs(v_m, vs2)
    assert np.allclose(p1, p2, atol=1e-5)


def test_listener_accepts_any_k(world):
    ds, _, speaker, listener = world
    for k in (2, 5, 17, 33):
        obs = ds.model_inputs()[:k]
        v_m, v_imgs = listener_embed(listener, [4, 2, 1], obs,
                                     encoder=speaker)
        p = listener_probs(v_m.data, v_imgs.nd())
        assert p.shape == (k,)
        assert abs(p.sum() - 1.0) < 1e-6


def test_listener_stop_gradient_detaches_encoder(world):
    ds, cfg, speaker, _ = world
    frozen_cfg = ModelConfig(**{**cfg.__dict__, "listener_stop_gradient": True})
    listener = ListenerModel.create(frozen_cfg, 13, encoder=speaker)
    speaker.params.zero_grads()
    listener.params.zero_grads()
    tape = Tape()
    v = listener.embed_images(ds.model_inputs()[:3], tape, encoder=speaker)
    backward(tape, T.mean(tape, T.mean(tape, v, axis=0)))
    assert speaker.params["enc.l1.w"].grad is None
    assert listener.params["img.w"].grad is not None


def test_model_config_reconstruction(world):
    _, cfg, speaker, listener = world
    rebuilt = model_config_from_params(speaker.params, listener.params)
    assert rebuilt.vocab_size == cfg.vocab_size
    assert rebuilt.obs_dim == cfg.obs_dim
    assert rebuilt.d_e == cfg.d_e
    assert rebuilt.d_o == cfg.d_o
    assert rebuilt.n_layers == cfg.n_layers
    assert rebuilt.n_patches == cfg.n_patches
