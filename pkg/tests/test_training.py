import math
import warnings

import numpy as np
import pytest

from lewisgame.agents import MessageSample, ModelConfig
from lewisgame.game import GameConfig, make_episode
from lewisgame.training import (NumericalFailureError, Trainer, TrainSettings,
                                advantage_variance, group_advantages,
                                listener_loss, speaker_loss, sync_replicas,
                                train_step)
from lewisgame.world import WorldSpec, generate_dataset


def _episode(reward, logprobs, target=0, k=4, gamma=0.95):
    lp = np.asarray(logprobs, np.float32)
    msg = MessageSample(tuple([5] * lp.size), lp)
    probs = np.full(k, (1.0 - reward) / (k - 1), np.float32)
    probs[target] = reward
    return make_episode(target, msg, probs, gamma)


def test_speaker_loss_zero_when_rewards_equal():
    group = [_episode(0.5, [-1.0, -2.0]) for _ in range(4)]
    assert abs(speaker_loss(group, 0.95)) < 1e-7


def test_speaker_loss_symmetric_cancellation():
    group = [_episode(0.9, [math.log(0.5)]), _episode(0.1, [math.log(0.5)])]
    assert abs(speaker_loss(group, 0.95)) < 1e-7


def test_speaker_loss_hand_value():
    # G=2, T=1, rewards (0.9, 0.1), logpi (ln 0.8, ln 0.2)
    group = [_episode(0.9, [math.log(0.8)]), _episode(0.1, [math.log(0.2)])]
    expected = -0.5 * (0.4 * math.log(0.8) - 0.4 * math.log(0.2))
    assert abs(speaker_loss(group, 0.95) - expected) < 1e-6
    assert abs(expected - (-0.27725887)) < 1e-6


def test_speaker_loss_group_g1_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss = speaker_loss([_episode(0.5, [-1.0])], 0.95)
    assert loss == 0.0
    assert any("G=1" in str(w.message) for w in caught)


def test_speaker_loss_shift_invariant_in_rewards():
    rng = np.random.default_rng(0)
    lps = [-rng.random(3) for _ in range(5)]
    base = [_episode(r, lp) for r, lp in zip([0.1, 0.3, 0.5, 0.2, 0.4], lps)]
    # shifting every reward by a constant leaves group advantages unchanged
    shifted = [_episode(r + 0.2, lp)
               for r, lp in zip([0.1, 0.3, 0.5, 0.2, 0.4], lps)]
    a = speaker_loss(base, 0.95)
    b = speaker_loss(shifted, 0.95)
    assert abs(a - b) < 1e-6


def test_literal_baseline_mode():
    ep = _episode(0.5, [-1.0, -1.0], gamma=0.5)
    advs = group_advantages([ep, ep], 0.5, baseline_mode="literal")
    # rtg = [0.25, 0.5]; b = 0.75; A = [-0.5, -0.25]
    assert np.allclose(advs[0], [-0.5, -0.25], atol=1e-6)


def test_listener_loss_values():
    onehot = _episode(1.0, [-1.0])
    assert listener_loss(onehot) == 0.0
    uniform = _episode(0.25, [-1.0], k=4)
    assert abs(listener_loss(uniform) - math.log(4)) < 1e-6


def test_listener_loss_equals_cross_entropy():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(k)).astype(np.float32)
        target = int(rng.integers(k))
        msg = MessageSample((5,), np.zeros(1, np.float32))
        ep = make_episode(target, msg, p, 0.95)
        onehot = np.zeros(k)
        onehot[target] = 1.0
        with np.errstate(divide="ignore"):
            ce = -float((onehot * np.log(p.astype(np.float64))).sum())
        assert abs(listener_loss(ep) - ce) < 1e-6


def test_advantage_variance_zero_for_identical_rewards():
    group = [_episode(0.4, [-1.0, -2.0]) for _ in range(5)]
    assert advantage_variance(group, 0.95) == 0.0


def test_advantage_variance_two_episode_closed_form():
    gamma, T = 0.5, 3
    group = [_episode(1.0, [-1.0] * T, gamma=gamma),
             _episode(0.0, [-1.0] * T, gamma=gamma)]
    s = sum(gamma ** (T - t) for t in range(1, T + 1))
    expected = 2 * (0.5 * s) ** 2 / (2 - 1)
    assert abs(advantage_variance(group, gamma) - expected) < 1e-5


def test_group_baseline_variance_not_above_none():
    rng = np.random.default_rng(2)
    wins = 0
    for _ in range(300):
        rewards = rng.random(5)
        group = [_episode(r, [-1.0, -0.5]) for r in rewards]
        vg = advantage_variance(group, 0.95, "group")
        vn = advantage_variance(group, 0.95, "none")
        assert vg <= vn + 1e-9
        wins += vg < vn
    assert wins == 300  # strict when mean reward is nonzero


def test_sync_replicas_means_and_equalizes():
    spec = WorldSpec()
    ds = generate_dataset(1, 8, spec)
    cfg = ModelConfig(vocab_size=len(ds.vocab), obs_dim=spec.input_dim,
                      d_e=8, d_o=8, n_layers=1, n_patches=2)
    from lewisgame.agents import SpeakerPolicy
    reps = [SpeakerPolicy.create(cfg, 1) for _ in range(3)]
    for i, rep in enumerate(reps):
        rep.params["head.b"].data[:] = float(i)  # values 0, 1, 2
    sync_replicas([r.params for r in reps])
    for rep in reps:
        assert np.allclose(rep.params["head.b"].data, 1.0)
    for name in reps[0].params.names():
        ref = reps[0].params[name].data.tobytes()
        assert all(r.params[name].data.tobytes() == ref for r in reps)


def test_sync_replicas_single_is_noop():
    spec = WorldSpec()
    ds = generate_dataset(1, 8, spec)
    cfg = ModelConfig(vocab_size=len(ds.vocab), obs_dim=spec.input_dim,
                      d_e=8, d_o=8, n_layers=1, n_patches=2)
    from lewisgame.agents import SpeakerPolicy
    rep = SpeakerPolicy.create(cfg, 1)
    before = {n: t.data.copy() for n, t in rep.params.items()}
    sync_replicas([rep.params])
    for n, t in rep.params.items():
        assert t.data.tobytes() == before[n].tobytes()


def test_sync_replicas_shape_mismatch_errors():
    from lewisgame.params import ParameterSet
    from lewisgame.tensor import ShapeError, Tensor
    a = ParameterSet()
    a.add("w", Tensor(np.zeros(3, np.float32), True))
    b = ParameterSet()
    b.add("w", Tensor(np.zeros(4, np.float32), True))
    with pytest.raises(ShapeError):
        sync_replicas([a, b])


@pytest.fixture(scope="module")
def trainer_setup():
    spec = WorldSpec()
    ds = generate_dataset(5, 60, spec)
    mcfg = ModelConfig(vocab_size=len(ds.vocab), obs_dim=spec.input_dim,
                       d_e=24, d_o=16, n_layers=1, n_patches=2)
    gcfg = GameConfig(k=6, generations=3, t_max=6)
    return ds, mcfg, gcfg


def test_train_step_report_identities(trainer_setup):
    ds, mcfg, gcfg = trainer_setup
    tr = Trainer(ds, gcfg, mcfg, TrainSettings(seed=3, replicas=2))
    for _ in range(10):
        rep = tr.step_once()
        assert abs(rep.joint_loss
                   - (rep.speaker_loss + gcfg.lam * rep.listener_loss)) < 1e-6
        assert 0.0 <= rep.mean_reward <= 1.0
        assert 0.0 <= rep.mean_indicator <= 1.0
        assert rep.clip_scale_speaker <= 1.0
        assert rep.clip_scale_listener <= 1.0


def test_train_step_lambda_zero_freezes_listener(trainer_setup):
    ds, mcfg, _ = trainer_setup
    gcfg = GameConfig(k=6, gamma=0.95, lam=0.0, generations=3, t_max=6)
    tr = Trainer(ds, gcfg, mcfg, TrainSettings(seed=4, replicas=2))
    before = {n: t.data.copy() for n, t in tr.listener.params.items()}
    for _ in range(3):
        tr.step_once()
    for n, t in tr.listener.params.items():
        assert t.data.tobytes() == before[n].tobytes()


def test_train_step_zero_lr_bitwise_frozen(trainer_setup):
    ds, mcfg, gcfg = trainer_setup
    settings = TrainSettings(seed=5, replicas=2, lr_speaker=0.0,
                             lr_listener=0.0)
    tr = Trainer(ds, gcfg, mcfg, settings)
    spk_before = {n: t.data.copy() for n, t in tr.speaker.params.items()}
    lst_before = {n: t.data.copy() for n, t in tr.listener.params.items()}
    for _ in range(3):
        tr.step_once()
    for n, t in tr.speaker.params.items():
        assert t.data.tobytes() == spk_before[n].tobytes()
    for n, t in tr.listener.params.items():
        assert t.data.tobytes() == lst_before[n].tobytes()


def test_train_step_bitwise_reproducible(trainer_setup):
    ds, mcfg, gcfg = trainer_setup
    outs = []
    for _ in range(2):
        tr = Trainer(ds, gcfg, mcfg, TrainSettings(seed=6, replicas=2))
        reports = [tr.step_once() for _ in range(5)]
        state = tr.pack_state()
        outs.append((reports, state))
    for a, b in zip(outs[0][0], outs[1][0]):
        assert a.speaker_loss == b.speaker_loss
        assert a.listener_loss == b.listener_loss
        assert a.mean_reward == b.mean_reward
    assert outs[0][1].equal(outs[1][1])


def test_trainer_sync_period_equalizes(trainer_setup):
    ds, mcfg, gcfg = trainer_setup
    tr = Trainer(ds, gcfg, mcfg, TrainSettings(seed=7, replicas=3,
                                               sync_period=5))
    for _ in range(5):
        tr.step_once()
    ref = tr.replicas[0].params
    for rep in tr.replicas[1:]:
        assert rep.params.equal(ref)
    tr.step_once()
    assert not all(rep.params.equal(ref) for rep in tr.replicas[1:])


def test_trainer_resume_bitwise_continuation(trainer_setup, tmp_path):
    ds, mcfg, gcfg = trainer_setup
    settings = TrainSettings(seed=8, replicas=2)

    full = Trainer(ds, gcfg, mcfg, settings)
    full_reports = [full.step_once() for _ in range(8)]

    first = Trainer(ds, gcfg, mcfg, settings)
    for _ in range(4):
        first.step_once()
    from lewisgame.params import load_checkpoint, save_checkpoint
    path = str(tmp_path / "mid.lgc")
    save_checkpoint(first.pack_state(), path)

    second = Trainer(ds, gcfg, mcfg, settings)
    second.load_state(load_checkpoint(path))
    assert second.step_index == 4
    resumed = [second.step_once() for _ in range(4)]
    for a, b in zip(full_reports[4:], resumed):
        assert a.speaker_loss == b.speaker_loss
        assert a.listener_loss == b.listener_loss
        assert a.mean_reward == b.mean_reward
    assert full.pack_state().equal(second.pack_state())


def test_train_step_aborts_on_nonfinite(trainer_setup):
    ds, mcfg, gcfg = trainer_setup
    tr = Trainer(ds, gcfg, mcfg, TrainSettings(seed=9, replicas=2))
    tr.listener.params["img.w"].data[:] = np.inf
    spk_before = {n: t.data.copy() for n, t in tr.speaker.params.items()}
    with pytest.raises(NumericalFailureError):
        tr.step_once()
    for n, t in tr.speaker.params.items():
        assert t.data.tobytes() == spk_before[n].tobytes()
    for _, t in tr.speaker.params.items():
        assert t.grad is None
