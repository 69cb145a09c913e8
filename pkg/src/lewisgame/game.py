"""Round assembly, shaped rewards, discounted credit, and solve judging.

One round: draw a target plus K-1 distractors, let the Speaker describe
the target G times, and score each message by the probability the
Listener assigns to the true candidate. That probability is the shaped
reward; the 0/1 indicator (argmax hit) is kept alongside it. Rewards
are spread backward over message tokens as discounted rewards-to-go.

Reference captions are never read here; the game is fully unsupervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .agents import ListenerModel, MessageSample, SpeakerPolicy, listener_probs
from .tensor import F32, Tensor
from .world import Dataset, sample_game_batch


@dataclass(frozen=True)
class GameConfig:
    """Round shape: candidate count, discount, loss weight, generations."""

    k: int = 64
    gamma: float = 0.95
    lam: float = 1.0
    generations: int = 5
    t_max: int = 12

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("K must be at least 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.generations < 1:
            raise ValueError("generations must be at least 1")
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")


@dataclass(frozen=True)
class GameEpisode:
    """One message played against one candidate set."""

    target: int
    message: MessageSample
    probs: np.ndarray
    reward: float
    rewards_to_go: np.ndarray
    indicator: int


@dataclass
class RoundTrace:
    """Tape handles for one traced round, consumed by the trainer."""

    episodes: list
    logprob_nodes: list      # per episode: (T,1) chosen-token log-probs
    logp_target_nodes: list  # per episode: (1,1) listener log-prob at target


def rewards_to_go(reward: float, length: int, gamma: float) -> np.ndarray:
    """Discounted credit per step: out[t-1] = gamma^(T-t) * R.

    Built by backward multiplication so out[t] == gamma * out[t+1]
    holds exactly in float32 and the final entry equals R.
    """
    if length < 1:
        raise ValueError("rewards_to_go: length must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("rewards_to_go: gamma must lie in [0, 1)")
    out = np.empty(length, F32)
    out[length - 1] = F32(reward)
    g = F32(gamma)
    for t in range(length - 2, -1, -1):
        out[t] = g * out[t + 1]
    return out


def make_episode(target: int, message: MessageSample, probs: np.ndarray,
                 gamma: float) -> GameEpisode:
    reward = float(probs[target])
    return GameEpisode(
        target=target,
        message=message,
        probs=probs,
        reward=reward,
        rewards_to_go=rewards_to_go(reward, message.length, gamma),
        indicator=int(int(np.argmax(probs)) == target),
    )


def _play_round_traced(speaker: SpeakerPolicy, listener: ListenerModel,
                       dataset: Dataset, config: GameConfig, rng,
                       temperature: float = 1.0, tape=None) -> RoundTrace:
    batch = sample_game_batch(dataset, config.k, rng)
    obs = dataset.model_inputs()[batch.scene_indices]
    target = batch.target_pos
    samples, node_lists = speaker.sample(obs[target], config.t_max,
                                         temperature, config.generations,
                                         rng, tape)
    v_imgs = listener.embed_images(obs, tape, encoder=speaker)
    episodes, logp_targets = [], []
    for sample in samples:
        v_m = listener.embed_message(sample.tokens, tape)
        scores = T.reshape(
            tape,
            T.matmul(tape, v_imgs,
                     T.reshape(tape, v_m, (v_m.shape[1], 1))),
            (1, config.k))
        logp = T.log_softmax(tape, scores)
        probs = listener_probs(v_m.data, v_imgs.nd())
        episodes.append(make_episode(target, sample, probs, config.gamma))
        logp_targets.append(T.gather_cols(tape, logp, [target]))
    return RoundTrace(episodes, node_lists, logp_targets)


def play_round(speaker: SpeakerPolicy, listener: ListenerModel,
               dataset: Dataset, config: GameConfig, rng,
               temperature: float = 1.0) -> list[GameEpisode]:
    """Play one round: G episodes sharing a target and candidate set."""
    trace = _play_round_traced(speaker, listener, dataset, config, rng,
                               temperature, tape=None)
    return trace.episodes


def solve_rate(episodes, top_n: int) -> float:
    """Fraction of episodes whose target ranks in the listener's top N.

    Ties rank toward the lower index, so results are deterministic.
    """
    if not episodes:
        return 0.0
    solved = 0
    for ep in episodes:
        p = ep.probs
        if top_n > p.size:
            raise ValueError(f"top_n={top_n} exceeds K={p.size}")
        pk = p[ep.target]
        rank = 1 + int((p > pk).sum()) + int((p[:ep.target] == pk).sum())
        solved += rank <= top_n
    return solved / len(episodes)


def indicator_reward_mc(probs: np.ndarray, target: int, n_samples: int,
                        rng) -> float:
    """Monte-Carlo mean of the 0/1 pick-correct reward under a ~ probs.

    Unbiased for probs[target]; used as a test oracle for the shaped
    reward.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p = np.asarray(probs, np.float64)
    p = p / p.sum()
    draws = rng.choice(p.size, size=n_samples, p=p)
    return float((draws == target).mean())
