"""Joint policy-gradient training for the signaling game.

The speaker objective is a REINFORCE-style surrogate over each group of
G generations: per-token credit gamma^(T-t) * (R - b), where b defaults
to the group's mean reward (group-relative baseline) and alternatively
the episode's summed rewards-to-go (the literal single-sample form,
kept for fidelity experiments). Advantages are constants; no gradient
flows through them. The listener objective is the negative log of the
probability it assigns to the true candidate, which equals categorical
cross-entropy against the one-hot target.

A step runs W speaker replicas over disjoint sub-batches (in-process,
sequential, so results are bitwise reproducible), accumulates listener
gradients across replicas, clips each agent's gradient norm, applies
SGD to speakers and Adam to the listener, and periodically averages the
replica weights.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .agents import ListenerModel, ModelConfig, SpeakerPolicy
from .game import GameConfig, GameEpisode, _play_round_traced, rewards_to_go
from .optim import clip_global_norm, grad_global_norm, make_optimizer
from .params import ParameterSet
from .tensor import F32, Tape, Tensor, backward


class NumericalFailureError(RuntimeError):
    """A training step produced non-finite losses or gradients."""


@dataclass
class TrainSettings:
    """Knobs of the optimization loop (the game itself sits in GameConfig)."""

    seed: int = 2024
    replicas: int = 3
    sync_period: int = 5
    targets_per_replica: int = 1
    lr_speaker: float = 0.1
    lr_listener: float = 1e-3
    optimizer_speaker: str = "sgd"
    optimizer_listener: str = "adam"
    baseline_mode: str = "group"
    standardize_advantages: bool = False
    temperature: float = 1.0
    clip_norm: float = 1.0


REPORT_FIELDS = (
    "speaker_loss", "listener_loss", "joint_loss", "mean_reward",
    "mean_indicator", "advantage_variance", "grad_norm_speaker",
    "grad_norm_listener", "clip_scale_speaker", "clip_scale_listener",
)


@dataclass
class LossReport:
    """Per-step summary. Replica-level quantities are averaged across
    replicas; joint_loss always equals speaker + lambda * listener."""

    speaker_loss: float
    listener_loss: float
    joint_loss: float
    mean_reward: float
    mean_indicator: float
    advantage_variance: float
    grad_norm_speaker: float
    grad_norm_listener: float
    clip_scale_speaker: float
    clip_scale_listener: float
    step: int = -1

    def row(self, run_id: str) -> dict:
        out = {"run_id": run_id, "step": self.step}
        for f in REPORT_FIELDS:
            out[f] = float(getattr(self, f))
        return out


def group_advantages(episodes, gamma: float, baseline_mode: str = "group",
                     standardize: bool = False) -> list[np.ndarray]:
    """Per-step advantage vectors for one group of episodes.

    ``group``: subtract the group's mean reward, then discount.
    ``literal``: per-episode baseline equal to its summed rewards-to-go.
    ``none``: raw rewards-to-go (no baseline).
    """
    rewards = np.array([ep.reward for ep in episodes], np.float64)
    if baseline_mode == "group":
        if len(episodes) == 1:
            warnings.warn("group baseline with G=1 yields zero advantages",
                          RuntimeWarning, stacklevel=2)
        centered = rewards - rewards.mean()
        if standardize:
            centered = centered / (rewards.std() + 1e-8)
        out = []
        for ep, c in zip(episodes, centered):
            discounts = rewards_to_go(1.0, ep.message.length, gamma)
            out.append(discounts * F32(c))
        return out
    if baseline_mode == "literal":
        return [ep.rewards_to_go - ep.rewards_to_go.sum(dtype=F32)
                for ep in episodes]
    if baseline_mode == "none":
        return [ep.rewards_to_go.copy() for ep in episodes]
    raise ValueError(f"unknown baseline mode: {baseline_mode!r}")


def speaker_loss(episodes, gamma: float, baseline_mode: str = "group",
                 standardize: bool = False) -> float:
    """Group surrogate loss: mean over episodes of -(1/T) sum logpi * A."""
    advs = group_advantages(episodes, gamma, baseline_mode, standardize)
    total = 0.0
    for ep, a in zip(episodes, advs):
        lp = ep.message.logprobs.astype(np.float64)
        total += -(lp * a.astype(np.float64)).sum() / ep.message.length
    return total / len(episodes)


def listener_loss(episode: GameEpisode) -> float:
    """Negative log probability assigned to the true candidate."""
    with np.errstate(divide="ignore"):
        return float(-np.log(episode.probs[episode.target]))


def advantage_variance(episodes, gamma: float,
                       baseline_mode: str = "group") -> float:
    """Spread of per-episode summed advantages within one group.

    Advantages are zero-mean by design, so the second moment is taken
    about zero with the usual n-1 denominator; this is what shrinks
    when a baseline removes the common reward level.
    """
    if len(episodes) < 2:
        raise ValueError("advantage variance needs at least 2 episodes")
    advs = group_advantages(episodes, gamma, baseline_mode)
    sums = np.array([a.sum(dtype=np.float64) for a in advs])
    return float((sums ** 2).sum() / (len(sums) - 1))


def sync_replicas(param_sets) -> None:
    """Replace every parameter by its elementwise mean across replicas."""
    if len(param_sets) <= 1:
        return
    first = param_sets[0]
    for other in param_sets[1:]:
        if other.names() != first.names():
            raise T.ShapeError("sync_replicas: replica parameter names differ")
        for name, t in first.items():
            if other[name].shape != t.shape:
                raise T.ShapeError(
                    f"sync_replicas: shape mismatch for {name!r}: "
                    f"{t.shape} vs {other[name].shape}")
    for name in first.names():
        stack = np.stack([ps[name].data.astype(np.float64)
                          for ps in param_sets])
        mean = stack.mean(axis=0).astype(F32)
        for ps in param_sets:
            ps[name].data = mean.copy()


def _group_loss_node(tape, trace, gamma, baseline_mode, standardize):
    advs = group_advantages(trace.episodes, gamma, baseline_mode, standardize)
    episode_nodes = []
    for ep, node, a in zip(trace.episodes, trace.logprob_nodes, advs):
        weights = Tensor((-a / F32(ep.message.length)).reshape(-1, 1))
        episode_nodes.append(T.tsum(tape, T.mul(tape, node, weights)))
    return T.mean(tape, T.concat(tape, episode_nodes, axis=0))


def _listener_loss_node(tape, traces):
    nodes = []
    for trace in traces:
        nodes.extend(trace.logp_target_nodes)
    stacked = T.concat(tape, nodes, axis=0)
    return T.mul(tape, T.mean(tape, stacked), Tensor([-1.0]))


def train_step(replicas, listener: ListenerModel, dataset,
               game_cfg: GameConfig, settings: TrainSettings,
               speaker_opts, listener_opt, rngs) -> LossReport:
    """One optimization step across all replicas.

    Each replica plays its own rounds and optimizes the mean of its
    group losses; the listener optimizes the mean loss over every
    episode of the step. Parameters are untouched if any loss or
    gradient comes out non-finite.
    """
    n_rep = len(replicas)
    lam = game_cfg.lam
    for rep in replicas:
        rep.params.zero_grads()
    listener.params.zero_grads()

    spk_values, lst_values = [], []
    rewards, indicators, adv_vars = [], [], []
    for w, rep in enumerate(replicas):
        tape = Tape()
        traces = []
        for _ in range(settings.targets_per_replica):
            traces.append(_play_round_traced(
                rep, listener, dataset, game_cfg, rngs[w],
                settings.temperature, tape))
        group_nodes = [
            _group_loss_node(tape, tr, game_cfg.gamma, settings.baseline_mode,
                             settings.standardize_advantages)
            for tr in traces
        ]
        spk_node = T.mean(tape, T.concat(tape, group_nodes, axis=0))
        lst_node = _listener_loss_node(tape, traces)
        if lam > 0:
            total = T.add(tape, spk_node,
                          T.mul(tape, lst_node, Tensor([lam / n_rep])))
        else:
            total = spk_node
        spk_values.append(spk_node.item())
        lst_values.append(lst_node.item())
        if not (np.isfinite(spk_values[-1]) and np.isfinite(lst_values[-1])):
            _abort(replicas, listener)
        backward(tape, total)
        for tr in traces:
            for ep in tr.episodes:
                rewards.append(ep.reward)
                indicators.append(ep.indicator)
            if game_cfg.generations >= 2:
                adv_vars.append(advantage_variance(
                    tr.episodes, game_cfg.gamma, settings.baseline_mode))

    spk_norms = [grad_global_norm(rep.params) for rep in replicas]
    lst_norm = grad_global_norm(listener.params)
    if not (np.isfinite(lst_norm) and all(np.isfinite(n) for n in spk_norms)):
        _abort(replicas, listener)

    spk_scales = [clip_global_norm(rep.params, settings.clip_norm)
                  for rep in replicas]
    lst_scale = clip_global_norm(listener.params, settings.clip_norm)
    for opt, rep in zip(speaker_opts, replicas):
        opt.step(rep.params)
    listener_opt.step(listener.params)

    speaker_mean = float(np.mean(spk_values))
    listener_mean = float(np.mean(lst_values))
    return LossReport(
        speaker_loss=speaker_mean,
        listener_loss=listener_mean,
        joint_loss=speaker_mean + lam * listener_mean,
        mean_reward=float(np.mean(rewards)),
        mean_indicator=float(np.mean(indicators)),
        advantage_variance=float(np.mean(adv_vars)) if adv_vars else 0.0,
        grad_norm_speaker=float(np.mean(spk_norms)),
        grad_norm_listener=lst_norm,
        clip_scale_speaker=float(np.mean(spk_scales)),
        clip_scale_listener=lst_scale,
    )


def _abort(replicas, listener):
    for rep in replicas:
        rep.params.zero_grads()
    listener.params.zero_grads()
    raise NumericalFailureError(
        "non-finite loss or gradient; parameters left at pre-step values")


class Trainer:
    """Owns the agents, optimizers, and the deterministic step loop.

    Every per-step rng stream is derived from (run seed, worker id,
    step index), so resuming from a checkpoint continues the exact
    sequence an uninterrupted run would have produced.
    """

    def __init__(self, dataset, game_cfg: GameConfig, model_cfg: ModelConfig,
                 settings: TrainSettings):
        self.dataset = dataset
        self.game_cfg = game_cfg
        self.model_cfg = model_cfg
        self.settings = settings
        base = SpeakerPolicy.create(model_cfg, settings.seed)
        self.replicas = [base.copy() for _ in range(settings.replicas)]
        self.listener = ListenerModel.create(model_cfg, settings.seed,
                                             encoder=self.replicas[0])
        self.speaker_opts = [
            make_optimizer(settings.optimizer_speaker, settings.lr_speaker)
            for _ in self.replicas
        ]
        self.listener_opt = make_optimizer(settings.optimizer_listener,
                                           settings.lr_listener)
        self.step_index = 0

    @property
    def speaker(self) -> SpeakerPolicy:
        return self.replicas[0]

    def _step_rngs(self):
        return [
            np.random.default_rng(
                np.random.SeedSequence(
                    [self.settings.seed, 0x7E9, w, self.step_index]))
            for w in range(len(self.replicas))
        ]

    def step_once(self) -> LossReport:
        report = train_step(self.replicas, self.listener, self.dataset,
                            self.game_cfg, self.settings, self.speaker_opts,
                            self.listener_opt, self._step_rngs())
        report.step = self.step_index
        self.step_index += 1
        period = self.settings.sync_period
        if period > 0 and self.step_index % period == 0:
            sync_replicas([rep.params for rep in self.replicas])
        return report

    def run(self, n_steps: int, metrics_fh=None, run_id: str = "run",
            checkpoint_dir=None, checkpoint_every: int = 0,
            stop_flag=None, on_report=None) -> list[LossReport]:
        from .params import save_checkpoint
        import os
        reports = []
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(self.pack_state(),
                            os.path.join(checkpoint_dir, "latest.lgc"))
        for _ in range(n_steps):
            if stop_flag is not None and stop_flag():
                break
            report = self.step_once()
            reports.append(report)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(report.row(run_id)) + "\n")
            if on_report is not None:
                on_report(report)
            if checkpoint_dir and checkpoint_every and \
                    self.step_index % checkpoint_every == 0:
                save_checkpoint(self.pack_state(),
                                os.path.join(checkpoint_dir, "latest.lgc"))
        if checkpoint_dir:
            save_checkpoint(self.pack_state(),
                            os.path.join(checkpoint_dir, "latest.lgc"))
        return reports

    # -- checkpointable state ------------------------------------------------

    def pack_state(self) -> ParameterSet:
        state = ParameterSet()
        state.merged("speaker.", self.replicas[0].params)
        for w, rep in enumerate(self.replicas[1:], start=1):
            state.merged(f"replica{w}.", rep.params)
        state.merged("listener.", self.listener.params)
        for key, arr in self.listener_opt.state_arrays().items():
            state.add(f"optim.listener.{key}", Tensor(arr))
        for w, opt in enumerate(self.speaker_opts):
            for key, arr in opt.state_arrays().items():
                state.add(f"optim.speaker{w}.{key}", Tensor(arr))
        state.add("meta.step", Tensor([float(self.step_index)]))
        return state

    def load_state(self, state: ParameterSet) -> None:
        def fill(params, loaded, what):
            if loaded.names() != params.names():
                raise ValueError(f"checkpoint does not match {what} layout")
            for name, t in params.items():
                src = loaded[name]
                if src.shape != t.shape:
                    raise ValueError(
                        f"checkpoint shape mismatch for {what}.{name}")
                t.data = src.data.copy()
        fill(self.replicas[0].params, state.subset("speaker."), "speaker")
        for w, rep in enumerate(self.replicas[1:], start=1):
            prefix = f"replica{w}."
            sub = state.subset(prefix)
            if len(sub):
                fill(rep.params, sub, f"replica{w}")
            else:
                fill(rep.params, state.subset("speaker."), f"replica{w}")
        fill(self.listener.params, state.subset("listener."), "listener")
        opt_state = {name: t.data for name, t
                     in state.subset("optim.listener.").items()}
        if opt_state:
            self.listener_opt.load_state_arrays(opt_state)
        for w, opt in enumerate(self.speaker_opts):
            sub = {name: t.data for name, t
                   in state.subset(f"optim.speaker{w}.").items()}
            if sub:
                opt.load_state_arrays(sub)
        if "meta.step" in state:
            self.step_index = int(state["meta.step"].data[0])
