"""Caption and game metrics, plus the sweep and warm-start harnesses.

BLEU here is the corpus-style formula: clipped n-gram precision,
geometric mean over orders 1..n, and a brevity penalty exp(1 - r/c)
when the candidate is shorter than the closest reference. Zero
precisions are replaced by epsilon = 1e-9; short messages over a tiny
vocabulary hit zero higher-order counts constantly, so the smoothing
choice is pinned rather than left to a library default.

Attribute coverage (fraction of the target scene's attribute words that
appear in the message) is the primary emergence signal at this scale;
BLEU against short templates saturates quickly.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .agents import ListenerModel, SpeakerPolicy, listener_probs
from .game import GameConfig, solve_rate, make_episode
from .optim import clip_global_norm, make_optimizer
from .tensor import F32, Tape, Tensor, backward
from .world import EOS, Dataset, sample_game_batch

BLEU_EPS = 1e-9


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, references) -> int:
    return min((len(r) for r in references),
               key=lambda rl: (abs(rl - c), rl))


def bleu(candidate, references, max_n: int = 4) -> list[float]:
    """BLEU-1..max_n of one candidate against one or more references."""
    candidate = list(candidate)
    references = [list(r) for r in references]
    if not candidate:
        raise ValueError("bleu: candidate must be non-empty")
    if not references:
        raise ValueError("bleu: need at least one reference")
    c = len(candidate)
    r = _closest_ref_len(c, references)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    precisions = []
    for n in range(1, max_n + 1):
        counts = _ngram_counts(candidate, n)
        total = sum(counts.values())
        if total == 0:
            precisions.append(BLEU_EPS)
            continue
        clipped = 0
        for gram, cnt in counts.items():
            best = max(_ngram_counts(ref, n)[gram] for ref in references)
            clipped += min(cnt, best)
        precisions.append(clipped / total if clipped else BLEU_EPS)
    scores = []
    for n in range(1, max_n + 1):
        log_mean = sum(math.log(p) for p in precisions[:n]) / n
        scores.append(bp * math.exp(log_mean))
    return scores


def attribute_coverage(message_ids, scene, vocab) -> float:
    """Fraction of the scene's attribute words present in the message."""
    attrs = scene.attribute_words()
    if not attrs:
        raise ValueError("attribute_coverage: scene has no objects")
    words = set(vocab.decode(message_ids))
    return len(attrs & words) / len(attrs)


def ema(values, alpha: float) -> np.ndarray:
    """Exponential moving average; alpha=1 reproduces the input."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("ema: alpha must lie in (0, 1]")
    values = np.asarray(values, np.float64)
    out = np.empty_like(values)
    acc = 0.0
    for i, x in enumerate(values):
        acc = x if i == 0 else alpha * x + (1.0 - alpha) * acc
        out[i] = acc
    return out


@dataclass
class EvalReport:
    """Greedy-decoding metrics over a batch of evaluation rounds.

    ``mean_length`` counts message tokens before the end marker.
    """

    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    coverage: float
    top1: float
    top10: float
    mean_length: float
    n_rounds: int
    k: int
    extra: dict = field(default_factory=dict)

    def row(self, run_id: str = "eval", step: int = -1, seed: int = -1) -> dict:
        return {
            "run_id": run_id, "step": step, "k": self.k, "seed": seed,
            "bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3,
            "bleu4": self.bleu4, "coverage": self.coverage,
            "top1": self.top1, "top10": self.top10,
            "mean_length": self.mean_length, "n_rounds": self.n_rounds,
            **self.extra,
        }


def _strip_eos(tokens) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(t)
    return out


def evaluate_agents(speaker: SpeakerPolicy, listener: ListenerModel,
                    dataset: Dataset, k: int, n_rounds: int = 200,
                    t_max: int = 12, seed: int = 0,
                    gamma: float = 0.95) -> EvalReport:
    """Play greedy evaluation rounds and aggregate caption/game metrics.

    Deterministic given (parameters, dataset, seed): distractor draws
    come from a fresh seeded stream and decoding is greedy.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    episodes = []
    bleus, coverages, lengths = [], [], []
    top10_n = min(10, k)
    for _ in range(n_rounds):
        batch = sample_game_batch(dataset, k, rng)
        obs = dataset.model_inputs()[batch.scene_indices]
        target_idx = int(batch.scene_indices[batch.target_pos])
        sample = speaker.greedy(obs[batch.target_pos], t_max)
        v_m = listener.embed_message(sample.tokens, None)
        v_imgs = listener.embed_images(obs, None, encoder=speaker)
        probs = listener_probs(v_m.data, v_imgs.nd())
        episodes.append(make_episode(batch.target_pos, sample, probs, gamma))
        content = _strip_eos(sample.tokens)
        lengths.append(len(content))
        refs = dataset.captions[target_idx]
        scene = dataset.scenes[target_idx]
        if content:
            b = bleu(content, refs, 4)
        else:
            b = [0.0, 0.0, 0.0, 0.0]
        bleus.append(b)
        coverages.append(attribute_coverage(content, scene, dataset.vocab))
    bleus = np.asarray(bleus)
    return EvalReport(
        bleu1=float(bleus[:, 0].mean()),
        bleu2=float(bleus[:, 1].mean()),
        bleu3=float(bleus[:, 2].mean()),
        bleu4=float(bleus[:, 3].mean()),
        coverage=float(np.mean(coverages)),
        top1=solve_rate(episodes, 1),
        top10=solve_rate(episodes, top10_n),
        mean_length=float(np.mean(lengths)),
        n_rounds=n_rounds,
        k=k,
    )


# ---------------------------------------------------------------------------
# supervised warm start


def supervised_pretrain(speaker: SpeakerPolicy, dataset: Dataset, steps: int,
                        lr: float = 0.05, seed: int = 0, batch_size: int = 8,
                        clip_norm: float = 1.0) -> SpeakerPolicy:
    """Teacher-forced cross-entropy training on reference captions.

    This is the only place reference captions feed a gradient; the game
    loop itself never reads them. Returns the same speaker, updated in
    place; steps=0 leaves it untouched.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D]))
    opt = make_optimizer("sgd", lr)
    for _ in range(steps):
        speaker.params.zero_grads()
        tape = Tape()
        rows = []
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)),
                         replace=False)
        for i in idx:
            caps = dataset.captions[int(i)]
            cap = caps[int(rng.integers(len(caps)))]
            tokens = list(cap) + [EOS]
            _, node = speaker.logprobs(dataset.model_inputs()[int(i)], tokens,
                                       tape)
            rows.append(node)
        flat = T.concat(tape, [T.reshape(tape, r, (r.size,)) for r in rows],
                        axis=0)
        loss = T.mul(tape, T.mean(tape, flat), Tensor([-1.0]))
        backward(tape, loss)
        clip_global_norm(speaker.params, clip_norm)
        opt.step(speaker.params)
    speaker.params.zero_grads()
    return speaker


def token_accuracy(speaker: SpeakerPolicy, dataset: Dataset,
                   n_scenes: int = 64, seed: int = 0) -> float:
    """Teacher-forced next-token argmax accuracy on reference captions."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xACC]))
    idx = rng.choice(len(dataset), size=min(n_scenes, len(dataset)),
                     replace=False)
    hits = total = 0
    for i in idx:
        tokens = list(dataset.captions[int(i)][0]) + [EOS]
        inputs = dataset.model_inputs()
        lps, _ = speaker.logprobs(inputs[int(i)], tokens, None)
        # greedy agreement: re-run and compare argmax per position
        patches = speaker.encode(inputs[int(i)], None)
        keys = speaker.attention_keys(patches, None)
        hidden = speaker._init_hidden()
        prev = 0
        for tok in tokens:
            logits, hidden, _ = speaker._step(prev, hidden, patches, keys,
                                              None)
            hits += int(np.argmax(logits.data)) == tok
            total += 1
            prev = tok
    return hits / total


# ---------------------------------------------------------------------------
# ablation sweep


def _sweep_cell(args):
    from .training import Trainer, TrainSettings
    (world_seed, spec, n_train, n_val, k, seed, steps, game_kw, model_kw,
     settings_kw, eval_rounds) = args
    from .agents import ModelConfig
    from .world import generate_splits
    splits = generate_splits(world_seed, spec, n_train, n_val)
    game_cfg = GameConfig(k=k, **game_kw)
    model_cfg = ModelConfig(obs_dim=splits["train"].spec.input_dim, **model_kw)
    settings = TrainSettings(seed=seed, **settings_kw)
    trainer = Trainer(splits["train"], game_cfg, model_cfg, settings)
    trainer.run(steps)
    eval_ds = splits.get("val", splits["train"])
    report = evaluate_agents(trainer.speaker, trainer.listener, eval_ds,
                             k=k, n_rounds=eval_rounds, t_max=game_cfg.t_max,
                             seed=seed, gamma=game_cfg.gamma)
    return {"k": k, "seed": seed, "report": report}


def ablation_sweep(world_seed: int, spec, n_train: int, n_val: int,
                   k_list, seeds, steps: int, game_kw: dict | None = None,
                   model_kw: dict | None = None,
                   settings_kw: dict | None = None, eval_rounds: int = 200,
                   workers: int = 1) -> list[dict]:
    """Train a fresh run per (K, seed) cell and evaluate each one.

    Cell failures are recorded, not raised, so one bad cell cannot sink
    a sweep. Returns one dict per cell with either a report or an error.
    """
    game_kw = dict(game_kw or {})
    game_kw.pop("k", None)
    model_kw = dict(model_kw or {})
    settings_kw = dict(settings_kw or {})
    settings_kw.pop("seed", None)
    jobs = [(world_seed, spec, n_train, n_val, k, seed, steps, game_kw,
             model_kw, settings_kw, eval_rounds)
            for k in k_list for seed in seeds]
    results = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, job) for job in jobs]
            for job, fut in zip(jobs, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - per-cell isolation
                    results.append({"k": job[4], "seed": job[5],
                                    "error": str(exc)})
    else:
        for job in jobs:
            try:
                results.append(_sweep_cell(job))
            except Exception as exc:  # noqa: BLE001 - per-cell isolation
                results.append({"k": job[4], "seed": job[5],
                                "error": str(exc)})
    return results


def sweep_summary(cells) -> dict:
    """Mean and std of each metric per K, skipping failed cells."""
    by_k: dict[int, list] = {}
    for cell in cells:
        if "report" in cell:
            by_k.setdefault(cell["k"], []).append(cell["report"])
    out = {}
    for k, reports in sorted(by_k.items()):
        metrics = {}
        for name in ("bleu1", "bleu2", "bleu3", "bleu4", "coverage", "top1",
                     "top10", "mean_length"):
            vals = np.array([getattr(r, name) for r in reports])
            metrics[name] = {"mean": float(vals.mean()),
                             "std": float(vals.std())}
        out[k] = metrics
    return out
