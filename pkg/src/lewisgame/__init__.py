"""Cooperative description game: a Speaker captions scenes so a
Listener can pick them out of a lineup, and both improve together."""

from .agents import (ListenerModel, MessageSample, ModelConfig,
                     SpeakerPolicy, listener_embed, listener_probs)
from .config import ConfigError, RunConfig, load_config, parse_config
from .evaluate import (EvalReport, ablation_sweep, attribute_coverage, bleu,
                       ema, evaluate_agents, supervised_pretrain,
                       sweep_summary, token_accuracy)
from .game import (GameConfig, GameEpisode, indicator_reward_mc, play_round,
                   rewards_to_go, solve_rate)
from .optim import Adam, Sgd, clip_global_norm, grad_global_norm, make_optimizer
from .params import (FormatError, ParameterSet, UnsupportedVersionError,
                     load_checkpoint, save_checkpoint)
from .tensor import (EvaluationError, ShapeError, Tape, Tensor, backward,
                     gradcheck)
from .training import (LossReport, NumericalFailureError, Trainer,
                       TrainSettings, advantage_variance, listener_loss,
                       speaker_loss, sync_replicas, train_step)
from .world import (CapacityError, Dataset, GameBatch, ObjectSpec,
                    SamplingError, Scene, Vocabulary, WorldSpec,
                    build_captions, generate_dataset, generate_splits,
                    load_dataset, mix_datasets, render_raster,
                    sample_game_batch, save_dataset)

__version__ = "0.1.0"
