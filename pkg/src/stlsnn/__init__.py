"""Spiking neural networks that learn synaptic weights and firing thresholds together."""

from .config import ExperimentConfig, emit_config, parse_config, parse_network
from .data import Dataset, NoiseSpec, bernoulli_encode, load_events, load_idx, slice_equal_count, slice_fixed_duration
from .errors import STLError
from .grad import LearningMode, backward, loss_grad_output, mse_loss
from .gradcheck import grad_check
from .layers import LayerKind, LayerSpec
from .network import Network, network_forward, predict_class, voting_readout
from .neuron import LifConstants, SurrogateSpec, fire, lif_step, surrogate_grad
from .persist import load_checkpoint, save_checkpoint, write_metrics
from .train import (
    TrainConfig,
    evaluate,
    jdf_predict,
    lr_schedule,
    optimizer_step,
    shuffle_thresholds,
    track_thresholds,
    train_epoch,
)

__version__ = "0.1.0"
