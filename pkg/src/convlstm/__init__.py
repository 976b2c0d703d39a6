"""Convolutional-gate LSTM video classifiers in plain numpy."""
from .data import SequenceSample, SyntheticSpec, load_manifest, synth_generate
from .evaluate import crossval_report, evaluate
from .models import ModelConfig, build_model, desk_config, full_config, model_forward, tiny_config
from .train import TrainConfig, init_weights, train_loop

__version__ = "0.1.0"
