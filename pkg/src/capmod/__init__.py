"""Caption modification with a gated residual decoder, built on a small numpy autodiff."""

from .autodiff import ContractError, DomainError, NumericalError, ShapeError, Tensor
from .corpus import CaptionExample, SyntheticSceneSpec, Vocabulary, generate_synthetic
from .decoder import ModelConfig, ModelParams
from .inference import beam_decode, greedy_decode, modify
from .metrics import bleu, cider, rouge_l
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "CaptionExample", "ContractError", "DomainError", "ModelConfig", "ModelParams", "NumericalError",
    "ShapeError", "SyntheticSceneSpec", "Tensor", "TrainConfig", "Vocabulary", "beam_decode", "bleu",
    "cider", "generate_synthetic", "greedy_decode", "load_checkpoint", "modify", "rouge_l",
    "save_checkpoint", "train",
]
__version__ = "0.1.0"
