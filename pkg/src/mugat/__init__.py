"""Desk-scale multi-page context-enhanced document parsing."""

from .model import Model, ModelConfig, PageTriplet, init_model, load_checkpoint, save_checkpoint
from .harness import TrainConfig, CorpusData, pretrain_single_page, train_adapter, evaluate
from .corpus import GenConfig, CharTokenizer, build_corpus

__all__ = [
    "Model", "ModelConfig", "PageTriplet", "init_model",
    "load_checkpoint", "save_checkpoint",
    "TrainConfig", "CorpusData", "pretrain_single_page", "train_adapter", "evaluate",
    "GenConfig", "CharTokenizer", "build_corpus",
]

__version__ = "0.1.0"
