from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainingConfig, config_from_dict, load_config, toy_config
from .data import AudioCorpus, ingest_audio, synthetic_corpus
from .training import (
    BaseModel,
    Instance,
    P2MarkSystem,
    load_base,
    load_instance,
    load_system,
    mint_instance,
    pretrain_base,
    train_p2mark,
)

__all__ = [
    "AudioCorpus",
    "BaseModel",
    "Instance",
    "P2MarkSystem",
    "TrainingConfig",
    "config_from_dict",
    "ingest_audio",
    "load_base",
    "load_checkpoint",
    "load_config",
    "load_instance",
    "load_system",
    "mint_instance",
    "pretrain_base",
    "save_checkpoint",
    "synthetic_corpus",
    "toy_config",
    "train_p2mark",
]
