"""Multi-speaker end-to-end text-to-wave synthesis."""

from msclarinet.config import Hyperparameters, SpeakerRegistry, UtteranceRecord, load_config

__version__ = "0.1.0"

__all__ = ["Hyperparameters", "SpeakerRegistry", "UtteranceRecord", "load_config"]
