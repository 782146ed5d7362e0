"""attenuate: real-time, target-conditioned sound attenuation.

A suppression network conditioned on fused class embeddings removes a
runtime-selectable set of sound classes from an audio stream while keeping
the rest of the scene. Classes are extensible at runtime by inserting new
embeddings; model weights never change.
"""

from .audio import ComplexSpectrogram, RollingBuffer, Waveform
from .embeddings import EmbeddingStore, TargetEmbedding
from .errors import EngineError
from .streaming import StreamConfig, StreamSession, process_file
from .suppressor import (
    SuppressorConfig,
    SuppressorModel,
    init_model,
    load_model,
    save_model,
    suppress,
    toy_config,
)

__all__ = [
    "ComplexSpectrogram",
    "EmbeddingStore",
    "EngineError",
    "RollingBuffer",
    "StreamConfig",
    "StreamSession",
    "SuppressorConfig",
    "SuppressorModel",
    "TargetEmbedding",
    "Waveform",
    "init_model",
    "load_model",
    "process_file",
    "save_model",
    "suppress",
    "toy_config",
    "__version__",
]

__version__ = "0.1.0"
