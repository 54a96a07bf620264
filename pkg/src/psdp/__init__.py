"""Parameter sharing decoder pair (PSDP) language models on a small numpy autodiff core."""

from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .generation import ChunkPolicy, SamplerPolicy, chunk_generate, complete_couplet, generate, top_k_sample
from .model import Model, ModelConfig, count_parameters, init_params, psdp_forward, stacked_forward
from .tokenizer import Vocabulary, build_char_vocab, load_vocab
from .training import Checkpoint, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "backward",
    "ChunkPolicy", "SamplerPolicy", "chunk_generate", "complete_couplet", "generate", "top_k_sample",
    "Model", "ModelConfig", "count_parameters", "init_params", "psdp_forward", "stacked_forward",
    "Vocabulary", "build_char_vocab", "load_vocab",
    "Checkpoint", "load_checkpoint", "save_checkpoint", "train",
]
