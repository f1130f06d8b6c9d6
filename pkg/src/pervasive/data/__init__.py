from .batching import Batch, collate, filter_pairs, make_batches
from .bpe import BpeModel, bpe_apply, bpe_learn, join_subwords, learn_bpe_models
from .corpus import encode_pairs, read_lines, read_parallel, write_lines
from .synth import synth_generate
from .vocab import BOS, EOS, PAD, SPECIALS, UNK, Vocabulary

__all__ = [
    "Batch", "collate", "filter_pairs", "make_batches",
    "BpeModel", "bpe_apply", "bpe_learn", "join_subwords", "learn_bpe_models",
    "encode_pairs", "read_lines", "read_parallel", "write_lines",
    "synth_generate",
    "BOS", "EOS", "PAD", "SPECIALS", "UNK", "Vocabulary",
]
