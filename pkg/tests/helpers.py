"""Shared fixtures-by-function for the test modules."""
import numpy as np

from softpivot.cascade import CascadeModel, TrilingualExample
from softpivot.softbridge import BridgeConfig
from softpivot.transformer import TransformerConfig, init_model

TINY_VOCAB = 12


def tiny_config(**kw) -> TransformerConfig:
    base = dict(num_layers=1, d_model=8, num_heads=2, d_ff=16, src_vocab_size=TINY_VOCAB,
                tgt_vocab_size=TINY_VOCAB, max_len=6, dropout_rate=0.0, label_smoothing=0.1)
    base.update(kw)
    return TransformerConfig(**base)


def tiny_cascade(seed: int = 0, bridge: BridgeConfig = None) -> CascadeModel:
    sp = init_model(tiny_config(), seed)
    pt = init_model(tiny_config(), seed + 100)
    return CascadeModel(sp, pt, bridge or BridgeConfig()).eval()


def tiny_example(seed: int = 0, max_content: int = 4) -> TrilingualExample:
    rng = np.random.default_rng(seed)

    def seq():
        return rng.integers(4, TINY_VOCAB, size=int(rng.integers(2, max_content + 1))).tolist()

    return TrilingualExample(seq(), seq(), seq())
