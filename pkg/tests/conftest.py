import pytest
from hypothesis import settings

from wpca.archmodel import ArchConfig, LayerSpec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def mixed_config():
    """Small config touching every block kind and token mixer."""
    layers = (
        LayerSpec("bert", ffn_hidden=24, heads=2),
        LayerSpec("mobilebert", ffn_hidden=16, heads=2, inner_dim=8),
        LayerSpec("flexibert", ffn_hidden=20, attn_op="multiplicative", heads=4),
        LayerSpec("flexibert", ffn_hidden=12, attn_op="fourier", ffn_stacks=2),
        LayerSpec("flexibert", ffn_hidden=12, attn_op="cosine"),
        LayerSpec("flexibert", ffn_hidden=16, attn_op="dynamic-conv", heads=2, conv_kernel=3),
    )
    return ArchConfig(layers=layers, embed_dim=16, vocab_size=50, max_seq_len=12, embedding_size=8)
