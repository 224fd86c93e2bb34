import numpy as np
import pytest

from latentflow import dit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """2-block float64-friendly model used by most unit tests."""
    return dit.ModelConfig(
        latent_channels=3,
        embed_dim=16,
        n_blocks=2,
        n_heads=2,
        memory_count=4,
        differential_attention=True,
        fourier_dim=16,
        text_ctx_len=4,
        text_dim=8,
        vocab_size=16,
        max_seconds=30.0,
        min_seconds=0.5,
    )


def randomized_params(config, rng, dtype=np.float64, scale=0.05):
    """Init params and perturb the zero-initialized tensors so every pathway
    carries signal (gradient checks need non-degenerate weights)."""
    params = dit.init_params(config, rng, dtype=dtype)
    for k in params:
        params[k] = params[k] + scale * rng.standard_normal(params[k].shape).astype(dtype)
    return params


def param_group(name: str) -> str:
    if "adaln_bias" in name:
        return "adaln_biases"
    if ".inpaint." in name:
        return "inpaint_mlp"
    if name == "memory":
        return "memory"
    if ".attn." in name or ".xattn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "other"
