import numpy as np
import pytest
import torch

from bsa.datasets import ToyCorpusSpec, generate_toy_corpus
from bsa.nets import GeneratorSpec, build_extractor, build_generator

torch.set_num_threads(1)

SMALL_SPEC = GeneratorSpec(latent_dim=8, num_classes=3, base_channels=4, num_blocks=2, image_size=16)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


@pytest.fixture
def small_generator():
    """Random 16x16 generator with non-trivial class affines and running stats."""
    g = build_generator(SMALL_SPEC, init_seed=3)
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for bn in g.norm_layers().values():
            bn.gamma.add_(0.2 * torch.randn(bn.gamma.shape, generator=gen))
            bn.beta.add_(0.2 * torch.randn(bn.beta.shape, generator=gen))
            bn.bn.running_mean.copy_(0.1 * torch.randn(bn.bn.running_mean.shape, generator=gen))
            bn.bn.running_var.copy_(1.0 + 0.2 * torch.rand(bn.bn.running_var.shape, generator=gen))
    return g


@pytest.fixture
def small_extractor():
    ext = build_extractor(3, image_size=16, width=4, init_seed=5)
    for p in ext.parameters():
        p.requires_grad_(False)
    return ext


@pytest.fixture
def small_target():
    return generate_toy_corpus(ToyCorpusSpec(3, 4, 16, 21, "shapes-alt-style"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
