import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_image(gen, *shape):
    return torch.rand(*shape, generator=gen)


def rel_inf(a, b):
    """max|a - b| / max|b|, the relative sup-norm deviation used by the linearity checks."""
    a = torch.as_tensor(a).detach().to(torch.float64)
    b = torch.as_tensor(b).detach().to(torch.float64)
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-30))
