import numpy as np
import pytest

from ssmprune import ModelConfig, init_model


def random_config(rng, variant=None, **overrides):
    variant = variant or rng.choice(["mamba1", "mamba2"])
    n_heads = 1
    d_state = int(rng.integers(1, 9))
    if variant == "mamba2":
        n_heads = int(rng.choice([h for h in (1, 2, 4) if d_state % h == 0]))
    kw = dict(
        variant=variant,
        d_model=int(rng.integers(2, 9)),
        d_state=d_state,
        d_conv=int(rng.integers(1, 5)),
        expand=int(rng.integers(1, 3)),
        n_layers=int(rng.integers(1, 4)),
        n_heads=n_heads,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def small_model():
    return init_model(ModelConfig(variant="mamba2", d_model=8, d_state=16, n_layers=2, n_heads=4), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
