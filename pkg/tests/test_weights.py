import struct

import numpy as np
import pytest

from ssmprune import ModelConfig, init_model, model_forward
from ssmprune.errors import FormatError
from ssmprune.pruning import PruningPlan, LayerPlan, apply_optimized, apply_sparse
from ssmprune.weights import (
    ALIGN,
    MAGIC,
    from_bytes,
    from_text,
    load_model,
    model_tensors,
    models_equal,
    save_model,
    to_bytes,
    to_text,
)


def models():
    yield init_model(ModelConfig(variant="mamba1", d_model=6, d_state=4, n_layers=2), seed=1)
    yield init_model(ModelConfig(variant="mamba2", d_model=6, d_state=4, n_heads=2), seed=2,
                     dtype=np.float32)
    yield init_model(ModelConfig(d_model=4, d_state=2, input_mode="tokens", vocab_size=9), seed=3)
    base = init_model(ModelConfig(d_model=6, d_state=6, n_heads=2), seed=4)
    plan = PruningPlan(0.5, [LayerPlan(6, (0, 2, 5)), LayerPlan(6, (1, 3, 4))])
    yield apply_sparse(base, plan)
    yield apply_optimized(base, plan, fold_bridge=False)


@pytest.mark.parametrize("model", list(models()))
def test_round_trips(model, tmp_path):
    assert models_equal(from_text(to_text(model)), model)
    assert models_equal(from_bytes(to_bytes(model)), model)
    for name in ("m.json", "m.ssmw"):
        save_model(model, tmp_path / name)
        assert models_equal(load_model(tmp_path / name), model)


def test_binary_layout_is_aligned():
    model = next(models())
    buf = to_bytes(model)
    magic, version, reserved, hlen = struct.unpack_from("<4sHHQ", buf)
    assert magic == MAGIC and version == 1 and reserved == 0
    start = 16 + hlen
    assert start % ALIGN == 0
    import json

    header = json.loads(buf[16:start])
    for t in header["tensors"]:
        assert t["offset"] % ALIGN == 0
        arr = np.frombuffer(buf, dtype=t["dtype"], count=int(np.prod(t["shape"])), offset=start + t["offset"])
        np.testing.assert_array_equal(arr.reshape(t["shape"]), model_tensors(model)[t["name"]])


def test_loaded_model_computes_identically():
    model = next(models())
    x = np.random.default_rng(0).standard_normal((1, 5, 6))
    a, _ = model_forward(x, model)
    b, _ = model_forward(x, from_bytes(to_bytes(model)))
    np.testing.assert_array_equal(a, b)


def test_corrupt_inputs():
    buf = to_bytes(next(models()))
    with pytest.raises(FormatError):
        from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        from_bytes(buf[:-8])
    with pytest.raises(FormatError):
        from_text("{}")
    with pytest.raises(FormatError):
        from_text("not json")
