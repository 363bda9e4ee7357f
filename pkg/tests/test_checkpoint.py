import numpy as np
import pytest

from pmt.nn import AdamState, Checkpoint, CheckpointError, ModelConfig, PMTModel
from pmt.temporal import EncodingSpec

CFG = ModelConfig(D=16, H=8, L=2, A=2, V_out=7)


def _ckpt(with_opt=True):
    m = PMTModel(CFG, EncodingSpec(16, phase_offset=5), seed=1)
    opt = None
    if with_opt:
        rng = np.random.default_rng(0)
        opt = AdamState(3, {k: rng.normal(size=v.shape).astype(np.float32) for k, v in m.params.items()},
                        {k: rng.random(v.shape).astype(np.float32) for k, v in m.params.items()})
    return Checkpoint.from_model(m, opt, task="next", step=3, origin_epoch=123)


@pytest.mark.parametrize("with_opt", [True, False])
def test_round_trip_is_bit_exact(tmp_path, with_opt):
    c = _ckpt(with_opt)
    path = c.save(tmp_path / "a.pmt")
    d = Checkpoint.load(path)
    assert d.model_config == c.model_config and d.encoding == c.encoding
    assert d.metadata == c.metadata
    for k, v in c.params.items():
        assert d.params[k].tobytes() == v.tobytes()
    if with_opt:
        assert d.optimizer.step == 3
        for k in c.params:
            assert d.optimizer.m[k].tobytes() == c.optimizer.m[k].tobytes()
            assert d.optimizer.v[k].tobytes() == c.optimizer.v[k].tobytes()
    else:
        assert d.optimizer is None
    assert d.to_bytes() == path.read_bytes()


def test_layout_header():
    raw = _ckpt(False).to_bytes()
    assert raw[:4] == b"PMT1"
    assert int.from_bytes(raw[4:8], "little") == 1


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b[:10],
])
def test_corrupt_files_rejected(mutate):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(mutate(_ckpt().to_bytes()))


def test_loaded_model_predicts_identically():
    c = _ckpt(False)
    m1 = c.to_model()
    m2 = Checkpoint.from_bytes(c.to_bytes()).to_model()
    tok = np.array([[0, 3, 7, 8]])
    win = np.arange(4)[None]
    assert np.array_equal(m1.logits(tok, win), m2.logits(tok, win))


def test_describe_lists_every_tensor():
    c = _ckpt()
    text = c.describe()
    for k in c.params:
        assert k in text
    assert f"parameters: {sum(v.size for v in c.params.values())}" in text
