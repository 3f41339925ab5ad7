import struct

import numpy as np
import pytest

from rankssm.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from rankssm.errors import DataError
from rankssm.models import BackboneConfig, Reranker


def test_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    state = {"a": rng.normal(size=(3, 4)), "scalar": np.array(np.pi), "ünï.b": rng.normal(size=(2, 1, 5)),
             "tiny": np.array([5e-324, -0.0, 1.7976931348623157e308])}
    save_checkpoint(tmp_path / "c.rksm", state)
    back = load_checkpoint(tmp_path / "c.rksm")
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape and back[k].tobytes() == state[k].tobytes()


def test_header_layout(tmp_path):
    save_checkpoint(tmp_path / "c.rksm", {"w": np.ones((2, 3))})
    raw = (tmp_path / "c.rksm").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<III", raw, 4) == (1, 1, 1)
    assert raw[16:17] == b"w" and struct.unpack_from("<III", raw, 17) == (2, 2, 3)
    assert len(raw) == 29 + 6 * 8


def test_model_roundtrip(tmp_path):
    a = Reranker(BackboneConfig(d_model=8, n_state=4, seed=1))
    b = Reranker(BackboneConfig(d_model=8, n_state=4, seed=2))
    save_checkpoint(tmp_path / "m.rksm", a.state_dict())
    b.load_state_dict(load_checkpoint(tmp_path / "m.rksm"))
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


@pytest.mark.parametrize(
    "mutate",
    [
        lambda raw: b"XXXX" + raw[4:],
        lambda raw: raw[:4] + struct.pack("<I", 9) + raw[8:],
        lambda raw: raw[:-3],
        lambda raw: raw + b"\0",
    ],
    ids=["magic", "version", "truncated", "trailing"],
)
def test_corrupt_files(tmp_path, mutate):
    save_checkpoint(tmp_path / "c.rksm", {"w": np.ones(4)})
    path = tmp_path / "c.rksm"
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_strict_load_mismatch():
    m = Reranker(BackboneConfig(d_model=8, n_state=4))
    state = m.state_dict()
    state.pop("head.bias")
    with pytest.raises(KeyError):
        m.load_state_dict(state)
