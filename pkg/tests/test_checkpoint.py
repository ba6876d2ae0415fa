import numpy as np
import pytest

from helpers import trained_checkpoint
from mupscale.checkpoint import Checkpoint, arrays_equal
from mupscale.exceptions import InvalidParameterError, VersionMismatchError
from mupscale.model import forward


@pytest.mark.parametrize("rule", ["sgd", "sgd_momentum", "amsgrad", "adamw"])
def test_round_trip_bit_exact(tmp_path, rule):
    ckpt, _ = trained_checkpoint(rule=rule, bias=True, wd=1e-3)
    path = tmp_path / "c.ckpt"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert arrays_equal(ckpt, back)
    assert back.hp.to_dict() == ckpt.hp.to_dict() and back.meta == ckpt.meta
    assert back.state.rule == ckpt.state.rule and back.step == ckpt.step == 10
    assert back.to_bytes() == ckpt.to_bytes()
    X = np.random.default_rng(0).standard_normal((4, 3))
    assert forward(back.model, X)[0].tobytes() == forward(ckpt.model, X)[0].tobytes()


def test_little_endian_payload():
    ckpt, _ = trained_checkpoint()
    buf = ckpt.to_bytes()
    tail = np.frombuffer(buf[-8:], dtype="<f8")[0]
    last = ckpt.state.buffers["momentum"][-1].ravel()[-1]
    assert tail == last


def test_version_mismatch():
    buf = bytearray(trained_checkpoint()[0].to_bytes())
    buf[8] = 99
    with pytest.raises(VersionMismatchError):
        Checkpoint.from_bytes(bytes(buf))


def test_truncated_and_trailing():
    buf = trained_checkpoint()[0].to_bytes()
    with pytest.raises(VersionMismatchError):
        Checkpoint.from_bytes(buf[:-3])
    with pytest.raises(VersionMismatchError):
        Checkpoint.from_bytes(buf + b"\x00" * 8)
    with pytest.raises(VersionMismatchError):
        Checkpoint.from_bytes(b"NOTACKPT" + buf[8:])


def test_require_mup():
    ckpt, _ = trained_checkpoint()
    ckpt.require_mup()
    ckpt.meta["parametrization"] = "sp"
    with pytest.raises(InvalidParameterError):
        ckpt.require_mup()
