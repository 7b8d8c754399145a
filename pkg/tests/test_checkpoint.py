import json
import struct

import pytest
import torch

from ihvs import checkpoint
from ihvs.checkpoint import CheckpointError
from ihvs.model import ModelConfig, architecture_hash, build_model


@pytest.mark.parametrize("transition", ["simplified", "newtonian"])
def test_round_trip(tmp_path, transition):
    m = build_model(ModelConfig(transition=transition), seed=6)
    path = tmp_path / "m.ihvsm"
    checkpoint.save_checkpoint(m, path, step=12, extra={"note": "x"})
    back, header = checkpoint.load_checkpoint(path, expected_arch=architecture_hash(m))
    assert header["step"] == 12 and header["extra"] == {"note": "x"}
    for (ka, a), (kb, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert ka == kb and torch.equal(a, b)
    assert checkpoint.dumps(back, 12, {"note": "x"}) == path.read_bytes()


def test_layout():
    raw = checkpoint.dumps(build_model(ModelConfig(), seed=0))
    assert raw[:8] == b"IHVSMDL1"
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    last = header["tensors"][-1]
    assert 12 + hlen + last["offset"] + last["nbytes"] == len(raw)


def test_rejections():
    m = build_model(ModelConfig(), seed=0)
    raw = checkpoint.dumps(m)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"X" + raw[1:])
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.loads(raw[:-1] + bytes([raw[-1] ^ 1]))
    other = architecture_hash(build_model(ModelConfig(transition="newtonian")))
    with pytest.raises(CheckpointError, match="architecture"):
        checkpoint.loads(raw, expected_arch=other)
