"""Checkpoint round-trips and failure modes."""

import numpy as np
import pytest
import torch

from patchcount import ArchConfig, CrowdNet
from patchcount.checkpoint import load_checkpoint, save_checkpoint
from patchcount.errors import CheckpointError


def _model(seed=0):
    torch.manual_seed(seed)
    m = CrowdNet(ArchConfig.tiny())
    m.cc_max = 33
    m.set_normalization(
        np.array([0.4, 0.5, 0.6], dtype=np.float64),
        np.array([0.2, 0.25, 0.3], dtype=np.float64),
    )
    return m


def test_roundtrip_state_bitwise(tmp_path):
    m = _model()
    path = tmp_path / "ck.npz"
    save_checkpoint(path, m, epoch=7, seed=42)
    m2, meta, momenta = load_checkpoint(path)
    assert meta["epoch"] == 7
    assert meta["seed"] == 42
    assert m2.cc_max == 33
    assert momenta == {}
    sd1, sd2 = m.state_dict(), m2.state_dict()
    assert set(sd1) == set(sd2)
    for k in sd1:
        assert torch.equal(sd1[k], sd2[k]), k


def test_roundtrip_forward_bit_exact(tmp_path):
    m = _model(seed=3)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, m, epoch=1, seed=0)
    m2, _, _ = load_checkpoint(path)
    m.eval()
    m2.eval()
    x = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(9)) * 255
    with torch.no_grad():
        a = m.forward_prefix(x)
        b = m2.forward_prefix(x)
    assert torch.equal(a.logits, b.logits)
    for fa, fb in zip(a.feats, b.feats):
        assert torch.equal(fa, fb)


def test_momentum_buffers_roundtrip(tmp_path):
    m = _model(seed=5)
    opt = torch.optim.SGD(m.parameters(), lr=0.01, momentum=0.9, nesterov=True)
    x = torch.rand(1, 3, 64, 64) * 255
    out = m.forward_prefix(x)
    out.logits.sum().backward()
    opt.step()
    path = tmp_path / "ck.npz"
    save_checkpoint(path, m, epoch=2, seed=1, optimizer=opt)
    _, _, momenta = load_checkpoint(path)
    named = dict(m.named_parameters())
    assert set(momenta) <= set(named)
    assert len(momenta) > 0
    for name, buf in momenta.items():
        state = opt.state[named[name]]
        assert np.array_equal(buf, state["momentum_buffer"].detach().numpy())


def test_missing_file_raises():
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/nowhere.npz")


def test_corrupt_file_raises(tmp_path):
    path = tmp_path / "garbage.npz"
    path.write_bytes(b"not a zip archive at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_version_raises(tmp_path):
    import json

    m = _model()
    path = tmp_path / "ck.npz"
    save_checkpoint(path, m, epoch=0, seed=0)
    data = dict(np.load(path, allow_pickle=False).items())
    meta = json.loads(bytes(data["meta.json"]).decode("utf-8"))
    meta["format_version"] = 999
    data["meta.json"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_meta_raises(tmp_path):
    path = tmp_path / "ck.npz"
    np.savez(path, **{"state/x": np.zeros(3)})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
