import struct

import pytest
import torch

from arcdog import model as M
from arcdog import numerics as nx
from arcdog.errors import ConfigError, ShapeError

SMALL = M.ModelConfig(input_channels=3, timepoints=4, feature_dim=4, encoder_layers=1,
                      heads=2, feedforward_dim=6, dropout_rate=0.1, num_classes=3)


def batch(m, cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(m, cfg.timepoints, cfg.input_channels, generator=g, dtype=torch.float64)


def test_default_shapes():
    cfg = M.ModelConfig()
    logits, feats = M.forward(M.init_params(cfg, 0), batch(5, cfg), cfg)
    assert logits.shape == (5, 25) and feats.shape == (5, 64)


def test_per_head_dim():
    cfg = M.ModelConfig(feature_dim=64, heads=2)
    assert cfg.head_dim == 32
    trace = {}
    M.forward(M.init_params(cfg, 0), batch(3, cfg), cfg, trace=trace)
    assert [a.shape for a in trace["attention"]] == [(3, 2, 8, 8)] * 2


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(feature_dim=63, heads=2)
    with pytest.raises(ConfigError):
        M.ModelConfig(num_classes=1)
    with pytest.raises(ConfigError):
        M.ModelConfig(timepoints=0)


def test_shape_mismatch():
    cfg = M.ModelConfig()
    with pytest.raises(ShapeError):
        M.forward(M.init_params(cfg, 0), torch.zeros(2, 8, 9, dtype=torch.float64), cfg)


def test_init_determinism():
    a, b, c = M.init_params(SMALL, 1), M.init_params(SMALL, 1), M.init_params(SMALL, 2)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)
    assert all(torch.equal(a[k], torch.ones_like(a[k])) for k in a if k.endswith(".gain"))
    assert all(not a[k].any() for k in a if k.endswith(".bias") or ".attn.b" in k)


def test_duplicate_rows_identical_in_eval():
    cfg = M.ModelConfig()
    x = batch(3, cfg)
    x = torch.cat([x, x[:1]])
    logits, _ = M.forward(M.init_params(cfg, 0), x, cfg)
    assert torch.equal(logits[0], logits[3])


def test_permutation_equivariance():
    cfg = M.ModelConfig()
    p = M.init_params(cfg, 0)
    x = batch(6, cfg)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    a, _ = M.forward(p, x, cfg)
    b, _ = M.forward(p, x[perm], cfg)
    assert torch.allclose(a[perm], b, atol=1e-12)


def test_attention_rows_sum_to_one():
    cfg = M.ModelConfig()
    trace = {}
    M.forward(M.init_params(cfg, 3), batch(4, cfg), cfg, trace=trace)
    for w in trace["attention"]:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_time_reversal_changes_features():
    cfg = M.ModelConfig()
    p = M.init_params(cfg, 4)
    x = batch(2, cfg)
    _, f1 = M.forward(p, x, cfg)
    _, f2 = M.forward(p, x.flip(1), cfg)
    assert not torch.allclose(f1, f2)


def test_dropout_only_in_train():
    cfg = M.ModelConfig()
    p, x = M.init_params(cfg, 0), batch(4, cfg)
    e1, _ = M.forward(p, x, cfg)
    e2, _ = M.forward(p, x, cfg)
    assert torch.equal(e1, e2)
    t1, _ = M.forward(p, x, cfg, train=True, generator=torch.Generator().manual_seed(0))
    t2, _ = M.forward(p, x, cfg, train=True, generator=torch.Generator().manual_seed(0))
    assert torch.equal(t1, t2) and not torch.equal(t1, e1)


def test_float32_forward():
    cfg = M.ModelConfig()
    p = {k: v.float() for k, v in M.init_params(cfg, 0).items()}
    logits, _ = M.forward(p, batch(2, cfg).float(), cfg)
    assert logits.dtype == torch.float32


def test_model_grad_check():
    p = M.init_params(SMALL, 0)
    x = batch(4, SMALL)
    labels = torch.tensor([0, 1, 2, 0])
    names = list(p)

    def fn(*tensors):
        logits, _ = M.forward(dict(zip(names, tensors)), x, SMALL)
        return nx.cross_entropy(logits, labels)

    assert nx.grad_check(fn, p).max_rel_error < 1e-4


def test_checkpoint_round_trip(tmp_path):
    p = M.init_params(SMALL, 7)
    path = tmp_path / "ck.bin"
    M.save_checkpoint(path, p, SMALL, {"seed": 7})
    q, cfg, extra = M.load_checkpoint(path)
    assert cfg == SMALL and extra["seed"] == 7
    assert list(q) == list(p) and all(torch.equal(p[k], q[k]) for k in p)


def test_checkpoint_layout(tmp_path):
    p = M.init_params(SMALL, 7)
    path = tmp_path / "ck.bin"
    M.save_checkpoint(path, p, SMALL)
    raw = path.read_bytes()
    assert raw[:8] == b"ARCDOGCK"
    (n_json,) = struct.unpack_from("<I", raw, 12)
    pos = 16 + n_json
    (count,) = struct.unpack_from("<I", raw, pos)
    assert count == len(p)
    (name_len,) = struct.unpack_from("<I", raw, pos + 4)
    assert raw[pos + 8: pos + 8 + name_len].decode() == "in_norm.gain"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(Exception):
        M.load_checkpoint(path)
