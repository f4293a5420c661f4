import pytest
import torch

from stylesem.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from stylesem.errors import ConfigError, InputError, MissingArtifactError
from stylesem.pipeline import ModelDims, build_model

HASH_A = "a" * 64
HASH_B = "b" * 64


def _model(seed=0):
    dims = ModelDims(visual_vocab=8, d=8, n_blocks=1, latent_rows=2, num_tokens=4, context_cap=32)
    return build_model(dims, seed=seed)


def test_bitwise_roundtrip(tmp_path):
    model = _model()
    p1 = tmp_path / "a.drck"
    save_checkpoint(p1, model, stage=1, step=17, config_hash=HASH_A)
    other = _model(seed=5)
    meta = load_checkpoint(p1, other, expect_config_hash=HASH_A)
    assert meta.stage == 1 and meta.step == 17
    for key, value in model.state_dict().items():
        assert torch.equal(value, other.state_dict()[key]), key
    p2 = tmp_path / "b.drck"
    save_checkpoint(p2, other, stage=1, step=17, config_hash=HASH_A)
    assert p1.read_bytes() == p2.read_bytes()


def test_config_hash_guard(tmp_path):
    model = _model()
    path = tmp_path / "c.drck"
    save_checkpoint(path, model, stage=2, step=1, config_hash=HASH_A)
    with pytest.raises(ConfigError):
        load_checkpoint(path, _model(), expect_config_hash=HASH_B)
    meta = load_checkpoint(path, _model(), expect_config_hash=HASH_B, allow_mismatch=True)
    assert meta.config_hash == HASH_A


def test_missing_and_corrupt(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_checkpoint(tmp_path / "nope.drck")
    bad = tmp_path / "bad.drck"
    bad.write_bytes(b"WXYZ" + b"\x00" * 100)
    with pytest.raises(InputError):
        read_checkpoint(bad)
    with pytest.raises(InputError):
        save_checkpoint(tmp_path / "x.drck", _model(), stage=1, step=0, config_hash="short")


def test_float64_parameters_roundtrip(tmp_path):
    model = _model().to(torch.float64)
    path = tmp_path / "d.drck"
    save_checkpoint(path, model, stage=1, step=0, config_hash=HASH_A)
    other = _model().to(torch.float64)
    load_checkpoint(path, other, expect_config_hash=HASH_A)
    for key, value in model.state_dict().items():
        assert torch.equal(value, other.state_dict()[key])
        assert other.state_dict()[key].dtype == torch.float64
