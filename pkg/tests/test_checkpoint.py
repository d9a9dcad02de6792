import zipfile

import numpy as np
import pytest
import torch

from lar_sirr import synth
from lar_sirr.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from lar_sirr.model import ModelConfig, ReflectionRemovalNet
from lar_sirr.trainer import DataSources, TrainConfig, Trainer


def tiny_trainer(tmp_path=None, seed=0, **kw):
    aug = synth.AugmentConfig(crop_size=16)
    pool = synth.procedural_pool(3, 32, seed=seed)
    triples = [synth.generate_triple(pool, seed, i, aug) for i in range(2)]
    tcfg = TrainConfig(samples_per_epoch=2, epochs=100, seed=seed, discriminator_channels=4, **kw)
    return Trainer(ModelConfig(base_channels=4, n_iterations=2, seed=seed), tcfg,
                   DataSources(triples=triples, augment=aug), out_dir=tmp_path)


def test_model_round_trip_bit_exact(tmp_path):
    model = ReflectionRemovalNet(ModelConfig(base_channels=4, seed=5))
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(path).build_model()
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
        assert a.dtype == b.dtype


def test_float32_little_endian(tmp_path):
    model = ReflectionRemovalNet(ModelConfig(base_channels=4))
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", model))
    arr = ckpt.arrays["model/stage1.mlsm.kernel_s1"]
    assert arr.dtype.str == "<f4"


def test_optimizer_state_round_trip(tmp_path):
    tr = tiny_trainer()
    tr.run(max_steps=3)
    path = tr.save(tmp_path / "a.ckpt")
    other = tiny_trainer()
    other.restore(load_checkpoint(path))
    for name in ("opt_g", "opt_d"):
        sa, sb = getattr(tr, name).state_dict(), getattr(other, name).state_dict()
        assert sa["param_groups"] == sb["param_groups"]
        for idx in sa["state"]:
            for key, val in sa["state"][idx].items():
                assert torch.equal(val, sb["state"][idx][key]), (name, idx, key)
    # saving the restored state reproduces the file byte for byte
    path2 = other.save(tmp_path / "b.ckpt")
    assert path.read_bytes() == path2.read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    straight = tiny_trainer()
    straight.run(max_steps=4)
    first = tiny_trainer()
    first.run(max_steps=2)
    path = first.save(tmp_path / "mid.ckpt")
    resumed = tiny_trainer()
    resumed.restore(load_checkpoint(path))
    resumed.run(max_steps=2)
    assert [e["total"] for e in straight.log[2:]] == [e["total"] for e in resumed.log]
    for (k, a), (_, b) in zip(straight.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), k


def test_deterministic_bytes(tmp_path):
    model = ReflectionRemovalNet(ModelConfig(base_channels=4))
    a = save_checkpoint(tmp_path / "a.ckpt", model, rng=np.random.default_rng(3))
    b = save_checkpoint(tmp_path / "b.ckpt", model, rng=np.random.default_rng(3))
    assert a.read_bytes() == b.read_bytes()
    with zipfile.ZipFile(a) as zf:
        assert {i.date_time for i in zf.infolist()} == {(1980, 1, 1, 0, 0, 0)}


def test_rng_state(tmp_path):
    rng = np.random.default_rng(11)
    rng.random(5)
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "r.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4)), rng=rng))
    assert ckpt.numpy_rng().random() == rng.random()


def test_atomic_write_leaves_no_temp(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4)))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_corrupt(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_architecture_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4)))
    tr = tiny_trainer()
    tr.model_cfg = ModelConfig(base_channels=4, use_tsm=False)
    with pytest.raises(CheckpointError):
        tr.restore(load_checkpoint(path))
