import json

import numpy as np
import pytest
import torch

from lar_sirr import cli, imagecore, synth
from lar_sirr.checkpoint import load_checkpoint, save_checkpoint
from lar_sirr.model import ModelConfig, ReflectionRemovalNet


def run(*argv):
    return cli.main([str(a) for a in argv])


def tiny_config(tmp_path, steps=2, **model):
    cfg = {
        "model": {"base_channels": 4, "n_iterations": 2, **model},
        "train": {"samples_per_epoch": 2, "epochs": 100, "max_steps": steps, "discriminator_channels": 4},
        "augment": {"crop_size": 16},
    }
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "data"
    assert run("synth", "--procedural", 3, "--count", 4, "--crop-size", 16, "--seed", 7, "--out", out) == 0
    return out


def passthrough_checkpoint(path, **cfg):
    """Network whose decoder adds nothing, so every output equals its input."""
    model = ReflectionRemovalNet(ModelConfig(base_channels=4, n_iterations=3, **cfg))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("stage2.out"):
                p.zero_()
    return save_checkpoint(path, model)


class TestSynth:
    def test_file_contract(self, dataset):
        names = sorted(p.name for p in dataset.iterdir())
        pngs = [n for n in names if n.endswith(".png")]
        assert len(pngs) == 12
        assert "manifest.json" in names
        assert len([n for n in names if n.endswith(".json")]) == 5
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["command"] == "synth" and manifest["seed"] == 7 and len(manifest["ids"]) == 4

    def test_rerun_identical(self, dataset, tmp_path):
        out = tmp_path / "again"
        assert run("synth", "--procedural", 3, "--count", 4, "--crop-size", 16, "--seed", 7, "--out", out) == 0
        for p in dataset.glob("*.png"):
            assert p.read_bytes() == (out / p.name).read_bytes()

    def test_recomposition_on_output(self, dataset):
        for tr in synth.load_dataset(dataset):
            assert synth.quantized_recomposition_consistent(tr).all()

    def test_pool_dir(self, tmp_path):
        pool = tmp_path / "pool"
        for k, img in enumerate(synth.procedural_pool(2, 40)):
            imagecore.write_png(pool / f"{k}.png", img)
        assert run("synth", "--pool", pool, "--count", 1, "--crop-size", 16, "--out", tmp_path / "o") == 0

    def test_empty_pool(self, tmp_path):
        (tmp_path / "pool").mkdir()
        assert run("synth", "--pool", tmp_path / "pool", "--count", 1, "--out", tmp_path / "o") == 2

    def test_no_pool(self, tmp_path):
        assert run("synth", "--count", 1, "--out", tmp_path / "o") == 1


class TestTrain:
    def test_train_writes_manifest_and_checkpoint(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--config", tiny_config(tmp_path), "--data", dataset, "--seed", 1, "--out", out) == 0
        assert {"manifest.json", "train_log.jsonl", "model.ckpt"} <= {p.name for p in out.iterdir()}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["configs"]["train"]["seed"] == 1 and manifest["configs"]["model"]["seed"] == 1

    def test_ablation_flag(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--config", tiny_config(tmp_path), "--data", dataset, "--ablation", "wo_tsm", "--out", out) == 0
        assert load_checkpoint(out / "model.ckpt").model_config.use_tsm is False

    def test_drop_loss_flag(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--config", tiny_config(tmp_path), "--data", dataset, "--drop-loss", "ssim", "--out", out) == 0
        log = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
        assert all(e["ssim"] == 0.0 for e in log)
        assert json.loads((out / "manifest.json").read_text())["configs"]["loss"]["drop"] == ["ssim"]

    def test_defaults_full_model(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--config", tiny_config(tmp_path), "--data", dataset, "--out", out) == 0
        m = json.loads((out / "manifest.json").read_text())["configs"]
        assert m["loss"]["drop"] == [] and m["model"]["use_rdm"] and m["model"]["use_tsm"] and m["model"]["use_lstm"]

    def test_unknown_ablation(self, dataset, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("train", "--data", dataset, "--ablation", "nope", "--out", tmp_path / "o")
        assert exc.value.code == 1
        assert "wo_tsm" in capsys.readouterr().err

    def test_env_data_dir(self, dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("LAR_SIRR_DATA_DIR", str(dataset))
        assert run("train", "--config", tiny_config(tmp_path, steps=1), "--out", tmp_path / "run") == 0

    def test_missing_data(self, tmp_path, monkeypatch):
        monkeypatch.delenv("LAR_SIRR_DATA_DIR", raising=False)
        assert run("train", "--config", tiny_config(tmp_path), "--data", tmp_path / "nothing", "--out", tmp_path / "o") == 2

    def test_numerical_failure(self, dataset, tmp_path):
        cfg = json.loads(tiny_config(tmp_path, steps=6).read_text())
        cfg["train"]["lr"] = 1e38
        p = tmp_path / "explode.json"
        p.write_text(json.dumps(cfg))
        assert run("train", "--config", p, "--data", dataset, "--out", tmp_path / "o") == 3
        assert (tmp_path / "o" / "last_good.ckpt").is_file()
        assert (tmp_path / "o" / "nonfinite_batch.npz").is_file()

    def test_corrupt_alpha(self, dataset, tmp_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        for p in dataset.iterdir():
            (bad / p.name).write_bytes(p.read_bytes())
        meta = json.loads((bad / "00000.json").read_text())
        meta["alpha"] = 7.0
        (bad / "00000.json").write_text(json.dumps(meta))
        assert run("train", "--config", tiny_config(tmp_path), "--data", bad, "--out", tmp_path / "o") == 2

    def test_finetune(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "a") == 0
        assert run("finetune", "--config", cfg, "--data", dataset, "--checkpoint", tmp_path / "a" / "model.ckpt",
                   "--out", tmp_path / "b") == 0
        assert load_checkpoint(tmp_path / "b" / "model.ckpt").step == 4

    def test_finetune_hash_mismatch(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "a") == 0
        assert run("finetune", "--config", cfg, "--ablation", "wo_lstm", "--data", dataset,
                   "--checkpoint", tmp_path / "a" / "model.ckpt", "--out", tmp_path / "b") == 2


class TestInfer:
    def test_dims_and_trace(self, tmp_path):
        ckpt = save_checkpoint(tmp_path / "m.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4, n_iterations=3)))
        img = synth.procedural_image(np.random.default_rng(0), (44, 54))
        imagecore.write_png(tmp_path / "in.png", img)
        assert run("infer", "--checkpoint", ckpt, "--emit-trace", "--out", tmp_path / "o", tmp_path / "in.png") == 0
        out = tmp_path / "o"
        assert imagecore.read_png(out / "in.png").shape == (44, 54, 3)
        for kind in "TRC":
            for i in (1, 2, 3):
                assert (out / f"in_{kind}{i}.png").is_file()
        assert len(list(out.glob("in_*.png"))) == 9

    def test_400x540_resolution(self, tmp_path):
        ckpt = save_checkpoint(tmp_path / "m.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4, n_iterations=1)))
        imagecore.write_png(tmp_path / "big.png", synth.procedural_image(np.random.default_rng(1), (400, 540)))
        assert run("infer", "--checkpoint", ckpt, "--out", tmp_path / "o", tmp_path / "big.png") == 0
        assert imagecore.read_png(tmp_path / "o" / "big.png").shape == (400, 540, 3)

    def test_all_unreadable(self, tmp_path):
        ckpt = save_checkpoint(tmp_path / "m.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4, n_iterations=1)))
        (tmp_path / "in").mkdir()
        (tmp_path / "in" / "x.png").write_bytes(b"nope")
        assert run("infer", "--checkpoint", ckpt, "--out", tmp_path / "o", tmp_path / "in") == 2

    def test_deterministic(self, tmp_path):
        ckpt = save_checkpoint(tmp_path / "m.ckpt", ReflectionRemovalNet(ModelConfig(base_channels=4, n_iterations=2)))
        imagecore.write_png(tmp_path / "in.png", synth.procedural_image(np.random.default_rng(2), 24))
        for d in ("a", "b"):
            assert run("infer", "--checkpoint", ckpt, "--emit-trace", "--out", tmp_path / d, tmp_path / "in.png") == 0
        for p in (tmp_path / "a").glob("*.png"):
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


class TestEval:
    def test_oracle_checkpoint(self, tmp_path):
        ckpt = passthrough_checkpoint(tmp_path / "m.ckpt")
        root = tmp_path / "data"
        for name in ("setA", "setB"):
            for k in range(2):
                img = synth.procedural_image(np.random.default_rng(k), 20)
                imagecore.write_png(root / name / f"{k}_I.png", img)
                imagecore.write_png(root / name / f"{k}_T.png", img)
        assert run("eval", "--checkpoint", ckpt, "--out", tmp_path / "o", root) == 0
        rows = (tmp_path / "o" / "report.txt").read_text().splitlines()
        assert [r.split()[0] for r in rows] == ["Dataset", "setA", "setB", "Average"]
        assert all(r.split()[2] == "1.000" for r in rows[1:])
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["average"]["count"] == 4

    def test_identity_baseline(self, dataset, tmp_path):
        assert run("eval", "--identity", "--out", tmp_path / "o", dataset) == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["average"]["count"] == 4

    def test_env_default(self, dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("LAR_SIRR_DATA_DIR", str(dataset))
        assert run("eval", "--identity", "--out", tmp_path / "o") == 0

    def test_needs_model(self, dataset, tmp_path):
        assert run("eval", "--out", tmp_path / "o", dataset) == 1

    def test_missing_dataset(self, tmp_path):
        assert run("eval", "--identity", "--out", tmp_path / "o", tmp_path / "missing") == 2


class TestInspect:
    def test_constant(self, tmp_path):
        imagecore.write_png(tmp_path / "flat.png", np.full((12, 10, 3), 0.4))
        assert run("inspect", "--out", tmp_path / "o", tmp_path / "flat.png") == 0
        for suffix in ("inv_edge", "inv_laplacian"):
            out = imagecore.read_png(tmp_path / "o" / f"flat_{suffix}.png")
            assert out.shape == (12, 10, 3)
            assert (out == 1.0).all()
            from PIL import Image

            with Image.open(tmp_path / "o" / f"flat_{suffix}.png") as im:
                assert im.mode == "L"

    def test_step_edge(self, tmp_path):
        img = np.zeros((16, 16, 3))
        img[:, 8:] = 1.0
        imagecore.write_png(tmp_path / "step.png", img)
        assert run("inspect", "--out", tmp_path / "o", tmp_path / "step.png") == 0
        edge = imagecore.read_png(tmp_path / "o" / "step_inv_edge.png")[:, :, 0]
        lap = imagecore.read_png(tmp_path / "o" / "step_inv_laplacian.png")[:, :, 0]
        # forward differences respond at the last dark column; the Laplacian on both sides
        assert (edge[:, 7] == 0).all() and (np.delete(edge, 7, axis=1) == 1).all()
        assert (lap[:, 7] == 0).all() and (lap[:, 8] == 0).all()
        assert (np.delete(lap, [7, 8], axis=1) == 1).all()

    def test_unreadable(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"zz")
        assert run("inspect", "--out", tmp_path / "o", tmp_path / "x.png") == 2
