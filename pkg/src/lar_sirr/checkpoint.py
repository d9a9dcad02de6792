"""Deterministic checkpoint archives.

A checkpoint is a zip holding ``header.json`` (configs, hashes, counters,
optimizer hyperparameters, RNG state) and one ``.npy`` per tensor under
``arrays/``. Entries use a fixed timestamp so identical state gives
identical bytes; writes go through a temp file and an atomic rename.
"""
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ReflectionRemovalNet

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _tensor_to_array(t):
    a = t.detach().cpu().numpy()
    # explicit little-endian storage
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, np.array(arr, order="C", copy=True), allow_pickle=False)
    return buf.getvalue()


def _optimizer_payload(opt, prefix, arrays):
    sd = opt.state_dict()
    state_meta = {}
    for idx, st in sd["state"].items():
        entry = {}
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                key = f"{prefix}/state/{idx}/{k}"
                arrays[key] = _tensor_to_array(v)
                entry[k] = {"array": key}
            else:
                entry[k] = v
        state_meta[str(idx)] = entry
    return {"state": state_meta, "param_groups": sd["param_groups"]}


def _optimizer_state(meta, arrays):
    state = {}
    for idx, entry in meta["state"].items():
        st = {}
        for k, v in entry.items():
            st[k] = torch.from_numpy(arrays[v["array"]].copy()) if isinstance(v, dict) and "array" in v else v
        state[int(idx)] = st
    # JSON turns tuples (e.g. Adam betas) into lists; restore them
    groups = [{k: tuple(v) if isinstance(v, list) and k != "params" else v for k, v in g.items()}
              for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


@dataclass
class Checkpoint:
    header: dict
    arrays: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return ModelConfig.from_dict(self.header["model_config"])

    @property
    def architecture_hash(self):
        return self.header["architecture_hash"]

    @property
    def epoch(self):
        return self.header["epoch"]

    @property
    def step(self):
        return self.header["step"]

    def state_dict(self, prefix):
        p = prefix + "/"
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(p)}

    def build_model(self):
        model = ReflectionRemovalNet(self.model_config)
        self.load_into(model, "model")
        return model

    def load_into(self, module, prefix):
        missing, unexpected = module.load_state_dict(self.state_dict(prefix), strict=False)
        if missing or unexpected:
            raise CheckpointError(f"{prefix}: missing {missing}, unexpected {unexpected}")

    def load_optimizer(self, opt, name):
        meta = self.header.get("optimizers", {}).get(name)
        if meta is None:
            raise CheckpointError(f"checkpoint has no optimizer state {name!r}")
        opt.load_state_dict(_optimizer_state(meta, self.arrays))

    def numpy_rng(self):
        state = self.header.get("numpy_rng")
        if state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = state
        return rng

    def restore_torch_rng(self):
        if "torch_rng" in self.arrays:
            torch.set_rng_state(torch.from_numpy(self.arrays["torch_rng"].copy()))


def save_checkpoint(path, model, *, discriminator=None, optimizers=None, rng=None, configs=None, epoch=0, step=0, extra=None):
    """Write a checkpoint archive atomically; returns the path.

    ``optimizers`` maps names (e.g. "generator") to torch optimizers,
    ``rng`` is the numpy Generator driving data sampling and ``configs``
    holds extra JSON-serializable config dicts.
    """
    arrays = {}
    for k, v in model.state_dict().items():
        arrays[f"model/{k}"] = _tensor_to_array(v)
    if discriminator is not None:
        for k, v in discriminator.state_dict().items():
            arrays[f"discriminator/{k}"] = _tensor_to_array(v)
    opt_meta = {}
    for name, opt in sorted((optimizers or {}).items()):
        opt_meta[name] = _optimizer_payload(opt, f"optim/{name}", arrays)
    arrays["torch_rng"] = torch.get_rng_state().numpy()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "architecture_hash": model.cfg.architecture_hash(),
        "configs": configs or {},
        "epoch": int(epoch),
        "step": int(step),
        "extra": extra or {},
        "optimizers": opt_meta,
        "numpy_rng": None if rng is None else rng.bit_generator.state,
        "arrays": sorted(arrays),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
                _write_entry(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
                for key in sorted(arrays):
                    _write_entry(zf, f"arrays/{key}.npy", _npy_bytes(arrays[key]))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _write_entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            arrays = {}
            for key in header["arrays"]:
                with zf.open(f"arrays/{key}.npy") as fh:
                    arrays[key] = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    return Checkpoint(header, arrays)
