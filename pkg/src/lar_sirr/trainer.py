"""Optimization loop: Adam updates, Laplacian-kernel gradient clipping,
alternating generator/discriminator steps, fine-tuning and checkpointing.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import imagecore, synth
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .losses import (
    Discriminator,
    LossWeights,
    compute_losses,
    discriminator_term,
    load_hermetic_extractor,
    vgg19_extractor,
)
from .model import ModelConfig, ReflectionRemovalNet, clip_mlsm_gradients_

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class DataError(ValueError):
    """Training data is missing or malformed."""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.5, 0.99)
    batch_size: int = 2
    epochs: int = 60
    samples_per_epoch: int = 4000
    # share of each epoch's samples drawn from synthetic data when real pairs exist
    synthetic_fraction: float = 0.7
    finetune: dict = field(default_factory=lambda: {"lr": 3e-5, "blur_sigma": [0.5, 3.5]})
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int = None
    clip_threshold: float = 0.25
    clip_all: bool = False
    discriminator_channels: int = 16
    # "hermetic" or a path to VGG-19 weights
    extractor: str = "hermetic"
    num_threads: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.finetune = {"lr": float(self.finetune.get("lr", 3e-5)),
                         "blur_sigma": [float(s) for s in self.finetune.get("blur_sigma", (0.5, 3.5))]}
        if self.lr <= 0 or self.finetune["lr"] < 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.samples_per_epoch < 1 or self.epochs < 1:
            raise ValueError("samples_per_epoch and epochs must be >= 1")
        if not 0 <= self.synthetic_fraction <= 1:
            raise ValueError("synthetic_fraction must lie in [0, 1]")

    def split(self, has_synthetic=True, has_real=False):
        """(synthetic, real) sample counts per epoch; they sum to samples_per_epoch."""
        n = self.samples_per_epoch
        if has_synthetic and has_real:
            n_syn = int(round(n * self.synthetic_fraction))
            return n_syn, n - n_syn
        return (n, 0) if has_synthetic else (0, n)

    @property
    def steps_per_epoch(self):
        return math.ceil(self.samples_per_epoch / self.batch_size)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DataSources:
    """Where training samples come from.

    ``triples``: fixed synthetic TrainingTriples (used as-is, cycled).
    ``pool``: natural images for on-the-fly synthesis with the epoch's blur range.
    ``real_pairs``: (I, T) arrays without a known reflection or blend factor.
    """

    triples: list = field(default_factory=list)
    pool: list = field(default_factory=list)
    real_pairs: list = field(default_factory=list)
    augment: synth.AugmentConfig = field(default_factory=synth.AugmentConfig)
    # fixed blur range overriding the epoch schedule (fine-tuning)
    blur_override: tuple = None

    @property
    def has_synthetic(self):
        return bool(self.triples) or bool(self.pool)

    @property
    def has_real(self):
        return bool(self.real_pairs)

    @classmethod
    def from_dirs(cls, synth_dir=None, pool_dir=None, real_dir=None, augment=None):
        src = cls(augment=augment or synth.AugmentConfig())
        if synth_dir is not None:
            try:
                src.triples = synth.load_dataset(synth_dir)
            except (OSError, KeyError, ValueError) as exc:
                raise DataError(f"cannot read synthetic dataset {synth_dir}: {exc}") from exc
        if pool_dir is not None:
            src.pool = load_image_pool(pool_dir)
        if real_dir is not None:
            from .metrics import list_pairs

            pairs = []
            for _, ip, tp in list_pairs(real_dir):
                try:
                    pairs.append((imagecore.read_png(ip), imagecore.read_png(tp)))
                except OSError as exc:
                    log.warning("skipping unreadable real pair %s: %s", ip, exc)
            src.real_pairs = pairs
        if not (src.has_synthetic or src.has_real):
            raise DataError("no training data found")
        return src


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image_pool(pool_dir):
    pool_dir = Path(pool_dir)
    if not pool_dir.is_dir():
        raise DataError(f"image pool {pool_dir} is not a directory")
    images = []
    for p in sorted(pool_dir.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            try:
                images.append(imagecore.read_png(p))
            except OSError as exc:
                log.warning("skipping unreadable image %s: %s", p, exc)
    if not images:
        raise DataError(f"image pool {pool_dir} holds no readable images")
    return images


def epoch_plan(sources, cfg, epoch):
    """Seeded shuffle of this epoch's ("syn" | "real", index) sample list."""
    n_syn, n_real = cfg.split(sources.has_synthetic, sources.has_real)
    items = [("syn", k) for k in range(n_syn)] + [("real", k) for k in range(n_real)]
    rng = np.random.default_rng([cfg.seed, epoch])
    return [items[i] for i in rng.permutation(len(items))], rng


def _sample(sources, cfg, epoch, kind, k):
    n = cfg.samples_per_epoch
    if kind == "syn":
        if sources.triples:
            return sources.triples[k % len(sources.triples)]
        blur = sources.blur_override or synth.blur_range_for_epoch(epoch, cfg.epochs)
        aug = replace(sources.augment, blur_sigma_range=tuple(blur))
        return synth.generate_triple(sources.pool, cfg.seed, epoch * n + k, aug)
    I, T = sources.real_pairs[k % len(sources.real_pairs)]
    size = sources.augment.crop_size
    if I.shape[0] != size or I.shape[1] != size:
        rng = np.random.default_rng([cfg.seed, epoch, k, 1])
        stacked = synth.random_crop(np.concatenate([I, T], axis=2), size, rng)
        I, T = stacked[:, :, :3], stacked[:, :, 3:]
    return synth.TrainingTriple(I, T, np.zeros_like(T), math.nan)


def _batch(triples, dtype=torch.float32):
    def stack(key):
        return torch.from_numpy(np.stack([getattr(t, key).transpose(2, 0, 1) for t in triples])).to(dtype)

    alpha = torch.tensor([t.alpha for t in triples], dtype=dtype)
    return stack("I"), stack("T"), stack("R"), alpha


def make_extractor(name):
    if name in (None, "hermetic"):
        return load_hermetic_extractor()
    return vgg19_extractor(name)


def _json_float(x):
    return x if math.isfinite(x) else repr(x)


@dataclass
class TrainResult:
    model: ReflectionRemovalNet
    discriminator: Discriminator
    log: list
    checkpoint: Path = None
    step: int = 0


class Trainer:
    def __init__(self, model_cfg, train_cfg, sources, loss_weights=None, out_dir=None):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.sources = sources
        self.weights = loss_weights or LossWeights()
        self.out_dir = None if out_dir is None else Path(out_dir)
        torch.set_num_threads(train_cfg.num_threads)
        torch.use_deterministic_algorithms(True)
        torch.manual_seed(train_cfg.seed)
        self.model = ReflectionRemovalNet(model_cfg)
        self.discriminator = Discriminator(train_cfg.discriminator_channels, seed=train_cfg.seed + 1)
        self.extractor = make_extractor(train_cfg.extractor) if self.weights.uses("perceptual") else None
        self.opt_g = self._adam(self.model.parameters(), train_cfg.lr)
        self.opt_d = self._adam(self.discriminator.parameters(), train_cfg.lr)
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.log = []
        self.plan_rng = None
        self._log_fh = None

    def _adam(self, params, lr):
        return torch.optim.Adam([p for p in params if p.requires_grad], lr=lr, betas=self.cfg.betas)

    def set_lr(self, lr):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    # -- persistence -------------------------------------------------------

    def configs(self):
        return {
            "train": self.cfg.to_dict(),
            "loss": self.weights.to_dict(),
            "augment": asdict(self.sources.augment),
        }

    def save(self, path):
        return save_checkpoint(
            path,
            self.model,
            discriminator=self.discriminator,
            optimizers={"generator": self.opt_g, "discriminator": self.opt_d},
            rng=self.plan_rng,
            configs=self.configs(),
            epoch=self.epoch,
            step=self.step,
            extra={"batch_index": self.batch_index},
        )

    def restore(self, ckpt):
        if ckpt.architecture_hash != self.model_cfg.architecture_hash():
            raise CheckpointError(
                f"checkpoint architecture {ckpt.architecture_hash} does not match config "
                f"{self.model_cfg.architecture_hash()}"
            )
        ckpt.load_into(self.model, "model")
        ckpt.load_into(self.discriminator, "discriminator")
        ckpt.load_optimizer(self.opt_g, "generator")
        ckpt.load_optimizer(self.opt_d, "discriminator")
        ckpt.restore_torch_rng()
        self.plan_rng = ckpt.numpy_rng()
        self.step = ckpt.step
        self.epoch = ckpt.epoch
        self.batch_index = ckpt.header.get("extra", {}).get("batch_index", 0)

    # -- one step ----------------------------------------------------------

    def train_step(self, triples):
        I, T, R, alpha = _batch(triples)
        self.model.train()
        trace = self.model(I)
        total, report = compute_losses(
            trace, I, T, R, alpha, self.weights, self.extractor,
            self.discriminator if self.weights.uses("adv") else None,
        )
        if not math.isfinite(report.total):
            self._abort(I, T, R, alpha, report)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        peak = clip_mlsm_gradients_(self.model, self.cfg.clip_threshold, self.cfg.clip_all)
        if peak > self.cfg.clip_threshold:
            raise AssertionError(f"Laplacian-kernel gradient {peak} exceeds {self.cfg.clip_threshold}")
        self.opt_g.step()

        d_loss = 0.0
        if self.weights.uses("adv"):
            self.opt_d.zero_grad(set_to_none=True)
            fake = trace.final.detach()
            d_term = discriminator_term(self.discriminator(T, T), self.discriminator(T, fake))
            if not torch.isfinite(d_term):
                self._abort(I, T, R, alpha, report)
            d_term.backward()
            self.opt_d.step()
            d_loss = float(d_term.detach())
        self.step += 1
        entry = {"step": self.step, "epoch": self.epoch, "mlsm_grad_max": peak, "d_loss": d_loss}
        entry.update({k: _json_float(v) if isinstance(v, float) else v for k, v in report.to_dict().items()})
        self._write_log(entry)
        return entry

    def evaluate_loss(self, triples):
        """Loss report for ``triples`` under the current parameters, without updating anything."""
        I, T, R, alpha = _batch(triples)
        with torch.no_grad():
            trace = self.model(I)
            _, report = compute_losses(
                trace, I, T, R, alpha, self.weights, self.extractor,
                self.discriminator if self.weights.uses("adv") else None,
            )
        return report

    def _write_log(self, entry):
        self.log.append(entry)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._log_fh.flush()

    def _abort(self, I, T, R, alpha, report):
        if self.out_dir is not None:
            self.save(self.out_dir / "last_good.ckpt")
            np.savez(
                self.out_dir / "nonfinite_batch.npz",
                I=I.numpy(), T=T.numpy(), R=R.numpy(), alpha=alpha.numpy(),
                report=json.dumps({k: repr(v) for k, v in report.to_dict().items()}),
            )
        raise NumericalError(f"non-finite loss at step {self.step + 1}: {report.to_dict()}")

    # -- loop --------------------------------------------------------------

    def run(self, max_steps=None):
        """Train until ``epochs`` are done or ``max_steps`` more steps were taken."""
        cfg = self.cfg
        limit = cfg.max_steps if max_steps is None else max_steps
        start = self.step
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "train_log.jsonl", "a")
        try:
            while self.epoch < cfg.epochs:
                plan, self.plan_rng = epoch_plan(self.sources, cfg, self.epoch)
                while self.batch_index < cfg.steps_per_epoch:
                    if limit is not None and self.step - start >= limit:
                        return self.step
                    b = self.batch_index
                    items = plan[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                    self.train_step([_sample(self.sources, cfg, self.epoch, kind, k) for kind, k in items])
                    self.batch_index += 1
                    if cfg.checkpoint_every and self.out_dir is not None and self.step % cfg.checkpoint_every == 0:
                        self.save(self.out_dir / "checkpoints" / f"step_{self.step:06d}.ckpt")
                self.epoch += 1
                self.batch_index = 0
            return self.step
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None

    def finish(self):
        path = None
        if self.out_dir is not None:
            path = self.save(self.out_dir / "model.ckpt")
        return TrainResult(self.model, self.discriminator, self.log, path, self.step)


def train(model_cfg, train_cfg, sources, loss_weights=None, out_dir=None):
    """Train from scratch; returns a TrainResult (final checkpoint at ``out_dir/model.ckpt``)."""
    trainer = Trainer(model_cfg, train_cfg, sources, loss_weights, out_dir)
    trainer.run()
    return trainer.finish()


def finetune(checkpoint, train_cfg, sources, loss_weights=None, out_dir=None, model_cfg=None, max_steps=None):
    """Resume from ``checkpoint`` with the fine-tuning learning rate and blur range.

    ``model_cfg``, when given, must hash-match the checkpoint's architecture.
    Runs ``max_steps`` steps (default: ``train_cfg.max_steps`` or one epoch).
    """
    ckpt = load_checkpoint(checkpoint) if not hasattr(checkpoint, "header") else checkpoint
    stored = ckpt.model_config
    if model_cfg is not None and model_cfg.architecture_hash() != ckpt.architecture_hash:
        raise CheckpointError(
            f"model config hash {model_cfg.architecture_hash()} differs from checkpoint {ckpt.architecture_hash}"
        )
    ft = train_cfg.finetune
    sources = replace(sources, blur_override=tuple(ft["blur_sigma"]))
    trainer = Trainer(model_cfg or stored, train_cfg, sources, loss_weights, out_dir)
    trainer.restore(ckpt)
    trainer.set_lr(ft["lr"])
    steps = max_steps if max_steps is not None else train_cfg.max_steps
    if steps is None:
        steps = train_cfg.steps_per_epoch
    # fine-tuning runs past the original epoch budget
    trainer.cfg = replace(train_cfg, epochs=max(train_cfg.epochs, trainer.epoch + 1 + steps // train_cfg.steps_per_epoch + 1))
    trainer.run(max_steps=steps)
    return trainer.finish()


def load_config_file(path):
    """JSON config with optional "model", "train", "loss" and "augment" sections."""
    data = json.loads(Path(path).read_text())
    unknown = set(data) - {"model", "train", "loss", "augment"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return {
        "model": ModelConfig.from_dict(data.get("model", {})),
        "train": TrainConfig.from_dict(data.get("train", {})),
        "loss": LossWeights.from_dict(data.get("loss", {})),
        "augment": synth.AugmentConfig.from_dict(data.get("augment", {})),
    }
