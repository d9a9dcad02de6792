"""Training losses: composition, perceptual, SSIM/L1 mixture and adversarial terms.

All functions take NCHW torch tensors. Iteration-indexed terms are weighted
by ``theta ** (N - i)`` so later iterations count more.
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import Conv, resize

LOSS_TERMS = ("pixel", "ssim", "perceptual", "comp", "adv")

VGG_TAPS = {"conv2_2": 8, "conv3_1": 11, "conv4_2": 22, "conv5_2": 31}

LOG_FLOOR = 1e-8


class ConfigurationError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_comp: float = 0.4
    lambda_perceptual: float = 0.2
    lambda_mix: float = 0.4
    lambda_adv: float = 0.01
    theta: float = 0.85
    mix_alpha: float = 0.84
    # Perceptual weight per downsampling factor (1, 1/2, 1/4 of full resolution).
    gamma_scales: dict = field(default_factory=lambda: {1: 1.0, 2: 0.8, 4: 0.6})
    gamma: float = 2.2
    pseudo_reflection: bool = True
    drop: tuple = ()

    def __post_init__(self):
        self.gamma_scales = {int(k): float(v) for k, v in self.gamma_scales.items()}
        self.drop = tuple(sorted(set(self.drop)))
        for name in self.drop:
            if name not in LOSS_TERMS:
                raise ConfigurationError(f"unknown loss term {name!r}; expected one of {LOSS_TERMS}")
        for name in ("lambda_comp", "lambda_perceptual", "lambda_mix", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not 0 < self.theta <= 1:
            raise ConfigurationError("theta must lie in (0, 1]")
        if not 0 <= self.mix_alpha <= 1:
            raise ConfigurationError("mix_alpha must lie in [0, 1]")

    def uses(self, term):
        return term not in self.drop

    def to_dict(self):
        d = asdict(self)
        d["gamma_scales"] = {str(k): v for k, v in self.gamma_scales.items()}
        d["drop"] = list(self.drop)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    comp: float = 0.0
    c_term: float = 0.0
    residual: float = 0.0
    perceptual: float = 0.0
    pixel: float = 0.0
    ssim: float = 0.0
    mix: float = 0.0
    adversarial: float = 0.0
    total: float = 0.0
    residual_skipped: bool = False
    pseudo_reflection: bool = False

    def to_dict(self):
        return asdict(self)

    def to_json(self, **extra):
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, sort_keys=True)


def theta_weights(n, theta=0.85):
    """Per-iteration weights theta ** (N - i) for i = 1..N."""
    return [theta ** (n - i) for i in range(1, n + 1)]


def inverse_gamma(x, gamma=2.2):
    return torch.clamp(x, min=0.0) ** gamma


def mse(a, b):
    return torch.mean((a - b) ** 2)


def compose_image(C, T, R):
    """I_hat = (1 - C) * T + R, with C broadcast over channels; not clamped."""
    return (1.0 - C) * T + R


def _masked_mean(values, mask):
    # values: (B, ...) ; mask: (B,) bool
    per_sample = values.flatten(1).mean(dim=1)
    m = mask.to(per_sample.dtype)
    return (per_sample * m).sum() / m.sum()


def loss_confidence(C_list, I, T, R, theta=0.85, mask=None):
    """sum_i theta^(N-i) * MSE(I, (1 - C_i) * T + R)."""
    n = len(C_list)
    total = I.new_zeros(())
    for w, C in zip(theta_weights(n, theta), C_list):
        err = (I - compose_image(C, T, R)) ** 2
        total = total + w * (err.mean() if mask is None else _masked_mean(err, mask))
    return total


def loss_residual(trace, I, T, alpha, theta=0.85, gamma=2.2, forms=(1, 2), mask=None):
    """Linear-model residual in inverse-gamma space.

    Form 1 recomposes ``alpha * T~ + R~_i`` from the ground-truth transmission,
    form 2 ``alpha * T~_i + R~_i`` from the predicted one; both are compared
    with ``I~``. ``alpha`` is a (B,) tensor; samples excluded by ``mask``
    (unknown alpha) contribute nothing. Returns ``(loss, skipped)``.
    """
    if mask is None:
        mask = torch.isfinite(alpha)
    if not bool(mask.any()):
        return I.new_zeros(()), True
    a = torch.where(mask, alpha, torch.zeros_like(alpha)).to(I.dtype).view(-1, 1, 1, 1)
    It = inverse_gamma(I, gamma)
    Tt = inverse_gamma(T, gamma)
    n = len(trace.T)
    total = I.new_zeros(())
    for w, T_hat, R_hat in zip(theta_weights(n, theta), trace.T, trace.R):
        Rt = inverse_gamma(R_hat, gamma)
        if 1 in forms:
            total = total + w * _masked_mean((It - (a * Tt + Rt)) ** 2, mask)
        if 2 in forms:
            total = total + w * _masked_mean((It - (a * inverse_gamma(T_hat, gamma) + Rt)) ** 2, mask)
    return total, False


def loss_pixel(T_list, T, theta=0.85):
    """sum_i theta^(N-i) * mean |T - T_i|."""
    n = len(T_list)
    total = T.new_zeros(())
    for w, T_hat in zip(theta_weights(n, theta), T_list):
        total = total + w * torch.mean(torch.abs(T - T_hat))
    return total


# ---------------------------------------------------------------------------
# SSIM

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim_window_size(h, w, window=SSIM_WINDOW):
    """Window side: 11, shrunk to the largest odd size fitting images smaller than that."""
    size = min(window, h, w)
    return size if size % 2 else size - 1


def gaussian_window(size, sigma=SSIM_SIGMA, dtype=torch.float64):
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(ax * ax) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(x, y, data_range=1.0, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Local SSIM over all valid window positions, per channel. x, y: (B, C, H, W)."""
    if x.shape != y.shape:
        raise ValueError(f"ssim inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    channels = x.shape[1]
    size = ssim_window_size(x.shape[-2], x.shape[-1], window)
    g = gaussian_window(size, sigma, x.dtype).to(x.device)
    gh = g.view(1, 1, 1, size).expand(channels, 1, 1, size)
    gv = g.view(1, 1, size, 1).expand(channels, 1, size, 1)

    def filt(z):
        return F.conv2d(F.conv2d(z, gh, groups=channels), gv, groups=channels)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y, data_range=1.0):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03).

    Accepts NCHW tensors (returns a differentiable scalar tensor) or HWC
    numpy images (returns a float computed in double precision).
    """
    if isinstance(x, torch.Tensor):
        return ssim_map(x, y, data_range).mean()
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ValueError(f"ssim inputs differ in shape: {xa.shape} vs {ya.shape}")
    if xa.ndim == 2:
        xa, ya = xa[:, :, None], ya[:, :, None]
    xt = torch.from_numpy(np.ascontiguousarray(xa.transpose(2, 0, 1)))[None]
    yt = torch.from_numpy(np.ascontiguousarray(ya.transpose(2, 0, 1)))[None]
    return float(ssim_map(xt, yt, data_range).mean())


def loss_ssim(T_list, T, theta=0.85):
    """sum_i theta^(N-i) * (1 - SSIM(T, T_i))."""
    n = len(T_list)
    total = T.new_zeros(())
    for w, T_hat in zip(theta_weights(n, theta), T_list):
        total = total + w * (1.0 - ssim(T, T_hat))
    return total


def loss_mix(T_list, T, weights):
    """mix_alpha * SSIM term + (1 - mix_alpha) * pixel term; dropped terms count as zero."""
    pixel = loss_pixel(T_list, T, weights.theta) if weights.uses("pixel") else T.new_zeros(())
    structural = loss_ssim(T_list, T, weights.theta) if weights.uses("ssim") else T.new_zeros(())
    mix = weights.mix_alpha * structural + (1.0 - weights.mix_alpha) * pixel
    return mix, pixel, structural


# ---------------------------------------------------------------------------
# Perceptual features


class TapExtractor(nn.Module):
    """Frozen sequential feature stack exposing named intermediate taps."""

    def __init__(self, features, taps, mean=None, std=None):
        super().__init__()
        self.features = features
        self.taps = dict(taps)
        depth = len(features)
        for name, idx in self.taps.items():
            if not 0 <= idx < depth:
                raise ConfigurationError(f"tap {name!r} at layer {idx} is outside a {depth}-layer stack")
        self.last = max(self.taps.values())
        if mean is not None:
            self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
            self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        else:
            self.mean = None
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def tap_names(self):
        return tuple(self.taps)

    def forward(self, x):
        if self.mean is not None:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        by_index = {idx: name for name, idx in self.taps.items()}
        out = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in by_index:
                out[by_index[i]] = x
            if i == self.last:
                break
        return [out[name] for name in self.taps]


HERMETIC_SEED = 20210401
HERMETIC_WIDTHS = (16, 32, 64, 128)
HERMETIC_TAPS = ("stage1", "stage2", "stage3", "stage4")
_GOLDEN = Path(__file__).parent / "data" / "hermetic_extractor.npz"


def hermetic_extractor_from_seed(seed=HERMETIC_SEED, widths=HERMETIC_WIDTHS):
    """Untrained stride-2 conv stack with He-normal weights drawn from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    layers = []
    taps = {}
    cin = 3
    for k, w in enumerate(widths):
        conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
            conv.bias.zero_()
        layers += [conv, nn.ReLU()]
        taps[HERMETIC_TAPS[k]] = len(layers) - 1
        cin = w
    return TapExtractor(nn.Sequential(*layers), taps)


def save_extractor(extractor, path):
    arrays = {k: v.detach().cpu().numpy().astype("<f4") for k, v in extractor.features.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_hermetic_extractor(path=_GOLDEN):
    """The frozen perceptual stack shipped with the package."""
    ext = hermetic_extractor_from_seed()
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k].astype(np.float32)) for k in data.files}
    ext.features.load_state_dict(state)
    return ext


def vgg19_extractor(weights=None, taps=VGG_TAPS):
    """VGG-19 feature taps from a user-supplied state-dict file (or a constructed module)."""
    try:
        from torchvision.models import vgg19
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ConfigurationError("the VGG-19 extractor needs torchvision") from exc
    if isinstance(weights, nn.Module):
        net = weights
    else:
        net = vgg19(weights=None)
        if weights is not None:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
    return TapExtractor(net.features, taps, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


def validate_extractor(extractor, required=None):
    names = getattr(extractor, "tap_names", None)
    if names is None:
        raise ConfigurationError("perceptual extractor must expose tap_names")
    if required is not None:
        missing = [t for t in required if t not in names]
        if missing:
            raise ConfigurationError(f"perceptual extractor lacks taps {missing}")


def loss_perceptual(extractor, T, trace, gamma_scales=None, required_taps=None):
    """sum_j gamma_j * sum_taps MSE(feat(T^j), feat(T_N^j)) over scales 1, 1/2, 1/4."""
    validate_extractor(extractor, required_taps)
    gamma_scales = gamma_scales or {1: 1.0, 2: 0.8, 4: 0.6}
    preds = trace.multiscale(-1)
    h, w = T.shape[-2:]
    total = T.new_zeros(())
    for factor, g in gamma_scales.items():
        target = resize(T, (h // factor, w // factor))
        with torch.no_grad():
            f_target = extractor(target)
        f_pred = extractor(preds[factor])
        if len(f_pred) != len(extractor.tap_names):
            raise ConfigurationError("extractor returned fewer features than taps")
        total = total + g * sum(mse(a, b) for a, b in zip(f_target, f_pred))
    return total


# ---------------------------------------------------------------------------
# Adversarial


class Discriminator(nn.Module):
    """Patch discriminator on [T, candidate]; returns per-sample mean probability."""

    def __init__(self, channels=16, in_channels=6, seed=1, std=0.02):
        super().__init__()
        widths = [channels, 2 * channels, 4 * channels, 8 * channels]
        layers = []
        cin = in_channels
        for w in widths:
            layers += [Conv(cin, w, stride=2), nn.LeakyReLU(0.2)]
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = Conv(cin, 1)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    def logits(self, reference, candidate):
        return self.head(self.body(torch.cat([reference, candidate], dim=1)))

    def forward(self, reference, candidate):
        return probability_from_logits(self.logits(reference, candidate))


def probability_from_logits(logits):
    return torch.sigmoid(logits).flatten(1).mean(dim=1)


def generator_term(prob):
    """-log D(T, T_hat), averaged over the batch."""
    return -torch.log(torch.clamp(prob, min=LOG_FLOOR)).mean()


def discriminator_term(prob_real, prob_fake):
    """-log D(T, T) - log(1 - D(T, T_hat)), averaged over the batch."""
    real = -torch.log(torch.clamp(prob_real, min=LOG_FLOOR))
    fake = -torch.log(torch.clamp(1.0 - prob_fake, min=LOG_FLOOR))
    return (real + fake).mean()


def loss_adversarial(discriminator, T, T_hat):
    """Return ``(generator_term, discriminator_term)``; the latter sees a detached T_hat."""
    g = generator_term(discriminator(T, T_hat))
    d = discriminator_term(discriminator(T, T), discriminator(T, T_hat.detach()))
    return g, d


# ---------------------------------------------------------------------------
# Total


def loss_total(report, weights=None):
    """lambda_comp * comp + lambda_p * perceptual + lambda_mix * mix + lambda_adv * adversarial."""
    weights = weights or LossWeights()
    get = report.get if isinstance(report, dict) else (lambda k: getattr(report, k))
    return (
        weights.lambda_comp * get("comp")
        + weights.lambda_perceptual * get("perceptual")
        + weights.lambda_mix * get("mix")
        + weights.lambda_adv * get("adversarial")
    )


def compute_losses(trace, I, T, R, alpha, weights, extractor=None, discriminator=None):
    """Every enabled term for one batch; returns ``(total_tensor, LossReport)``.

    ``alpha`` is a (B,) tensor with NaN for real-world pairs, whose R is
    replaced by the pseudo reflection clamp(I - T, 0, 1) when enabled.
    """
    synthetic = torch.isfinite(alpha)
    zero = I.new_zeros(())
    report = LossReport()
    terms = {"comp": zero, "perceptual": zero, "mix": zero, "adversarial": zero}

    if weights.uses("comp"):
        real = ~synthetic
        if bool(real.any()):
            pseudo = torch.clamp(I - T, 0.0, 1.0)
            R = torch.where(real.view(-1, 1, 1, 1), pseudo, R)
            report.pseudo_reflection = weights.pseudo_reflection
        conf_mask = None if weights.pseudo_reflection or not bool(real.any()) else synthetic
        if conf_mask is not None and not bool(conf_mask.any()):
            c_term = zero
        else:
            c_term = loss_confidence(trace.C, I, T, R, weights.theta, conf_mask)
        residual, skipped = loss_residual(trace, I, T, alpha, weights.theta, weights.gamma, mask=synthetic)
        report.residual_skipped = skipped
        terms["comp"] = c_term + residual
        report.c_term = float(c_term.detach())
        report.residual = float(residual.detach())

    if weights.uses("perceptual") and extractor is not None:
        terms["perceptual"] = loss_perceptual(extractor, T, trace, weights.gamma_scales)

    if weights.uses("pixel") or weights.uses("ssim"):
        mix, pixel, structural = loss_mix(trace.T, T, weights)
        terms["mix"] = mix
        report.pixel = float(pixel.detach())
        report.ssim = float(structural.detach())

    if weights.uses("adv") and discriminator is not None:
        terms["adversarial"] = generator_term(discriminator(T, trace.final))

    total = loss_total(terms, weights)
    report.comp = float(terms["comp"].detach())
    report.perceptual = float(terms["perceptual"].detach())
    report.mix = float(terms["mix"].detach())
    report.adversarial = float(terms["adversarial"].detach())
    report.total = float(total.detach())
    return total, report
