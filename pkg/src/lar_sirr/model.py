"""Recurrent two-stage reflection removal network.

Each iteration runs a reflection stage (Laplacian pyramid features, a
reflection-confidence head, feature suppression and a convolutional LSTM)
followed by a transmission stage (an attention encoder-decoder over
``[I, T_prev, R, 1 - C]``). ``T_0`` is the input image.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LAPLACIAN_KERNEL = ((0.0, -1.0, 0.0), (-1.0, 4.0, -1.0), (0.0, -1.0, 0.0))

FEATURE_MODES = ("laplacian", "edge")
RCMAP_SOURCES = ("mlsm", "image_features")

# CLI ablation names -> ModelConfig overrides.
ABLATIONS = {
    "wo_rdm_tsm": {"use_rdm": False, "use_tsm": False},
    "wo_tsm": {"use_tsm": False},
    "wo_lstm": {"use_lstm": False},
    "c_from_ift": {"rcmap_source": "image_features"},
    "slsm": {"mlsm_scales": (1,)},
    "fix_mlsm": {"mlsm_learnable": False},
    "edge": {"feature_mode": "edge"},
}


@dataclass
class ModelConfig:
    base_channels: int = 16
    n_iterations: int = 3
    mlsm_learnable: bool = True
    # Downsampling factors of the Laplacian pyramid: 1, 2, 4, 8 mean scales 1, 1/2, 1/4, 1/8.
    mlsm_scales: tuple = (1, 2, 4, 8)
    use_rdm: bool = True
    use_tsm: bool = True
    use_lstm: bool = True
    feature_mode: str = "laplacian"
    rcmap_source: str = "mlsm"
    rdm_blocks: int = 3
    tsm_blocks: int = 3
    head_blocks: int = 4
    encoder_layers: int = 3
    autoencoder_levels: int = 3
    se_reduction: int = 4
    cbam_reduction: int = 4
    residual_output: bool = True
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        scales = []
        for s in self.mlsm_scales:
            s = float(s)
            factor = round(1 / s) if s < 1 else round(s)
            if factor not in (1, 2, 4, 8):
                raise ValueError(f"unsupported pyramid scale {s}")
            scales.append(int(factor))
        self.mlsm_scales = tuple(sorted(set(scales)))
        if 1 not in self.mlsm_scales:
            raise ValueError("mlsm_scales must include the full-resolution scale 1")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.rcmap_source not in RCMAP_SOURCES:
            raise ValueError(f"rcmap_source must be one of {RCMAP_SOURCES}")
        if self.autoencoder_levels < 2:
            raise ValueError("autoencoder_levels must be at least 2 for the 1/4 side output")

    @property
    def size_multiple(self):
        return max(max(self.mlsm_scales), 2 ** self.autoencoder_levels)

    def to_dict(self):
        d = asdict(self)
        d["mlsm_scales"] = list(self.mlsm_scales)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_ablations(self, names):
        d = self.to_dict()
        for name in names:
            if name not in ABLATIONS:
                raise KeyError(name)
            d.update(ABLATIONS[name])
        return ModelConfig.from_dict(d)

    def architecture_hash(self):
        """Digest of every field that shapes the parameter set (the init seed excluded)."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("init_std")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _pad(x, p):
    # Reflection needs p < size; tiny maps deep in the encoder fall back to replication.
    if p == 0:
        return x
    mode = "reflect" if min(x.shape[-2:]) > p else "replicate"
    return F.pad(x, (p, p, p, p), mode=mode)


class Conv(nn.Module):
    """Reflect-padded convolution."""

    def __init__(self, cin, cout, k=3, stride=1, bias=True):
        super().__init__()
        self.k = k
        self.stride = stride
        self.conv = nn.Conv2d(cin, cout, k, stride=stride, padding=0, bias=bias)

    def forward(self, x):
        return self.conv(_pad(x, self.k // 2))


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        mid = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, mid, 1)
        self.fc2 = nn.Conv2d(mid, channels, 1)

    def gate(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)


class SEResBlock(nn.Module):
    """conv-PReLU-conv, squeeze-excitation reweighting, identity skip, PReLU."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.conv1 = Conv(channels, channels)
        self.act1 = nn.PReLU(channels)
        self.conv2 = Conv(channels, channels)
        self.se = SqueezeExcite(channels, reduction)
        self.act_out = nn.PReLU(channels)

    def forward(self, x):
        y = self.conv2(self.act1(self.conv1(x)))
        return self.act_out(x + self.se(y))


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        mid = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, mid, 1, bias=False)
        self.fc2 = nn.Conv2d(mid, channels, 1, bias=False)

    def forward(self, x):
        avg = self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3), keepdim=True))))
        mx = self.fc2(F.relu(self.fc1(x.amax(dim=(2, 3), keepdim=True))))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = Conv(2, 1, kernel_size, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def gates(self, x):
        cg = self.channel(x)
        y = x * cg
        return cg, self.spatial(y)

    def forward(self, x):
        y = x * self.channel(x)
        return y * self.spatial(y)


class ConvLSTMCell(nn.Module):
    def __init__(self, cin, hidden):
        super().__init__()
        self.hidden = hidden
        self.gates = Conv(cin + hidden, 4 * hidden)

    def zero_state(self, x):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden, h, w)
        return z, z

    def forward(self, x, state=None):
        h, c = self.zero_state(x) if state is None else state
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def resize(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _check_divisible(x, multiple):
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by {multiple}")


class MultiScaleLaplacian(nn.Module):
    """Depthwise 3x3 Laplacian-initialised kernels applied on a bilinear pyramid."""

    def __init__(self, channels=6, scales=(1, 2, 4, 8), learnable=True):
        super().__init__()
        self.channels = channels
        self.scales = tuple(scales)
        base = torch.tensor(LAPLACIAN_KERNEL).expand(channels, 1, 3, 3)
        for s in self.scales:
            p = nn.Parameter(base.clone(), requires_grad=learnable)
            self.register_parameter(f"kernel_s{s}", p)

    @property
    def out_channels(self):
        return self.channels * len(self.scales)

    def kernel(self, s):
        return getattr(self, f"kernel_s{s}")

    def forward(self, x):
        _check_divisible(x, max(self.scales))
        size = x.shape[-2:]
        outs = []
        for s in self.scales:
            xs = x if s == 1 else resize(x, (size[0] // s, size[1] // s))
            lap = F.conv2d(_pad(xs, 1), self.kernel(s).to(x.dtype), groups=self.channels)
            outs.append(resize(lap, size))
        return torch.cat(outs, dim=1)


def gradient_magnitude(x, eps=1e-12):
    """Forward-difference |grad| per channel, last row/column extended by odd reflection."""
    dx = x[..., :, 1:] - x[..., :, :-1]
    dx = torch.cat([dx, dx[..., :, -1:]], dim=-1)
    dy = x[..., 1:, :] - x[..., :-1, :]
    dy = torch.cat([dy, dy[..., -1:, :]], dim=-2)
    return torch.sqrt(dx * dx + dy * dy + eps)


class MultiScaleEdges(nn.Module):
    """Parameter-free counterpart of the Laplacian pyramid using gradient magnitudes."""

    def __init__(self, channels=6, scales=(1, 2, 4, 8)):
        super().__init__()
        self.channels = channels
        self.scales = tuple(scales)

    @property
    def out_channels(self):
        return self.channels * len(self.scales)

    def forward(self, x):
        _check_divisible(x, max(self.scales))
        size = x.shape[-2:]
        outs = []
        for s in self.scales:
            xs = x if s == 1 else resize(x, (size[0] // s, size[1] // s))
            outs.append(resize(gradient_magnitude(xs), size))
        return torch.cat(outs, dim=1)


class ReflectionDetector(nn.Module):
    """Confidence head: conv, SE residual blocks, conv to one channel, sigmoid."""

    def __init__(self, cin, channels, blocks=3, reduction=4):
        super().__init__()
        self.entry = Conv(cin, channels)
        self.entry_act = nn.PReLU(channels)
        self.blocks = nn.Sequential(*[SEResBlock(channels, reduction) for _ in range(blocks)])
        self.out = Conv(channels, 1)

    def forward(self, x):
        return torch.sigmoid(self.out(self.blocks(self.entry_act(self.entry(x)))))


class FeatureSuppression(nn.Module):
    """Refine Laplacian features with SE residual blocks, then mask them by the confidence map."""

    def __init__(self, cin, channels, blocks=3, reduction=4):
        super().__init__()
        self.entry = Conv(cin, channels)
        self.entry_act = nn.PReLU(channels)
        self.blocks = nn.Sequential(*[SEResBlock(channels, reduction) for _ in range(blocks)])

    def refine(self, feats):
        return self.blocks(self.entry_act(self.entry(feats)))

    def forward(self, feats, confidence):
        return self.refine(feats) * confidence


class ReflectionStage(nn.Module):
    """Predict the reflection layer and the reflection confidence map."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        rdm_reads_pyramid = cfg.use_rdm and cfg.rcmap_source == "mlsm"
        need_laplacian = cfg.use_tsm or (rdm_reads_pyramid and cfg.feature_mode == "laplacian")
        self.mlsm = MultiScaleLaplacian(6, cfg.mlsm_scales, cfg.mlsm_learnable) if need_laplacian else None
        self.edges = MultiScaleEdges(6, cfg.mlsm_scales) if rdm_reads_pyramid and cfg.feature_mode == "edge" else None
        pyramid_ch = 6 * len(cfg.mlsm_scales)

        layers = []
        cin = 6
        for _ in range(cfg.encoder_layers):
            layers += [Conv(cin, c), nn.ReLU()]
            cin = c
        self.encoder = nn.Sequential(*layers)

        self.rdm = None
        if cfg.use_rdm:
            rdm_in = c if cfg.rcmap_source == "image_features" else pyramid_ch
            self.rdm = ReflectionDetector(rdm_in, c, cfg.rdm_blocks, cfg.se_reduction)
        self.tsm = FeatureSuppression(pyramid_ch, c, cfg.tsm_blocks, cfg.se_reduction) if cfg.use_tsm else None

        cell_in = c + (c if cfg.use_tsm else 0)
        self.hidden = 2 * c
        if cfg.use_lstm:
            self.cell = ConvLSTMCell(cell_in, self.hidden)
        else:
            self.cell = nn.Sequential(Conv(cell_in, self.hidden), nn.ReLU())
        self.head = nn.Sequential(
            Conv(self.hidden, c),
            nn.PReLU(c),
            *[SEResBlock(c, cfg.se_reduction) for _ in range(cfg.head_blocks)],
            Conv(c, 3),
        )

    def forward(self, I, T_prev, state=None):
        x = torch.cat([I, T_prev], dim=1)
        feats = self.encoder(x)
        lap = self.mlsm(x) if self.mlsm is not None else None
        if self.rdm is not None:
            if self.cfg.rcmap_source == "image_features":
                src = feats
            elif self.edges is not None:
                src = self.edges(x)
            else:
                src = lap
            C = self.rdm(src)
        else:
            C = torch.ones_like(I[:, :1])
        parts = [feats]
        if self.tsm is not None:
            parts.append(self.tsm(lap, C))
        z = torch.cat(parts, dim=1)
        if self.cfg.use_lstm:
            h, cell = self.cell(z, state)
            state = (h, cell)
        else:
            h = self.cell(z)
            state = None
        R = torch.clamp(self.head(h), 0.0, 1.0)
        return R, C, state


class TransmissionStage(nn.Module):
    """Encoder-decoder with CBAM after every conv+ReLU; emits 1/4, 1/2 and full-res outputs."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        levels = cfg.autoencoder_levels
        widths = [c * min(2 ** lvl, 4) for lvl in range(levels + 1)]
        self.widths = widths
        self.enc = nn.ModuleList()
        cin = 10
        for lvl, w in enumerate(widths):
            stride = 1 if lvl == 0 else 2
            self.enc.append(nn.ModuleDict({
                "conv": Conv(cin, w, stride=stride),
                "cbam": CBAM(w, cfg.cbam_reduction),
            }))
            cin = w
        self.dec = nn.ModuleList()
        self.side = nn.ModuleDict()
        for lvl in range(levels - 1, -1, -1):
            w = widths[lvl]
            self.dec.append(nn.ModuleDict({
                "conv": Conv(cin + w, w),
                "cbam": CBAM(w, cfg.cbam_reduction),
            }))
            cin = w
            if lvl <= 2:
                self.side[f"out{2 ** lvl}"] = Conv(w, 3)

    def forward(self, I, T_prev, R, inv_C):
        _check_divisible(I, 2 ** self.cfg.autoencoder_levels)
        x = torch.cat([I, T_prev, R, inv_C], dim=1)
        skips = []
        for block in self.enc:
            x = block["cbam"](F.relu(block["conv"](x)))
            skips.append(x)
        x = skips.pop()
        outputs = {}
        for block in self.dec:
            skip = skips.pop()
            x = torch.cat([resize(x, skip.shape[-2:]), skip], dim=1)
            x = block["cbam"](F.relu(block["conv"](x)))
            factor = I.shape[-1] // x.shape[-1]
            key = f"out{factor}"
            if key in self.side:
                y = self.side[key](x)
                if self.cfg.residual_output:
                    y = y + resize(T_prev, x.shape[-2:])
                outputs[factor] = torch.clamp(y, 0.0, 1.0)
        return outputs[1], outputs[2], outputs[4]


@dataclass
class IterationTrace:
    """Per-iteration outputs; index ``i`` holds iteration ``i + 1``."""

    T: list = field(default_factory=list)
    R: list = field(default_factory=list)
    C: list = field(default_factory=list)
    T_half: list = field(default_factory=list)
    T_quarter: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def __len__(self):
        return len(self.T)

    @property
    def final(self):
        return self.T[-1]

    def multiscale(self, i=-1):
        """{1: T_i, 2: T_i at 1/2, 4: T_i at 1/4}."""
        return {1: self.T[i], 2: self.T_half[i], 4: self.T_quarter[i]}


class ReflectionRemovalNet(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.stage1 = ReflectionStage(self.cfg)
        self.stage2 = TransmissionStage(self.cfg)
        init_weights(self, self.cfg.init_std, self.cfg.seed)

    def forward(self, I, n_iterations=None):
        n = n_iterations or self.cfg.n_iterations
        _check_divisible(I, self.cfg.size_multiple)
        trace = IterationTrace()
        T_prev = I
        state = None
        for _ in range(n):
            R, C, state = self.stage1(I, T_prev, state if self.cfg.use_lstm else None)
            T, T_half, T_quarter = self.stage2(I, T_prev, R, 1.0 - C)
            trace.T.append(T)
            trace.R.append(R)
            trace.C.append(C)
            trace.T_half.append(T_half)
            trace.T_quarter.append(T_quarter)
            trace.states.append(state)
            T_prev = T
        return trace


def init_weights(module, std=0.02, seed=0):
    """Normal(0, std) conv weights, zero biases; Laplacian kernels and PReLU slopes untouched."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in module.named_parameters():
        if ".mlsm." in f".{name}" or _is_prelu(module, name):
            continue
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def _is_prelu(module, name):
    owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
    return isinstance(owner, nn.PReLU)


def is_mlsm_path(path):
    return ".mlsm." in f".{path}"


def model_params(model):
    """Stable path -> parameter tensor (including frozen Laplacian kernels)."""
    return dict(model.named_parameters())


def count_trainable(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def mlsm_kernels(model):
    return {k: v for k, v in model.named_parameters() if is_mlsm_path(k)}


def clip_mlsm_gradients(grads, threshold=0.25, clip_all=False):
    """Clamp every Laplacian-kernel gradient element-wise to [-threshold, threshold].

    ``grads`` maps parameter paths to gradient arrays/tensors; other entries
    pass through untouched unless ``clip_all`` is set.
    """
    out = {}
    for path, g in grads.items():
        if g is not None and (clip_all or is_mlsm_path(path)):
            if isinstance(g, torch.Tensor):
                g = g.clamp(-threshold, threshold)
            else:
                g = np.clip(g, -threshold, threshold)
        out[path] = g
    return out


def clip_mlsm_gradients_(model, threshold=0.25, clip_all=False):
    """In-place variant on ``.grad``; returns the max |grad| over Laplacian kernels after clipping."""
    peak = 0.0
    for path, p in model.named_parameters():
        if p.grad is None:
            continue
        if clip_all or is_mlsm_path(path):
            p.grad.clamp_(-threshold, threshold)
        if is_mlsm_path(path):
            peak = max(peak, float(p.grad.abs().max()))
    return peak
