"""Synthetic training triples: linear blending of a transmission and a reflection image.

A triple is produced by degrading the reflection (ghosting, or Gaussian blur,
optionally of a grayscale copy), scaling it by a smooth reflection-rate map,
blending ``I = clamp(alpha * T + R)``, gamma-correcting all three images and
applying one shared rotation/flip.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import imagecore
from .imagecore import DEFAULT_GAMMA

BRANCHES = ("ghost", "gray", "blur")

BLUR_RANGE_START = (2.0, 5.0)
BLUR_RANGE_END = (0.8, 5.8)
FINETUNE_BLUR_RANGE = (0.5, 3.5)


@dataclass
class AugmentConfig:
    p_ghost: float = 0.2
    p_gray: float = 0.3
    blur_sigma_range: tuple = BLUR_RANGE_START
    ghost_kernel_size: int = 9
    ghost_offset_range: tuple = (2, 4)
    beta_source_size: int = 560
    # The reflection-rate map spans +-beta_sigma standard deviations across its width.
    beta_sigma: float = 3.0
    crop_size: int = 256
    alpha_range: tuple = (0.7, 1.0)
    gamma: float = DEFAULT_GAMMA
    blur_grayscale: bool = True

    def __post_init__(self):
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.alpha_range = tuple(float(v) for v in self.alpha_range)
        self.ghost_offset_range = tuple(int(v) for v in self.ghost_offset_range)
        if not (0 <= self.p_ghost <= 1 and 0 <= self.p_gray <= 1):
            raise ValueError("branch probabilities must lie in [0, 1]")
        if self.p_ghost + self.p_gray > 1:
            raise ValueError("p_ghost + p_gray must not exceed 1")
        lo, hi = self.blur_sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid blur_sigma_range {self.blur_sigma_range}")
        if self.ghost_kernel_size % 2 == 0:
            raise ValueError("ghost_kernel_size must be odd")
        r = self.ghost_kernel_size // 2
        if not 1 <= self.ghost_offset_range[0] <= self.ghost_offset_range[1] <= r:
            raise ValueError(f"ghost offsets must lie within the {self.ghost_kernel_size}x{self.ghost_kernel_size} support")
        if self.crop_size > self.beta_source_size:
            raise ValueError("crop_size must not exceed beta_source_size")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AugmentRecord:
    branch: str
    alpha: float
    sigma: float
    ghost_offset: tuple | None
    beta_origin: tuple
    rotation: int
    flip: bool
    seed: list | None = None

    def to_dict(self):
        d = asdict(self)
        d["ghost_offset"] = list(self.ghost_offset) if self.ghost_offset is not None else None
        d["beta_origin"] = list(self.beta_origin)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("ghost_offset") is not None:
            d["ghost_offset"] = tuple(d["ghost_offset"])
        d["beta_origin"] = tuple(d["beta_origin"])
        return cls(**d)


@dataclass
class TrainingTriple:
    I: np.ndarray
    T: np.ndarray
    R: np.ndarray
    alpha: float
    record: AugmentRecord | None = field(default=None)

    def __post_init__(self):
        if not (self.I.shape == self.T.shape == self.R.shape):
            raise ValueError(f"triple images differ in shape: {self.I.shape}, {self.T.shape}, {self.R.shape}")


def linear_synthesize(T, R, alpha):
    """I = clamp(alpha * T + R, 0, 1)."""
    T = imagecore.as_image(T)
    R = imagecore.as_image(R)
    if T.shape != R.shape:
        raise ValueError(f"T and R differ in shape: {T.shape} vs {R.shape}")
    return np.clip(alpha * T + R, 0.0, 1.0)


def gaussian_kernel(sigma):
    """Isotropic Gaussian truncated at radius ceil(3 sigma), taps summing to 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax * ax) / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def blur_range_for_epoch(epoch, total_epochs=60, start=BLUR_RANGE_START, end=BLUR_RANGE_END):
    """Blur sigma range widened linearly from ``start`` to ``end`` over ``total_epochs``."""
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return tuple(a + (b - a) * frac for a, b in zip(start, end))


@lru_cache(maxsize=8)
def _beta_source(size, nsig):
    # Pixel centres sampled on [-nsig, nsig] standard deviations.
    ax = -nsig + (np.arange(size) + 0.5) * (2 * nsig / size)
    g = np.exp(-(ax * ax) / 2)
    m = np.outer(g, g)
    m = m / m.max()
    m.setflags(write=False)
    return m


def beta_source_map(cfg):
    """The full single-channel reflection-rate map, peak 1 at the centre."""
    return _beta_source(cfg.beta_source_size, float(cfg.beta_sigma))


def make_beta_map(rng, cfg, size=None, origin=None):
    """Uniformly random crop of the Gaussian reflection-rate map, replicated to 3 channels.

    Returns ``(beta, origin)`` where ``origin`` is the (row, col) of the crop corner.
    """
    src = beta_source_map(cfg)
    h, w = size if size is not None else (cfg.crop_size, cfg.crop_size)
    n = src.shape[0]
    if h > n or w > n:
        raise ValueError(f"crop {h}x{w} exceeds the {n}x{n} reflection-rate map")
    if origin is None:
        origin = (int(rng.integers(0, n - h + 1)), int(rng.integers(0, n - w + 1)))
    y, x = origin
    crop = src[y:y + h, x:x + w]
    return np.repeat(crop[:, :, None], 3, axis=2), origin


def ghost_offsets(cfg):
    """All pulse offsets with Chebyshev distance in ``ghost_offset_range``."""
    lo, hi = cfg.ghost_offset_range
    return [
        (dx, dy)
        for dy in range(-hi, hi + 1)
        for dx in range(-hi, hi + 1)
        if lo <= max(abs(dx), abs(dy)) <= hi
    ]


def two_pulse_kernel(alpha, offset, size=9):
    """Zero kernel with 1 - sqrt(alpha) at the centre and sqrt(alpha) - alpha at centre + offset."""
    c = size // 2
    dx, dy = offset
    if max(abs(dx), abs(dy)) > c or (dx, dy) == (0, 0):
        raise ValueError(f"offset {offset} must be nonzero and inside the {size}x{size} support")
    k = np.zeros((size, size))
    root = math.sqrt(alpha)
    k[c, c] = 1.0 - root
    k[c + dy, c + dx] = root - alpha
    return k


def _draw_sigma(rng, cfg):
    return float(rng.uniform(*cfg.blur_sigma_range))


def _draw_offset(rng, cfg):
    offsets = ghost_offsets(cfg)
    return offsets[int(rng.integers(len(offsets)))]


def ghosting_reflection(R, alpha, beta, rng, cfg, sigma=None, offset=None):
    """R' = clamp(beta * (H conv K conv R)) with a two-pulse H and Gaussian K."""
    if sigma is None:
        sigma = _draw_sigma(rng, cfg)
    if offset is None:
        offset = _draw_offset(rng, cfg)
    blurred = imagecore.conv2d(R, gaussian_kernel(sigma), "reflect")
    ghosted = imagecore.conv2d(blurred, two_pulse_kernel(alpha, offset, cfg.ghost_kernel_size), "reflect")
    return np.clip(beta * ghosted, 0.0, 1.0)


def blur_reflection(R, beta, rng, cfg, sigma=None):
    """R' = clamp(beta * (K conv R)) with sigma drawn from ``cfg.blur_sigma_range``."""
    if sigma is None:
        sigma = _draw_sigma(rng, cfg)
    blurred = imagecore.conv2d(R, gaussian_kernel(sigma), "reflect")
    return np.clip(beta * blurred, 0.0, 1.0)


def choose_branch(u_ghost, u_gray, cfg):
    """Sequential branch rule: ghosting first, then grayscale, else plain blur."""
    if u_ghost < cfg.p_ghost:
        return "ghost"
    if u_gray < cfg.p_gray:
        return "gray"
    return "blur"


def draw_augment_params(rng, cfg, size):
    """Take every random draw of one augmentation, in a fixed order."""
    alpha = float(rng.uniform(*cfg.alpha_range))
    u_ghost = rng.random()
    u_gray = rng.random()
    beta, origin = make_beta_map(rng, cfg, size=size)
    return {
        "alpha": alpha,
        "branch": choose_branch(u_ghost, u_gray, cfg),
        "beta": beta,
        "beta_origin": origin,
        "sigma": _draw_sigma(rng, cfg),
        "offset": _draw_offset(rng, cfg),
        "rotation": int(rng.integers(4)),
        "flip": bool(rng.random() < 0.5),
    }


def augment(T, R, rng, cfg, branch=None, sigma=None, beta=None, seed=None):
    """Build one training triple from a (T, R) source pair.

    Every random draw is taken in a fixed order regardless of the branch, so
    the stream position never depends on earlier outcomes. ``branch``,
    ``sigma`` and ``beta`` force the corresponding choice (used by tests and
    diagnostics); forced values still consume their draws.
    """
    T = imagecore.as_image(T)
    R = imagecore.as_image(R)
    if T.shape != R.shape:
        raise ValueError(f"T and R differ in shape: {T.shape} vs {R.shape}")
    draws = draw_augment_params(rng, cfg, T.shape[:2])
    alpha = draws["alpha"]
    beta_map, origin = draws["beta"], draws["beta_origin"]
    offset, rotation, flip = draws["offset"], draws["rotation"], draws["flip"]
    drawn_sigma = draws["sigma"]
    if branch is None:
        branch = draws["branch"]
    elif branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    sigma = drawn_sigma if sigma is None else float(sigma)
    if beta is not None:
        beta_map = np.broadcast_to(np.asarray(beta, dtype=np.float64), R.shape)
    else:
        beta_map = beta_map[:, :, : R.shape[2]]

    if branch == "ghost":
        R_out = ghosting_reflection(R, alpha, beta_map, rng, cfg, sigma=sigma, offset=offset)
    elif branch == "gray":
        gray = imagecore.to_grayscale(R)
        if cfg.blur_grayscale:
            R_out = blur_reflection(gray, beta_map, rng, cfg, sigma=sigma)
        else:
            R_out = np.clip(beta_map * gray, 0.0, 1.0)
    else:
        R_out = blur_reflection(R, beta_map, rng, cfg, sigma=sigma)

    I = linear_synthesize(T, R_out, alpha)
    images = [imagecore.gamma_correct(x, cfg.gamma) for x in (I, T, R_out)]
    images = [_orient(x, rotation, flip) for x in images]
    record = AugmentRecord(
        branch=branch,
        alpha=alpha,
        sigma=sigma,
        ghost_offset=offset if branch == "ghost" else None,
        beta_origin=origin,
        rotation=rotation,
        flip=flip,
        seed=seed,
    )
    return TrainingTriple(images[0], images[1], images[2], alpha, record)


def _orient(img, rotation, flip):
    out = np.rot90(img, k=rotation, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def sample_rng(root_seed, index):
    """Independent per-sample generator derived from (root seed, sample index)."""
    return np.random.default_rng([int(root_seed), int(index)])


def random_crop(img, size, rng):
    """Random ``size`` x ``size`` crop; images smaller than ``size`` are upscaled first."""
    img = imagecore.as_image(img)
    h, w = img.shape[:2]
    if min(h, w) < size:
        s = size / min(h, w)
        img = imagecore.bilinear_resize(img, size=(max(size, int(math.ceil(h * s))), max(size, int(math.ceil(w * s)))))
        h, w = img.shape[:2]
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size]


def generate_triple(pool, root_seed, index, cfg):
    """Draw a (T, R) pair from ``pool``, crop and augment it, all from one derived seed."""
    if len(pool) == 0:
        raise ValueError("source image pool is empty")
    rng = sample_rng(root_seed, index)
    ti = int(rng.integers(len(pool)))
    ri = int(rng.integers(len(pool) - 1)) if len(pool) > 1 else 0
    if len(pool) > 1 and ri >= ti:
        ri += 1
    T = random_crop(pool[ti], cfg.crop_size, rng)[:, :, :3]
    R = random_crop(pool[ri], cfg.crop_size, rng)[:, :, :3]
    return augment(T, R, rng, cfg, seed=[int(root_seed), int(index)])


def procedural_image(rng, size=128):
    """Stand-in natural image: multi-octave smooth colour noise plus a few hard-edged shapes.

    For demos and tests when no photo collection is at hand.
    """
    h, w = (size, size) if np.isscalar(size) else size
    img = np.zeros((h, w, 3))
    amp = 1.0
    for cells in (2, 4, 8, 16):
        img += amp * imagecore.bilinear_resize(rng.random((cells, cells, 3)), size=(h, w))
        amp *= 0.5
    img /= 1.875
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(2, 5))):
        colour = rng.random(3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            ry, rx = rng.integers(h // 8, h // 3), rng.integers(w // 8, w // 3)
            mask = (np.abs(yy - y0) < ry) & (np.abs(xx - x0) < rx)
        else:
            cy, cx, r = rng.integers(0, h), rng.integers(0, w), rng.integers(min(h, w) // 10, min(h, w) // 4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = 0.5 * img[mask] + 0.5 * colour
    return np.clip(img, 0.0, 1.0)


def procedural_pool(n, size=128, seed=0):
    rng = np.random.default_rng(seed)
    return [procedural_image(rng, size) for _ in range(n)]


# ---------------------------------------------------------------------------
# Recomposition checks


def recomposition_residual(triple, gamma=DEFAULT_GAMMA):
    """Per-pixel inverse-gamma residual I~ - (alpha T~ + R~)."""
    It = imagecore.inverse_gamma(triple.I, gamma)
    Tt = imagecore.inverse_gamma(triple.T, gamma)
    Rt = imagecore.inverse_gamma(triple.R, gamma)
    return It - (triple.alpha * Tt + Rt)


def unsaturated_mask(triple, gamma=DEFAULT_GAMMA):
    """Pixels whose composite did not clip at 1."""
    It = imagecore.inverse_gamma(triple.I, gamma)
    return It < 1.0 - 1e-12


def recomposition_error(triple, gamma=DEFAULT_GAMMA):
    """Max |I~ - (alpha T~ + R~)| over unsaturated pixels."""
    res = np.abs(recomposition_residual(triple, gamma))
    mask = unsaturated_mask(triple, gamma)
    return float(res[mask].max()) if mask.any() else 0.0


def quantized_recomposition_consistent(triple, gamma=DEFAULT_GAMMA, step=1 / 255, slack=1e-6):
    """Check that 8-bit images admit an exact recomposition.

    Each stored value q stands for some true value in [q - step/2, q + step/2];
    inverse gamma is monotone, so the residual is bounded by an interval per
    pixel. Returns the boolean per-pixel consistency mask (saturated pixels
    count as consistent).
    """
    half = step / 2

    def bounds(x):
        lo = imagecore.inverse_gamma(np.clip(x - half, 0, 1), gamma)
        hi = imagecore.inverse_gamma(np.clip(x + half, 0, 1), gamma)
        return lo, hi

    (il, ih), (tl, th), (rl, rh) = bounds(triple.I), bounds(triple.T), bounds(triple.R)
    a = triple.alpha
    res_lo = il - a * th - rh
    res_hi = ih - a * tl - rl
    ok = (res_lo <= slack) & (res_hi >= -slack)
    saturated = triple.I >= 1.0 - half
    return ok | saturated


# ---------------------------------------------------------------------------
# On-disk dataset: {id}_I.png, {id}_T.png, {id}_R.png, {id}.json, manifest.json


def triple_id(index):
    return f"{index:05d}"


def write_triple(out_dir, tid, triple):
    out_dir = Path(out_dir)
    imagecore.write_png(out_dir / f"{tid}_I.png", triple.I)
    imagecore.write_png(out_dir / f"{tid}_T.png", triple.T)
    imagecore.write_png(out_dir / f"{tid}_R.png", triple.R)
    meta = {"id": tid, "alpha": triple.alpha}
    if triple.record is not None:
        meta.update(triple.record.to_dict())
    (out_dir / f"{tid}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_triple(data_dir, tid):
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / f"{tid}.json").read_text())
    alpha = float(meta["alpha"])
    if not (math.isnan(alpha) or 0.0 <= alpha <= 1.0):
        raise ValueError(f"triple {tid}: blend factor {alpha} outside [0, 1]")
    record = None
    if "branch" in meta:
        record = AugmentRecord.from_dict({k: meta[k] for k in AugmentRecord.__dataclass_fields__ if k in meta})
    return TrainingTriple(
        imagecore.read_png(data_dir / f"{tid}_I.png"),
        imagecore.read_png(data_dir / f"{tid}_T.png"),
        imagecore.read_png(data_dir / f"{tid}_R.png"),
        alpha,
        record,
    )


def read_manifest(data_dir):
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_dataset(data_dir):
    """All triples listed in a dataset directory's manifest, in manifest order."""
    manifest = read_manifest(data_dir)
    return [read_triple(data_dir, tid) for tid in manifest["ids"]]
