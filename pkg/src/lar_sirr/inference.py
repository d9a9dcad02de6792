"""Run a trained network on arbitrary-size numpy images (pad to the model's multiple, crop back)."""
import numpy as np
import torch

from . import imagecore


def to_tensor(img, dtype=torch.float32):
    img = imagecore.as_image(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)[None]


def to_image(t):
    return t[0].detach().to(torch.float64).permute(1, 2, 0).numpy()


class ModelPredictor:
    """Callable HWC -> HWC predictor around a ReflectionRemovalNet.

    After each call ``last_trace`` holds the per-iteration outputs cropped to
    the input size: ``{"T": [...], "R": [...], "C": [...]}``.
    """

    def __init__(self, model, multiple=None):
        self.model = model
        self.multiple = multiple or model.cfg.size_multiple
        self.last_trace = None

    @property
    def n_iterations(self):
        return self.model.cfg.n_iterations

    def __call__(self, img):
        padded, size = imagecore.pad_to_multiple(img, self.multiple)
        dtype = next(self.model.parameters()).dtype
        self.model.eval()
        with torch.no_grad():
            trace = self.model(to_tensor(padded, dtype))
        self.last_trace = {
            key: [imagecore.crop_to(to_image(t), size) for t in getattr(trace, key)]
            for key in ("T", "R", "C")
        }
        return self.last_trace["T"][-1]


def identity_predictor(img):
    return imagecore.as_image(img)
