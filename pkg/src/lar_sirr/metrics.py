"""PSNR/SSIM scoring and dataset sweeps with JSON and plain-text reports.

A dataset directory holds aligned pairs either as ``{id}_I.png`` /
``{id}_T.png`` files (the synth layout) or as ``I/`` and ``T/`` subdirectories
with matching file names. A root whose subdirectories are datasets is scored
per subdirectory plus an image-weighted Average row.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imagecore
from .losses import ssim

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y):
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, cap=PSNR_CAP, with_flag=False):
    """10 log10(1 / MSE) with peak 1; identical images give ``cap`` (flag set)."""
    err = mse(x, y)
    if err == 0.0:
        value, capped = cap, True
    else:
        value = 10.0 * math.log10(1.0 / err)
        capped = value >= cap
        value = min(value, cap)
    return (value, capped) if with_flag else value


@dataclass
class EvalRecord:
    dataset: str
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    capped: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.psnr)

    @property
    def mean_psnr(self):
        return math.fsum(self.psnr) / self.count if self.count else float("nan")

    @property
    def mean_ssim(self):
        return math.fsum(self.ssim) / self.count if self.count else float("nan")

    def add(self, name, p, s, capped=False):
        self.names.append(name)
        self.psnr.append(float(p))
        self.ssim.append(float(s))
        self.capped.append(bool(capped))

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "skipped": list(self.skipped),
            "images": [
                {"name": n, "psnr": p, "ssim": s, "capped": c}
                for n, p, s, c in zip(self.names, self.psnr, self.ssim, self.capped)
            ],
        }


def list_pairs(dataset_dir):
    """Sorted ``[(name, input_path, target_path)]`` for a dataset directory."""
    d = Path(dataset_dir)
    pairs = []
    if (d / "I").is_dir() and (d / "T").is_dir():
        for p in sorted((d / "I").iterdir()):
            if p.is_file():
                pairs.append((p.stem, p, d / "T" / p.name))
    for p in sorted(d.glob("*_I.png")):
        stem = p.name[: -len("_I.png")]
        pairs.append((stem, p, d / f"{stem}_T.png"))
    return pairs


def is_dataset(path):
    return bool(list_pairs(path))


def evaluate_dataset(predictor, dataset_dir, name=None, out_dir=None, crop=0):
    """Score ``predictor(I)`` against T for every pair in ``dataset_dir``.

    ``predictor`` maps an HWC image to the restored HWC image. With
    ``out_dir`` each prediction is written as ``{name}_T.png`` and, when the
    predictor exposes ``last_trace``, its final confidence map as
    ``{name}_C.png``. ``crop`` trims that many border pixels before scoring.
    """
    dataset_dir = Path(dataset_dir)
    record = EvalRecord(name or dataset_dir.name)
    for stem, ipath, tpath in list_pairs(dataset_dir):
        try:
            I = imagecore.read_png(ipath)
            T = imagecore.read_png(tpath)
            if I.shape != T.shape:
                raise ValueError(f"shape mismatch {I.shape} vs {T.shape}")
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable pair %s: %s", stem, exc)
            record.skipped.append(stem)
            continue
        pred = np.clip(predictor(I), 0.0, 1.0)
        if out_dir is not None:
            out = Path(out_dir)
            imagecore.write_png(out / f"{stem}_T.png", pred)
            trace = getattr(predictor, "last_trace", None)
            if trace:
                imagecore.write_png(out / f"{stem}_C.png", trace["C"][-1])
        a, b = pred, T
        if crop:
            a, b = a[crop:-crop, crop:-crop], b[crop:-crop, crop:-crop]
        p, capped = psnr(a, b, with_flag=True)
        record.add(stem, p, ssim(a, b), capped)
    return record


def evaluate_tree(predictor, root, out_dir=None, crop=0):
    """One EvalRecord per dataset under ``root`` (or for ``root`` itself)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset directory at {root}")
    if is_dataset(root):
        return [evaluate_dataset(predictor, root, out_dir=out_dir, crop=crop)]
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if is_dataset(sub):
            sub_out = None if out_dir is None else Path(out_dir) / sub.name
            records.append(evaluate_dataset(predictor, sub, out_dir=sub_out, crop=crop))
    return records


def average(records):
    """Image-weighted average over datasets."""
    total = EvalRecord("Average")
    for r in records:
        for n, p, s, c in zip(r.names, r.psnr, r.ssim, r.capped):
            total.add(f"{r.dataset}/{n}", p, s, c)
        total.skipped.extend(f"{r.dataset}/{n}" for n in r.skipped)
    return total


def format_table(records):
    rows = list(records) + [average(records)]
    width = max(len("Dataset"), *(len(r.dataset) for r in rows))
    lines = [f"{'Dataset':<{width}}  {'PSNR':>8}  {'SSIM':>6}  {'Count':>5}"]
    for r in rows:
        lines.append(f"{r.dataset:<{width}}  {r.mean_psnr:8.3f}  {r.mean_ssim:6.3f}  {r.count:5d}")
    return "\n".join(lines) + "\n"


def report_dict(records):
    return {
        "datasets": [r.to_dict() for r in records],
        "average": {k: v for k, v in average(records).to_dict().items() if k != "images"},
    }


def write_report(records, out_dir):
    """Write ``report.json`` and ``report.txt``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, tpath = out / "report.json", out / "report.txt"
    jpath.write_text(json.dumps(report_dict(records), indent=2, sort_keys=True) + "\n")
    tpath.write_text(format_table(records))
    return jpath, tpath
