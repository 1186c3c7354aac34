"""Depth synthesis, evaluation crops, error metrics and dataset-level reports."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import CameraRig, DatasetManifest, load_sample, read_raster16
from .errors import EmptyReportError, IngestionError, InvalidInputError

log = logging.getLogger(__name__)

GARG_FRACTIONS = (0.40810811, 0.99189189, 0.03594771, 0.96405229)
# Make3d: 852-row band of a 2272-row image, full width
MAKE3D_ROW_FRACTION = 852 / 2272
ACC_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
DEPTH_METRICS = ("abs_rel", "sq_rel", "rms", "log_rms", "log10", "acc_1", "acc_2", "acc_3")


@dataclass
class MetricReport:
    abs_rel: Optional[float] = None
    sq_rel: Optional[float] = None
    rms: Optional[float] = None
    log_rms: Optional[float] = None
    log10: Optional[float] = None
    d1_all: Optional[float] = None
    acc_1: Optional[float] = None
    acc_2: Optional[float] = None
    acc_3: Optional[float] = None
    n_valid_pixels: int = 0

    @classmethod
    def names(cls) -> list:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)

    def restricted(self, keep) -> "MetricReport":
        values = {k: (v if k in keep or k == "n_valid_pixels" else None) for k, v in self.as_dict().items()}
        return MetricReport(**values)


def disparity_to_depth(disparity, rig: CameraRig, min_disp: float = 1e-3) -> np.ndarray:
    d = np.asarray(disparity, dtype=np.float64)
    return rig.focal * rig.baseline / np.maximum(d, min_disp)


def garg_crop(height: int, width: int, fractions=GARG_FRACTIONS) -> tuple:
    """``(row0, row1, col0, col1)`` half-open rectangle of the standard Eigen-split crop."""
    if height <= 0 or width <= 0:
        raise InvalidInputError(f"invalid image size {height}x{width}")
    r0, r1, c0, c1 = fractions
    rect = (int(r0 * height), int(r1 * height), int(c0 * width), int(c1 * width))
    if rect[1] <= rect[0] or rect[3] <= rect[2]:
        raise InvalidInputError(f"crop {rect} is empty for {height}x{width}")
    return rect


def center_crop(height: int, width: int, row_fraction: float = MAKE3D_ROW_FRACTION,
                col_fraction: float = 1.0) -> tuple:
    h = max(1, int(round(row_fraction * height)))
    w = max(1, int(round(col_fraction * width)))
    r0, c0 = (height - h) // 2, (width - w) // 2
    return r0, r0 + h, c0, c0 + w


def crop_mask(shape, rect) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    r0, r1, c0, c1 = rect
    m[r0:r1, c0:c1] = True
    return m


def compute_metrics(depth, gt_depth, cap: Optional[float] = 80.0, valid_mask=None,
                    min_depth: float = 1e-3) -> MetricReport:
    """Depth error and accuracy statistics over valid pixels (``gt > 0`` and mask).

    Predictions and ground truth are clamped to ``[min_depth, cap]``; accuracy
    counts pixels with ``max(z/gt, gt/z)`` strictly below each threshold.
    """
    z = np.asarray(depth, dtype=np.float64)
    g = np.asarray(gt_depth, dtype=np.float64)
    if z.shape != g.shape:
        raise InvalidInputError(f"prediction {z.shape} and ground truth {g.shape} differ")
    valid = g > 0
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise EmptyReportError("no valid ground-truth pixels")
    hi = np.inf if cap is None else cap
    z = np.clip(z[valid], min_depth, hi)
    g = np.clip(g[valid], min_depth, hi)
    diff = z - g
    ratio = np.maximum(z / g, g / z)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rms=float(np.sqrt(np.mean(diff ** 2))),
        log_rms=float(np.sqrt(np.mean((np.log(z) - np.log(g)) ** 2))),
        log10=float(np.mean(np.abs(np.log10(z) - np.log10(g)))),
        acc_1=float(np.mean(ratio < ACC_THRESHOLDS[0])),
        acc_2=float(np.mean(ratio < ACC_THRESHOLDS[1])),
        acc_3=float(np.mean(ratio < ACC_THRESHOLDS[2])),
        n_valid_pixels=n,
    )


def d1_all(disparity, gt_disparity, valid_mask=None) -> float:
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of the truth."""
    d = np.asarray(disparity, dtype=np.float64)
    g = np.asarray(gt_disparity, dtype=np.float64)
    if d.shape != g.shape:
        raise InvalidInputError(f"prediction {d.shape} and ground truth {g.shape} differ")
    valid = g > 0
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        raise EmptyReportError("no valid ground-truth pixels")
    err = np.abs(d[valid] - g[valid])
    bad = (err > 3.0) & (err > 0.05 * g[valid])
    return float(100.0 * bad.mean())


def resize_disparity(disparity, height: int, width: int) -> np.ndarray:
    """Bilinear resize; values are rescaled by the width ratio so they stay in pixels."""
    d = np.asarray(disparity, dtype=np.float64)
    if d.shape == (height, width):
        return d
    t = torch.from_numpy(d)[None, None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0, 0].numpy()
    return out * (width / d.shape[1])


# --- dataset evaluation -----------------------------------------------------

@dataclass(frozen=True)
class Protocol:
    name: str
    crop: Optional[str]  # garg | center | None
    cap: Optional[float]
    gt: str  # gt_depth | gt_disparity
    metrics: tuple


PROTOCOLS = {
    "eigen-80": Protocol("eigen-80", "garg", 80.0, "gt_depth", DEPTH_METRICS),
    "eigen-50": Protocol("eigen-50", "garg", 50.0, "gt_depth", DEPTH_METRICS),
    "kitti2015": Protocol("kitti2015", None, None, "gt_disparity", DEPTH_METRICS + ("d1_all",)),
    "make3d-70": Protocol("make3d-70", "center", 70.0, "gt_depth", ("abs_rel", "sq_rel", "rms", "log10")),
}


class PredictionDir:
    """Reads ``<dir>/<sequence>/<stem>.png`` uint16 disparity rasters (pixels*256)."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise IngestionError(f"prediction directory not found: {self.root}")

    def __call__(self, record, sample) -> np.ndarray:
        return read_raster16(self.root / record.sequence / f"{record.stem}.png")


class NetworkPredictor:
    """Runs a network on the left image and returns its finest left disparity (pixels)."""

    def __init__(self, network):
        self.network = network.eval()

    def __call__(self, record, sample) -> np.ndarray:
        from .trainer import sample_to_tensors

        cfg = self.network.config
        left, _ = sample_to_tensors(sample, cfg.width, cfg.height)
        with torch.no_grad():
            d = self.network(left[None]).final[0][0][0]
        return d.double().numpy()


def evaluate_sample(pred_disp, sample, protocol: Protocol) -> MetricReport:
    gt = getattr(sample, protocol.gt)
    if gt is None:
        raise IngestionError(f"{sample.name}: no {protocol.gt} for protocol {protocol.name}")
    h, w = gt.shape
    pred_disp = resize_disparity(pred_disp, h, w)
    mask = None
    if protocol.crop == "garg":
        mask = crop_mask((h, w), garg_crop(h, w))
    elif protocol.crop == "center":
        mask = crop_mask((h, w), center_crop(h, w))
    z = disparity_to_depth(pred_disp, sample.rig)
    if protocol.gt == "gt_disparity":
        z_gt = np.where(gt > 0, disparity_to_depth(gt, sample.rig), 0.0)
    else:
        z_gt = gt
    report = compute_metrics(z, z_gt, protocol.cap, mask)
    if "d1_all" in protocol.metrics:
        report.d1_all = d1_all(pred_disp, gt, mask)
    return report.restricted(protocol.metrics)


def aggregate(reports: list) -> MetricReport:
    if not reports:
        raise EmptyReportError("no images were evaluated")
    values = {}
    for name in MetricReport.names():
        if name == "n_valid_pixels":
            values[name] = int(sum(r.n_valid_pixels for r in reports))
            continue
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        values[name] = float(np.mean(vals)) if vals else None
    return MetricReport(**values)


@dataclass
class EvaluationResult:
    protocol: str
    aggregate: MetricReport
    rows: list  # (name, MetricReport)
    errors: list  # (name, message)


def evaluate_dataset(predictor: Callable, manifest: DatasetManifest, protocol: str,
                     loader: Callable = load_sample) -> EvaluationResult:
    """Evaluate every manifest record; per-record failures are collected, not raised."""
    if protocol not in PROTOCOLS:
        raise InvalidInputError(f"unknown protocol {protocol!r}; choose from {sorted(PROTOCOLS)}")
    proto = PROTOCOLS[protocol]
    rows, errors = [], []
    for record in manifest.records:
        try:
            sample = loader(record)
            report = evaluate_sample(predictor(record, sample), sample, proto)
        except (IngestionError, EmptyReportError) as e:
            log.warning("skipping %s: %s", record.name, e)
            errors.append((record.name, str(e)))
            continue
        rows.append((record.name, report))
    return EvaluationResult(protocol, aggregate([r for _, r in rows]), rows, errors)


def write_report(result: EvaluationResult, out_dir, extra: Optional[dict] = None) -> dict:
    """Write ``summary.json`` and ``per_image.csv``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"protocol": result.protocol, "aggregate": result.aggregate.as_dict(),
               "n_images": len(result.rows), "errors": [{"name": n, "error": e} for n, e in result.errors]}
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    names = MetricReport.names()
    with open(out / "per_image.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image"] + names)
        for name, rep in result.rows:
            d = rep.as_dict()
            writer.writerow([name] + ["" if d[k] is None else d[k] for k in names])
    return {"summary": out / "summary.json", "table": out / "per_image.csv"}
