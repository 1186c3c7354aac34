"""Stereo samples: synthetic scenes, augmentation and on-disk datasets.

Dataset layout::

    <root>/<split>.txt                 one "<sequence>/<stem>" per line
    <root>/<sequence>/calib.txt        F=<pixels>  B=<meters>
    <root>/<sequence>/image_left/<stem>.png
    <root>/<sequence>/image_right/<stem>.png
    <root>/<sequence>/gt_depth/<stem>.png        optional, uint16 meters*256
    <root>/<sequence>/gt_disparity/<stem>.png    optional, uint16 pixels*256

Synthetic datasets additionally carry ``gt_disparity_right/``, ``mask_left/``
and ``mask_right/`` (co-visibility, 8-bit) and the scene text in ``scene/``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .errors import CalibrationParseError, IngestionError, InvalidSpecError

SPLITS = ("eigen-train", "eigen-val", "eigen-test", "kitti2015-train", "kitti2015-val",
          "kitti2015-test", "synthetic")
RASTER_SCALE = 256.0


@dataclass(frozen=True)
class CameraRig:
    focal: float  # pixels
    baseline: float  # meters

    def __post_init__(self):
        if not (self.focal > 0 and self.baseline > 0):
            raise InvalidSpecError(f"camera rig needs positive focal and baseline, got {self}")


@dataclass
class StereoSample:
    """A rectified pair; images are float64 arrays ``(H, W, C)`` in [0, 1]."""

    left: np.ndarray
    right: np.ndarray
    rig: CameraRig
    gt_depth: Optional[np.ndarray] = None
    gt_disparity: Optional[np.ndarray] = None
    gt_disparity_right: Optional[np.ndarray] = None
    covisibility_mask: Optional[np.ndarray] = None  # (2, H, W) bool, index = side
    occlusion_mask: Optional[np.ndarray] = None  # (2, H, W) bool, in-frame but hidden
    name: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise IngestionError(f"{self.name}: left {self.left.shape} and right {self.right.shape} differ")
        hw = self.left.shape[:2]
        for attr in ("gt_depth", "gt_disparity", "gt_disparity_right"):
            v = getattr(self, attr)
            if v is not None and v.shape != hw:
                raise IngestionError(f"{self.name}: {attr} {v.shape} does not match image {hw}")

    @property
    def shape(self):
        return self.left.shape


# --- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    """Fronto-parallel textured rectangle, placed in left-view pixel coordinates."""

    x: int
    y: int
    w: int
    h: int
    depth: float
    seed: int = 0


@dataclass
class SceneSpec:
    width: int
    height: int
    focal: float
    baseline: float
    layers: list = field(default_factory=list)

    def disparity(self, layer: Layer) -> float:
        return self.focal * self.baseline / layer.depth

    def to_text(self) -> str:
        lines = [f"width={self.width} height={self.height} focal={self.focal!r} baseline={self.baseline!r}"]
        for l in self.layers:
            lines.append(f"layer x={l.x} y={l.y} w={l.w} h={l.h} depth={l.depth!r} seed={l.seed}")
        return "\n".join(lines) + "\n"


def _kv(tokens):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise InvalidSpecError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_scene(text: str) -> SceneSpec:
    """Parse the scene format written by :meth:`SceneSpec.to_text`."""
    header, layers = None, []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "layer":
            kv = _kv(tokens[1:])
            try:
                layers.append(Layer(int(kv["x"]), int(kv["y"]), int(kv["w"]), int(kv["h"]),
                                    float(kv["depth"]), int(kv.get("seed", 0))))
            except KeyError as e:
                raise InvalidSpecError(f"layer is missing {e.args[0]!r}: {line!r}") from None
        else:
            header = _kv(tokens)
    if header is None:
        raise InvalidSpecError("scene has no header line")
    try:
        return SceneSpec(int(header["width"]), int(header["height"]), float(header["focal"]),
                         float(header["baseline"]), layers)
    except KeyError as e:
        raise InvalidSpecError(f"scene header is missing {e.args[0]!r}") from None


def _texture(layer: Layer, channels: int = 3) -> np.ndarray:
    rng = np.random.default_rng(layer.seed)
    noise = rng.random((layer.h, layer.w, channels))
    smooth = gaussian_filter(noise, sigma=(1.5, 1.5, 0), mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    return 0.1 + 0.8 * (smooth - lo) / max(hi - lo, 1e-12)


def _validate(spec: SceneSpec):
    if spec.width < 2 or spec.height < 2:
        raise InvalidSpecError("scene must be at least 2x2")
    for i, a in enumerate(spec.layers):
        if a.w <= 0 or a.h <= 0 or not a.depth > 0:
            raise InvalidSpecError(f"layer {i} has non-positive size or depth")
        for b in spec.layers[i + 1:]:
            overlap = a.x < b.x + b.w and b.x < a.x + a.w and a.y < b.y + b.h and b.y < a.y + a.h
            if overlap and a.depth == b.depth:
                raise InvalidSpecError(f"overlapping layers at equal depth {a.depth}")


def synth_generate(spec: SceneSpec, channels: int = 3) -> StereoSample:
    """Render both views with painter's-algorithm occlusion and exact per-layer shifts.

    The right view shows each layer shifted left by its disparity, sampled from
    the layer texture by linear interpolation (exact for integer disparities).
    Pixels no layer reaches stay 0 with disparity 0 and are never co-visible.
    """
    _validate(spec)
    W, H = spec.width, spec.height
    order = sorted(range(len(spec.layers)), key=lambda i: -spec.layers[i].depth)
    views = [np.zeros((H, W, channels)), np.zeros((H, W, channels))]
    disp = [np.zeros((H, W)), np.zeros((H, W))]
    owner = [np.full((H, W), -1), np.full((H, W), -1)]
    cols = np.arange(W, dtype=np.float64)
    for i in order:
        layer = spec.layers[i]
        d = spec.disparity(layer)
        tex = _texture(layer, channels)
        rows = np.arange(max(layer.y, 0), min(layer.y + layer.h, H))
        if rows.size == 0:
            continue
        for side, shift in ((0, 0.0), (1, -d)):
            # texture coordinate of every column in this view
            u = cols - shift - layer.x
            hit = (u >= 0) & (u <= layer.w - 1)
            if not hit.any():
                continue
            u0 = np.floor(u[hit]).astype(int)
            u1 = np.minimum(u0 + 1, layer.w - 1)
            f = (u[hit] - u0)[None, :, None]
            t = tex[rows - layer.y]
            vals = (1 - f) * t[:, u0] + f * t[:, u1]
            xs = np.nonzero(hit)[0]
            views[side][rows[:, None], xs[None, :]] = vals
            disp[side][rows[:, None], xs[None, :]] = d
            owner[side][rows[:, None], xs[None, :]] = i

    covis = np.zeros((2, H, W), dtype=bool)
    occl = np.zeros((2, H, W), dtype=bool)
    for side, sign in ((0, -1.0), (1, 1.0)):
        other = 1 - side
        target = cols[None, :] + sign * disp[side]
        in_frame = (target >= 0) & (target <= W - 1) & (owner[side] >= 0)
        t = np.clip(target, 0, W - 1)
        lo = np.floor(t).astype(int)
        hi = np.minimum(np.ceil(t).astype(int), W - 1)
        r = np.arange(H)[:, None]
        same = (owner[other][r, lo] == owner[side]) & (owner[other][r, hi] == owner[side])
        covis[side] = in_frame & same
        occl[side] = in_frame & ~same

    rig = CameraRig(spec.focal, spec.baseline)
    depth = np.where(disp[0] > 0, spec.focal * spec.baseline / np.maximum(disp[0], 1e-12), 0.0)
    return StereoSample(views[0], views[1], rig, gt_depth=depth, gt_disparity=disp[0],
                        gt_disparity_right=disp[1], covisibility_mask=covis, occlusion_mask=occl,
                        name="synthetic")


def random_scene(rng: np.random.Generator, width: int = 64, height: int = 32, focal: float = 100.0,
                 baseline: float = 0.5, n_objects: int = 2, disparity_range=(2, 8)) -> SceneSpec:
    """Background plane plus a few nearer rectangles, all with integer disparities."""
    fb = focal * baseline
    lo, hi = disparity_range
    bg_d = int(rng.integers(lo, max(lo + 1, (lo + hi) // 2)))
    pad = hi + 2
    layers = [Layer(-pad, 0, width + 2 * pad, height, fb / bg_d, int(rng.integers(1 << 30)))]
    used = {bg_d}
    for _ in range(n_objects):
        choices = [d for d in range(bg_d + 1, hi + 1) if d not in used] or [bg_d + 1]
        d = int(rng.choice(choices))
        used.add(d)
        w = int(rng.integers(width // 6, width // 3))
        h = int(rng.integers(height // 4, height // 2))
        x = int(rng.integers(hi, width - w - 1))
        y = int(rng.integers(0, height - h))
        layers.append(Layer(x, y, w, h, fb / d, int(rng.integers(1 << 30))))
    return SceneSpec(width, height, focal, baseline, layers)


# --- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    color: bool = False
    brightness: float = 1.0
    gamma: float = 1.0
    channel_scale: tuple = (1.0, 1.0, 1.0)


def sample_augment_params(rng: np.random.Generator, channels: int = 3) -> AugmentParams:
    flip = bool(rng.random() < 0.5)
    color = bool(rng.random() < 0.5)
    brightness = float(rng.uniform(0.5, 1.5))
    gamma = float(rng.uniform(0.8, 1.2))
    scales = tuple(float(s) for s in rng.uniform(0.8, 1.2, size=channels))
    return AugmentParams(flip, color, brightness, gamma, scales)


def apply_augment(sample: StereoSample, params: AugmentParams) -> StereoSample:
    """Mirror-and-swap and/or a shared photometric jitter, clamped to [0, 1]."""
    out = sample
    if params.flip:
        flip_img = lambda a: np.ascontiguousarray(a[:, ::-1])
        swap_masks = lambda m: None if m is None else np.ascontiguousarray(m[::-1, :, ::-1])
        out = replace(
            out,
            left=flip_img(sample.right), right=flip_img(sample.left),
            gt_disparity=None if sample.gt_disparity_right is None else flip_img(sample.gt_disparity_right),
            gt_disparity_right=None if sample.gt_disparity is None else flip_img(sample.gt_disparity),
            gt_depth=None,
            covisibility_mask=swap_masks(sample.covisibility_mask),
            occlusion_mask=swap_masks(sample.occlusion_mask),
        )
    if params.color:
        scale = params.brightness * np.asarray(params.channel_scale)[: out.left.shape[-1]]

        def jitter(img):
            return np.clip(img ** params.gamma * scale, 0.0, 1.0)

        out = replace(out, left=jitter(out.left), right=jitter(out.right))
    return out


def augment(sample: StereoSample, rng: np.random.Generator) -> StereoSample:
    return apply_augment(sample, sample_augment_params(rng, sample.left.shape[-1]))


# --- on-disk datasets -------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    root: Path
    sequence: str
    stem: str

    @property
    def name(self) -> str:
        return f"{self.sequence}/{self.stem}"

    def path(self, kind: str, ext: str = ".png") -> Path:
        return self.root / self.sequence / kind / f"{self.stem}{ext}"

    @property
    def calib_path(self) -> Path:
        return self.root / self.sequence / "calib.txt"


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list

    def __len__(self):
        return len(self.records)


def manifest_path(root, split: str) -> Path:
    return Path(root) / f"{split}.txt"


def load_manifest(root, split: str) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root not found: {root}")
    path = manifest_path(root, split)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    records = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        seq, _, stem = line.rpartition("/")
        if not seq:
            raise IngestionError(f"{path}: expected '<sequence>/<stem>', got {line!r}")
        records.append(SampleRecord(root, seq, stem))
    return DatasetManifest(root, split, records)


def parse_calibration(text: str, source: str = "calib.txt") -> CameraRig:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = re.fullmatch(r"([FB])\s*=\s*(\S+)", line)
        if m is None:
            raise CalibrationParseError(f"{source}: cannot parse line {line!r}")
        try:
            values[m.group(1)] = float(m.group(2))
        except ValueError:
            raise CalibrationParseError(f"{source}: bad number in {line!r}") from None
    if set(values) != {"F", "B"}:
        raise CalibrationParseError(f"{source}: need both F= and B=, got {sorted(values)}")
    try:
        return CameraRig(values["F"], values["B"])
    except InvalidSpecError as e:
        raise CalibrationParseError(f"{source}: {e}") from None


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing file: {path}")
    with PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16 or (arr.dtype == np.int32 and arr.max(initial=0) > 255):
        arr = arr.astype(np.float64) / 65535.0
    else:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr[..., :3] if arr.shape[-1] == 4 else arr


def read_raster16(path) -> np.ndarray:
    """Decode a uint16 PNG stored as value*256."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing file: {path}")
    with PILImage.open(path) as im:
        arr = np.asarray(im).astype(np.float64)
    if arr.ndim != 2:
        raise IngestionError(f"{path}: expected a single-channel 16-bit raster")
    return arr / RASTER_SCALE


def write_raster16(path, values: np.ndarray):
    raw = np.clip(np.round(np.asarray(values, dtype=np.float64) * RASTER_SCALE), 0, 65535)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(raw.astype(np.uint16)).save(path)


def write_image(path, image: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path)


def _optional(record: SampleRecord, kind: str, reader):
    p = record.path(kind)
    return reader(p) if p.is_file() else None


def load_sample(record: SampleRecord) -> StereoSample:
    left = read_image(record.path("image_left"))
    right = read_image(record.path("image_right"))
    if not record.calib_path.is_file():
        raise IngestionError(f"missing file: {record.calib_path}")
    rig = parse_calibration(record.calib_path.read_text(), str(record.calib_path))
    masks = [_optional(record, k, read_image) for k in ("mask_left", "mask_right")]
    covis = None
    if all(m is not None for m in masks):
        covis = np.stack([m[..., 0] > 0.5 for m in masks])
    return StereoSample(
        left, right, rig,
        gt_depth=_optional(record, "gt_depth", read_raster16),
        gt_disparity=_optional(record, "gt_disparity", read_raster16),
        gt_disparity_right=_optional(record, "gt_disparity_right", read_raster16),
        covisibility_mask=covis,
        name=record.name,
    )


def write_sample(root, sequence: str, stem: str, sample: StereoSample, scene: Optional[SceneSpec] = None):
    """Store a sample in the dataset layout (used for synthetic datasets)."""
    base = Path(root) / sequence
    write_image(base / "image_left" / f"{stem}.png", sample.left)
    write_image(base / "image_right" / f"{stem}.png", sample.right)
    (base / "calib.txt").write_text(f"F={sample.rig.focal!r}\nB={sample.rig.baseline!r}\n")
    if sample.gt_depth is not None:
        write_raster16(base / "gt_depth" / f"{stem}.png", sample.gt_depth)
    if sample.gt_disparity is not None:
        write_raster16(base / "gt_disparity" / f"{stem}.png", sample.gt_disparity)
    if sample.gt_disparity_right is not None:
        write_raster16(base / "gt_disparity_right" / f"{stem}.png", sample.gt_disparity_right)
    if sample.covisibility_mask is not None:
        for side, kind in enumerate(("mask_left", "mask_right")):
            write_image(base / kind / f"{stem}.png", sample.covisibility_mask[side].astype(np.float64))
    if scene is not None:
        (base / "scene").mkdir(parents=True, exist_ok=True)
        (base / "scene" / f"{stem}.txt").write_text(scene.to_text())


def write_synthetic_dataset(root, scenes: list, sequence: str = "synth") -> DatasetManifest:
    root = Path(root)
    lines = []
    for i, spec in enumerate(scenes):
        stem = f"{i:06d}"
        write_sample(root, sequence, stem, synth_generate(spec), spec)
        lines.append(f"{sequence}/{stem}")
    root.mkdir(parents=True, exist_ok=True)
    manifest_path(root, "synthetic").write_text("\n".join(lines) + "\n")
    return load_manifest(root, "synthetic")
