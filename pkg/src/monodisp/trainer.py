"""Optimization loop: schedule, batching, objective, checkpoints and logs."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, StereoSample, augment, load_sample
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .losses import LossBreakdown, LossWeights, total_loss
from .network import DispNet, NetworkConfig, build

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"
CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    base_lr: float = 1.8e-4
    peak_lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 50
    batch_size: int = 8
    width: int = 512
    height: int = 256
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    arch: str = "two-branch"
    d_max_frac: float = 0.3
    augment: bool = True
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 1  # epochs
    log_every: int = 1  # steps

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(self.width, self.height, 3, self.d_max_frac)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        # output locations do not change results
        d = self.to_dict()
        d.pop("checkpoint_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant rate: base for the first epoch, then peak, 1/2 peak, 1/4 peak.

    The decay epochs are 46 and 48 for a 50-epoch run and scale with ``epochs``.
    """
    if not 0 <= epoch < config.epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {config.epochs})")
    half_at = round(46 * config.epochs / 50)
    quarter_at = round(48 * config.epochs / 50)
    if epoch < 1:
        return config.base_lr
    if epoch < half_at:
        return config.peak_lr
    if epoch < quarter_at:
        return config.peak_lr * 0.5
    return config.peak_lr * 0.25


def make_optimizer(network: DispNet, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(network.parameters(), lr=config.base_lr, betas=(config.beta1, config.beta2))


@dataclass
class StepResult:
    final: LossBreakdown
    initial: Optional[LossBreakdown]
    total: float

    def record(self) -> dict:
        f = self.final.record()
        w = f["weighted"]
        out = {
            "l_ph": w["photometric"], "l_st": w["structural"], "l_sm": w["smoothness"],
            "l_bc": w["cyclic"],
            "l_init": float(self.initial.total.detach()) if self.initial is not None else 0.0,
            "total": self.total,
            "raw": {k: f[k] for k in ("photometric", "structural", "smoothness", "cyclic")},
            "mean_alpha": f["mean_alpha"],
        }
        return out


def compute_objective(network: DispNet, left: torch.Tensor, right: torch.Tensor, weights: LossWeights):
    out = network(left)
    final = total_loss(left, right, out.final, weights)
    initial = None
    total = final.total
    if out.initial is not None:
        initial = total_loss(left, right, out.initial, weights, data_only=True)
        total = total + initial.total
    return final, initial, total


def train_step(network: DispNet, batch, config: TrainConfig, optimizer: torch.optim.Optimizer) -> StepResult:
    """One Adam step on the full objective (plus the data-only initial-branch loss)."""
    left, right = batch
    final, initial, total = compute_objective(network, left, right, config.weights)
    if not torch.isfinite(total):
        optimizer.zero_grad(set_to_none=True)
        raise TrainingDivergedError(f"non-finite loss {float(total.detach())}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepResult(final, initial, float(total.detach()))


# --- batching ---------------------------------------------------------------

def sample_to_tensors(sample: StereoSample, width: int, height: int):
    """Images as float32 ``(C, H, W)`` tensors resized to the training resolution."""
    out = []
    for img in (sample.left, sample.right):
        t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()
        if t.shape[-2:] != (height, width):
            t = F.interpolate(t[None], size=(height, width), mode="bilinear", align_corners=False)[0]
        out.append(t)
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 1 << 20]).permutation(n)


class SampleSource:
    """Loads samples from a manifest (or an in-memory list) with an in-memory cache."""

    def __init__(self, manifest: Optional[DatasetManifest] = None, samples: Optional[list] = None):
        if (manifest is None) == (samples is None):
            raise InvalidInputError("pass exactly one of manifest or samples")
        self.manifest = manifest
        self._cache = dict(enumerate(samples)) if samples is not None else {}
        self._n = len(samples) if samples is not None else len(manifest)

    def __len__(self):
        return self._n

    def __getitem__(self, i: int) -> StereoSample:
        if i not in self._cache:
            self._cache[i] = load_sample(self.manifest.records[i])
        return self._cache[i]


def make_batch(source: SampleSource, indices, config: TrainConfig, epoch: int):
    lefts, rights = [], []
    for i in indices:
        sample = source[int(i)]
        if config.augment:
            sample = augment(sample, sample_rng(config.seed, epoch, int(i)))
        l, r = sample_to_tensors(sample, config.width, config.height)
        lefts.append(l)
        rights.append(r)
    return torch.stack(lefts), torch.stack(rights)


# --- checkpoints ------------------------------------------------------------

def _flatten(named: list, path: Path) -> list:
    index, offset = [], 0
    with open(path, "wb") as fh:
        for name, t in named:
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    return index


def _unflatten(index: list, path: Path) -> dict:
    payload = np.fromfile(path, dtype="<f4")
    out = {}
    for entry in index:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = payload[entry["offset"]:entry["offset"] + n]
        out[entry["name"]] = torch.from_numpy(chunk.reshape(entry["shape"]).copy())
    return out


def save_checkpoint(directory, network: DispNet, optimizer: Optional[torch.optim.Optimizer],
                    config: TrainConfig, step: int, epoch: int) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (+ ``optimizer.bin`` with Adam moments)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = list(network.state_dict().items())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": network.arch,
        "step": step,
        "epoch": epoch,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "network": dataclasses.asdict(network.config),
        "arrays": _flatten(named, directory / "weights.bin"),
    }
    if optimizer is not None:
        names = {id(p): n for n, p in network.named_parameters()}
        opt_named, steps = [], {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                opt_named += [(f"{n}/exp_avg", st["exp_avg"]), (f"{n}/exp_avg_sq", st["exp_avg_sq"])]
                steps[n] = float(st["step"])
        manifest["optimizer"] = {"arrays": _flatten(opt_named, directory / "optimizer.bin"),
                                 "steps": steps, "lr": optimizer.param_groups[0]["lr"]}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory, config: Optional[TrainConfig] = None):
    """Rebuild the network (and an Adam optimizer when moments were saved).

    Returns ``(network, optimizer_or_None, manifest_dict)``.
    """
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if config is None:
        config = TrainConfig(**manifest["config"])
    net_cfg = NetworkConfig(**manifest["network"])
    network = build(manifest["architecture"], net_cfg)
    tensors = _unflatten(manifest["arrays"], directory / "weights.bin")
    expected = set(network.state_dict())
    if set(tensors) != expected:
        raise ConfigError(f"checkpoint arrays do not match {manifest['architecture']} network")
    network.load_state_dict(tensors)
    optimizer = None
    if "optimizer" in manifest:
        optimizer = make_optimizer(network, config)
        opt = manifest["optimizer"]
        moments = _unflatten(opt["arrays"], directory / "optimizer.bin")
        for n, p in network.named_parameters():
            if n in opt["steps"]:
                optimizer.state[p] = {
                    "step": torch.tensor(opt["steps"][n]),
                    "exp_avg": moments[f"{n}/exp_avg"],
                    "exp_avg_sq": moments[f"{n}/exp_avg_sq"],
                }
        for group in optimizer.param_groups:
            group["lr"] = opt["lr"]
    return network, optimizer, manifest


# --- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    network: DispNet
    optimizer: torch.optim.Optimizer
    records: list
    checkpoint: Optional[Path]
    step: int


def train_loop(config: TrainConfig, source, out_dir=None, resume_from=None,
               max_steps: Optional[int] = None, network: Optional[DispNet] = None) -> TrainResult:
    """Run ``epochs`` passes over ``source`` (a manifest or :class:`SampleSource`).

    Appends one JSON record per logged step to ``out_dir/train_log.jsonl`` and
    writes the latest checkpoint to ``config.checkpoint_dir`` (default
    ``out_dir/checkpoint``).  ``resume_from`` continues a run bitwise from a
    saved checkpoint; ``max_steps`` stops early (useful for resume tests).
    """
    if isinstance(source, DatasetManifest):
        source = SampleSource(manifest=source)
    n = len(source)
    if n == 0:
        raise InvalidInputError("training set is empty")
    torch.manual_seed(config.seed)
    step, start_epoch = 0, 0
    if resume_from is not None:
        network, optimizer, meta = load_checkpoint(resume_from, config)
        step = int(meta["step"])
    else:
        if network is None:
            network = build(config.arch, config.network_config(), seed=config.seed)
        optimizer = make_optimizer(network, config)
    spe = math.ceil(n / config.batch_size)
    start_epoch, skip = divmod(step, spe)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else (
        out_dir / "checkpoint" if out_dir is not None else None)
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / LOG_NAME, "a" if resume_from is not None else "w")
    records = []
    last_ckpt = None
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_schedule(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = epoch_order(config.seed, epoch, n)
            first = skip if epoch == start_epoch else 0
            for b in range(first, spe):
                if max_steps is not None and step >= max_steps:
                    return TrainResult(network, optimizer, records, last_ckpt, step)
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = make_batch(source, idx, config, epoch)
                try:
                    result = train_step(network, batch, config, optimizer)
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(f"step {step} (epoch {epoch}): {e}") from None
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, **result.record()}
                records.append(rec)
                if log_fh is not None and (step % config.log_every == 0 or step == 1):
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
            if ckpt_dir is not None and ((epoch + 1) % config.checkpoint_every == 0
                                         or epoch + 1 == config.epochs):
                last_ckpt = save_checkpoint(ckpt_dir, network, optimizer, config, step, epoch + 1)
                log.info("epoch %d done, step %d, checkpoint %s", epoch, step, last_ckpt)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(network, optimizer, records, last_ckpt, step)
