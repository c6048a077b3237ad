"""Training loop, evaluation, prediction, checkpoints and the metrics log."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import TrainConfig
from .data import (
    IMAGE_SUFFIXES,
    ImageSample,
    batch_iterator,
    load_dataset,
    load_image,
    make_synthetic_dataset,
    pair_directories,
    read_manifest,
    split_dataset,
)
from .errors import CheckpointError, ConfigError, NonFiniteLossError, ValidationError
from .head import predict_mask
from .losses import LossConfig, composite_loss, focal_tversky_loss, hard_dice
from .model import ModelConfig, ScgSegNet, build_model

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "split", "total", "primary", "kl", "dl", "aux", "dice", "ftl")
CHECKPOINT_FORMAT = "scgseg-checkpoint/1"


# -- metrics log -------------------------------------------------------------

class MetricsLog:
    """Append-only CSV; every record is written and flushed as one line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self._write_line(",".join(METRIC_FIELDS) + "\n")

    def _write_line(self, line: str):
        with open(self.path, "a", encoding="utf-8", newline="") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def append(self, record: dict):
        values = []
        for key in METRIC_FIELDS:
            v = record[key]
            values.append(repr(float(v)) if isinstance(v, float) else str(v))
        self._write_line(",".join(values) + "\n")


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV, ignoring a trailing partial line."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
    rows = []
    for row in csv.DictReader(text.splitlines()):
        if len(row) != len(METRIC_FIELDS) or None in row.values():
            continue
        rec = {"step": int(row["step"]), "epoch": int(row["epoch"]), "split": row["split"]}
        for key in METRIC_FIELDS[3:]:
            rec[key] = float(row[key])
        rows.append(rec)
    return rows


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: ScgSegNet, step: int = 0, metrics: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "arch_hash": model.config.arch_hash(),
        "step": int(step),
        "metrics": dict(metrics or {}),
    }
    params = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"manifest": manifest, "params": params}, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, model: ScgSegNet | None = None) -> tuple[ScgSegNet, dict]:
    """Load a checkpoint, building the model from its manifest unless one is given."""
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    except Exception as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("manifest", {}).get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    manifest, params = blob["manifest"], blob["params"]
    if model is None:
        model = ScgSegNet(ModelConfig(**manifest["model_config"]))
        model.to(next(iter(params.values())).dtype)
    expected = model.state_dict()
    problems = []
    for key in sorted(set(expected) | set(params)):
        if key not in params:
            problems.append(f"missing {key}")
        elif key not in expected:
            problems.append(f"unexpected {key}")
        elif expected[key].shape != params[key].shape:
            problems.append(f"{key}: checkpoint {tuple(params[key].shape)} vs model {tuple(expected[key].shape)}")
    if problems:
        raise CheckpointError(f"{path} does not match the architecture:\n  " + "\n  ".join(problems))
    model.load_state_dict(params)
    return model, manifest


# -- data --------------------------------------------------------------------

def prepare_data(config: TrainConfig) -> tuple[list[ImageSample], list[ImageSample]]:
    d, size = config.data, config.model.input_size
    if d.synthetic:
        train = make_synthetic_dataset(d.synthetic_count, size, config.seed)
        test = make_synthetic_dataset(d.synthetic_test_count, size, config.seed + 7919) if d.synthetic_test_count else []
        return train, test
    if d.manifest:
        entries = read_manifest(d.manifest)
    elif d.image_dir and d.mask_dir:
        entries = pair_directories(d.image_dir, d.mask_dir)
    else:
        raise ConfigError("no data source: set data.synthetic, data.manifest or data.image_dir + data.mask_dir")
    samples = load_dataset(entries, size)
    if d.train_fraction >= 1.0:
        return samples, []
    split = split_dataset(samples, d.train_fraction, config.seed)
    return split.train, split.test


def resolve_device(name: str) -> torch.device:
    if name == "gpu":
        if not torch.cuda.is_available():
            raise ConfigError("device 'gpu' requested but CUDA is not available")
        return torch.device("cuda")
    return torch.device("cpu")


def seed_everything(seed: int, deterministic: bool = False):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


# -- evaluation --------------------------------------------------------------

def model_predictor(model: ScgSegNet) -> Callable[[torch.Tensor], torch.Tensor]:
    def _predict(images):
        model.eval()
        with torch.no_grad():
            return model(images).prob
    return _predict


@dataclass
class EvalTable:
    rows: list[dict]
    aggregate: dict

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "dice", "ftl"])
            w.writeheader()
            for row in self.rows:
                w.writerow(row)
            w.writerow({"id": "__mean__", **self.aggregate})


def evaluate(predictor, samples: Sequence[ImageSample], loss_config: LossConfig = LossConfig(),
             threshold: float = 0.5, batch_size: int = 4, device=None, dtype=torch.float32) -> EvalTable:
    """Per-sample hard dice (at ``threshold``) and soft focal-Tversky loss.

    ``predictor`` is a model or any callable mapping B x 1 x S x S images to
    probabilities of the same shape.
    """
    if not samples:
        raise ValidationError("cannot evaluate on an empty dataset")
    if isinstance(predictor, ScgSegNet):
        param = next(predictor.parameters())
        dtype, device = param.dtype, device or param.device
        predictor = model_predictor(predictor)
    rows = []
    start = 0
    for images, masks in batch_iterator(samples, batch_size, dtype=dtype):
        if device is not None:
            images, masks = images.to(device), masks.to(device)
        with torch.no_grad():
            prob = predictor(images)
        binary = predict_mask(prob, threshold)
        for i in range(prob.shape[0]):
            ftl = focal_tversky_loss(prob[i], masks[i], loss_config.tversky_beta,
                                     loss_config.focal_gamma, loss_config.smooth)
            rows.append({"id": samples[start + i].id, "dice": hard_dice(binary[i], masks[i, 0]),
                         "ftl": float(ftl)})
        start += prob.shape[0]
    aggregate = {"dice": float(np.mean([r["dice"] for r in rows])),
                 "ftl": float(np.mean([r["ftl"] for r in rows]))}
    return EvalTable(rows, aggregate)


def _eval_losses(model, samples, loss_config, batch_size, device) -> dict:
    model.eval()
    sums = dict.fromkeys(("total", "primary", "kl", "dl", "aux"), 0.0)
    n = 0
    with torch.no_grad():
        for images, masks in batch_iterator(samples, batch_size):
            images, masks = images.to(device), masks.to(device)
            out = model(images)
            bundle = composite_loss(out.prob, out.aux_prob, out.graph, masks, loss_config)
            b = images.shape[0]
            for k in sums:
                sums[k] += float(getattr(bundle, k)) * b
            n += b
    return {k: v / n for k, v in sums.items()}


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: ScgSegNet
    log_rows: list[dict]
    last_checkpoint: Path
    best_checkpoint: Path | None
    steps: int


def _check_finite(bundle, step):
    for name in ("primary", "kl", "dl", "aux", "total"):
        value = float(getattr(bundle, name).detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, step)


def train(config: TrainConfig, data: tuple[list[ImageSample], list[ImageSample]] | None = None,
          log_path=None) -> TrainResult:
    """Adam on the composite loss; train rows per step, test rows per epoch.

    Writes ``last.pt`` (and ``best.pt`` by test dice when a test split
    exists) plus ``metrics.csv`` into ``config.checkpoint_dir``.
    """
    device = resolve_device(config.device)
    train_set, test_set = data if data is not None else prepare_data(config)
    if not train_set:
        raise ValidationError("training set is empty")
    seed_everything(config.seed, config.deterministic)
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(log_path or ckpt_dir / "metrics.csv")

    model = build_model(config.model, seed=config.seed).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    noise = torch.Generator(device=device).manual_seed(config.seed)
    loss_cfg = config.loss
    rows: list[dict] = []
    best_dice, best_path = -1.0, None
    step = 0
    max_steps = config.max_steps if config.max_steps is not None else math.inf

    for epoch in range(config.epochs):
        if step >= max_steps:
            break
        model.train()
        for images, masks in batch_iterator(train_set, config.batch_size, shuffle_seed=config.seed + epoch):
            images, masks = images.to(device), masks.to(device)
            out = model(images, generator=noise)
            bundle = composite_loss(out.prob, out.aux_prob, out.graph, masks, loss_cfg)
            _check_finite(bundle, step + 1)
            optimizer.zero_grad(set_to_none=True)
            bundle.total.backward()
            optimizer.step()
            step += 1
            with torch.no_grad():
                dice = hard_dice(predict_mask(out.prob), masks[:, 0])
                ftl = float(focal_tversky_loss(out.prob, masks, loss_cfg.tversky_beta,
                                               loss_cfg.focal_gamma, loss_cfg.smooth))
            rec = {"step": step, "epoch": epoch, "split": "train",
                   **{k: float(getattr(bundle, k).detach()) for k in ("total", "primary", "kl", "dl", "aux")},
                   "dice": dice, "ftl": ftl}
            metrics.append(rec)
            rows.append(rec)
            if step >= max_steps:
                break
        if test_set:
            table = evaluate(model, test_set, loss_cfg, batch_size=config.batch_size, device=device)
            rec = {"step": step, "epoch": epoch, "split": "test",
                   **_eval_losses(model, test_set, loss_cfg, config.batch_size, device),
                   **table.aggregate}
            metrics.append(rec)
            rows.append(rec)
            log.info("epoch %d step %d test dice %.4f", epoch, step, table.aggregate["dice"])
            if table.aggregate["dice"] > best_dice:
                best_dice = table.aggregate["dice"]
                best_path = save_checkpoint(ckpt_dir / "best.pt", model, step, table.aggregate)

    last = save_checkpoint(ckpt_dir / "last.pt", model, step, rows[-1] if rows else {})
    return TrainResult(model, rows, last, best_path, step)


# -- prediction --------------------------------------------------------------

def collect_inputs(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if path.exists():
        return [path]
    raise OSError(f"no such file or directory: {path}")


def predict(model: ScgSegNet, inputs, output_dir, threshold: float = 0.5,
            save_prob: bool = False) -> tuple[list[Path], dict[str, str]]:
    """Write ``<stem>.png`` masks (0/255) at each input's native size.

    Returns the written paths and a mapping of failed inputs to error text.
    """
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = model.config.input_size
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    written, failures = [], {}
    model.eval()
    for path in collect_inputs(inputs):
        try:
            with Image.open(path) as im:
                native = (im.height, im.width)
            image = torch.from_numpy(load_image(path, size))[None, None].to(device=device, dtype=dtype)
            with torch.no_grad():
                prob = model(image).prob
            prob = F.interpolate(prob, size=native, mode="bilinear", align_corners=False).clamp(0, 1)
            mask = predict_mask(prob, threshold)[0].cpu().numpy().astype(np.uint8) * 255
            target = out_dir / f"{path.stem}.png"
            Image.fromarray(mask, mode="L").save(target)
            written.append(target)
            if save_prob:
                p16 = np.round(prob[0, 0].cpu().double().numpy() * 65535).astype(np.uint16)
                prob_path = out_dir / f"{path.stem}_prob.png"
                Image.fromarray(p16).save(prob_path)
                written.append(prob_path)
        except Exception as exc:  # collected per file, reported by the caller
            failures[str(path)] = f"{type(exc).__name__}: {exc}"
    return written, failures

