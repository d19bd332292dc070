"""Training loop, learning-rate schedule, and checkpoint evaluation.

A fixed seed pins everything: the validation split, per-epoch shuffles,
per-sample augmentation streams, the per-batch scale draw, and parameter
initialization, so two same-seed runs produce bit-identical logs and
checkpoints. Encoder parameters form the low-rate "backbone" group; all
other parameters ramp at the head rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import metrics as seg_metrics
from .autodiff import SGD, Tensor
from .data import Sample, augment, resize_bilinear, resize_nearest
from .errors import ConfigError, NumericError
from .losses import LossConfig, SegmentationLoss
from .metrics import MetricParams, MetricReport
from .model import SegmentationModel

# rng stream tags so concurrent prefetch could never change the draws
_STREAM_SPLIT = 101
_STREAM_SHUFFLE = 102
_STREAM_SCALE = 103
_STREAM_AUGMENT = 104

LOG_COLUMNS = ("epoch", "wbce", "wiou", "lf", "total", "val_mdice")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    base_lr_head: float = 0.05
    base_lr_backbone: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_fraction: float = 0.1
    scales: Tuple[float, ...] = (0.75, 1.0, 1.25)
    seed: int = 0
    val_fraction: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 0.5:
            raise ConfigError(f"warmup_fraction must be in [0, 0.5), got {self.warmup_fraction}")
        if not self.scales:
            raise ConfigError("scales must be nonempty")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        self.scales = tuple(float(s) for s in self.scales)


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> Tuple[float, float]:
    """Linear warmup to the maxima, then linear decay to zero at total_steps."""
    if total_steps <= 0:
        return 0.0, 0.0
    warm = config.warmup_fraction * total_steps
    if warm > 0 and step <= warm:
        frac = step / warm
    else:
        frac = (total_steps - step) / (total_steps - warm)
    frac = max(frac, 0.0)
    return config.base_lr_backbone * frac, config.base_lr_head * frac


def round_to_multiple_of_32(x: float) -> int:
    return max(32, int(math.floor(x / 32.0 + 0.5)) * 32)


def _prep_batch(
    samples: Sequence[Sample], size_hw: Tuple[int, int], num_classes: int
) -> Tuple[np.ndarray, np.ndarray]:
    h, w = size_hw
    imgs, masks = [], []
    for s in samples:
        img = s.image.astype(np.float64) / 255.0
        if img.shape[:2] != (h, w):
            img = resize_bilinear(img, h, w)
            mask = resize_nearest(s.mask, h, w)
        else:
            mask = s.mask
        imgs.append(img.transpose(2, 0, 1))
        if num_classes == 1:
            masks.append((mask > 127).astype(np.float64)[None])
        else:
            masks.append(mask.astype(np.int64))
    return np.stack(imgs), np.stack(masks)


def predict(model: SegmentationModel, image: np.ndarray) -> np.ndarray:
    """Probability map(s) at the image's own resolution.

    Binary heads return an H x W probability map; multi-class heads return
    an H x W label map (argmax at model resolution, nearest-resized back).
    """
    ih, iw = model.config.input_size
    img = image.astype(np.float64) / 255.0
    native_hw = image.shape[:2]
    if native_hw != (ih, iw):
        img = resize_bilinear(img, ih, iw)
    x = Tensor(img.transpose(2, 0, 1)[None])
    with ad.no_grad():
        logits = model.forward(x)
    if model.config.num_classes == 1:
        prob = np.asarray(ad.sigmoid(logits).data[0, 0])
        if native_hw != (ih, iw):
            prob = resize_bilinear(prob, native_hw[0], native_hw[1])
        return prob
    labels = np.argmax(logits.data[0], axis=0).astype(np.uint8)
    if native_hw != (ih, iw):
        labels = resize_nearest(labels, native_hw[0], native_hw[1])
    return labels


def _mask_for_eval(mask: np.ndarray, num_classes: int) -> np.ndarray:
    return (mask > 127).astype(np.uint8) if num_classes == 1 else mask


def _val_mdice(model: SegmentationModel, samples: Sequence[Sample]) -> float:
    if not samples:
        return float("nan")
    nc = model.config.num_classes
    vals = []
    for s in samples:
        pred = predict(model, s.image)
        gt = _mask_for_eval(s.mask, nc)
        if nc == 1:
            vals.append(seg_metrics.dice(pred >= 0.5, gt))
        else:
            vals.append(float(np.mean([seg_metrics.dice(pred == c, gt == c) for c in range(1, nc)])))
    return float(np.array(vals, dtype=np.float64).mean())


@dataclass
class TrainResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    log_path: Optional[Path] = None
    best_val: float = float("nan")
    val_ids: Tuple[str, ...] = ()


def _format_row(row: Dict[str, float]) -> str:
    cells = [str(int(row["epoch"]))]
    cells += [f"{row[k]:.12g}" for k in LOG_COLUMNS[1:]]
    return "\t".join(cells)


def train(
    model: SegmentationModel,
    samples: Sequence[Sample],
    config: TrainConfig,
    loss_config: Optional[LossConfig] = None,
    out_dir=None,
) -> TrainResult:
    """Run the schedule over the dataset; returns history plus checkpoints.

    Per batch: draw a scale, resize to the nearest multiple of 32, forward,
    loss, backward, SGD step at the scheduled rates. Logs one line per epoch
    (epoch, wbce, wiou, lf, total, val_mdice). A NaN loss aborts with the
    offending step. Checkpoints are written at the end and at the best
    validation score when out_dir is given.
    """
    if not samples:
        raise ConfigError("train: dataset is empty")
    loss_config = loss_config or LossConfig()
    nc = model.config.num_classes
    loss_fn = SegmentationLoss(loss_config, num_classes=nc)
    seed = config.seed

    order = np.random.default_rng([seed, _STREAM_SPLIT]).permutation(len(samples))
    n_val = int(round(config.val_fraction * len(samples)))
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]
    if not train_idx:
        raise ConfigError("train: validation split consumed every sample")
    val_samples = [samples[i] for i in val_idx]
    train_samples = [samples[i] for i in train_idx]

    opt = SGD(model.param_groups(), momentum=config.momentum, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    base_hw = model.config.input_size

    result = TrainResult(val_ids=tuple(s.id for s in val_samples))
    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines: List[str] = []
    header = [
        "# subseg training log",
        f"# seed = {seed}",
        f"# epochs = {config.epochs}, batch_size = {config.batch_size}, "
        f"steps_per_epoch = {steps_per_epoch}",
        f"# lr_head = {config.base_lr_head}, lr_backbone = {config.base_lr_backbone}, "
        f"momentum = {config.momentum}, weight_decay = {config.weight_decay}, "
        f"warmup_fraction = {config.warmup_fraction}",
        f"# scales = {','.join(str(s) for s in config.scales)}, "
        f"augment = {config.augment} (hflip 50%, rotate int degrees in [-15, 15])",
        f"# fusion = {model.config.fusion_variant}, depth = {model.config.pyramid_depth}, "
        f"feature_loss = {loss_config.use_feature_loss}",
        "# columns: " + "\t".join(LOG_COLUMNS),
    ]
    log_lines.extend(header)

    best_val = -math.inf
    gstep = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng([seed, _STREAM_SHUFFLE, epoch]).permutation(len(train_samples))
        sums = {"wbce": 0.0, "wiou": 0.0, "lf": 0.0, "total": 0.0}
        for b in range(steps_per_epoch):
            idxs = perm[b * config.batch_size : (b + 1) * config.batch_size]
            batch = []
            for i in idxs:
                s = train_samples[int(i)]
                if config.augment:
                    rng = np.random.default_rng([seed, _STREAM_AUGMENT, epoch, int(i)])
                    s = augment(s, rng)
                batch.append(s)
            scale_rng = np.random.default_rng([seed, _STREAM_SCALE, epoch, b])
            scale = float(scale_rng.choice(np.array(config.scales)))
            size_hw = (
                round_to_multiple_of_32(scale * base_hw[0]),
                round_to_multiple_of_32(scale * base_hw[1]),
            )
            x_np, m_np = _prep_batch(batch, size_hw, nc)
            logits = model.forward(Tensor(x_np))
            bundle = loss_fn(logits, m_np)
            values = bundle.values()
            if not math.isfinite(values["total"]):
                raise NumericError(
                    f"non-finite loss {values['total']} at step {gstep} (epoch {epoch}, batch {b})"
                )
            opt.zero_grad()
            ad.backward(bundle.total)
            lr_backbone, lr_head = lr_schedule(gstep, total_steps, config)
            opt.step({"backbone": lr_backbone, "head": lr_head})
            gstep += 1
            for k in sums:
                sums[k] += values[k]

        row = {k: sums[k] / steps_per_epoch for k in sums}
        row["epoch"] = epoch
        row["val_mdice"] = _val_mdice(model, val_samples)
        result.history.append(row)
        log_lines.append(_format_row(row))
        if out_dir is not None and val_samples and row["val_mdice"] > best_val:
            best_val = row["val_mdice"]
            result.best_val = best_val
            result.best_checkpoint = out_dir / "model_best.ckpt"
            out_dir.mkdir(parents=True, exist_ok=True)
            model.save_checkpoint(result.best_checkpoint)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.final_checkpoint = out_dir / "model_final.ckpt"
        model.save_checkpoint(result.final_checkpoint)
        result.log_path = out_dir / "train_log.tsv"
        result.log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    if math.isnan(result.best_val) and result.history:
        result.best_val = result.history[-1]["val_mdice"]
    return result


def gradient_check(
    model: SegmentationModel,
    loss_config: Optional[LossConfig] = None,
    n_params: int = 10,
    seed: int = 0,
    input_hw: Tuple[int, int] = (32, 32),
    eps: float = 1e-5,
):
    """Central finite differences of the full training loss.

    Samples parameter entries round-robin across the module prefixes
    (encoder, reduce, fuse, ...) so every backward rule in the network is
    exercised. Returns (max relative error, per-entry details).
    """
    h, w = input_hw
    rng = np.random.default_rng([seed, 0xFD])
    x_np = rng.random((1, 3, h, w))
    mask = (rng.random((1, 1, h, w)) > 0.6).astype(np.float64)
    nc = model.config.num_classes
    loss_fn = SegmentationLoss(loss_config or LossConfig(), num_classes=nc)
    if nc > 1:
        mask = (rng.integers(0, nc, size=(1, h, w))).astype(np.int64)

    def loss_value() -> float:
        with ad.no_grad():
            return loss_fn(model.forward(Tensor(x_np)), mask).total.item()

    model.zero_grad()
    bundle = loss_fn(model.forward(Tensor(x_np)), mask)
    ad.backward(bundle.total)

    groups: Dict[str, List[str]] = {}
    for name in model.params:
        groups.setdefault(name.split(".")[0], []).append(name)
    prefixes = sorted(groups)
    picks = []
    i = 0
    while len(picks) < n_params:
        prefix = prefixes[i % len(prefixes)]
        name = groups[prefix][int(rng.integers(len(groups[prefix])))]
        p = model.params[name]
        idx = int(rng.integers(p.size))
        picks.append((name, idx))
        i += 1

    details = []
    max_rel = 0.0
    for name, idx in picks:
        p = model.params[name]
        analytic = float(p.grad.ravel()[idx])
        flat = p.data.ravel()
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = loss_value()
        flat[idx] = orig - eps
        f_minus = loss_value()
        flat[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
        max_rel = max(max_rel, rel)
        details.append((name, idx, analytic, fd, rel))
    return max_rel, details


def evaluate(
    model_or_checkpoint,
    samples: Sequence[Sample],
    params: Optional[MetricParams] = None,
    dump_dir=None,
) -> MetricReport:
    """Predict every sample and score it; optionally dump probability maps.

    Accepts a SegmentationModel or a checkpoint path. Binary heads produce
    the full metric suite; multi-class heads produce per-class dice and
    boundary distance.
    """
    from .data import write_pgm  # local import to keep module deps one-way

    model = (
        model_or_checkpoint
        if isinstance(model_or_checkpoint, SegmentationModel)
        else SegmentationModel.from_checkpoint(model_or_checkpoint)
    )
    params = params or MetricParams()
    nc = model.config.num_classes
    preds = [predict(model, s.image) for s in samples]
    gts = [_mask_for_eval(s.mask, nc) for s in samples]
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for s, p in zip(samples, preds):
            arr = np.clip(np.rint(p * 255.0), 0, 255).astype(np.uint8) if nc == 1 else p
            write_pgm(dump_dir / f"{s.id}_pred.pgm", arr)
    if nc == 1:
        return seg_metrics.evaluate_binary(preds, gts, params)
    return seg_metrics.evaluate_labels(preds, gts, nc, params)
