"""Training objective: boundary-weighted BCE + weighted soft-IoU, plus a
frozen multi-stage feature extractor whose per-level feature distances
between prediction and ground truth supervise structure as well as detail.

Gradients flow only through the prediction branch; the extractor weights
and the ground-truth features are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .errors import ConfigError, DataError, FormatError

FEATURE_LOSS_SEED = 2022  # frozen extractor default draw, independent of training seed


@dataclass
class LossConfig:
    weight_amplification: float = 5.0
    weight_window: int = 15
    feature_levels: int = 4
    feature_weights_source: str = "seeded_frozen"  # or "file"
    feature_weights_path: Optional[str] = None
    feature_seed: int = FEATURE_LOSS_SEED
    feature_exact_norm: bool = False
    use_feature_loss: bool = True
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.weight_window % 2 == 0 or self.weight_window < 1:
            raise ConfigError(f"weight_window must be odd and >= 1, got {self.weight_window}")
        if self.weight_amplification < 0:
            raise ConfigError(f"weight_amplification must be >= 0, got {self.weight_amplification}")
        if self.feature_levels < 1:
            raise ConfigError(f"feature_levels must be >= 1, got {self.feature_levels}")
        if self.feature_weights_source not in ("seeded_frozen", "file"):
            raise ConfigError(
                f"feature_weights_source must be 'seeded_frozen' or 'file', "
                f"got {self.feature_weights_source!r}"
            )
        if self.feature_weights_source == "file" and not self.feature_weights_path:
            raise ConfigError("feature_weights_source = file requires feature_weights_path")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


def _window_sum(x: np.ndarray, k: int) -> np.ndarray:
    """Sliding k x k window sum with zero padding, via integral image."""
    pad = k // 2
    lead = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, lead + [(pad, pad), (pad, pad)])
    ii = xp.cumsum(axis=-2).cumsum(axis=-1)
    ii = np.pad(ii, lead + [(1, 0), (1, 0)])
    h, w = x.shape[-2:]
    s = ii[..., k:, k:] - ii[..., :-k, k:] - ii[..., k:, :-k] + ii[..., :-k, :-k]
    return s[..., :h, :w]


def pixel_weights(mask: np.ndarray, amplification: float = 5.0, window: int = 15) -> np.ndarray:
    """Boundary-emphasis map: 1 + amplification * |local mean of G - G|.

    The local mean is over the valid (in-image) part of each window, so a
    uniform mask yields weight 1 everywhere. The result is a constant with
    respect to the prediction; no gradient flows through it.
    """
    if window % 2 == 0:
        raise ConfigError(f"pixel weight window must be odd, got {window}")
    g = np.asarray(mask, dtype=np.float64)
    off = np.minimum(np.abs(g), np.abs(g - 1.0))
    if off.size and off.max() > 1e-6:
        idx = np.unravel_index(int(np.argmax(off)), g.shape)
        raise DataError(f"pixel_weights: mask is not binary at index {idx} (value {g[idx]})")
    count = _window_sum(np.ones_like(g), window)
    avg = _window_sum(g, window) / count
    return 1.0 + amplification * np.abs(avg - g)


def weighted_bce(logits: Tensor, target: Tensor, weights: Tensor) -> Tensor:
    """Sum of per-pixel weighted BCE over the weight mass: sum(w*bce)/sum(w)."""
    per_pixel = ad.bce_with_logits(logits, target)
    num = ad.reduce_sum(ad.mul(weights, per_pixel))
    return ad.mul_scalar(num, 1.0 / float(weights.data.sum()))


def weighted_iou(logits: Tensor, target: Tensor, weights: Tensor, epsilon: float = 1e-6) -> Tensor:
    """1 - weighted soft-IoU of sigmoid(logits) against the binary target."""
    p = ad.sigmoid(logits)
    pg = ad.mul(p, target)
    inter = ad.reduce_sum(ad.mul(weights, pg))
    union = ad.reduce_sum(ad.mul(weights, ad.sub(ad.add(p, target), pg)))
    ratio = ad.div(ad.add_scalar(inter, epsilon), ad.add_scalar(union, epsilon))
    return ad.add_scalar(ad.neg(ratio), 1.0)


class FeatureLossExtractor:
    """Frozen stack of stride-2 conv+ReLU stages used only to measure loss.

    Weights are either drawn once from a fixed seed or loaded from a
    checkpoint file holding tensors named lossnet.stage{i}.weight/bias.
    They are plain constants: never part of any trainable parameter table.
    """

    IN_CHANNELS = 3

    def __init__(self, weights: Sequence[Tuple[np.ndarray, np.ndarray]]):
        self.stages: List[Tuple[Tensor, Tensor]] = []
        prev_c = self.IN_CHANNELS
        for idx, (w, b) in enumerate(weights, start=1):
            if w.ndim != 4 or w.shape[1] != prev_c or b.shape != (w.shape[0],):
                raise ConfigError(
                    f"feature extractor stage {idx}: weight {w.shape} / bias {b.shape} "
                    f"inconsistent with input channels {prev_c}"
                )
            self.stages.append((Tensor(w), Tensor(b)))
            prev_c = w.shape[0]

    @classmethod
    def seeded(cls, levels: int = 4, seed: int = FEATURE_LOSS_SEED) -> "FeatureLossExtractor":
        rng = np.random.default_rng(seed)
        weights = []
        in_c = cls.IN_CHANNELS
        for lvl in range(levels):
            out_c = 8 << lvl
            std = np.sqrt(2.0 / (in_c * 9))
            weights.append((rng.normal(0.0, std, size=(out_c, in_c, 3, 3)), np.zeros(out_c)))
            in_c = out_c
        return cls(weights)

    @classmethod
    def from_file(cls, path) -> "FeatureLossExtractor":
        tensors = checkpoint.load(path)
        weights = []
        for idx in range(1, len(tensors) // 2 + 1):
            wkey, bkey = f"lossnet.stage{idx}.weight", f"lossnet.stage{idx}.bias"
            if wkey not in tensors:
                break
            if bkey not in tensors:
                raise FormatError(f"{path}: missing {bkey!r}")
            weights.append((tensors[wkey], tensors[bkey]))
        if not weights:
            raise FormatError(f"{path}: no lossnet.stage{{i}}.weight tensors found")
        return cls(weights)

    @classmethod
    def from_config(cls, config: LossConfig) -> "FeatureLossExtractor":
        if config.feature_weights_source == "file":
            return cls.from_file(config.feature_weights_path)
        return cls.seeded(config.feature_levels, config.feature_seed)

    def save(self, path) -> None:
        tensors: Dict[str, np.ndarray] = {}
        for idx, (w, b) in enumerate(self.stages, start=1):
            tensors[f"lossnet.stage{idx}.weight"] = w.data
            tensors[f"lossnet.stage{idx}.bias"] = b.data
        checkpoint.save(path, tensors)

    def __call__(self, x: Tensor) -> List[Tensor]:
        if x.shape[1] == 1:
            x = ad.repeat_channels(x, self.IN_CHANNELS)
        elif x.shape[1] != self.IN_CHANNELS:
            raise ConfigError(
                f"feature extractor takes 1 or {self.IN_CHANNELS} channels, got {x.shape[1]}"
            )
        feats = []
        for w, b in self.stages:
            x = ad.relu(ad.conv2d(x, w, b, stride=2, padding=1))
            feats.append(x)
        return feats


def feature_loss(
    pred_prob: Tensor,
    target: Tensor,
    extractor: FeatureLossExtractor,
    exact_norm: bool = False,
) -> List[Tensor]:
    """Per-level feature distances between prediction and ground truth.

    Default form is the mean of squared differences per level, which keeps
    the terms comparable across feature sizes; exact_norm switches to the
    unnormalized Euclidean norm.
    """
    fp = extractor(pred_prob)
    fg = extractor(target.detach() if target.requires_grad else target)
    terms = []
    for a, b in zip(fp, fg):
        d = ad.sub(a, b)
        sq = ad.mul(d, d)
        terms.append(ad.sqrt(ad.reduce_sum(sq)) if exact_norm else ad.reduce_mean(sq))
    return terms


@dataclass
class LossBundle:
    wbce: Tensor
    wiou: Tensor
    lf_terms: Tuple[Tensor, ...]
    total: Tensor

    def values(self) -> Dict[str, float]:
        out = {
            "wbce": self.wbce.item(),
            "wiou": self.wiou.item(),
            "lf": sum(t.item() for t in self.lf_terms),
        }
        out["total"] = self.total.item()
        return out


class SegmentationLoss:
    """Computes the full objective for binary or one-vs-rest multi-class heads."""

    def __init__(self, config: LossConfig | None = None, num_classes: int = 1):
        self.config = config or LossConfig()
        self.num_classes = num_classes
        self.extractor = (
            FeatureLossExtractor.from_config(self.config) if self.config.use_feature_loss else None
        )

    def _binary_terms(self, logits: Tensor, mask: np.ndarray):
        cfg = self.config
        w = pixel_weights(mask, cfg.weight_amplification, cfg.weight_window)
        weights = Tensor(w)
        target = Tensor(np.asarray(mask, dtype=np.float64))
        bce = weighted_bce(logits, target, weights)
        iou = weighted_iou(logits, target, weights, cfg.epsilon)
        if self.extractor is not None:
            lf = feature_loss(ad.sigmoid(logits), target, self.extractor, cfg.feature_exact_norm)
        else:
            lf = []
        return bce, iou, lf

    def __call__(self, logits: Tensor, masks: np.ndarray) -> LossBundle:
        """masks: binary {0,1} array of shape N x 1 x H x W when num_classes == 1,
        otherwise integer labels of shape N x H x W."""
        masks = np.asarray(masks)
        if self.num_classes == 1:
            if masks.ndim != 4:
                raise DataError(f"binary masks must be Nx1xHxW, got shape {masks.shape}")
            bce, iou, lf = self._binary_terms(logits, masks)
        else:
            if masks.ndim != 3:
                raise DataError(f"label masks must be NxHxW, got shape {masks.shape}")
            if masks.max(initial=0) >= self.num_classes:
                raise DataError(
                    f"mask labels reach {int(masks.max())}, but num_classes = {self.num_classes}"
                )
            per_class = []
            for c in range(self.num_classes):
                class_logits = ad.slice_channels(logits, c, c + 1)
                class_mask = (masks == c).astype(np.float64)[:, None]
                per_class.append(self._binary_terms(class_logits, class_mask))
            scale = 1.0 / self.num_classes
            bce = ad.mul_scalar(_tensor_sum([t[0] for t in per_class]), scale)
            iou = ad.mul_scalar(_tensor_sum([t[1] for t in per_class]), scale)
            n_terms = len(per_class[0][2])
            lf = [
                ad.mul_scalar(_tensor_sum([t[2][i] for t in per_class]), scale)
                for i in range(n_terms)
            ]
        total = ad.add(bce, iou)
        for term in lf:
            total = ad.add(total, term)
        return LossBundle(wbce=bce, wiou=iou, lf_terms=tuple(lf), total=total)


def _tensor_sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
