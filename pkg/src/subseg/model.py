"""Encoder-decoder segmentation network built around subtraction fusion.

Five stride-2 encoder stages feed 3x3 channel-reduction convs; adjacent
levels are then fused pairwise into a triangular pyramid of difference
features (column n fuses column n-1 of this level with column n-1 of the
next coarser level). Each level's pyramid row is summed and enhanced by one
conv, and a top-down decoder (upsample, add, conv) produces per-pixel
logits at input resolution.

Fusion variants share a single learnable 3x3 conv per pyramid cell, so the
parameter table is byte-identical whether a cell computes |A - B|, the
box-filtered multi-scale sum of |A - B| at window sizes 1/3/5, or A + B.
The box filters are fixed all-ones kernels and never enter the table.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DimensionError, FormatError

SUBTRACT = "subtract"
MS_SUBTRACT = "ms_subtract"
ADD = "add"
FUSION_VARIANTS = (SUBTRACT, MS_SUBTRACT, ADD)

BOX_SIZES = (1, 3, 5)
LEVELS = 5
CONFIG_TENSOR = "meta.model_config"


@dataclass
class ModelConfig:
    fusion_variant: str = MS_SUBTRACT
    pyramid_depth: int = 5
    encoder_channels: Tuple[int, ...] = (16, 32, 32, 64, 64)
    reduced_channels: int = 16
    num_classes: int = 1
    input_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(
                f"fusion_variant must be one of {FUSION_VARIANTS}, got {self.fusion_variant!r}"
            )
        if not 1 <= self.pyramid_depth <= 5:
            raise ConfigError(f"pyramid_depth must be in [1,5], got {self.pyramid_depth}")
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if len(self.encoder_channels) != LEVELS or any(c < 1 for c in self.encoder_channels):
            raise ConfigError(f"encoder_channels needs 5 positive ints, got {self.encoder_channels}")
        if self.reduced_channels < 1:
            raise ConfigError(f"reduced_channels must be >= 1, got {self.reduced_channels}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        self.input_size = (int(self.input_size[0]), int(self.input_size[1]))
        if any(s % 32 != 0 or s <= 0 for s in self.input_size):
            raise ConfigError(f"input_size must be positive multiples of 32, got {self.input_size}")

    def to_text(self) -> str:
        return (
            f"fusion_variant = {self.fusion_variant}\n"
            f"pyramid_depth = {self.pyramid_depth}\n"
            f"encoder_channels = {','.join(str(c) for c in self.encoder_channels)}\n"
            f"reduced_channels = {self.reduced_channels}\n"
            f"num_classes = {self.num_classes}\n"
            f"input_size = {self.input_size[0]}x{self.input_size[1]}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in io.StringIO(text):
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            h, _, w = kv["input_size"].partition("x")
            return cls(
                fusion_variant=kv["fusion_variant"],
                pyramid_depth=int(kv["pyramid_depth"]),
                encoder_channels=tuple(int(c) for c in kv["encoder_channels"].split(",")),
                reduced_channels=int(kv["reduced_channels"]),
                num_classes=int(kv["num_classes"]),
                input_size=(int(h), int(w)),
            )
        except KeyError as exc:
            raise FormatError(f"model config text is missing key {exc}") from exc


@dataclass
class PyramidFeatures:
    """Triangular family of fused difference features plus enhanced outputs.

    ms maps (level i, order n) -> feature at level-i resolution, i in 1..5,
    n in 1..min(depth, 6-i). ce maps level -> enhanced feature.
    """

    ms: Dict[Tuple[int, int], Tensor] = field(default_factory=dict)
    ce: Dict[int, Tensor] = field(default_factory=dict)


def fusion_core(fa: Tensor, fb: Tensor, variant: str) -> Tensor:
    """Pre-conv fusion arithmetic; the coarser operand is resized to match."""
    if fa.shape[1] != fb.shape[1]:
        raise DimensionError(f"fusion operands differ in channels: {fa.shape[1]} vs {fb.shape[1]}")
    if fa.shape[2:] != fb.shape[2:]:
        fb = ad.bilinear_resize(fb, fa.shape[2], fa.shape[3])
    if variant == SUBTRACT:
        return ad.abs_(ad.sub(fa, fb))
    if variant == ADD:
        return ad.add(fa, fb)
    if variant == MS_SUBTRACT:
        total = None
        for k in BOX_SIZES:
            term = ad.abs_(ad.sub(ad.box_filter(fa, k), ad.box_filter(fb, k)))
            total = term if total is None else ad.add(total, term)
        # Constant rescale by the total tap count. The trailing learnable conv
        # absorbs any fixed input scale, but without it the window sums grow
        # ~35x per pyramid column and saturate an unnormalized net at init.
        return ad.mul_scalar(total, 1.0 / sum(k * k for k in BOX_SIZES))
    raise ConfigError(f"unknown fusion variant {variant!r}")


class SegmentationModel:
    """Instantiated network: parameter table, fixed constants, forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params: Dict[str, Parameter] = {}
        rng = np.random.default_rng(self.seed)
        cr = config.reduced_channels

        in_c = 3
        for i, out_c in enumerate(config.encoder_channels, start=1):
            self._add_conv(rng, f"encoder.stage{i}.conv1", out_c, in_c, 3)
            self._add_conv(rng, f"encoder.stage{i}.conv2", out_c, out_c, 3)
            in_c = out_c
        for i, enc_c in enumerate(config.encoder_channels, start=1):
            self._add_conv(rng, f"reduce.{i}", cr, enc_c, 3)
        for n in range(2, config.pyramid_depth + 1):
            for i in range(1, 6 - n + 1):
                self._add_conv(rng, f"fuse.{i}.{n}", cr, cr, 3)
        for i in range(1, LEVELS + 1):
            self._add_conv(rng, f"enhance.{i}", cr, cr, 3)
        for i in range(4, 0, -1):
            self._add_conv(rng, f"decoder.{i}", cr, cr, 3)
        self._add_conv(rng, "head", config.num_classes, cr, 1)

    def _add_conv(self, rng, name: str, cout: int, cin: int, k: int) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k))
        self.params[f"{name}.weight"] = Parameter(w, name=f"{name}.weight")
        self.params[f"{name}.bias"] = Parameter(np.zeros(cout), name=f"{name}.bias")

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params[f"{name}.bias"]
        k = w.shape[2]
        return ad.conv2d(x, w, b, stride=stride, padding=(k - 1) // 2)

    # ------------------------------------------------------------------
    # forward stages

    def encode(self, x: Tensor) -> List[Tensor]:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"encoder input must be Nx3xHxW, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ConfigError(f"input spatial dims must be multiples of 32, got {x.shape[2:]}")
        feats = []
        cur = x
        for i in range(1, LEVELS + 1):
            cur = ad.relu(self._conv(f"encoder.stage{i}.conv1", cur, stride=2))
            cur = ad.relu(self._conv(f"encoder.stage{i}.conv2", cur))
            feats.append(cur)
        return feats

    def channel_reduce(self, feats: List[Tensor]) -> List[Tensor]:
        return [ad.relu(self._conv(f"reduce.{i}", f)) for i, f in enumerate(feats, start=1)]

    def fuse(self, fa: Tensor, fb: Tensor, level: int, order: int) -> Tensor:
        core = fusion_core(fa, fb, self.config.fusion_variant)
        return ad.relu(self._conv(f"fuse.{level}.{order}", core))

    def build_pyramid(self, reduced: List[Tensor]) -> PyramidFeatures:
        pyr = PyramidFeatures()
        for i, f in enumerate(reduced, start=1):
            pyr.ms[(i, 1)] = f
        for n in range(2, self.config.pyramid_depth + 1):
            for i in range(1, 6 - n + 1):
                pyr.ms[(i, n)] = self.fuse(pyr.ms[(i, n - 1)], pyr.ms[(i + 1, n - 1)], i, n)
        return pyr

    def complementarity_enhance(self, pyr: PyramidFeatures) -> PyramidFeatures:
        for i in range(1, LEVELS + 1):
            total = None
            for n in range(1, min(self.config.pyramid_depth, 6 - i) + 1):
                t = pyr.ms[(i, n)]
                total = t if total is None else ad.add(total, t)
            pyr.ce[i] = ad.relu(self._conv(f"enhance.{i}", total))
        return pyr

    def decode(self, pyr: PyramidFeatures, out_hw: Tuple[int, int]) -> Tensor:
        d = pyr.ce[5]
        for i in range(4, 0, -1):
            target = pyr.ce[i]
            up = ad.bilinear_resize(d, target.shape[2], target.shape[3])
            d = ad.relu(self._conv(f"decoder.{i}", ad.add(up, target)))
        logits = self._conv("head", d)
        return ad.bilinear_resize(logits, out_hw[0], out_hw[1])

    def forward(self, x: Tensor) -> Tensor:
        feats = self.encode(x)
        reduced = self.channel_reduce(feats)
        pyr = self.complementarity_enhance(self.build_pyramid(reduced))
        return self.decode(pyr, (x.shape[2], x.shape[3]))

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    # ------------------------------------------------------------------
    # bookkeeping

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_groups(self) -> Dict[str, List[Parameter]]:
        groups: Dict[str, List[Parameter]] = {"backbone": [], "head": []}
        for name, p in self.params.items():
            groups["backbone" if name.startswith("encoder.") else "head"].append(p)
        return groups

    def count_params(self) -> int:
        return sum(p.data.size for p in self.params.values() if p.trainable)

    def layer_table(self, input_size: Optional[Tuple[int, int]] = None):
        """Per-conv (name, params, learnable MACs, fixed box-filter MACs).

        MACs count k^2 * Cin * Cout * Hout * Wout per learnable conv; resizes
        and elementwise ops are ignored. Box-filter window sums are reported
        in the separate fixed column (k^2 * C * H * W per window size and
        operand) and are nonzero only for the multi-scale variant.
        """
        cfg = self.config
        h, w = input_size or cfg.input_size
        rows = []
        level_hw = [(h >> i, w >> i) for i in range(1, LEVELS + 1)]

        def conv_row(name, cout, cin, k, oh, ow, fixed=0):
            rows.append((name, k * k * cin * cout + cout, k * k * cin * cout * oh * ow, fixed))

        in_c = 3
        for i, out_c in enumerate(cfg.encoder_channels, start=1):
            lh, lw = level_hw[i - 1]
            conv_row(f"encoder.stage{i}.conv1", out_c, in_c, 3, lh, lw)
            conv_row(f"encoder.stage{i}.conv2", out_c, out_c, 3, lh, lw)
            in_c = out_c
        cr = cfg.reduced_channels
        for i, enc_c in enumerate(cfg.encoder_channels, start=1):
            lh, lw = level_hw[i - 1]
            conv_row(f"reduce.{i}", cr, enc_c, 3, lh, lw)
        for n in range(2, cfg.pyramid_depth + 1):
            for i in range(1, 6 - n + 1):
                lh, lw = level_hw[i - 1]
                fixed = 0
                if cfg.fusion_variant == MS_SUBTRACT:
                    fixed = sum(k * k for k in BOX_SIZES) * cr * lh * lw * 2
                conv_row(f"fuse.{i}.{n}", cr, cr, 3, lh, lw, fixed)
        for i in range(1, LEVELS + 1):
            lh, lw = level_hw[i - 1]
            conv_row(f"enhance.{i}", cr, cr, 3, lh, lw)
        for i in range(4, 0, -1):
            lh, lw = level_hw[i - 1]
            conv_row(f"decoder.{i}", cr, cr, 3, lh, lw)
        conv_row("head", cfg.num_classes, cr, 1, level_hw[0][0], level_hw[0][1])
        return rows

    def count_flops(self, input_size: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
        rows = self.layer_table(input_size)
        return sum(r[2] for r in rows), sum(r[3] for r in rows)

    # ------------------------------------------------------------------
    # persistence

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {CONFIG_TENSOR: checkpoint.encode_text(self.config.to_text())}
        for name, p in self.params.items():
            tensors[name] = p.data
        return tensors

    def save_checkpoint(self, path) -> None:
        checkpoint.save(path, self.state_tensors())

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise FormatError(f"checkpoint is missing tensor {name!r}")
            arr = tensors[name]
            if tuple(arr.shape) != p.shape:
                raise FormatError(
                    f"checkpoint tensor {name!r} has shape {tuple(arr.shape)}, expected {p.shape}"
                )
            p.data = np.asarray(arr, dtype=p.data.dtype)

    @classmethod
    def from_checkpoint(cls, path) -> "SegmentationModel":
        tensors = checkpoint.load(path)
        if CONFIG_TENSOR not in tensors:
            raise FormatError(f"{path}: checkpoint has no {CONFIG_TENSOR!r} entry")
        config = ModelConfig.from_text(checkpoint.decode_text(tensors[CONFIG_TENSOR]))
        model = cls(config, seed=0)
        model.load_state(tensors)
        return model
