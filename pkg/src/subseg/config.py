"""Line-oriented config files: `[section]` headers and `key = value` pairs.

Every key is declared in SCHEMA with a type, default, and help line; unknown
sections or keys are errors, and `--set section.key=value` overrides are
validated against the same schema before any work starts. The CLI help is
generated from SCHEMA so it cannot drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from .errors import ConfigError
from .losses import LossConfig
from .metrics import MetricParams
from .model import FUSION_VARIANTS, ModelConfig
from .train import TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_size(text: str) -> Tuple[int, int]:
    h, sep, w = text.lower().partition("x")
    if not sep:
        raise ConfigError(f"expected HxW (e.g. 64x64), got {text!r}")
    return int(h), int(w)


def _csv(cast: Callable) -> Callable:
    def parse(text: str):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"expected a comma-separated list, got {text!r}")
        return tuple(cast(p) for p in parts)

    return parse


def _choice(*options: str) -> Callable:
    def parse(text: str) -> str:
        if text not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return text

    return parse


@dataclass
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: Dict[str, Dict[str, Key]] = {
    "model": {
        "fusion": Key(_choice(*FUSION_VARIANTS), "ms_subtract", "fusion unit arithmetic"),
        "pyramid_depth": Key(int, 5, "max fusion order per level (1 = plain laterals)"),
        "encoder_channels": Key(_csv(int), (16, 32, 32, 64, 64), "channels of the 5 encoder stages"),
        "reduced_channels": Key(int, 16, "channels after per-level reduction"),
        "num_classes": Key(int, 1, "1 = binary sigmoid head, >1 = per-class channels"),
        "input_size": Key(_parse_size, (64, 64), "HxW, multiples of 32"),
        "dtype": Key(_choice("f64", "f32"), "f64", "tensor storage dtype"),
        "seed": Key(int, 0, "parameter init seed (train.seed overrides during training)"),
    },
    "train": {
        "epochs": Key(int, 10, "training epochs"),
        "batch_size": Key(int, 4, "mini-batch size"),
        "lr_head": Key(float, 0.05, "max learning rate for non-encoder parameters"),
        "lr_backbone": Key(float, 0.005, "max learning rate for encoder parameters"),
        "momentum": Key(float, 0.9, "SGD momentum"),
        "weight_decay": Key(float, 0.0005, "SGD weight decay"),
        "warmup_fraction": Key(float, 0.1, "fraction of steps ramping lr up linearly"),
        "scales": Key(_csv(float), (0.75, 1.0, 1.25), "per-batch multi-scale factors"),
        "seed": Key(int, 0, "seed fixing init, shuffles, augmentation, scale draws"),
        "val_fraction": Key(float, 0.1, "fraction of training data held out for validation"),
        "augment": Key(_parse_bool, True, "random horizontal flip + rotation"),
    },
    "loss": {
        "weight_amplification": Key(float, 5.0, "boundary weight amplification"),
        "weight_window": Key(int, 15, "odd window for the boundary weight map"),
        "feature_levels": Key(int, 4, "stages of the frozen feature-loss extractor"),
        "feature_weights_source": Key(
            _choice("seeded_frozen", "file"), "seeded_frozen", "where extractor weights come from"
        ),
        "feature_weights_path": Key(str, "", "checkpoint path when feature_weights_source = file"),
        "feature_seed": Key(int, 2022, "seed of the frozen extractor draw"),
        "feature_exact_norm": Key(_parse_bool, False, "Euclidean norm instead of mean square"),
        "use_feature_loss": Key(_parse_bool, True, "include the feature-distance terms"),
        "epsilon": Key(float, 1e-6, "ratio stabilizer in the weighted IoU"),
    },
    "metrics": {
        "binarize_threshold": Key(float, 0.5, "probability threshold for binary metrics"),
        "e_measure_thresholds": Key(int, 256, "threshold sweep size"),
        "s_alpha": Key(float, 0.5, "object/region blend of the structure measure"),
        "fw_beta2": Key(float, 1.0, "beta^2 of the weighted F-measure"),
        "fw_gauss_size": Key(int, 7, "Gaussian window size of the weighted F-measure"),
        "fw_gauss_sigma": Key(float, 5.0, "Gaussian sigma of the weighted F-measure"),
        "threshold_mode": Key(_choice("fixed", "sweep_mean"), "fixed", "mDice/mIoU protocol"),
    },
    "synth": {
        "canvas": Key(_parse_size, (64, 64), "HxW of generated samples"),
        "blob_count": Key(_csv(int), (1, 4), "min,max blobs per image"),
        "blob_radius": Key(_csv(float), (3.0, 14.0), "min,max blob radius in px"),
        "contrast": Key(float, 60.0, "foreground intensity offset"),
        "noise_sigma": Key(float, 25.0, "Gaussian pixel noise"),
        "topology": Key(_choice("blobs", "layers"), "blobs", "binary blobs or 4-class layer bands"),
        "train_count": Key(int, 200, "generated training samples"),
        "test_count": Key(int, 50, "generated test samples"),
    },
    "data": {
        "train_dir": Key(str, "", "folder with images/ and masks/ for training"),
        "test_dir": Key(str, "", "folder with images/ and masks/ for evaluation"),
    },
    "ablate": {
        "axes": Key(_csv(str), ("depth", "fusion", "lossnet"), "subset of depth,fusion,lossnet"),
        "seeds": Key(_csv(int), (0, 1, 2, 3, 4), "one training run per seed per cell"),
        "workers": Key(int, 1, "parallel worker processes for ablation cells"),
    },
}


def defaults() -> Dict[str, Dict[str, Any]]:
    return {sec: {k: key.default for k, key in keys.items()} for sec, keys in SCHEMA.items()}


def _assign(cfg: Dict[str, Dict[str, Any]], section: str, key: str, raw: str, where: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
    try:
        cfg[section][key] = SCHEMA[section][key].parse(raw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from exc


def load_config(path: Optional[str] = None, overrides: Tuple[str, ...] = ()) -> Dict[str, Dict[str, Any]]:
    """Defaults, then the config file, then --set overrides; all validated."""
    cfg = defaults()
    if path:
        section = None
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            where = f"{path}:{lineno}"
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"{where}: unknown section [{section}]")
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
            if section is None:
                raise ConfigError(f"{where}: key outside any [section]")
            _assign(cfg, section, key.strip(), value.strip(), where)
    for item in overrides:
        target, sep, value = item.partition("=")
        if not sep or "." not in target:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, _, key = target.partition(".")
        _assign(cfg, section.strip(), key.strip(), value.strip(), f"--set {item}")
    return cfg


def help_text() -> str:
    lines = ["config keys (defaults in parentheses):"]
    for section, keys in SCHEMA.items():
        lines.append(f"  [{section}]")
        for name, key in keys.items():
            default = key.default
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            lines.append(f"    {name} ({default!r}): {key.help}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# dataclass builders


def build_model_config(cfg: Dict[str, Dict[str, Any]]) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        fusion_variant=m["fusion"],
        pyramid_depth=m["pyramid_depth"],
        encoder_channels=m["encoder_channels"],
        reduced_channels=m["reduced_channels"],
        num_classes=m["num_classes"],
        input_size=m["input_size"],
    )


def build_train_config(cfg: Dict[str, Dict[str, Any]]) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        base_lr_head=t["lr_head"],
        base_lr_backbone=t["lr_backbone"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        warmup_fraction=t["warmup_fraction"],
        scales=t["scales"],
        seed=t["seed"],
        val_fraction=t["val_fraction"],
        augment=t["augment"],
    )


def build_loss_config(cfg: Dict[str, Dict[str, Any]]) -> LossConfig:
    l = cfg["loss"]
    return LossConfig(
        weight_amplification=l["weight_amplification"],
        weight_window=l["weight_window"],
        feature_levels=l["feature_levels"],
        feature_weights_source=l["feature_weights_source"],
        feature_weights_path=l["feature_weights_path"] or None,
        feature_seed=l["feature_seed"],
        feature_exact_norm=l["feature_exact_norm"],
        use_feature_loss=l["use_feature_loss"],
        epsilon=l["epsilon"],
    )


def build_metric_params(cfg: Dict[str, Dict[str, Any]]) -> MetricParams:
    m = cfg["metrics"]
    return MetricParams(
        binarize_threshold=m["binarize_threshold"],
        e_measure_thresholds=m["e_measure_thresholds"],
        s_alpha=m["s_alpha"],
        fw_beta2=m["fw_beta2"],
        fw_gauss_size=m["fw_gauss_size"],
        fw_gauss_sigma=m["fw_gauss_sigma"],
        threshold_mode=m["threshold_mode"],
    )


def build_synth_spec(cfg: Dict[str, Dict[str, Any]]):
    from .data import SyntheticSpec

    s = cfg["synth"]
    if len(s["blob_count"]) != 2 or len(s["blob_radius"]) != 2:
        raise ConfigError("synth.blob_count and synth.blob_radius need exactly two values")
    return SyntheticSpec(
        canvas=s["canvas"],
        blob_count=tuple(s["blob_count"]),
        blob_radius=tuple(s["blob_radius"]),
        contrast=s["contrast"],
        noise_sigma=s["noise_sigma"],
        topology=s["topology"],
    )
