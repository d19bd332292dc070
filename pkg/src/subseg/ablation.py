"""Ablation grid runner: trains one model per (cell, seed) and scores it.

Cells vary pyramid depth, fusion arithmetic, and the feature-loss term
while everything else (data, schedule, initialization seeds) stays fixed,
so differences between rows isolate one mechanism. Cells run in separate
processes when workers > 1; each cell is internally deterministic, and a
diverged cell is recorded as failed without stopping the sweep.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Sample, SyntheticSpec, load_folder, synth_samples
from .errors import ConfigError, NumericError
from .losses import LossConfig
from .metrics import MetricParams
from .model import ADD, MS_SUBTRACT, SUBTRACT, ModelConfig
from .model import SegmentationModel
from .train import TrainConfig, evaluate, train

TRAIN_DATA_SEED = 11
TEST_DATA_SEED = 12


@dataclass(frozen=True)
class AblationCell:
    label: str
    fusion: str
    depth: int
    feature_loss: bool


def standard_cells(axes: Sequence[str], base_depth: int = 5) -> List[AblationCell]:
    """Row layout for the requested axes.

    With all three axes this is the canonical seven-row sweep: depth 1..5
    with plain subtraction and no feature loss, then the feature loss added
    at full depth, then subtraction swapped for addition.
    """
    axes = tuple(sorted(set(axes)))
    known = {"depth", "fusion", "lossnet"}
    if not axes or not set(axes) <= known:
        raise ConfigError(f"ablation axes must be a nonempty subset of {sorted(known)}, got {axes}")
    if set(axes) == known:
        cells = [AblationCell(f"depth{d}" + ("_baseline" if d == 1 else ""), SUBTRACT, d, False) for d in range(1, 6)]
        cells.append(AblationCell("depth5_featloss", SUBTRACT, 5, True))
        cells.append(AblationCell("add_fusion_featloss", ADD, 5, True))
        return cells
    cells: List[AblationCell] = []
    if "depth" in axes:
        cells += [AblationCell(f"depth{d}", SUBTRACT, d, False) for d in range(1, 6)]
    if "fusion" in axes:
        cells += [
            AblationCell(f"fusion_{v}", v, base_depth, True)
            for v in (SUBTRACT, MS_SUBTRACT, ADD)
        ]
    if "lossnet" in axes:
        cells += [
            AblationCell("featloss_on", SUBTRACT, base_depth, True),
            AblationCell("featloss_off", SUBTRACT, base_depth, False),
        ]
    return cells


@dataclass
class CellSpec:
    """Everything one worker needs; kept picklable for process pools."""

    cell: AblationCell
    seed: int
    model_config: ModelConfig
    train_config: TrainConfig
    loss_config: LossConfig
    synth: Optional[SyntheticSpec]
    train_count: int
    test_count: int
    train_dir: Optional[str]
    test_dir: Optional[str]


def _cell_data(spec: CellSpec) -> Tuple[List[Sample], List[Sample]]:
    if spec.train_dir and spec.test_dir:
        nc = spec.model_config.num_classes
        return load_folder(spec.train_dir, nc), load_folder(spec.test_dir, nc)
    synth = spec.synth or SyntheticSpec()
    return (
        synth_samples(synth, TRAIN_DATA_SEED, spec.train_count),
        synth_samples(synth, TEST_DATA_SEED, spec.test_count),
    )


def run_cell(spec: CellSpec) -> Dict[str, object]:
    """Train and score one (cell, seed); exceptions become a failed row."""
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    cell = spec.cell
    row: Dict[str, object] = {
        "cell": cell.label,
        "fusion": cell.fusion,
        "depth": cell.depth,
        "feature_loss": cell.feature_loss,
        "seed": spec.seed,
    }
    try:
        model_cfg = replace(
            spec.model_config, fusion_variant=cell.fusion, pyramid_depth=cell.depth
        )
        loss_cfg = replace(spec.loss_config, use_feature_loss=cell.feature_loss)
        train_cfg = replace(spec.train_config, seed=spec.seed)
        train_samples, test_samples = _cell_data(spec)
        model = SegmentationModel(model_cfg, seed=spec.seed)
        train(model, train_samples, train_cfg, loss_cfg)
        report = evaluate(model, test_samples, MetricParams())
        row["mdice"] = report.aggregate["mdice"]
        row["miou"] = report.aggregate["miou"]
        row["status"] = "ok"
    except NumericError as exc:
        row["mdice"] = float("nan")
        row["miou"] = float("nan")
        row["status"] = f"failed: {exc}"
    return row


def run_grid(
    cells: Sequence[AblationCell],
    seeds: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_config: LossConfig,
    synth: Optional[SyntheticSpec] = None,
    train_count: int = 200,
    test_count: int = 50,
    train_dir: Optional[str] = None,
    test_dir: Optional[str] = None,
    workers: int = 1,
) -> List[Dict[str, object]]:
    specs = [
        CellSpec(
            cell=cell,
            seed=seed,
            model_config=model_config,
            train_config=train_config,
            loss_config=loss_config,
            synth=synth,
            train_count=train_count,
            test_count=test_count,
            train_dir=train_dir,
            test_dir=test_dir,
        )
        for cell in cells
        for seed in seeds
    ]
    if workers <= 1:
        results = [run_cell(s) for s in specs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, specs))
    return results


def summarize(rows: Sequence[Dict[str, object]]) -> List[Dict[str, object]]:
    """One summary row per cell: per-seed scores plus mean and median."""
    order: List[str] = []
    by_cell: Dict[str, List[Dict[str, object]]] = {}
    for r in rows:
        label = str(r["cell"])
        if label not in by_cell:
            by_cell[label] = []
            order.append(label)
        by_cell[label].append(r)
    out = []
    for label in order:
        group = sorted(by_cell[label], key=lambda r: int(r["seed"]))
        scores = np.array([float(r["mdice"]) for r in group], dtype=np.float64)
        ok = scores[~np.isnan(scores)]
        first = group[0]
        out.append(
            {
                "cell": label,
                "fusion": first["fusion"],
                "depth": first["depth"],
                "feature_loss": first["feature_loss"],
                "seeds": ",".join(str(r["seed"]) for r in group),
                "mdice_per_seed": ",".join(f"{s:.4f}" for s in scores),
                "mdice_mean": float(ok.mean()) if ok.size else float("nan"),
                "mdice_median": float(np.median(ok)) if ok.size else float("nan"),
                "n_failed": int(np.isnan(scores).sum()),
            }
        )
    return out


def format_table(summary: Sequence[Dict[str, object]]) -> str:
    cols = ("cell", "fusion", "depth", "feature_loss", "seeds", "mdice_per_seed", "mdice_mean", "mdice_median", "n_failed")
    lines = ["\t".join(cols)]
    for row in summary:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
