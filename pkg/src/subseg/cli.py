"""Command-line interface.

Subcommands: synth-gen, train, eval, ablate, flops, gradcheck,
export-curves. Every run takes --config / repeatable --set overrides
(validated against the schema before any work starts), --seed, and --out;
all file output lands under --out. Exit codes: 0 success, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ablation, config as cfg_mod
from . import autodiff as ad
from .data import SyntheticSpec, load_folder, synth_generate, synth_samples
from .errors import ConfigError, DataError, NumericError, SubsegError
from .losses import LossConfig, SegmentationLoss
from .model import FUSION_VARIANTS, ModelConfig, SegmentationModel
from .train import evaluate, gradient_check, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MODULE_PREFIXES = ("encoder", "reduce", "fuse", "enhance", "decoder", "head")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subseg",
        description="Subtraction-fusion segmentation harness.",
        epilog=cfg_mod.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config key (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="override train.seed and model.seed")
        p.add_argument("--out", default="out", help="directory all outputs are written under")

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset (train/ and test/)")
    common(p)
    p = sub.add_parser("train", help="train a model and write checkpoints plus the epoch log")
    common(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint and write metric reports")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
    p.add_argument("--dump-probs", action="store_true", help="write prediction maps as PGM")
    p = sub.add_parser("ablate", help="train the ablation grid and write the table")
    common(p)
    p = sub.add_parser("flops", help="parameter and MAC accounting per fusion variant")
    common(p)
    p = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    common(p)
    p.add_argument("--n-params", type=int, default=10, help="sampled parameter entries")
    p = sub.add_parser("export-curves", help="merge epoch logs into one plot-ready table")
    common(p)
    p.add_argument("logs", nargs="+", help="training log files")
    return parser


def _load(args) -> dict:
    cfg = cfg_mod.load_config(args.config, tuple(args.overrides))
    if args.seed is not None:
        cfg["train"]["seed"] = int(args.seed)
        cfg["model"]["seed"] = int(args.seed)
    ad.set_default_dtype(np.float64 if cfg["model"]["dtype"] == "f64" else np.float32)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_data(cfg: dict, num_classes: int):
    if cfg["data"]["train_dir"]:
        return load_folder(cfg["data"]["train_dir"], num_classes)
    spec = cfg_mod.build_synth_spec(cfg)
    print(f"# no data.train_dir set; using {cfg['synth']['train_count']} synthetic samples")
    return synth_samples(spec, ablation.TRAIN_DATA_SEED, cfg["synth"]["train_count"])


def _test_data(cfg: dict, num_classes: int):
    if cfg["data"]["test_dir"]:
        return load_folder(cfg["data"]["test_dir"], num_classes)
    spec = cfg_mod.build_synth_spec(cfg)
    print(f"# no data.test_dir set; using {cfg['synth']['test_count']} synthetic samples")
    return synth_samples(spec, ablation.TEST_DATA_SEED, cfg["synth"]["test_count"])


def cmd_synth_gen(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    spec = cfg_mod.build_synth_spec(cfg)
    seed = cfg["train"]["seed"]
    train_ids = synth_generate(spec, seed, cfg["synth"]["train_count"], out / "train")
    test_ids = synth_generate(spec, seed + 1, cfg["synth"]["test_count"], out / "test")
    print(f"wrote {len(train_ids)} train and {len(test_ids)} test samples under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    model_cfg = cfg_mod.build_model_config(cfg)
    samples = _train_data(cfg, model_cfg.num_classes)
    model = SegmentationModel(model_cfg, seed=cfg["model"]["seed"])
    result = train(
        model, samples, cfg_mod.build_train_config(cfg), cfg_mod.build_loss_config(cfg), out_dir=out
    )
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs; final total loss {last['total']:.4f}, "
        f"val mdice {last['val_mdice']:.4f}; wrote {result.final_checkpoint}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    model = SegmentationModel.from_checkpoint(args.checkpoint)
    samples = _test_data(cfg, model.config.num_classes)
    report = evaluate(
        model,
        samples,
        cfg_mod.build_metric_params(cfg),
        dump_dir=(out / "probs") if args.dump_probs else None,
    )
    (out / "report.kv").write_text(report.to_kv_lines(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text_table(), encoding="utf-8")
    print(report.to_text_table(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    cells = ablation.standard_cells(cfg["ablate"]["axes"], base_depth=cfg["model"]["pyramid_depth"])
    rows = ablation.run_grid(
        cells,
        seeds=cfg["ablate"]["seeds"],
        model_config=cfg_mod.build_model_config(cfg),
        train_config=cfg_mod.build_train_config(cfg),
        loss_config=cfg_mod.build_loss_config(cfg),
        synth=cfg_mod.build_synth_spec(cfg),
        train_count=cfg["synth"]["train_count"],
        test_count=cfg["synth"]["test_count"],
        train_dir=cfg["data"]["train_dir"] or None,
        test_dir=cfg["data"]["test_dir"] or None,
        workers=cfg["ablate"]["workers"],
    )
    summary = ablation.summarize(rows)
    table = ablation.format_table(summary)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    failed = sum(int(r["n_failed"]) for r in summary)
    if failed:
        print(f"# {failed} cell run(s) failed; see status columns")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    lines: List[str] = []
    totals = {}
    for variant in FUSION_VARIANTS:
        model_cfg = cfg_mod.build_model_config(cfg)
        model_cfg = type(model_cfg)(
            fusion_variant=variant,
            pyramid_depth=model_cfg.pyramid_depth,
            encoder_channels=model_cfg.encoder_channels,
            reduced_channels=model_cfg.reduced_channels,
            num_classes=model_cfg.num_classes,
            input_size=model_cfg.input_size,
        )
        model = SegmentationModel(model_cfg, seed=0)
        rows = model.layer_table()
        per_module = {m: [0, 0, 0] for m in MODULE_PREFIXES}
        for name, params, macs, fixed in rows:
            module = name.split(".")[0]
            per_module[module][0] += params
            per_module[module][1] += macs
            per_module[module][2] += fixed
        lines.append(f"[{variant}]")
        lines.append(f"{'module':<10}{'params':>10}{'macs':>14}{'fixed_macs':>14}")
        for module, (p_, m_, f_) in per_module.items():
            lines.append(f"{module:<10}{p_:>10}{m_:>14}{f_:>14}")
        total_params = model.count_params()
        total_macs, total_fixed = model.count_flops()
        lines.append(f"{'total':<10}{total_params:>10}{total_macs:>14}{total_fixed:>14}")
        lines.append("")
        totals[variant] = (total_params, total_macs)
    params_set = {t[0] for t in totals.values()}
    macs_set = {t[1] for t in totals.values()}
    if len(params_set) != 1 or len(macs_set) != 1:
        raise NumericError(f"fusion variants disagree on params/MACs: {totals}")
    lines.append(f"parity OK: all variants have {params_set.pop()} params and {macs_set.pop()} learnable MACs")
    text = "\n".join(lines) + "\n"
    (out / "flops.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    model_cfg = cfg_mod.build_model_config(cfg)
    model = SegmentationModel(model_cfg, seed=cfg["model"]["seed"])
    max_rel, details = gradient_check(
        model,
        cfg_mod.build_loss_config(cfg),
        n_params=args.n_params,
        seed=cfg["train"]["seed"],
        input_hw=(32, 32),
    )
    lines = [f"{name}[{idx}]\tanalytic={a:.6e}\tfd={f:.6e}\trel_err={r:.3e}" for name, idx, a, f, r in details]
    lines.append(f"max_rel_err\t{max_rel:.6e}")
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    if not np.isfinite(max_rel) or max_rel >= 1e-4:
        raise NumericError(f"gradient check failed: max relative error {max_rel:.3e} >= 1e-4")
    return EXIT_OK


def cmd_export_curves(args) -> int:
    _load(args)
    out = _out_dir(args)
    tables = []
    for log in args.logs:
        path = Path(log)
        if not path.exists():
            raise DataError(f"log file not found: {path}")
        columns: Optional[List[str]] = None
        rows = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.startswith("# columns:"):
                columns = line.split(":", 1)[1].split()
            elif line.startswith("#") or not line.strip():
                continue
            else:
                rows.append(line.split("\t"))
        if columns is None or not rows:
            raise DataError(f"{path}: no epoch rows found (not a training log?)")
        tables.append((path.stem if len(args.logs) > 1 else "", columns, rows))

    merged_cols = ["epoch"]
    for tag, columns, _ in tables:
        for c in columns[1:]:
            merged_cols.append(f"{c}:{tag}" if tag else c)
    n_epochs = max(len(rows) for _, _, rows in tables)
    out_rows = []
    for i in range(n_epochs):
        row = [str(i)]
        for _, columns, rows in tables:
            row += rows[i][1:] if i < len(rows) else [""] * (len(columns) - 1)
        out_rows.append(row)
    widths = [max(len(merged_cols[j]), max((len(r[j]) for r in out_rows), default=0)) for j in range(len(merged_cols))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(merged_cols, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in out_rows]
    text = "\n".join(lines) + "\n"
    (out / "curves.tsv").write_text(text, encoding="utf-8")
    print(f"wrote {out / 'curves.tsv'} ({n_epochs} epochs, {len(merged_cols)} columns)")
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "export-curves": cmd_export_curves,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
