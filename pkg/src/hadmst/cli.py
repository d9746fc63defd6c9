"""Command-line entry point: synth-data, train, sample, evaluate, report.

Exit codes: 0 on success, 2 on a configuration error (the offending key is
named on stderr), 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, TrainingConfig, apply_overrides, config_from_dict, load_config

logger = logging.getLogger("hadmst")

SUBCOMMANDS = ("synth-data", "train", "sample", "evaluate", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hadmst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the seed used by this command")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                       help="dotted config override, e.g. cmsa.tau=0.2 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("synth-data", help="generate the synthetic paired corpus"))
    common(sub.add_parser("train", help="train a model on the dataset at data.path"))
    for name, text in (("sample", "sample HR maps for test tiles"),
                       ("evaluate", "score samples against truth and upsampling baselines"),
                       ("report", "local-SSIM overlays and per-gene scatter data")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--tiles", type=int, default=4, help="number of test tiles to render")
        if name == "sample":
            p.add_argument("--no-lr", action="store_true", help="sample without the LR condition")
        if name == "report":
            p.add_argument("--predictions", type=Path,
                           help="predictions.npy from evaluate (sampled afresh if omitted)")
    return parser


def _config(args) -> TrainingConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _checkpoint_config(cfg: TrainingConfig, args) -> TrainingConfig:
    """Checkpoint config with command-line overrides layered on top."""
    data = cfg.to_dict()
    if args.config is not None:
        # only the data location and evaluation settings may differ from training
        extra = json.loads(Path(args.config).read_text())
        for key in ("data", "eval"):
            data[key].update(extra.get(key, {}))
    cfg = config_from_dict(apply_overrides(data, args.overrides))
    if args.seed is not None:
        cfg.eval.seed = args.seed
    return cfg


def cmd_synth_data(args) -> int:
    from .data import build_synthetic_dataset

    cfg = _config(args)
    d = cfg.data
    ds = build_synthetic_dataset(
        args.out, seed=cfg.seed, num_genes=d.num_genes, hr_size=d.hr_size,
        lr_size=d.lr_size or None, n_train=d.n_train, n_test=d.n_test,
    )
    print(f"wrote {ds.manifest.num_tiles} tiles ({len(ds.gene_panel)} genes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import read_dataset
    from .training import fit

    cfg = _config(args)
    ds = read_dataset(cfg.data.path)
    state = fit(cfg, ds, out_dir=args.out)
    last = state.history[-1] if state.history else {}
    print(f"trained {state.step} steps; final diffusion loss {last.get('diffusion', float('nan')):.4f}")
    return 0


def _load(args):
    from .data import read_dataset
    from .training import CheckpointError, load_checkpoint

    model, disc, schedule, cfg = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(cfg, args)
    ds = read_dataset(cfg.data.path)
    if list(ds.gene_panel) != list(model.gene_panel):
        raise CheckpointError(f"checkpoint gene panel {model.gene_panel} != dataset panel {ds.gene_panel}")
    return model, schedule, cfg, ds


def _render_map(values: np.ndarray, path: Path) -> None:
    from matplotlib import colormaps
    from PIL import Image

    rgb = colormaps["viridis"](np.clip(values, 0.0, 1.0))[..., :3]
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)


def cmd_sample(args) -> int:
    from .data import denormalize_expression, to_unit
    from .training import dataset_tensors, generate

    model, schedule, cfg, ds = _load(args)
    idx = ds.indices("test")
    if cfg.eval.max_tiles:
        idx = idx[: cfg.eval.max_tiles]
    tensors = dataset_tensors(ds, idx, with_lr=not args.no_lr)
    pred = generate(model, schedule, tensors, cfg.eval.seed, cfg.eval.batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples_model.npy", pred)
    np.save(out / "samples_raw.npy", denormalize_expression(pred, ds.manifest).astype(np.float32))
    tile_ids = [ds.tile_ids[i] for i in idx]
    (out / "samples.json").write_text(json.dumps(
        {"tile_ids": tile_ids, "gene_panel": ds.gene_panel, "use_lr": not args.no_lr,
         "seed": cfg.eval.seed}, indent=2))
    unit = to_unit(pred.astype(np.float64))
    for n in range(min(args.tiles, len(idx))):
        for c, gene in enumerate(ds.gene_panel):
            _render_map(unit[n, c], out / f"sample_{tile_ids[n]}_{gene}.png")
    print(f"sampled {len(idx)} tiles ({'without' if args.no_lr else 'with'} LR) into {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .training import validate

    model, schedule, cfg, ds = _load(args)
    report, pred = validate(model, schedule, ds, cfg, return_predictions=True)
    out = Path(args.out)
    report.write(out)
    np.save(out / "predictions.npy", pred)
    print(report.table())
    return 0


def cmd_report(args) -> int:
    from .data import to_unit
    from .eval import local_ssim_map, render_overlay
    from .training import validate

    model, schedule, cfg, ds = _load(args)
    if args.predictions is not None:
        pred = np.load(args.predictions)
        report = None
    else:
        report, pred = validate(model, schedule, ds, cfg, return_predictions=True)
    idx = ds.indices("test")[: len(pred)]
    truth = to_unit(ds.hr_model(idx).astype(np.float64))
    unit = to_unit(pred.astype(np.float64))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n in range(min(args.tiles, len(idx))):
        tile_id = ds.tile_ids[idx[n]]
        for c, gene in enumerate(ds.gene_panel):
            heat = local_ssim_map(unit[n, c], truth[n, c])
            render_overlay(ds.he[idx[n]], heat, path=out / f"overlay_{tile_id}_{gene}.png")
    if report is None:
        from .eval import per_gene_report
        from .training import upsample_baselines

        report = per_gene_report(unit, truth, ds.gene_panel,
                                 upsample_baselines(ds.lr_model(idx), ds.manifest.hr_size))
    (out / "scatter.json").write_text(json.dumps(report.scatter(), indent=2))
    print(f"wrote overlays and scatter data to {out}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
