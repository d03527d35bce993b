"""Command line: ``ocnet gen-data|train|evaluate|ablate|export-ranking --config PATH``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import load_model
from .data import SyntheticConfig, generate_synthetic, load_reid_directory
from .errors import ConfigError, NumericError, ValidationError
from .pipeline import (TrainingError, evaluate, load_split, retrieval_alpha, run_ablation, train)
from .retrieval import distance_matrix, export_ranking, render_ranking_grid, write_features, write_report

log = logging.getLogger("ocnet")

# settings that change tensor shapes; a checkpoint must agree with the config on these
SHAPE_KEYS = ("stage_widths", "stage_strides", "feat_dim", "groups", "ram_hidden", "center_size",
              "num_parts", "use_concat", "use_cfm", "use_ram", "image_height", "image_width")


def _config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    syn = SyntheticConfig.from_run_config(cfg)
    root = Path(cfg.data_root)
    index, _ = generate_synthetic(syn, root)
    config_mod.save(cfg, root / "resolved_config.txt")
    print(f"wrote {len(index.samples)} images to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    result = train(cfg, out_dir=out)
    last = result.history[-1]
    print(f"trained {cfg.steps} steps, final L_total={last['L_total']:.6f}; "
          f"checkpoint {out / 'checkpoint.ocn'}")
    return 0


def _load_checked(cfg, checkpoint):
    model = load_model(checkpoint)
    bad = [k for k in SHAPE_KEYS if getattr(model.cfg, k) != getattr(cfg, k)]
    if bad:
        raise ConfigError("checkpoint and config disagree on " + ", ".join(
            f"{k} ({getattr(model.cfg, k)} vs {getattr(cfg, k)})" for k in bad))
    # retrieval-side settings follow the config file
    model.cfg = model.cfg.replace(alpha=cfg.alpha, normalize_features=cfg.normalize_features)
    return model


def _checkpoint_path(cfg, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "checkpoint.ocn"


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model = _load_checked(cfg, _checkpoint_path(cfg, args))
    index = load_reid_directory(cfg.data_root)
    size = (cfg.image_height, cfg.image_width)
    q, g = load_split(index, "query", size), load_split(index, "gallery", size)
    ev = evaluate(model, q, g, exclude_junk=not args.no_junk_exclusion)
    report = dict(ev["report"])
    if model.heads is not None:
        d0 = distance_matrix(ev["query"], ev["gallery"], 0.0)
        report["alpha0.max_abs_diff"] = float(np.abs(ev["dist"].values - d0.values).max())
        alt = evaluate(model, q, g, exclude_junk=not args.no_junk_exclusion, alpha=0.0)["report"]
        for k in ("all.rank1", "all.mAP", "occluded.rank1", "occluded.mAP"):
            if k in alt:
                report[f"alpha0.{k}"] = alt[k]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "resolved_config.txt")
    write_report(out / "eval_report.txt", report)
    write_features(out / "query.ocf", ev["query"], retrieval_alpha(model))
    write_features(out / "gallery.ocf", ev["gallery"], retrieval_alpha(model))
    for k in ("all.rank1", "all.mAP", "occluded.rank1", "occluded.mAP"):
        if k in report:
            print(f"{k:16s} {report[k]:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "resolved_config.txt")
    rows = run_ablation(cfg, out)
    for r in rows:
        print(f"{r['leg']:10s} {r['status']:6s} occluded R1={r.get('occluded.rank1', float('nan')):.4f} "
              f"mAP={r.get('occluded.mAP', float('nan')):.4f}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_export_ranking(args) -> int:
    cfg = _config(args)
    model = _load_checked(cfg, _checkpoint_path(cfg, args))
    index = load_reid_directory(cfg.data_root)
    size = (cfg.image_height, cfg.image_width)
    q, g = load_split(index, "query", size), load_split(index, "gallery", size)
    ev = evaluate(model, q, g)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / f"ranking_q{args.query}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    if not 0 <= args.query < len(q.ids):
        raise ValidationError(f"query index {args.query} out of range [0, {len(q.ids)})")
    rows = export_ranking(args.query, ev["dist"], ev["gallery"], args.k, out,
                          query_identity=int(q.ids[args.query]))
    if args.grid:
        render_ranking_grid(q.paths[args.query], rows, out.with_suffix(".png"),
                            tile=(cfg.image_height, cfg.image_width))
    print(f"wrote top-{args.k} ranking to {out}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "export-ranking": cmd_export_ranking}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int, default=None)
        if name in ("evaluate", "export-ranking"):
            s.add_argument("--checkpoint", default=None)
        if name == "evaluate":
            s.add_argument("--no-junk-exclusion", action="store_true",
                           help="keep same-id same-camera gallery entries (smoke tests)")
        if name == "export-ranking":
            s.add_argument("--query", type=int, required=True, help="query row index")
            s.add_argument("--k", type=int, default=10)
            s.add_argument("--output", default=None)
            s.add_argument("--grid", action="store_true", help="also write a PNG image strip")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError, NumericError, TrainingError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
