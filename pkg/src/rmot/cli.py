"""Command line entry point.

Subcommands cover the full loop: generate a synthetic dataset, train a
model on it, track with language conditioning, evaluate referent tracks,
sweep score thresholds, and run the component ablation grid. Every command
takes ``--config FILE`` plus repeatable ``--set key=value`` overrides; all
failures exit nonzero with a single ``error: <Type>: <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import hota, world
from .config import ConfigError, RunConfig
from .losses import MatchError
from .model import Model
from .nn import BlockError
from .tracker import Tracker, csv_to_records, records_to_csv
from .train import TrainError, train, write_loss_curve
from .world import WorldError

ERRORS = (ConfigError, BlockError, MatchError, WorldError, TrainError, hota.EvalError, OSError, ValueError)


def _ensure_parent(path) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write_text(path, text: str) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _limited(items, limit):
    return items if limit is None else items[:limit]


def _load_scenarios(cfg: RunConfig, limit=None) -> list:
    scenarios = world.load_dataset(cfg.dataset)
    return _limited(scenarios, limit)


def _load_model(cfg: RunConfig) -> Model:
    model = Model(cfg.model_config(), seed=cfg.seed)
    model.load(cfg.checkpoint)
    return model


def _preds_dir(cfg: RunConfig, args) -> str:
    return args.preds if args.preds else os.path.join(cfg.out_dir, "preds")


def _read_record_sets(preds_dir: str, count: int) -> list:
    sets = []
    for idx in range(count):
        path = os.path.join(preds_dir, f"preds_{idx:04d}.csv")
        if not os.path.exists(path):
            raise BlockError(f"missing prediction file {path}")
        with open(path, encoding="ascii") as fh:
            sets.append(csv_to_records(fh.read()))
    return sets


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, args) -> int:
    scenarios = world.generate_dataset(cfg.world_params(), cfg.dataset_seed, cfg.scenarios)
    _ensure_parent(cfg.dataset)
    world.save_dataset(cfg.dataset, scenarios)
    objects = sum(len(s.objects) for s in scenarios)
    newborn = sum(1 for s in scenarios for o in s.objects if o.birth > 0)
    visible = sum(len(s.frame_objects(f)) for s in scenarios for f in range(s.n_frames))
    referent = sum(len(ids) for s in scenarios for ids in s.referents)
    print(f"wrote {len(scenarios)} scenarios to {cfg.dataset}")
    print(f"objects {objects} newborn {newborn} referent_density {referent / max(1, visible):.4f}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    scenarios = _load_scenarios(cfg, args.limit)
    model = Model(cfg.model_config(), seed=cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_text(os.path.join(cfg.out_dir, "config.txt"), cfg.to_text())

    def on_epoch(entry):
        print(f"epoch {entry['epoch']:3d}  loss {entry['loss']:.6f}  lr {entry['lr']:.2e}")

    history, opt = train(model, scenarios, cfg.train_settings(), on_epoch=on_epoch)
    _ensure_parent(cfg.checkpoint)
    model.save(cfg.checkpoint, opt.state_entries())
    write_loss_curve(os.path.join(cfg.out_dir, "loss_curve.csv"), history)
    print(f"saved checkpoint {cfg.checkpoint} final_loss {history[-1]['loss']:.6f}")
    return 0


def cmd_track(cfg: RunConfig, args) -> int:
    scenarios = _load_scenarios(cfg, args.limit)
    tracker = Tracker(_load_model(cfg), cfg.tracker_config())
    preds_dir = _preds_dir(cfg, args)
    os.makedirs(preds_dir, exist_ok=True)
    total = 0
    for idx, scenario in enumerate(scenarios):
        frames = [world.render(scenario, f) for f in range(scenario.n_frames)]
        records = tracker.run_sequence(frames, scenario.expression.text)
        total += len(records)
        _write_text(os.path.join(preds_dir, f"preds_{idx:04d}.csv"), records_to_csv(records))
        if args.overlays:
            shot_dir = os.path.join(preds_dir, f"frames_{idx:04d}")
            os.makedirs(shot_dir, exist_ok=True)
            by_frame = {}
            for r in records:
                by_frame.setdefault(r.frame, []).append((r.ident, r.box, r.obj_score, r.ref_score))
            for f, img in enumerate(frames):
                big = world.overlay(img, by_frame.get(f, []))
                world.write_ppm(os.path.join(shot_dir, f"frame_{f:03d}.ppm"), big)
    print(f"tracked {len(scenarios)} scenarios ({total} detections) -> {preds_dir}")
    return 0


def _eval_inputs(cfg: RunConfig, args):
    scenarios = _load_scenarios(cfg, args.limit)
    gt_sets = [hota.scenario_referent_rows(s) for s in scenarios]
    record_sets = _read_record_sets(_preds_dir(cfg, args), len(scenarios))
    return gt_sets, record_sets


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.use_gt:
        scenarios = _load_scenarios(cfg, args.limit)
        gt_sets = [hota.scenario_referent_rows(s) for s in scenarios]
        pred_sets = gt_sets
    else:
        gt_sets, record_sets = _eval_inputs(cfg, args)
        pred_sets = [
            hota.filter_referents(records, cfg.obj_threshold, cfg.ref_threshold)
            for records in record_sets
        ]
    report = hota.evaluate_scenarios(gt_sets, pred_sets)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_text(os.path.join(cfg.out_dir, "eval.txt"), report.to_text())
    _write_text(os.path.join(cfg.out_dir, "eval.json"), report.to_json() + "\n")
    print(report.to_text(), end="")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    gt_sets, record_sets = _eval_inputs(cfg, args)
    betas = [float(v) for v in args.betas.split(",")] if args.betas else [round(0.1 * i, 1) for i in range(1, 10)]
    if args.param == "ref":
        results = hota.sweep_ref_thresholds(gt_sets, record_sets, betas, obj_threshold=cfg.obj_threshold)
    else:
        results = []
        for beta in betas:
            pred_sets = [hota.filter_referents(r, beta, cfg.ref_threshold) for r in record_sets]
            results.append((beta, hota.evaluate_scenarios(gt_sets, pred_sets)))
    fields = ("hota", "det_a", "ass_a", "det_re", "det_pr")
    lines = [f"{args.param + '_thr':>9s} " + " ".join(f"{f:>9s}" for f in fields)]
    for beta, rep in results:
        lines.append(f"{beta:9.2f} " + " ".join(f"{getattr(rep, f):9.6f}" for f in fields))
    table = "\n".join(lines) + "\n"
    payload = {
        "param": args.param,
        "thresholds": [beta for beta, _ in results],
        "reports": [rep.as_dict() for _, rep in results],
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_text(os.path.join(cfg.out_dir, f"sweep_{args.param}.txt"), table)
    _write_text(os.path.join(cfg.out_dir, f"sweep_{args.param}.json"), json.dumps(payload, indent=2) + "\n")
    print(table, end="")
    return 0


def _ablation_grid(cfg: RunConfig):
    fusion_on = cfg.sentence_fusion if cfg.sentence_fusion != "none" else "pre"
    return list(itertools.product((fusion_on, "none"), (True, False), ("deform_first", "fuse_first")))


def cmd_ablate(cfg: RunConfig, args) -> int:
    scenarios = _load_scenarios(cfg, args.limit)
    eval_scenarios = _limited(scenarios, args.eval_limit)
    gt_sets = [hota.scenario_referent_rows(s) for s in eval_scenarios]
    cells = []
    for fusion, collab, order in _ablation_grid(cfg):
        cell_cfg = replace(cfg, sentence_fusion=fusion, collab=collab, encoder_order=order)
        model = Model(cell_cfg.model_config(), seed=cfg.seed)
        history, _ = train(model, scenarios, cell_cfg.train_settings())
        tracker = Tracker(model, cell_cfg.tracker_config())
        pred_sets = []
        for scenario in eval_scenarios:
            frames = [world.render(scenario, f) for f in range(scenario.n_frames)]
            records = tracker.run_sequence(frames, scenario.expression.text)
            pred_sets.append(hota.filter_referents(records, cfg.obj_threshold, cfg.ref_threshold))
        report = hota.evaluate_scenarios(gt_sets, pred_sets)
        cells.append({
            "sentence_fusion": fusion,
            "collab": collab,
            "encoder_order": order,
            "train_loss": history[-1]["loss"],
            "report": report.as_dict(),
        })
        print(f"fusion={fusion:<4s} collab={str(collab):<5s} order={order:<12s} "
              f"hota {report.hota:.6f} det_a {report.det_a:.6f} ass_a {report.ass_a:.6f}")

    def mean_hota(predicate):
        vals = [c["report"]["hota"] for c in cells if predicate(c)]
        return float(np.mean(vals))

    fusion_on = _ablation_grid(cfg)[0][0]
    marginals = {
        "sentence_fusion": mean_hota(lambda c: c["sentence_fusion"] != "none") - mean_hota(lambda c: c["sentence_fusion"] == "none"),
        "collab": mean_hota(lambda c: c["collab"]) - mean_hota(lambda c: not c["collab"]),
        "encoder_order": mean_hota(lambda c: c["encoder_order"] == "deform_first") - mean_hota(lambda c: c["encoder_order"] == "fuse_first"),
    }
    full = next(c for c in cells if c["sentence_fusion"] == fusion_on and c["collab"] and c["encoder_order"] == cfg.encoder_order)
    base = next(c for c in cells if c["sentence_fusion"] == "none" and not c["collab"] and c["encoder_order"] == cfg.encoder_order)
    verdict = "improves" if full["report"]["hota"] >= base["report"]["hota"] else "does not improve"
    lines = [f"{k} marginal hota delta {v:+.6f}" for k, v in marginals.items()]
    lines.append(f"full configuration {verdict} over ablated baseline "
                 f"({full['report']['hota']:.6f} vs {base['report']['hota']:.6f})")
    summary = "\n".join(lines) + "\n"
    payload = {"cells": cells, "marginals": marginals, "verdict": verdict}
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_text(os.path.join(cfg.out_dir, "ablate.json"), json.dumps(payload, indent=2) + "\n")
    _write_text(os.path.join(cfg.out_dir, "ablate.txt"), summary)
    print(summary, end="")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **extra_flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        return p

    add("generate", "write a synthetic scenario dataset")

    p = add("train", "train a model on a generated dataset")
    p.add_argument("--limit", type=int, default=None, help="use only the first N scenarios")

    p = add("track", "run the tracker over a dataset with a trained checkpoint")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--preds", default=None, help="directory for prediction CSVs")
    p.add_argument("--overlays", action="store_true", help="also write annotated PPM frames")

    p = add("eval", "score referent predictions against ground truth")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--preds", default=None)
    p.add_argument("--use-gt", action="store_true", help="score ground truth against itself")

    p = add("sweep", "evaluate across a score-threshold grid")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--preds", default=None)
    p.add_argument("--param", choices=("ref", "obj"), default="ref")
    p.add_argument("--betas", default=None, help="comma-separated thresholds")

    p = add("ablate", "train and score the component on/off grid")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--eval-limit", type=int, default=None)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
