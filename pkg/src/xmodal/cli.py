"""Command-line entry point: ``xmodal generate|train|evaluate|report|selftest``."""

import argparse
import datetime
import os
import sys

import numpy as np

from .config import PRESETS, load_config
from .data import generate_dataset, load_dataset, save_dataset
from .evaluation import DIRECTIONS, REPORT_KEYS, evaluate
from .exceptions import XModalError
from .model import load_checkpoint, save_checkpoint
from .selftest import run_selftest
from .trainer import fit_pipeline

VISIBLE_FILE = "visible.txt"
INFRARED_FILE = "infrared.txt"
CONFIG_ECHO = "config.txt"
LOG_FILE = "log.csv"
LOG_COLUMNS = ("epoch", "stage", "loss_total", "loss_cv", "loss_cr", "loss_r",
               "clean_frac_v", "clean_frac_r", "assign_acc_if_gt")
STAGE1_CHECKPOINT = "checkpoint_stage1.txt"
STAGE2_CHECKPOINT = "checkpoint_stage2.txt"


def _num(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.17g}"


def _require_dir(path, flag):
    if not path:
        raise XModalError(f"an output directory is required ({flag} or the matching config key)")
    os.makedirs(path, exist_ok=True)
    return path


def _load_pair(data_dir):
    if not data_dir:
        raise XModalError("a data directory is required (--data or data_dir)")
    out = []
    for name, modality in ((VISIBLE_FILE, "visible"), (INFRARED_FILE, "infrared")):
        path = os.path.join(data_dir, name)
        if not os.path.isfile(path):
            raise XModalError(f"dataset file not found: {path}")
        ds = load_dataset(path)
        if ds.modality != modality:
            raise XModalError(f"{path} holds {ds.modality} data, expected {modality}")
        out.append(ds)
    return out


def _config(args):
    return load_config(args.config, preset=args.preset, seed=args.seed)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


# --- commands ------------------------------------------------------------------

def cmd_generate(args):
    cfg = _config(args)
    out = _require_dir(args.out or cfg.out_dir, "--out")
    data_v, data_r = generate_dataset(cfg.synth_config())
    save_dataset(data_v, os.path.join(out, VISIBLE_FILE))
    save_dataset(data_r, os.path.join(out, INFRARED_FILE))
    cfg.save(os.path.join(out, CONFIG_ECHO))
    print(f"wrote {len(data_v)} visible and {len(data_r)} infrared samples to {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    data_v, data_r = _load_pair(args.data or cfg.data_dir)
    out = _require_dir(args.out or cfg.out_dir, "--out")
    train_cfg = cfg.train_config()
    hist_dir = os.path.join(out, "histograms")
    os.makedirs(hist_dir, exist_ok=True)
    if args.export_plans:
        os.makedirs(os.path.join(out, "plans"), exist_ok=True)
    cfg.save(os.path.join(out, CONFIG_ECHO))

    log = open(os.path.join(out, LOG_FILE), "w")
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    log.write(f"# started {stamp}\n")
    log.write(",".join(LOG_COLUMNS) + "\n")

    def on_stage1_end(params, losses):
        save_checkpoint(params, os.path.join(out, STAGE1_CHECKPOINT))
        for e, value in enumerate(losses):
            log.write(",".join([str(e + 1), "1", _num(value)] + [""] * (len(LOG_COLUMNS) - 3)) + "\n")
        log.flush()

    def on_epoch(epoch, state):
        losses = state.epoch_losses
        row = [str(epoch + 1), "2", _num(losses["total"]), _num(losses["cv"]), _num(losses["cr"]),
               _num(losses["r"]), _num(state.partition_v.clean_fraction),
               _num(state.partition_r.clean_fraction), _num(state.assign_acc)]
        log.write(",".join(row) + "\n")
        log.flush()
        low, high, counts = state.score_histogram
        _write_csv(os.path.join(hist_dir, f"scores_epoch{epoch + 1:03d}.csv"), ("bin_low", "bin_high", "count"),
                   ([_num(a), _num(b), str(int(c))] for a, b, c in zip(low, high, counts)))
        if args.export_plans:
            for tag, plan in (("r_from_v", state.plan_r_from_v), ("v_from_r", state.plan_v_from_r)):
                np.savetxt(os.path.join(out, "plans", f"plan_{tag}_epoch{epoch + 1:03d}.csv"),
                           plan.plan, fmt="%.17g", delimiter=",")

    try:
        result = fit_pipeline(data_v, data_r, train_cfg, cfg.clusters_visible, cfg.clusters_infrared,
                              cfg.kmeans_max_iter, stage1_only=args.stage1_only,
                              on_stage1_end=on_stage1_end, on_epoch=on_epoch)
    finally:
        log.close()
    if not args.stage1_only:
        save_checkpoint(result.params, os.path.join(out, STAGE2_CHECKPOINT))
    print(f"trained {train_cfg.epochs_stage1} + {0 if args.stage1_only else train_cfg.epochs_stage2} epochs; "
          f"outputs in {out}")
    return 0


def _directions(arg):
    return list(DIRECTIONS) if arg == "both" else [arg]


def cmd_evaluate(args):
    cfg = _config(args)
    data_v, data_r = _load_pair(args.data or cfg.data_dir)
    checkpoint = args.checkpoint or cfg.checkpoint
    if not checkpoint or not os.path.isfile(checkpoint):
        raise XModalError(f"checkpoint not found: {checkpoint or '(none given)'}")
    params = load_checkpoint(checkpoint)
    out = _require_dir(args.out or cfg.out_dir, "--out")
    for direction in _directions(args.direction):
        report = evaluate(params, data_v, data_r, direction)
        report.to_json(os.path.join(out, f"report_{direction}.json"))
        report.to_csv(os.path.join(out, f"cmc_{direction}.csv"))
        summary = report.as_dict()
        print(" ".join(f"{k}={summary[k]:.4f}" if isinstance(summary[k], float) else f"{k}={summary[k]}"
                       for k in REPORT_KEYS))
    return 0


def cmd_report(args):
    """Compare the stage-1 and stage-2 checkpoints of a training run in both directions."""
    cfg = _config(args)
    data_v, data_r = _load_pair(args.data or cfg.data_dir)
    run = args.run
    if not run or not os.path.isdir(run):
        raise XModalError(f"training run directory not found: {run or '(none given)'}")
    out = _require_dir(args.out or run, "--out")
    rows = []
    for label, name in (("stage1", STAGE1_CHECKPOINT), ("stage2", STAGE2_CHECKPOINT)):
        path = os.path.join(run, name)
        if not os.path.isfile(path):
            continue
        params = load_checkpoint(path)
        for direction in DIRECTIONS:
            d = evaluate(params, data_v, data_r, direction).as_dict()
            rows.append([label] + [d[k] if isinstance(d[k], str) else _num(d[k]) for k in REPORT_KEYS])
    if not rows:
        raise XModalError(f"no checkpoints in {run}")
    _write_csv(os.path.join(out, "summary.csv"), ("checkpoint",) + REPORT_KEYS, rows)
    for row in rows:
        print(f"{row[0]} {row[-1]}: r1={float(row[1]):.4f} map={float(row[5]):.4f} minp={float(row[6]):.4f}")
    return 0


def cmd_selftest(args):
    ok = run_selftest(sabotage_gradient=args.debug_sabotage_gradient)
    print("selftest passed" if ok else "selftest FAILED")
    return 0 if ok else 1


# --- argument parsing --------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="hyper-parameter preset (overrides the file's)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="xmodal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic visible/infrared dataset pair")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="cluster, then run both training stages")
    _add_common(p)
    p.add_argument("--data", help="directory holding visible.txt and infrared.txt")
    p.add_argument("--stage1-only", action="store_true", help="stop after stage 1")
    p.add_argument("--export-plans", action="store_true", help="write each epoch's transport plans as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="cross-modality retrieval metrics for a checkpoint")
    _add_common(p)
    p.add_argument("--data", help="directory holding visible.txt and infrared.txt")
    p.add_argument("--checkpoint", help="model checkpoint file")
    p.add_argument("--direction", choices=["v2r", "r2v", "both"], default="both")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="stage-1 vs stage-2 retrieval summary of a training run")
    _add_common(p)
    p.add_argument("--data", help="directory holding visible.txt and infrared.txt")
    p.add_argument("--run", required=True, help="output directory of `xmodal train`")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.add_argument("--debug-sabotage-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (XModalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
