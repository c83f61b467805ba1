"""Command-line entry points: gen-data, train, invert, eval, ablate."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import io, protocol
from .aggregation import DEFAULT_R_SET
from .dataset import Scene, make_scenes
from .inversion import invert, sample_targets

log = logging.getLogger("hrhf")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_DIVERGED = 6


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


def threads():
    """Worker cap from HRHF_THREADS (default 1); work runs serially either way."""
    raw = os.environ.get("HRHF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError(EXIT_CONFIG, "config", f"HRHF_THREADS must be a positive integer, got {raw!r}")
    return n


def _tag(cfg):
    return f"hrhf config={cfg.hash()} seed={cfg.seed}"


def _write_resolved(out, cfg):
    io.write_json(os.path.join(out, "config.json"), {**cfg.to_dict(), "config_hash": cfg.hash()})


def _scenes(cfg, split):
    d = cfg.data
    classes = d.step_spec().classes
    if split == "train":
        return make_scenes([cfg.seed, 1], d.train_scenes, classes, d.canvas_size, d.classes_per_scene)
    return make_scenes([cfg.seed, 2], d.test_scenes, classes, d.canvas_size, d.classes_per_scene)


def load_scenes(directory, split):
    """Scenes written by gen-data (images are 8-bit quantized)."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, "missing", f"no manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    scenes = []
    for entry in manifest["splits"][split]:
        img = io.read_ppm(os.path.join(directory, entry["image"])).astype(np.float64) / 255.0
        lab = io.read_pgm(os.path.join(directory, entry["label"]))
        scenes.append(Scene(img, lab, [(c, tuple(b) if b else None) for c, b in entry["instances"]]))
    return scenes


def _report_rows(reports):
    rows = []
    for r in reports:
        row = {"method": r.method, "step": r.step, "seed": r.seed, "config_hash": r.config_hash}
        row.update({f"miou_{k}": v for k, v in r.groups.items()})
        row.update({f"iou_{c}": v for c, v in zip(r.class_ids, r.iou)})
        rows.append(row)
    return rows


def _csv_bytes(rows):
    buf = _io.StringIO()
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue().encode()


# --- commands --------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    tag = _tag(cfg)
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "splits": {}}
    for split in ("train", "test"):
        entries = []
        for i, sc in enumerate(_scenes(cfg, split)):
            stem = f"{split}/{i:05d}"
            io.write_ppm(os.path.join(out, stem + ".ppm"), sc.image, tag)
            io.write_pgm(os.path.join(out, stem + ".pgm"), sc.label, tag)
            entries.append({"image": stem + ".ppm", "label": stem + ".pgm",
                            "classes": sc.classes(), "instances": [[c, b] for c, b in sc.instances]})
        manifest["splits"][split] = entries
    io.write_json(os.path.join(out, "manifest.json"), manifest)
    _write_resolved(out, cfg)
    return manifest


def cmd_train(cfg, out):
    plan = cfg.plan()
    train, test = _scenes(cfg, "train"), _scenes(cfg, "test")
    h = cfg.hash()
    if plan.method == "Joint":
        model, reports = protocol.run_plan(plan, train, test)
        models = [model]
    else:
        data = protocol.step_data(train, plan.step_spec)
        model, hist = protocol.train_initial(plan, data[0])
        models = [model.copy()]
        reports = [protocol.evaluate(model, test, plan.step_spec, 0, plan.method, cfg.seed, h)]
        reports[0].history = hist
        for t in range(1, len(plan.step_spec.steps)):
            model, info = protocol.run_step(plan, model, data[t], t)
            models.append(model.copy())
            rep = protocol.evaluate(model, test, plan.step_spec, t, plan.method, cfg.seed, h)
            rep.history = info["history"]
            reports.append(rep)
    meta = {"config_hash": h, "seed": cfg.seed, "method": plan.method}
    loss_rows = []
    for m, rep in zip(models, reports):
        io.save_checkpoint(os.path.join(out, f"step{rep.step}.ckpt"), m,
                           plan.step_spec.class_order(rep.step), meta)
        io.atomic_write(os.path.join(out, f"report_step{rep.step}.json"), (rep.to_json() + "\n").encode())
        loss_rows += [{"step": rep.step, "epoch": e, **h} for e, h in enumerate(rep.history)]
    io.atomic_write(os.path.join(out, "metrics.csv"), _csv_bytes(_report_rows(reports)))
    io.atomic_write(os.path.join(out, "losses.csv"), _csv_bytes(loss_rows))
    _write_resolved(out, cfg)
    return reports


def _load_ckpt(path):
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, "missing", f"checkpoint not found: {path}")
    return io.load_checkpoint(path)


def cmd_invert(cfg, out, checkpoint, count=8):
    teacher, _ = _load_ckpt(checkpoint)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    targets = sample_targets(rng, teacher.num_classes, count, cfg.inversion.classes_per_image)
    samples = invert(teacher, targets, cfg.inversion, seed=[cfg.seed, 4])
    tag = _tag(cfg)
    index = []
    for i, s in enumerate(samples):
        stem = f"fake_{i:04d}"
        side = {"target_channels": np.flatnonzero(s.target).tolist(), "r": s.r.tolist(),
                "loss": s.loss, "cls_loss": s.cls_loss, "steps": s.steps_run,
                "seed": cfg.seed, "config_hash": cfg.hash(), "aborted": s.aborted}
        if s.aborted is None:
            io.write_ppm(os.path.join(out, stem + ".ppm"), s.image, tag)
        io.write_json(os.path.join(out, stem + ".json"), side)
        index.append(stem)
    io.write_json(os.path.join(out, "fakes.json"), {"samples": index, "config_hash": cfg.hash(), "seed": cfg.seed})
    _write_resolved(out, cfg)
    return samples


def cmd_eval(cfg, out, checkpoint, data=None):
    model, header = _load_ckpt(checkpoint)
    scenes = load_scenes(data, "test") if data else _scenes(cfg, "test")
    spec = cfg.data.step_spec()
    meta = header.get("meta", {})
    rep = protocol.evaluate(model, scenes, spec, model.step, meta.get("method", cfg.method),
                            meta.get("seed", cfg.seed), meta.get("config_hash", cfg.hash()))
    if out:
        io.atomic_write(os.path.join(out, f"eval_step{rep.step}.json"), (rep.to_json() + "\n").encode())
    return rep


ABLATIONS = ("r", "aggregation", "ratio", "lambda")


def ablation_variants(kind, cfg):
    """(label, RunPlan) rows of one ablation table."""
    inv = cfg.inversion
    agg = inv.aggregation
    rows = []
    if kind == "r":
        for r in list(DEFAULT_R_SET) + ["random"]:
            spec = dataclasses.replace(agg, kind="SAA", r=None if r == "random" else float(r))
            rows.append((str(r), cfg.plan(inversion=dataclasses.replace(inv, aggregation=spec))))
    elif kind == "aggregation":
        for k in ("AVG", "MAX", "SAA"):
            spec = dataclasses.replace(agg, kind=k)
            rows.append((k, cfg.plan(inversion=dataclasses.replace(inv, aggregation=spec))))
    elif kind == "ratio":
        for ratio in ((3, 1), (1, 1), (1, 3)):
            rows.append((f"{ratio[0]}:{ratio[1]}",
                         cfg.plan(incremental=dataclasses.replace(cfg.incremental, ratio=ratio))))
    elif kind == "lambda":
        rows.append(("lambda=1", cfg.plan(method="HRHF")))
        rows.append(("lambda=0", cfg.plan(method="HRHF_noKD")))
    else:
        raise CliError(EXIT_CONFIG, "config", f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    return rows


def cmd_ablate(cfg, out, kinds=ABLATIONS):
    train, test = _scenes(cfg, "train"), _scenes(cfg, "test")
    # every row starts from the same step-0 model
    initial = protocol.train_initial(cfg.plan(), protocol.step_data(train, cfg.data.step_spec())[0])[0]
    rows = []
    for kind in kinds:
        for label, plan in ablation_variants(kind, cfg):
            _, reps = protocol.run_plan(plan, train, test, initial=initial)
            last = reps[-1]
            rows.append({"ablation": kind, "variant": label, "old": last.old, "new": last.new,
                         "all": last.all, "seed": cfg.seed, "config_hash": cfg.hash()})
            log.info("%s %s old=%.3f new=%.3f", kind, label, last.old, last.new)
    io.atomic_write(os.path.join(out, "ablation.csv"), _csv_bytes(rows))
    io.write_json(os.path.join(out, "ablation.json"), rows)
    _write_resolved(out, cfg)
    return rows


# --- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hrhf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("gen-data", help="render train/test scenes"))
    common(sub.add_parser("train", help="run every learning step of the configured method"))
    sp = sub.add_parser("invert", help="synthesize images from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=8)
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="gen-data directory (regenerated from the config otherwise)")
    sp = sub.add_parser("ablate", help="comparison tables over aggregation, r, ratio and lambda")
    common(sp)
    sp.add_argument("--only", choices=ABLATIONS, action="append")
    return p


def _config(args):
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(EXIT_MISSING, "missing", f"config not found: {args.config}")
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def run(args):
    threads()
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.command == "gen-data":
        cmd_gen_data(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, args.out)
    elif args.command == "invert":
        cmd_invert(cfg, args.out, args.checkpoint, args.count)
    elif args.command == "eval":
        rep = cmd_eval(cfg, args.out, args.checkpoint, args.data)
        print(rep.to_json())
    elif args.command == "ablate":
        cmd_ablate(cfg, args.out, tuple(args.only) if args.only else ABLATIONS)


def _fail(code, kind, message, out=None):
    record = {"error": kind, "exit_code": code, "message": message}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out and os.path.isdir(out):
        io.write_json(os.path.join(out, "error.json"), record)
    return code


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), args.out)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), args.out)
    except io.VersionError as exc:
        return _fail(EXIT_FORMAT, "version", str(exc), args.out)
    except io.FormatError as exc:
        return _fail(EXIT_FORMAT, "format", str(exc), args.out)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing", str(exc), args.out)
    except protocol.DivergenceError as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc), args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
