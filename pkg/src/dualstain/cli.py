"""Command-line entry point: ``python -m dualstain <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 internal error.
Every subcommand accepts ``--config FILE`` (JSON, keys spelled exactly like
the long flags, e.g. ``{"conf-thr": 0.25}``); explicit flags win over the
file.  ``DUALSTAIN_SEED`` sets the default seed.  Outputs are written with
sorted keys and fixed float formatting so two runs with one seed agree
byte for byte.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import datasetkit as dk
from . import evalkit, gradsuite, qclinter, synthgen
from . import toydetector as td
from .neuralblocks import ConfigError as BlockConfigError

VALIDATION_ERRORS = (dk.ParseError, dk.ValidationError, dk.ProtocolError, evalkit.UnitError,
                     evalkit.ProtocolError, td.ConfigError, td.ProtocolError, BlockConfigError,
                     synthgen.PlacementError, FileNotFoundError, NotADirectoryError, ValueError)

# Reference improvements from the annotation-quality study, percentage points.
# Printed alongside our numbers for orientation; never compared against.
REFERENCE_QUALITY_DELTAS = {"P": 13.3, "R": 15.3, "mAP@0.5:0.95": 30.5}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _default_seed() -> int:
    raw = os.environ.get("DUALSTAIN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DUALSTAIN_SEED must be an integer, got {raw!r}") from None


def _existing_dir(p: str) -> Path:
    path = Path(p)
    if not path.is_dir():
        raise dk.ValidationError(f"{p}: not a directory")
    return path


def _ratio(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratio must look like 8:2, got {text!r}") from None
    if a <= 0 or b <= 0:
        raise argparse.ArgumentTypeError("ratio parts must be positive")
    return a, b


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(a) -> int:
    out = Path(a.out)
    spec_fn = synthgen.detector_spec if a.profile == "detector" else synthgen.lint_corpus_spec
    corpus = synthgen.generate_corpus(a.slides, a.seed, spec_fn, a.prefix)
    dspec = synthgen.DefectSpec(a.loosen, a.merge, a.delete, a.diagonal, seed=a.seed)
    manifest = {"seed": a.seed, "profile": a.profile, "slides": [], "defects": asdict(dspec)}
    log = []
    out.mkdir(parents=True, exist_ok=True)
    for image_id, image, boxes, reg in corpus:
        boxes, entries = synthgen.inject_defects(boxes, reg, dspec, image_id)
        log += entries
        dk.write_image(out / f"{image_id}.png", image)
        dk.write_yolo_file(out / f"{image_id}.txt", boxes)
        manifest["slides"].append({"id": image_id, "boxes": len(boxes),
                                   "width": reg.width, "height": reg.height})
    _write(out / "manifest.json", _dump(manifest))
    if log:
        _write(out / "defects.jsonl", synthgen.log_to_jsonl(log))
    print(f"wrote {len(corpus)} slides to {out}")
    return 0


def cmd_lint(a) -> int:
    samples = dk.load_annotations(_existing_dir(a.dir), a.fmt)
    cfg = qclinter.LintConfig(margin_thr_px=a.margin, ratio_thr=a.ratio_thr)
    report = qclinter.lint_dataset(samples, cfg, autofix=a.autofix)
    print(report.summary_text())
    if a.out:
        out = Path(a.out)
        _write(out / "findings.jsonl", report.to_jsonl())
        _write(out / "summary.json", _dump({"seed": a.seed, **report.summary}))
        if a.autofix:
            (out / "fixed").mkdir(parents=True, exist_ok=True)
            for image_id, boxes in sorted(report.fixed.items()):
                dk.write_yolo_file(out / "fixed" / f"{image_id}.txt", boxes)
    return 0


def cmd_split(a) -> int:
    samples = dk.load_annotations(_existing_dir(a.dir), a.fmt)
    plan = dk.split_dataset(samples, a.ratio, a.seed)
    _emit(a.out, plan.to_json() + "\n")
    return 0


def cmd_kfold(a) -> int:
    samples = dk.load_annotations(_existing_dir(a.dir), a.fmt)
    plan = dk.kfold_split(samples, a.k, a.seed)
    _emit(a.out, plan.to_json() + "\n")
    return 0


def _emit(out: str | None, text: str) -> None:
    if out:
        _write(Path(out), text)
    else:
        sys.stdout.write(text)


def _boxes_by_id(directory: Path) -> dict[str, list]:
    return {p.stem: dk.read_yolo_file(p) for p in sorted(directory.glob("*.txt"))}


def cmd_eval(a) -> int:
    dets = _boxes_by_id(_existing_dir(a.dets))
    gts = _boxes_by_id(_existing_dir(a.gts))
    missing = sorted(set(dets) - set(gts))
    if missing:
        raise dk.ValidationError(f"detections for images without ground truth: {missing[:5]}")
    dets = {k: dets.get(k, []) for k in gts}
    for k, v in dets.items():
        if any(b.confidence is None for b in v):
            raise dk.ValidationError(f"{k}: detection lines need a sixth confidence column")
    rep = evalkit.map_range(dets, gts, conf_thr=a.prob_thr)
    doc = {"seed": a.seed, **rep.to_dict()}
    _emit(a.out, _dump(doc))
    if a.csv:
        _write(Path(a.csv), rep.to_csv())
    return 0


def cmd_gradcheck(a) -> int:
    blocks = list(gradsuite.CHECKS) if a.block == "all" else [a.block]
    results = gradsuite.run_suite(blocks, a.trials, a.seed)
    doc = {"seed": a.seed, "results": [r.to_dict() for r in results]}
    _emit(a.out, _dump(doc))
    return 0 if all(r.ok for r in results) else 2


def _detector_config(a) -> td.DetectorConfig:
    return td.DetectorConfig(swin=None if a.no_swin else "backbone_tail",
                             fusion=None if a.no_swin or a.no_fusion else "neck",
                             spp=None if a.no_spp else "neck",
                             gam=None if a.no_gam else "pre_head", seed=a.seed)


def _train_config(a) -> td.TrainConfig:
    return td.TrainConfig(epochs=a.epochs, batch_size=a.batch_size, max_steps=a.steps,
                          lr0=a.lr0, lrf=a.lrf, weight_decay=a.weight_decay,
                          box_loss=a.box_loss, seed=a.seed)


def cmd_train(a) -> int:
    if a.dir:
        data = dk.load_annotations(_existing_dir(a.dir), a.fmt)
        val = dk.load_annotations(_existing_dir(a.val_dir), a.fmt) if a.val_dir else []
    else:
        data, _, val = td.synthetic_split(a.seed, n_train=a.synthetic)
    model = td.build_model(_detector_config(a))
    log = td.train(model, data, _train_config(a))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.dsp")
    _write(out / "train_log.csv", log.to_csv())
    summary = {"seed": a.seed, "steps": len(log.rows), "params": model.n_params(),
               "initial_loss": log.rows[0]["total"], "final_loss": log.rows[-1]["total"]}
    if val:
        rep = td.evaluate(model, val, a.conf_thr, a.nms_thr, a.prob_thr)
        summary["eval"] = rep.to_dict()
    _write(out / "summary.json", _dump(summary))
    print(f"trained {len(log.rows)} steps; loss {summary['initial_loss']:.4f} -> "
          f"{summary['final_loss']:.4f}")
    return 0


def report_folds(seed: int = 0) -> tuple[dict, str]:
    ref = evalkit.REFERENCE_FOLDS
    fr = evalkit.aggregate_folds(ref["baseline"], ref["improved"],
                                 printed_mean_a=ref["printed_mean_baseline"],
                                 printed_var_a=ref["printed_var_baseline"],
                                 printed_mean_b=ref["printed_mean_improved"],
                                 printed_var_b=ref["printed_var_improved"])
    lines = [(f"{'metric':<14}{'mean A':>9}{'mean B':>9}{'delta':>8}{'var A':>8}{'var B':>8}"
             f"{'t':>9}{'p':>11}")]
    for m in fr.metrics:
        lines.append(f"{m:<14}{fr.mean_a[m]:>9.2f}{fr.mean_b[m]:>9.2f}{fr.delta()[m]:>8.2f}"
                     f"{fr.var_a[m]:>8.3f}{fr.var_b[m]:>8.3f}{fr.t_stat[m]:>9.2f}"
                     f"{fr.p_value[m]:>11.2e}")
    lines += [f"note: {n}" for n in fr.notes]
    return {"seed": seed, **fr.to_dict()}, "\n".join(lines)


def report_quality_experiment(seeds, steps: int = 200, defects=0.5,
                              tcfg: td.TrainConfig | None = None) -> tuple[dict, str]:
    """Paired runs (defect-injected vs lint-fixed labels) laid out like the
    dataset-quality comparison table, one block per seed."""
    rows = []
    lines = [f"{'seed':<6}{'dataset quality':<24}{'P/%':>8}{'R/%':>8}{'mAP@0.5:0.95/%':>16}"]
    for seed in seeds:
        res = td.quality_experiment(seed, steps, defects, tcfg)
        for label, rep in (("before optimization", res.defective),
                           ("after optimization", res.fixed)):
            lines.append(f"{seed:<6}{label:<24}{100 * rep.p:>8.1f}{100 * rep.r:>8.1f}"
                         f"{100 * rep.map5095:>16.1f}")
        rows.append({"seed": seed, "before": res.defective.to_dict(),
                     "after": res.fixed.to_dict(), "improved": res.improved,
                     "defects_injected": res.defect_counts, "lint_findings": res.lint_counts})
    ref = REFERENCE_QUALITY_DELTAS
    lines.append(f"reference deltas (annotation only): +{ref['P']} P, +{ref['R']} R, "
                 f"+{ref['mAP@0.5:0.95']} mAP@0.5:0.95")
    return {"runs": rows, "reference_deltas": ref}, "\n".join(lines)


def cmd_report(a) -> int:
    if a.kind == "folds":
        doc, text = report_folds(a.seed)
    else:
        seeds = a.seeds if a.seeds else [a.seed]
        doc, text = report_quality_experiment(seeds, a.steps, a.defect_rate)
    print(text)
    if a.out:
        _write(Path(a.out), _dump(doc))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="dualstain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs: dict[str, _Parser] = {}
    seed = _default_seed()

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--config", help="JSON file whose keys match long flag names")
        p.set_defaults(fn=fn)
        subs[name] = p
        return p

    def data_args(p, required=True):
        p.add_argument("--dir", required=required, help="annotation directory")
        p.add_argument("--fmt", default="yolo-txt", choices=["yolo-txt", "coco-json"])

    p = add("synth", cmd_synth, "generate synthetic dual-stain slides")
    p.add_argument("--slides", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", default="lint", choices=["lint", "detector"])
    p.add_argument("--prefix", default="slide")
    for rule in ("loosen", "merge", "delete", "diagonal"):
        p.add_argument(f"--{rule}", type=float, default=0.0, help=f"{rule} defect rate")

    p = add("lint", cmd_lint, "check annotations against the stain content")
    data_args(p)
    p.add_argument("--out")
    p.add_argument("--autofix", action="store_true")
    p.add_argument("--margin", type=int, default=qclinter.LintConfig.margin_thr_px)
    p.add_argument("--ratio-thr", type=float, default=qclinter.LintConfig.ratio_thr)

    p = add("split", cmd_split, "seeded train/val split")
    data_args(p)
    p.add_argument("--ratio", type=_ratio, default=(8, 2))
    p.add_argument("--out")

    p = add("kfold", cmd_kfold, "seeded k-fold partition")
    data_args(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "score detections against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--prob-thr", type=float, default=0.5)
    p.add_argument("--out")
    p.add_argument("--csv")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--block", default="all", choices=["all", *gradsuite.CHECKS])
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--out")

    p = add("train", cmd_train, "train the toy detector")
    data_args(p, required=False)
    p.add_argument("--val-dir")
    p.add_argument("--synthetic", type=int, default=64,
                   help="synthetic training slides when --dir is absent")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=td.TrainConfig.epochs)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=td.TrainConfig.batch_size)
    p.add_argument("--lr0", type=float, default=td.TrainConfig.lr0)
    p.add_argument("--lrf", type=float, default=td.TrainConfig.lrf)
    p.add_argument("--weight-decay", type=float, default=td.TrainConfig.weight_decay)
    p.add_argument("--box-loss", default="eiou", choices=sorted(td.boxgeom.BOX_LOSSES))
    p.add_argument("--conf-thr", type=float, default=0.001)
    p.add_argument("--nms-thr", type=float, default=0.60)
    p.add_argument("--prob-thr", type=float, default=0.5)
    for block in ("swin", "fusion", "spp", "gam"):
        p.add_argument(f"--no-{block}", action="store_true")

    p = add("report", cmd_report, "fold statistics or the annotation-quality experiment")
    p.add_argument("--kind", default="folds", choices=["folds", "quality"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--defect-rate", type=float, default=0.5)
    p.add_argument("--out")
    return parser, subs


def _apply_config(sub: _Parser, path: str) -> None:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    flags = {opt[2:]: act.dest for act in sub._actions for opt in act.option_strings
             if opt.startswith("--")}
    unknown = sorted(set(doc) - set(flags) - {"config"})
    if unknown:
        raise UsageError(f"config {path}: unknown keys {unknown}")
    values = {flags[k]: v for k, v in doc.items() if k != "config"}
    for act in sub._actions:
        if act.dest in values:
            act.required = False
    sub.set_defaults(**values)


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser, subs = build_parser()
        # config values become defaults before parsing, so they can satisfy
        # required flags while explicit flags still win
        cfg_path = _config_path(argv)
        if cfg_path is not None and argv and argv[0] in subs:
            _apply_config(subs[argv[0]], cfg_path)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except VALIDATION_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        sys.stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())
