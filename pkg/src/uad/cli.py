"""Command-line interface.

Every subcommand reads and writes files under ``--out`` so the stages can be
run one by one::

    uad gen --out run/            # data/source_*.csv, data/target.csv
    uad train-src --out run/      # sources/*.uadm
    uad logits --out run/         # logits/*.uadl
    uad calibrate --out run/      # calibration.json, calibration/*.csv
    uad select --out run/         # selection.json
    uad pseudo --out run/         # pseudo_labels.csv
    uad adapt --out run/          # target_model.uadm
    uad eval --out run/           # eval.json
    uad report --out run/         # prints report.json / eval.json summary

or all at once with ``uad pipeline``. Exit codes: 0 ok, 2 config error,
3 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from uad import calibration as cal
from uad import formats
from uad.errors import InvalidConfig, UADError
from uad.pipeline import (
    StageError,
    emit_reliability_csv,
    ensemble_average_baseline,
    evaluate,
    load_bundle,
    load_config,
    parse_config_text,
    report_json,
    run_pipeline,
    train_sources,
)
from uad.selection import ModelZoo, PseudoLabelSet, generate_pseudo_labels, select_source_model, source_mean_margins
from uad.synth import make_benchmark
from uad.trainer import adapt_target, forward

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("uad")


def _out(cfg):
    if not cfg.out_dir:
        raise InvalidConfig("--out (or out_dir in the config) is required")
    return Path(cfg.out_dir)


def _source_ids(out):
    ids = sorted(p.stem for p in (out / "data").glob("source_*.csv"))
    if not ids:
        raise UADError(f"no source datasets under {out / 'data'}; run 'gen' first")
    return ids


def _target(out):
    return formats.load_dataset(out / "data" / "target.csv")


def _zoo(out, calibrated=True):
    logits = {mid: formats.load_logits(out / "logits" / f"{mid}.uadl") for mid in _source_ids(out)}
    temps = {}
    cal_path = out / "calibration.json"
    if calibrated and cal_path.exists():
        temps = {r["model_id"]: cal.Temperature(r["temperature"]) for r in json.loads(cal_path.read_text())}
    return ModelZoo.from_logits(logits, temps)


def cmd_gen(cfg, args):
    out = _out(cfg)
    b = make_benchmark(cfg.n_sources, cfg.shift_profile, cfg.seed, cfg.n_classes, cfg.dim, cfg.samples_per_class, cfg.noise)
    fmt = ".uadd" if args.binary else ".csv"
    for mid, ds in zip(b.source_ids, b.sources):
        formats.save_dataset(ds, out / "data" / f"{mid}{fmt}", cfg.n_classes)
    formats.save_dataset(b.target, out / "data" / f"target{fmt}", cfg.n_classes)
    specs = {"profile": b.profile, **b.extra, "sources": [s.to_dict() for s in b.source_specs], "target": b.target_spec.to_dict()}
    formats.dump_json(specs, out / "data" / "specs.json")
    print(f"wrote {len(b.sources)} source domains and a target domain to {out / 'data'}")


def cmd_train_src(cfg, args):
    out = _out(cfg)
    sources, ids, _ = load_bundle(cfg.replace(data_dir=str(out / "data")))
    train_sources(cfg, sources, ids, cfg.n_classes, out / "sources")
    print(f"trained {len(ids)} source models into {out / 'sources'}")


def cmd_logits(cfg, args):
    out = _out(cfg)
    ids = _source_ids(out)
    x = _target(out).features
    for mid in ids:
        model, _ = formats.load_checkpoint(out / "sources" / f"{mid}.uadm")
        formats.save_logits(forward(model, x), out / "logits" / f"{mid}.uadl")
    print(f"wrote target logits to {out / 'logits'}")


def cmd_calibrate(cfg, args):
    out = _out(cfg)
    zoo = _zoo(out, calibrated=False)
    y = _target(out).labels if cfg.label_source == cal.ORACLE else None
    reports = cal.calibrate_zoo(zoo, cfg.label_source, y, cfg.calibration())
    ref = y if y is not None else cal.consensus_labels([e.logits for e in zoo.entries])
    for r, e in zip(reports, zoo.entries):
        for tag, t in (("before", cal.IDENTITY), ("after", r.temperature)):
            emit_reliability_csv(cal.reliability(e.logits, ref, t, cfg.n_bins), out / "calibration" / f"{r.model_id}_{tag}.csv")
    formats.dump_json([r.to_dict() for r in reports], out / "calibration.json")
    for r in reports:
        print(f"{r.model_id}: T={r.temperature.value:.4f} ECE {r.ece_before:.4f} -> {r.ece_after:.4f}")


def cmd_select(cfg, args):
    out = _out(cfg)
    zoo = _zoo(out, calibrated=cfg.temperature_scaling)
    chosen = select_source_model(zoo) if cfg.model_level else zoo.ids[0]
    margins = dict(zip(zoo.ids, map(float, source_mean_margins(zoo))))
    formats.dump_json({"init_model": chosen, "mean_margins": margins}, out / "selection.json")
    print(chosen)


def cmd_pseudo(cfg, args):
    out = _out(cfg)
    zoo = _zoo(out, calibrated=cfg.temperature_scaling)
    if not cfg.instance_level:
        zoo = zoo.subset([_chosen(out, zoo)])
    pl = generate_pseudo_labels(zoo)
    pl.to_csv(out / "pseudo_labels.csv")
    print(f"wrote {len(pl)} pseudo-labels to {out / 'pseudo_labels.csv'}")


def _chosen(out, zoo):
    p = out / "selection.json"
    return json.loads(p.read_text())["init_model"] if p.exists() else select_source_model(zoo)


def cmd_adapt(cfg, args):
    if not (cfg.model_level or cfg.instance_level):
        raise InvalidConfig("adapt needs model_level or instance_level enabled")
    out = _out(cfg)
    zoo = _zoo(out, calibrated=cfg.temperature_scaling)
    init_id = _chosen(out, zoo) if cfg.model_level else zoo.ids[0]
    teachers = zoo if cfg.instance_level else zoo.subset([init_id])
    init, _ = formats.load_checkpoint(out / "sources" / f"{init_id}.uadm")
    acfg = cfg.adapt_trainer()
    model = adapt_target(init, _target(out).features, teachers, acfg)
    formats.save_checkpoint(model, out / "target_model.uadm", {"init_model": init_id, "config": acfg.to_dict(), "seed": acfg.seed})
    print(f"adapted target model from {init_id} -> {out / 'target_model.uadm'}")


def cmd_eval(cfg, args):
    out = _out(cfg)
    target = _target(out)
    result = {}
    if (out / "target_model.uadm").exists():
        model, _ = formats.load_checkpoint(out / "target_model.uadm")
        ev = evaluate(model, target, cfg.n_classes)
        result["target_model"] = {"accuracy": ev["accuracy"], "confusion": ev["confusion"].tolist()}
    if (out / "pseudo_labels.csv").exists():
        pl = PseudoLabelSet.from_csv(out / "pseudo_labels.csv")
        result["pseudo_labels"] = {"accuracy": evaluate(pl.labels, target, cfg.n_classes)["accuracy"]}
    if (out / "logits").exists():
        zoo = _zoo(out, calibrated=False)
        result["sources"] = {
            e.model_id: evaluate(np.argmax(e.logits, axis=1), target, cfg.n_classes)["accuracy"] for e in zoo.entries
        }
        result["ensemble_average"] = evaluate(ensemble_average_baseline(zoo), target, cfg.n_classes)["accuracy"]
    formats.dump_json(result, out / "eval.json")
    print(json.dumps(result, indent=2))


def cmd_pipeline(cfg, args):
    report = run_pipeline(cfg)
    if not cfg.out_dir:
        sys.stdout.write(report_json(report))
    else:
        print(_summary(report))


def cmd_report(cfg, args):
    out = _out(cfg)
    path = out / "report.json"
    if not path.exists():
        path = out / "eval.json"
    if not path.exists():
        raise UADError(f"no report.json or eval.json in {out}")
    data = json.loads(path.read_text())
    print(_summary(data) if path.name == "report.json" else json.dumps(data, indent=2))


def _summary(r):
    lines = [f"seed {r['seed']}  ({r['schema']})"]
    for s in r["sources"]:
        t = f"  T={s['temperature']:.3f}" if "temperature" in s else ""
        lines.append(f"  {s['model_id']:<12} acc {s['target_accuracy']:.4f}  mean margin {s['mean_margin']:.4f}{t}")
    lines.append(f"  ensemble average baseline      {r['baselines']['ensemble_average']:.4f}")
    if "init_model" in r:
        lines.append(f"  init model {r['init_model']}  pseudo-label acc {r['pseudo_label_accuracy']:.4f}")
    if "final_accuracy" in r:
        lines.append(f"  final target accuracy          {r['final_accuracy']:.4f}")
    if "score_only_accuracy" in r:
        lines.append(f"  score-only accuracy            {r['score_only_accuracy']:.4f}")
    return "\n".join(lines)


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic benchmark"),
    "train-src": (cmd_train_src, "train one model per source domain"),
    "logits": (cmd_logits, "compute source-model logits on the target set"),
    "calibrate": (cmd_calibrate, "fit per-model temperatures"),
    "select": (cmd_select, "model-level selection of the initial model"),
    "pseudo": (cmd_pseudo, "instance-level pseudo-labels"),
    "adapt": (cmd_adapt, "fine-tune the target model"),
    "eval": (cmd_eval, "evaluate against held-back target labels"),
    "pipeline": (cmd_pipeline, "run every stage and write report.json"),
    "report": (cmd_report, "print a summary of a finished run"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="uad", description=__doc__.split("\n")[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, parents=[common])
        if name == "gen":
            sp.add_argument("--binary", action="store_true", help="write .uadd instead of CSV")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = parse_config_text("\n".join(args.set))
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out, **overrides)
        if args.command == "adapt" and not (cfg.model_level or cfg.instance_level):
            raise InvalidConfig("adapt needs model_level or instance_level enabled")
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command][0](cfg, args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UADError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
