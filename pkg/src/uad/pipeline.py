"""End-to-end orchestration: sources -> zoo -> calibration -> selection -> adaptation -> report."""
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from uad import calibration as cal
from uad import formats
from uad.core_math import softmax_rows
from uad.errors import InvalidConfig, InvalidInput, UADError, UADIOError
from uad.selection import (
    ModelZoo,
    generate_pseudo_labels,
    select_source_model,
    source_mean_margins,
)
from uad.synth import SHIFT_PROFILES, make_benchmark
from uad.trainer import AdaptConfig, LabeledDataset, TrainerConfig, adapt_target, forward, train_source

log = logging.getLogger(__name__)

REPORT_SCHEMA = "uad_report_v1"


@dataclass
class PipelineConfig:
    # benchmark (ignored when data_dir is set)
    n_sources: int = 3
    shift_profile: str = "strong"
    n_classes: int = 4
    dim: int = 8
    samples_per_class: int = 500
    noise: float = 1.0
    data_dir: str = ""
    # source training
    hidden: tuple = (64,)
    source_epochs: int = 100
    source_smoothing: float = 0.1
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    # adaptation
    adapt_epochs: int = 15
    adapt_smoothing: float = 0.0
    target_from_epoch: int = 2
    pl_threshold: float = 0.0
    # calibration
    n_bins: int = 10
    grid_min: float = 0.05
    grid_max: float = 10.0
    grid_size: int = 200
    label_source: str = cal.PROXY_CONSENSUS
    # ablation switches
    model_level: bool = True
    instance_level: bool = True
    temperature_scaling: bool = True
    score_only: bool = False
    seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        if isinstance(self.hidden, (int, str)):
            self.hidden = _parse_hidden(self.hidden)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.shift_profile not in SHIFT_PROFILES:
            raise InvalidConfig(f"unknown shift_profile {self.shift_profile!r}")
        if self.label_source not in cal.LABEL_SOURCES:
            raise InvalidConfig(f"unknown label_source {self.label_source!r}")
        if self.n_sources < 1 or self.n_classes < 2 or self.dim < 1 or self.samples_per_class < 1:
            raise InvalidConfig("n_sources, n_classes, dim and samples_per_class must be positive")
        # constructing the sub-configs validates the remaining fields
        self.source_trainer(0)
        self.adapt_trainer()
        self.calibration()

    def source_trainer(self, seed):
        return TrainerConfig(
            base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.source_epochs, smoothing=self.source_smoothing,
            alpha=self.lr_alpha, beta=self.lr_beta, seed=seed, hidden=self.hidden,
        )

    def adapt_trainer(self):
        return AdaptConfig(
            base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.adapt_epochs, smoothing=self.adapt_smoothing,
            alpha=self.lr_alpha, beta=self.lr_beta, seed=self.seed, hidden=self.hidden,
            target_from_epoch=self.target_from_epoch, pl_threshold=self.pl_threshold,
        )

    def calibration(self):
        return cal.CalibrationConfig(
            n_bins=self.n_bins, grid_min=self.grid_min, grid_max=self.grid_max, grid_size=self.grid_size
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _parse_hidden(v):
    v = str(v).strip()
    return tuple(int(t) for t in v.replace(";", ",").split(",") if t.strip()) if v else ()


def _parse_bool(key, v):
    t = str(v).strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise InvalidConfig(f"{key}: expected a boolean, got {v!r}")


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns a dict of typed values."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def _coerce(key, typ, value):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "bool":
            return _parse_bool(key, value)
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        if name == "tuple":
            return _parse_hidden(value)
    except ValueError as exc:
        raise InvalidConfig(f"{key}: {exc}") from None
    return value


def load_config(path=None, **overrides):
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None


# ---------------------------------------------------------------- evaluation


def evaluate(predictions, data, n_classes=None):
    """Accuracy and confusion matrix (rows = true class) of predicted labels or a model."""
    if not isinstance(predictions, np.ndarray) and hasattr(predictions, "layer_dims"):
        predictions = predictions.predict(data.features)
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(data.labels, dtype=np.int64)
    if y.shape[0] == 0:
        raise InvalidInput("cannot evaluate on empty data")
    if pred.shape != y.shape:
        raise InvalidInput(f"{pred.shape[0]} predictions for {y.shape[0]} labels")
    k = int(n_classes or max(y.max(), pred.max()) + 1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    return {"accuracy": float((pred == y).sum() / y.shape[0]), "confusion": conf}


def ensemble_average_baseline(zoo):
    """Argmax of the mean uncalibrated softmax over all zoo models."""
    total = None
    for e in zoo.entries:
        p = softmax_rows(e.logits)
        total = p if total is None else total + p
    return np.argmax(total / len(zoo), axis=1).astype(np.int64)


def emit_reliability_csv(bins, path):
    """One row per bin: bin_low, bin_high, count, mean_conf, mean_acc (zeros when empty)."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count", "mean_conf", "mean_acc"])
            for (lo, hi), c, cs, ks in zip(bins.edges(), bins.counts, bins.conf_sums, bins.correct_sums):
                c = int(c)
                w.writerow([repr(float(lo)), repr(float(hi)), c, repr(float(cs / c) if c else 0.0), repr(float(ks / c) if c else 0.0)])
    except OSError as exc:
        raise UADIOError(f"cannot write {path}: {exc}") from exc
    return Path(path)


def read_reliability_csv(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "count" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- pipeline


class StageError(UADError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def source_seed(seed, j):
    return int(np.random.SeedSequence([int(seed), j]).generate_state(1)[0])


def load_bundle(cfg):
    """(source datasets, source ids, target dataset) from files or the generator."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        paths = sorted(root.glob("source_*.csv")) or sorted(root.glob("source_*.uadd"))
        if not paths:
            raise InvalidConfig(f"no source_*.csv / source_*.uadd files in {root}")
        tgt = root / ("target" + paths[0].suffix)
        return [formats.load_dataset(p) for p in paths], [p.stem for p in paths], formats.load_dataset(tgt)
    b = make_benchmark(
        cfg.n_sources, cfg.shift_profile, cfg.seed, cfg.n_classes, cfg.dim, cfg.samples_per_class, cfg.noise
    )
    return b.sources, b.source_ids, b.target


def _source_cache_key(cfg, data):
    h = hashlib.sha256()
    h.update(json.dumps(cfg.source_trainer(0).to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(data.features).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()


def train_sources(cfg, sources, ids, n_classes, cache_dir=None):
    """Train (or reload from ``cache_dir``) one model per source domain."""
    models = []
    for j, (data, mid) in enumerate(zip(sources, ids)):
        tcfg = cfg.source_trainer(source_seed(cfg.seed, j))
        key = _source_cache_key(cfg, data)
        path = Path(cache_dir) / f"{mid}.uadm" if cache_dir else None
        if path is not None and path.exists():
            model, meta = formats.load_checkpoint(path)
            if meta.get("cache_key") == key and meta.get("seed") == tcfg.seed:
                log.info("reusing cached source model %s", path)
                models.append(model)
                continue
        model = train_source(data, tcfg, n_classes)
        if path is not None:
            formats.save_checkpoint(
                model, path, {"model_id": mid, "config": tcfg.to_dict(), "seed": tcfg.seed, "cache_key": key}
            )
        models.append(model)
    return models


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (UADError, ValueError, OSError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg, source_models=None, bundle=None):
    """Run every stage and return the report as an ordered dict.

    ``source_models`` / ``bundle`` let callers reuse trained sources and data
    across ablation variants; they must match what ``cfg`` would produce.
    """
    out = Path(cfg.out_dir) if cfg.out_dir else None
    sources, ids, target = bundle if bundle is not None else _stage("data", load_bundle, cfg)
    k = max(cfg.n_classes, max(int(s.labels.max()) for s in sources) + 1)
    if source_models is None:
        source_models = _stage(
            "train_sources", train_sources, cfg, sources, ids, k, out / "sources" if out else None
        )
    x, y = target.features, target.labels

    def zoo_logits():
        logits = {mid: forward(m, x) for mid, m in zip(ids, source_models)}
        if out:
            for mid, l in logits.items():
                formats.save_logits(l, out / "logits" / f"{mid}.uadl")
        return ModelZoo.from_logits(logits)

    zoo = _stage("logits", zoo_logits)
    raw_margins = source_mean_margins(zoo)
    sources_report = [
        {
            "model_id": e.model_id,
            "target_accuracy": evaluate(np.argmax(e.logits, axis=1), target, k)["accuracy"],
            "mean_margin": float(m),
        }
        for e, m in zip(zoo.entries, raw_margins)
    ]
    ens = evaluate(ensemble_average_baseline(zoo), target, k)["accuracy"]

    report = {
        "schema": REPORT_SCHEMA,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "sources": sources_report,
        "baselines": {"ensemble_average": ens},
    }
    if not (cfg.model_level or cfg.instance_level):
        return _finish(report, out)

    calib = []
    if cfg.temperature_scaling:
        labels = y if cfg.label_source == cal.ORACLE else None
        calib = _stage("calibrate", cal.calibrate_zoo, zoo, cfg.label_source, labels, cfg.calibration())
        zoo = zoo.with_temperatures([r.temperature for r in calib])
        if out:
            for r in calib:
                ref = y if cfg.label_source == cal.ORACLE else cal.consensus_labels([e.logits for e in zoo.entries])
                for tag, t in (("before", cal.IDENTITY), ("after", r.temperature)):
                    emit_reliability_csv(
                        cal.reliability(zoo.entries[zoo.index(r.model_id)].logits, ref, t, cfg.n_bins),
                        out / "calibration" / f"{r.model_id}_{tag}.csv",
                    )
    report["calibration"] = [r.to_dict() for r in calib]
    cal_margins = source_mean_margins(zoo)
    for s, m, e in zip(sources_report, cal_margins, zoo.entries):
        s["temperature"] = e.temperature.value
        s["calibrated_mean_margin"] = float(m)

    init_id = select_source_model(zoo) if cfg.model_level else zoo.ids[0]
    init = source_models[zoo.index(init_id)]
    report["init_model"] = init_id
    teachers = zoo if cfg.instance_level else zoo.subset([init_id])
    pl = generate_pseudo_labels(teachers)
    if out:
        pl.to_csv(out / "pseudo_labels.csv")
    pl_acc = evaluate(pl.labels, target, k)["accuracy"]
    report["pseudo_label_accuracy"] = pl_acc
    report["init_accuracy"] = evaluate(init, target, k)["accuracy"]
    if cfg.score_only:
        report["score_only_accuracy"] = pl_acc
        return _finish(report, out)

    epochs = []

    def on_epoch(epoch, model, pseudo, loss):
        epochs.append(
            {
                "epoch": epoch,
                "loss": float(loss),
                "accuracy": evaluate(model, target, k)["accuracy"],
                "pseudo_label_accuracy": evaluate(pseudo.labels, target, k)["accuracy"],
                "target_teacher_fraction": float(np.mean([t == "__target__" for t in pseudo.teacher_ids])),
            }
        )

    acfg = cfg.adapt_trainer()
    final = _stage("adapt", adapt_target, init, x, teachers, acfg, on_epoch)
    if out:
        formats.save_checkpoint(final, out / "target_model.uadm", {"config": acfg.to_dict(), "seed": acfg.seed})
    ev = evaluate(final, target, k)
    report["epochs"] = epochs
    report["final_accuracy"] = ev["accuracy"]
    report["confusion"] = ev["confusion"].tolist()
    return _finish(report, out)


def _finish(report, out):
    if out:
        write_report(report, out / "report.json")
    return report


def report_json(report):
    return json.dumps(report, indent=2) + "\n"


def write_report(report, path):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(report_json(report))
    except OSError as exc:
        raise UADIOError(f"cannot write {path}: {exc}") from exc
