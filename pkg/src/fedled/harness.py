"""Experiment runner: FedLED, the source-only baseline and two ablations,
repeated over seeds, with overlap sweeps and plot-ready CSV output.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from fedled.centralized import train_source_only
from fedled.data import (
    CsvSchema,
    DomainDataset,
    HiddenLabels,
    SyntheticConfig,
    WindowSpec,
    align_to_source,
    generate_synthetic,
    load_csv,
    split_train_test,
)
from fedled.errors import ConfigError, ContractError, DataError
from fedled.losses import KernelConfig
from fedled.models import NetConfig, init_params, predict, save_checkpoint
from fedled.protocol import Hyper, Schedule, build_parties, pretrain_source, train

log = logging.getLogger(__name__)

METHODS = ("fedled", "baseline", "abl1_align_only", "abl2_adversarial_only")
TRANSPORTS = ("inproc", "tcp")
SWEEP_AXES = {"sample_overlap": (0.0, 0.2, 0.5, 1.0), "feature_overlap": ("0", "full")}


@dataclass(frozen=True)
class CsvSource:
    source: str
    target: str
    window_len: int = 1024
    source_channels: tuple | None = None
    target_channels: tuple | None = None
    label_column: str = "label"
    strict: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedled"
    data: SyntheticConfig | CsvSource = SyntheticConfig()
    lam: float = 1.0
    beta: float = 0.5
    lr0: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    pre_epochs: int = 10
    grl_warmup: bool = True
    kernel_multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    seeds: tuple = tuple(range(42, 52))
    transport: str = "inproc"
    feature_dim: int = 128
    output_dir: str | None = None
    save_checkpoints: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if isinstance(self.data, SyntheticConfig):
            self.data.validate()
        self.hyper()

    def effective_weights(self) -> tuple[float, float]:
        """(lam, beta) after the method's forced zeros."""
        if self.method == "baseline":
            return 0.0, 0.0
        if self.method == "abl1_align_only":
            return 0.0, self.beta
        if self.method == "abl2_adversarial_only":
            return self.lam, 0.0
        return self.lam, self.beta

    def hyper(self) -> Hyper:
        lam, beta = self.effective_weights()
        try:
            return Hyper(
                lam=lam, beta=beta, lr0=self.lr0, batch_size=self.batch_size, epochs=self.epochs,
                pre_epochs=self.pre_epochs, pre_lr=self.lr0, grl_warmup=self.grl_warmup,
                kernel=KernelConfig(tuple(self.kernel_multipliers)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["data"] = {"kind": "synthetic" if isinstance(self.data, SyntheticConfig) else "csv", **asdict(self.data)}
        d["seeds"] = list(self.seeds)
        d["kernel_multipliers"] = list(self.kernel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"hyper"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        hyper = d.pop("hyper", {}) or {}
        if not isinstance(hyper, dict):
            raise ConfigError("hyper must be a table")
        bad = set(hyper) - known
        if bad:
            raise ConfigError(f"unknown hyper keys {sorted(bad)}")
        d.update(hyper)
        data = d.get("data", {}) or {}
        if isinstance(data, dict):
            d["data"] = _data_from_dict(data)
        for key in ("seeds", "kernel_multipliers"):
            if key in d:
                val = d[key]
                d[key] = tuple(val) if isinstance(val, (list, tuple)) else (val,)
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


def _data_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "synthetic")
    klass = {"synthetic": SyntheticConfig, "csv": CsvSource}.get(kind)
    if klass is None:
        raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {kind!r}")
    allowed = {f.name for f in fields(klass)}
    if set(d) - allowed:
        raise ConfigError(f"unknown data keys {sorted(set(d) - allowed)}")
    for key in ("source_channels", "target_channels"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return klass(**d)


def load_config(path) -> ExperimentConfig:
    """Read an experiment config from ``.json`` or ``.toml``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            d = tomllib.loads(raw.decode())
        else:
            d = json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"{path.name}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    return ExperimentConfig.from_dict(d)


# --- data preparation ----------------------------------------------------

@dataclass
class Prepared:
    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset  # unlabeled
    target_test: DomainDataset  # unlabeled
    target_test_labels: np.ndarray  # evaluation only
    num_classes: int
    flags: list = field(default_factory=list)


def prepare_data(data, seed: int) -> Prepared:
    if isinstance(data, SyntheticConfig):
        syn = generate_synthetic(data)
        source, target, hidden = syn.source, syn.target, syn.target_labels
        num_classes = data.num_classes
    else:
        window = WindowSpec(data.window_len)
        source = load_csv(data.source, CsvSchema(data.source_channels, data.label_column, window, data.strict, "source"))
        labeled_t = load_csv(data.target, CsvSchema(data.target_channels, data.label_column, window, data.strict, "target"))
        if source.labels is None:
            raise DataError("source CSV has no label column")
        if labeled_t.labels is None:
            raise DataError("target CSV needs a label column for evaluation")
        hidden = HiddenLabels(labeled_t.sample_ids, labeled_t.labels)
        target = labeled_t.unlabeled()
        num_classes = int(max(source.labels.max(), labeled_t.labels.max())) + 1
    s_tr, s_te = split_train_test(source, seed)
    t_tr, t_te = split_train_test(target, seed)
    return Prepared(s_tr, s_te, t_tr, t_te, hidden.for_dataset(t_te), num_classes)


# --- evaluation ----------------------------------------------------------

def accuracy(preds, truth) -> float:
    """Percentage of exact matches."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ContractError(f"preds {preds.shape} and truth {truth.shape} must be equal-length vectors")
    if preds.size == 0:
        raise ContractError("accuracy of an empty set")
    return 100.0 * float(np.count_nonzero(preds == truth)) / preds.size


def diagnose(extractor, classifier, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(predict(classifier, predict(extractor, x)), axis=1)


def confusion(preds, truth, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(preds)), 1)
    return cm


# --- reports -------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    final_accuracy: float
    epochs: list  # dicts: epoch, l_cls, l_cdan, l_align, total, target_test_accuracy, loss_check, wall_clock_s
    confusion: list
    transcript_hash: str | None = None
    aborted: str | None = None
    checkpoints: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    method: str
    config: dict
    seeds: list
    results: list  # SeedResult
    accuracy_mean: float
    accuracy_std: float
    confusion: list
    flags: list = field(default_factory=list)
    axis: str | None = None
    axis_value: object = None

    def trend(self) -> list[dict]:
        """Per-epoch means over seeds."""
        n = min((len(r.epochs) for r in self.results), default=0)
        keys = ("l_cls", "l_cdan", "l_align", "total", "target_test_accuracy")
        return [
            {"epoch": e, **{k: float(np.mean([r.epochs[e][k] for r in self.results])) for k in keys}}
            for e in range(n)
        ]

    def to_dict(self, timing: bool = True) -> dict:
        results = []
        for r in self.results:
            d = asdict(r)
            if not timing:
                for ep in d["epochs"]:
                    ep.pop("wall_clock_s", None)
            results.append(d)
        out = {
            "method": self.method,
            "config": self.config,
            "seeds": self.seeds,
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "confusion": self.confusion,
            "flags": self.flags,
            "results": results,
        }
        if self.axis is not None:
            out["axis"] = self.axis
            out["axis_value"] = self.axis_value
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        write_trend_csv(self.trend(), out / "trend.csv")


def write_trend_csv(rows: list[dict], path) -> None:
    cols = ["epoch", "l_cls", "l_cdan", "l_align", "total", "target_test_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in cols})


def _summarize(config: ExperimentConfig, results: list[SeedResult], num_classes: int, flags) -> ExperimentReport:
    accs = [r.final_accuracy for r in results]
    cm = np.sum([np.array(r.confusion) for r in results], axis=0)
    return ExperimentReport(
        method=config.method,
        config=config.to_dict(),
        seeds=[r.seed for r in results],
        results=results,
        accuracy_mean=float(np.mean(accs)),
        accuracy_std=float(np.std(accs)),
        confusion=cm.tolist(),
        flags=sorted(set(flags)),
    )


def _seed_dir(config: ExperimentConfig, seed: int) -> Path | None:
    if config.output_dir is None:
        return None
    d = Path(config.output_dir) / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _net_config(config: ExperimentConfig, prep: Prepared) -> NetConfig:
    return NetConfig(
        prep.source_train.num_features, prep.target_train.num_features,
        num_classes=prep.num_classes, feature_dim=config.feature_dim,
    )


def _pretrained(config, prep, net, seed):
    hyper = config.hyper()
    return pretrain_source(
        prep.source_train, init_params(net, seed, "source"), init_params(net, seed, "classifier"),
        hyper.pre_epochs, hyper.pre_lr, hyper.batch_size, seed,
    )


def run_baseline(config: ExperimentConfig) -> ExperimentReport:
    """Source-only training; the target is diagnosed through the source
    extractor with target columns placed by feature name and zero elsewhere."""
    config = replace(config, method="baseline")
    config.validate()
    results, flags = [], ["baseline_zero_fill"]
    num_classes = 0
    for seed in config.seeds:
        prep = prepare_data(config.data, seed)
        num_classes = prep.num_classes
        net = _net_config(config, prep)
        x_t, matched = align_to_source(prep.target_test, prep.source_train.feature_names)
        if matched == 0:
            flags.append("no_overlapping_features_full_zero_fill")
        y = prep.target_test_labels
        fs, clf = _pretrained(config, prep, net, seed)
        schedule = Schedule(len(prep.source_train), len(prep.target_train), config.batch_size, config.epochs)
        epochs = []
        clock = [time.perf_counter()]

        def on_epoch(epoch, f, c, losses):
            now = time.perf_counter()
            mean_loss = float(np.mean(losses))
            epochs.append({
                "epoch": epoch, "l_cls": mean_loss, "l_cdan": 0.0, "l_align": 0.0, "total": mean_loss,
                "target_test_accuracy": accuracy(diagnose(f, c, x_t), y),
                "loss_check": True, "wall_clock_s": now - clock[0],
            })
            clock[0] = now

        trace = train_source_only(prep.source_train, fs, clf, schedule, seed, config.lr0, on_epoch=on_epoch)
        preds = diagnose(trace.extractor, trace.classifier, x_t)
        res = SeedResult(seed, accuracy(preds, y), epochs, confusion(preds, y, num_classes).tolist())
        out = _seed_dir(config, seed)
        if out is not None and config.save_checkpoints:
            res.checkpoints = _save(out, source_extractor=trace.extractor, classifier=trace.classifier)
        results.append(res)
    report = _summarize(config, results, num_classes, flags)
    if config.output_dir is not None:
        report.write(config.output_dir)
    return report


def _save(out: Path, **params) -> dict:
    paths = {}
    for name, p in params.items():
        path = out / f"{name}.fled"
        save_checkpoint(p, path)
        paths[name] = str(path)
    return paths


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Pretrain, train federated, evaluate the target diagnoser every
    epoch, aggregate over seeds, and write ``report.json``/``trend.csv``."""
    config.validate()
    if config.method == "baseline":
        return run_baseline(config)
    hyper = config.hyper()
    results, flags = [], []
    num_classes = 0
    for seed in config.seeds:
        prep = prepare_data(config.data, seed)
        num_classes = prep.num_classes
        net = _net_config(config, prep)
        fs, clf = _pretrained(config, prep, net, seed)
        source, target, server = build_parties(
            net, prep.source_train, prep.target_train, hyper, seed,
            source_extractor=fs, classifier=clf, target_eval=prep.target_test.features,
        )
        y = prep.target_test_labels
        stamps = [time.perf_counter()]

        def on_epoch(epoch, agent, metrics):
            stamps.append(time.perf_counter())

        result = train(source, target, server, transport=config.transport, on_epoch=on_epoch)
        epochs = []
        for m, preds in zip(result.history, result.eval_predictions):
            dt = stamps[m.epoch + 1] - stamps[m.epoch] if m.epoch + 1 < len(stamps) else float("nan")
            epochs.append({
                "epoch": m.epoch, "l_cls": m.l_cls, "l_cdan": m.l_cdan, "l_align": m.l_align,
                "total": m.total, "target_test_accuracy": accuracy(preds, y),
                "loss_check": m.loss_check, "wall_clock_s": dt,
            })
        preds = diagnose(result.target_extractor, result.classifier, prep.target_test.features)
        res = SeedResult(
            seed, accuracy(preds, y), epochs, confusion(preds, y, num_classes).tolist(),
            transcript_hash=result.transcript.digest(), aborted=result.aborted,
        )
        if result.aborted:
            flags.append("aborted")
        out = _seed_dir(config, seed)
        if out is not None:
            result.transcript.export(out / "transcript.jsonl")
            if config.save_checkpoints:
                res.checkpoints = _save(out, target_extractor=result.target_extractor, classifier=result.classifier)
        results.append(res)
        if result.aborted:
            break  # flush what we have
    report = _summarize(config, results, num_classes, flags)
    if config.output_dir is not None:
        report.write(config.output_dir)
    return report


# --- sweeps --------------------------------------------------------------

def sweep(config: ExperimentConfig, axis: str, values=None, methods=("fedled", "baseline")) -> list[ExperimentReport]:
    """Re-generate the synthetic data at each axis value and run every method.

    Writes ``sweep.csv`` (method, axis, value, accuracy mean/std) when an
    output directory is configured.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}")
    if not isinstance(config.data, SyntheticConfig):
        raise ConfigError("sweeps need a synthetic data source")
    values = SWEEP_AXES[axis] if values is None else tuple(values)
    reports = []
    for value in values:
        data = _sweep_data(config.data, axis, value)
        for method in methods:
            out = None
            if config.output_dir is not None:
                out = str(Path(config.output_dir) / f"{axis}={value}" / method)
            rep = run_experiment(replace(config, method=method, data=data, output_dir=out))
            rep.axis, rep.axis_value = axis, value
            reports.append(rep)
    if config.output_dir is not None and reports:
        write_sweep_csv(reports, Path(config.output_dir) / "sweep.csv")
    return reports


def _sweep_data(data: SyntheticConfig, axis: str, value) -> SyntheticConfig:
    if axis == "sample_overlap":
        return replace(data, sample_overlap=float(value))
    if value == "full":
        m = min(data.source_features, data.target_features)
    else:
        m = int(value)
    return replace(data, overlap_features=m)


def write_sweep_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "axis", "value", "accuracy_mean", "accuracy_std"])
        for r in reports:
            w.writerow([r.method, r.axis, r.axis_value, f"{r.accuracy_mean:.4f}", f"{r.accuracy_std:.4f}"])
