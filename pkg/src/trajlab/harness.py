"""Run manifests, ablation studies and plot-data emission behind the CLI."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from trajlab.errors import ConfigurationError, NumericalError
from trajlab.metrics import MetricsReport
from trajlab.raster import RasterConfig
from trajlab.scenegen import FAMILIES, GenerationConfig, Sample, read_dataset
from trajlab.train import (
    Batchable,
    TrainConfig,
    config_hash,
    evaluate,
    load_checkpoint,
    load_model,
    predict,
    prepare,
    save_checkpoint,
    split_by_id,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3

ABLATION_COLUMNS = ("minADE5", "minADE10", "MissRateTop5", "MissRateTop10", "minFDE1", "offRoadRate")


class UsageError(Exception):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_USAGE


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# configuration files


@dataclass
class RunConfig:
    """Everything a CLI invocation needs; loaded from a JSON file and overridden by flags."""

    train: TrainConfig = field(default_factory=TrainConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "raster": self.raster.to_dict(),
                "generation": self.generation.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"train", "raster", "generation"}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            train=TrainConfig.from_dict(d.get("train", {})),
            raster=RasterConfig.from_dict(d["raster"]) if "raster" in d else RasterConfig(),
            generation=GenerationConfig.from_dict(d.get("generation", {})),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    config_hash: str
    dataset_hash: str
    dataset_path: str
    eval_dataset_path: str
    eval_dataset_hash: str
    checkpoint_path: str
    report: dict
    timings: dict
    config: dict
    log_path: str = ""
    step_losses_path: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"{path}: not a run manifest ({exc})") from None

    @property
    def metrics(self) -> MetricsReport:
        return MetricsReport.from_dict(self.report)


def write_report(report: MetricsReport, out_dir: Path, stem: str = "report") -> tuple[Path, Path]:
    js = out_dir / f"{stem}.json"
    js.write_text(report.to_json())
    row = out_dir / f"{stem}.csv"
    row.write_text(",".join(report.header()) + "\n" + report.row() + "\n")
    return js, row


def run_training(cfg: RunConfig, data_path, out_dir, eval_path=None, val_path=None) -> RunManifest:
    """Train on a dataset file, save checkpoint, log, report and manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    _, samples = read_dataset(data_path)
    if val_path is not None:
        train_samples, val_samples = samples, read_dataset(val_path)[1]
    else:
        train_samples, val_samples = split_by_id(samples)
        if not train_samples or not val_samples:
            raise ConfigurationError("id-hash split produced an empty partition; pass --val")
    eval_path = eval_path or val_path
    t_load = time.perf_counter()
    tr = prepare(train_samples, cfg.train.layer_subset, cfg.raster)
    va = prepare(val_samples, cfg.train.layer_subset, cfg.raster)
    t_prep = time.perf_counter()
    result = train(cfg.train, tr, va, raster=cfg.raster)
    t_train = time.perf_counter()

    ck_path = save_checkpoint(result.checkpoint, out_dir / "model.ckpt")
    log_path = out_dir / "train_log.csv"
    log_path.write_text(result.log_rows())
    steps_path = out_dir / "step_losses.csv"
    steps_path.write_text("step,loss\n" + "".join(f"{i + 1},{v:.8g}\n" for i, v in enumerate(result.step_losses)))

    if eval_path is not None:
        report = evaluate(result.checkpoint, read_dataset(eval_path)[1], cfg.raster)
        eval_hash = file_hash(eval_path)
    else:
        # evaluation falls back to the validation split of the training file
        report = evaluate(result.checkpoint, va, cfg.raster)
        eval_hash = ""
    t_eval = time.perf_counter()
    write_report(report, out_dir)

    manifest = RunManifest(
        config_hash=config_hash(cfg.train, cfg.raster),
        dataset_hash=file_hash(data_path),
        dataset_path=str(Path(data_path).resolve()),
        eval_dataset_path=str(Path(eval_path).resolve()) if eval_path else "",
        eval_dataset_hash=eval_hash,
        checkpoint_path=str(ck_path.resolve()),
        report=report.to_dict(),
        timings={"load_s": t_load - t0, "prepare_s": t_prep - t_load, "train_s": t_train - t_prep,
                 "eval_s": t_eval - t_train},
        config=cfg.to_dict(),
        log_path=str(log_path.resolve()),
        step_losses_path=str(steps_path.resolve()),
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def evaluate_manifest(manifest: RunManifest) -> MetricsReport:
    """Re-evaluate the checkpoint a manifest points to on the dataset it recorded."""
    cfg = RunConfig.from_dict(manifest.config)
    ck = load_checkpoint(manifest.checkpoint_path)
    if manifest.eval_dataset_path:
        if file_hash(manifest.eval_dataset_path) != manifest.eval_dataset_hash:
            raise ConfigurationError(f"{manifest.eval_dataset_path} changed since the manifest was written")
        return evaluate(ck, read_dataset(manifest.eval_dataset_path)[1], cfg.raster)
    if file_hash(manifest.dataset_path) != manifest.dataset_hash:
        raise ConfigurationError(f"{manifest.dataset_path} changed since the manifest was written")
    _, val = split_by_id(read_dataset(manifest.dataset_path)[1])
    return evaluate(ck, val, cfg.raster)


# ---------------------------------------------------------------------------
# dataset summary


def final_angles(samples: list[Sample]) -> np.ndarray:
    return np.array([math.degrees(math.atan2(s.gt[-1, 1], s.gt[-1, 0])) for s in samples])


ANGLE_BINS = np.arange(-90.0, 91.0, 15.0)


def angle_histogram(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Counts of final heading angles over 15 degree bins with open-ended tails."""
    edges = np.concatenate([[-np.inf], ANGLE_BINS, [np.inf]])
    counts, _ = np.histogram(final_angles(samples), bins=edges)
    return counts, edges


def dataset_summary(samples: list[Sample]) -> str:
    fams = [s.family for s in samples]
    lines = ["family          count"]
    lines += [f"{fam:<15} {fams.count(fam):>5}" for fam in FAMILIES]
    lines += ["", "final heading angle (deg)"]
    counts, edges = angle_histogram(samples)
    top = max(1, int(counts.max()))
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        label = f"[{lo:>6.0f}, {hi:>6.0f})"
        lines.append(f"{label} {c:>5} {'#' * round(40 * c / top)}".rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablations

LOSS_STUDY = (
    ("Angle scaled loss 12 modes", {"loss_variant": "angle_scaled", "modes": 12}),
    ("MTP loss 12 modes", {"loss_variant": "mtp", "modes": 12}),
    ("Angle scaled loss 3 modes", {"loss_variant": "angle_scaled", "modes": 3}),
    ("MTP loss 3 modes", {"loss_variant": "mtp", "modes": 3}),
)

LAYER_STUDY = (
    ("2, 3, 4", {"layer_subset": (2, 3, 4)}),
    ("1, 2, 4", {"layer_subset": (1, 2, 4)}),
    ("1, 2, 3", {"layer_subset": (1, 2, 3)}),
    ("1, 2, 3, 4", {"layer_subset": (1, 2, 3, 4)}),
)

STUDIES = {"loss": LOSS_STUDY, "layer": LAYER_STUDY}
STUDY_TITLES = {"loss": "Model", "layer": "Layers"}


@dataclass
class AblationSpec:
    study: str
    base: TrainConfig
    raster: RasterConfig
    output: Path
    grid: tuple = ()

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigurationError(f"unknown study {self.study!r}; choose from {sorted(STUDIES)}")
        if not self.grid:
            self.grid = STUDIES[self.study]
        labels = [label for label, _ in self.grid]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("ablation grid labels must be distinct")
        configs = [json.dumps(self.cell_config(o).to_dict(), sort_keys=True) for _, o in self.grid]
        if len(set(configs)) != len(configs):
            raise ConfigurationError("ablation grid configurations must be distinct")

    def cell_config(self, overrides: dict) -> TrainConfig:
        d = self.base.to_dict()
        d.update(overrides)
        return TrainConfig.from_dict(d)


@dataclass
class AblationRow:
    label: str
    report: MetricsReport | None = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.report is None

    def values(self) -> list[str]:
        if self.report is None:
            return ["failed"] * len(ABLATION_COLUMNS)
        cols = dict(self.report.columns())
        return [f"{cols[c]:.4f}" for c in ABLATION_COLUMNS]


@dataclass
class AblationTable:
    study: str
    rows: list

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r.failed]

    def to_text(self) -> str:
        head = [STUDY_TITLES[self.study], *ABLATION_COLUMNS]
        body = [[r.label, *r.values()] for r in self.rows]
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        rule = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(head), rule, *map(fmt, body)]) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([STUDY_TITLES[self.study].lower(), *ABLATION_COLUMNS])
        for r in self.rows:
            w.writerow([r.label, *r.values()])
        return buf.getvalue()


def run_cell(cfg: TrainConfig, raster: RasterConfig, train_data: Batchable, val_data: Batchable,
             test_data: Batchable) -> MetricsReport:
    result = train(cfg, train_data, val_data, raster=raster)
    return evaluate(result.checkpoint, test_data, raster)


def run_ablation(spec: AblationSpec, train_samples, val_samples, test_samples) -> AblationTable:
    """Train and evaluate every grid cell; failures mark the row and the run continues."""
    prepared = {}

    def data_for(subset):
        if subset not in prepared:
            prepared[subset] = tuple(prepare(s, subset, spec.raster) for s in (train_samples, val_samples, test_samples))
        return prepared[subset]

    rows = []
    for label, overrides in spec.grid:
        t0 = time.perf_counter()
        try:
            cfg = spec.cell_config(overrides)
            cfg.validate()
            report = run_cell(cfg, spec.raster, *data_for(cfg.layer_subset))
            rows.append(AblationRow(label, report))
            log.info("cell %r done in %.1fs", label, time.perf_counter() - t0)
        except (ConfigurationError, NumericalError, ValueError, RuntimeError) as exc:
            log.error("cell %r failed: %s", label, exc)
            rows.append(AblationRow(label, None, f"{type(exc).__name__}: {exc}"))
    table = AblationTable(spec.study, rows)
    spec.output.mkdir(parents=True, exist_ok=True)
    (spec.output / f"ablation_{spec.study}.txt").write_text(table.to_text())
    (spec.output / f"ablation_{spec.study}.csv").write_text(table.to_csv())
    return table


# ---------------------------------------------------------------------------
# plot data


def _polyline(points) -> list:
    return [[round(float(x), 6), round(float(y), 6)] for x, y in np.asarray(points)]


def plot_data(manifest: RunManifest, out_dir, sample_ids=None, limit: int = 5) -> list[Path]:
    """Per-sample JSON with predicted modes, gt and drivable outlines, plus the loss curves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig.from_dict(manifest.config)
    path = manifest.eval_dataset_path or manifest.dataset_path
    _, samples = read_dataset(path)
    if sample_ids:
        by_id = {s.sample_id: s for s in samples}
        missing = [i for i in sample_ids if i not in by_id]
        if missing:
            raise ConfigurationError(f"sample ids not in {path}: {missing}")
        chosen = [by_id[i] for i in sample_ids]
    else:
        chosen = samples[:limit]
    ck = load_checkpoint(manifest.checkpoint_path)
    subset = tuple(ck.train_config.get("layer_subset", (1, 2, 3, 4)))
    preds = predict(load_model(ck), prepare(chosen, subset, cfg.raster))
    written = []
    for s, p in zip(chosen, preds):
        doc = {
            "sample_id": s.sample_id,
            "family": s.family,
            "maneuver": s.maneuver,
            "ground_truth": _polyline(s.gt),
            "modes": [{"confidence": round(float(c), 8), "trajectory": _polyline(t)}
                      for t, c in zip(p.trajectories, p.confidences)],
            "drivable_outline": [_polyline(poly) for poly in s.scene.drivable],
            "lanes": [_polyline(lane.points) for lane in s.scene.lanes],
        }
        target = out_dir / f"{s.sample_id}.json"
        target.write_text(json.dumps(doc, indent=1) + "\n")
        written.append(target)
    for name, src in (("epoch_losses.csv", manifest.log_path), ("step_losses.csv", manifest.step_losses_path)):
        if src and Path(src).exists():
            dest = out_dir / name
            dest.write_text(Path(src).read_text())
            written.append(dest)
    return written

