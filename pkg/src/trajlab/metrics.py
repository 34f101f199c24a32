"""Motion-forecasting metrics: minADE_k, minFDE_k, miss rate at 2 m, off-road rate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from trajlab.raster import RasterConfig

MISS_THRESHOLD_M = 2.0


def _mean(values) -> float:
    # fsum keeps dataset means independent of sample order
    values = [float(v) for v in values]
    return math.fsum(values) / len(values)


@dataclass
class Prediction:
    """M trajectories (M, T, 2) in the agent frame with confidences summing to one."""

    trajectories: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if self.trajectories.ndim != 3 or self.trajectories.shape[-1] != 2:
            raise ValueError("trajectories must be (M, T, 2)")
        if len(self.confidences) != len(self.trajectories):
            raise ValueError("one confidence per trajectory is required")

    @property
    def num_modes(self) -> int:
        return len(self.confidences)


def _check(traj, gt):
    traj = np.asarray(traj, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if traj.shape[-2:] != gt.shape:
        raise ValueError(f"trajectory shape {traj.shape} does not match ground truth {gt.shape}")
    return traj, gt


def displacement(traj, gt) -> np.ndarray:
    """Pointwise L2 distances; broadcasts over leading mode axes."""
    traj, gt = _check(traj, gt)
    d = traj - gt
    return np.hypot(d[..., 0], d[..., 1])


def ade(traj, gt) -> float:
    return float(displacement(traj, gt).mean())


def fde(traj, gt, literal: bool = False) -> float:
    """Final-point L2 distance. ``literal=True`` divides by T as the printed formula does."""
    d = displacement(traj, gt)[..., -1]
    if literal:
        d = d / np.asarray(gt).shape[0]
    return float(d)


def top_k(prediction: Prediction, k: int) -> np.ndarray:
    """Indices of the k most confident modes, highest first; ties keep index order."""
    m = prediction.num_modes
    if not 1 <= k <= m:
        raise ValueError(f"k={k} outside [1, {m}]")
    order = np.argsort(-prediction.confidences, kind="stable")
    return order[:k]


def min_ade_k(prediction: Prediction, gt, k: int) -> float:
    idx = top_k(prediction, k)
    return float(displacement(prediction.trajectories[idx], gt).mean(axis=-1).min())


def min_fde_k(prediction: Prediction, gt, k: int, literal: bool = False) -> float:
    idx = top_k(prediction, k)
    d = displacement(prediction.trajectories[idx], gt)[:, -1]
    if literal:
        d = d / np.asarray(gt).shape[0]
    return float(d.min())


def is_miss(traj, gt, threshold: float = MISS_THRESHOLD_M) -> bool:
    return bool(displacement(traj, gt).max() > threshold)


def sample_missed(prediction: Prediction, gt, k: int, any_miss: bool = False) -> bool:
    """A sample misses when all of its top-k modes miss (or any, with ``any_miss``)."""
    idx = top_k(prediction, k)
    misses = displacement(prediction.trajectories[idx], gt).max(axis=-1) > MISS_THRESHOLD_M
    return bool(misses.any() if any_miss else misses.all())


def miss_rate_2m(predictions: Sequence[Prediction], gts, k: int, any_miss: bool = False) -> float:
    if len(predictions) == 0:
        raise ValueError("miss rate needs a nonempty dataset")
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    return _mean([sample_missed(p, g, k, any_miss) for p, g in zip(predictions, gts)])


def off_road_fraction(prediction: Prediction, mask: np.ndarray, cfg: RasterConfig) -> float:
    """Fraction of modes with at least one point off the drivable mask or outside the window."""
    if mask is None:
        raise ValueError("a drivable mask is required")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cfg.size_px, cfg.size_px):
        raise ValueError(f"mask shape {mask.shape} does not match raster size {cfg.size_px}")
    rows, cols, inside = cfg.nearest_pixel(prediction.trajectories)
    on_road = mask[rows, cols] & inside
    return float((~on_road.all(axis=-1)).mean())


def off_road_rate(predictions: Sequence[Prediction], masks, cfg: RasterConfig) -> float:
    if len(predictions) == 0:
        raise ValueError("off-road rate needs a nonempty dataset")
    if masks is None or len(masks) != len(predictions):
        raise ValueError("one drivable mask per prediction is required")
    return _mean([off_road_fraction(p, m, cfg) for p, m in zip(predictions, masks)])


@dataclass
class MetricsReport:
    min_ade: dict = field(default_factory=dict)
    min_fde: dict = field(default_factory=dict)
    miss_rate_2m: dict = field(default_factory=dict)
    off_road_rate: float = 0.0
    sample_count: int = 0
    k_list: tuple = (5, 10)

    def columns(self) -> list[tuple[str, float]]:
        """Table column order: minADE per k, MissRateTop per k, minFDE1, offRoadRate."""
        cols = [(f"minADE{k}", self.min_ade[k]) for k in self.k_list]
        cols += [(f"MissRateTop{k}", self.miss_rate_2m[k]) for k in self.k_list]
        cols += [("minFDE1", self.min_fde[1]), ("offRoadRate", self.off_road_rate)]
        return cols

    def header(self) -> list[str]:
        return [name for name, _ in self.columns()]

    def row(self, delimiter: str = ",", digits: int = 6) -> str:
        return delimiter.join(f"{v:.{digits}f}" for _, v in self.columns())

    def to_dict(self) -> dict:
        return {
            "k_list": list(self.k_list),
            "min_ade": {str(k): v for k, v in sorted(self.min_ade.items())},
            "min_fde": {str(k): v for k, v in sorted(self.min_fde.items())},
            "miss_rate_2m": {str(k): v for k, v in sorted(self.miss_rate_2m.items())},
            "off_road_rate": self.off_road_rate,
            "sample_count": self.sample_count,
            "columns": dict(self.columns()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def ints(m):
            return {int(k): float(v) for k, v in m.items()}

        return cls(
            min_ade=ints(d["min_ade"]),
            min_fde=ints(d["min_fde"]),
            miss_rate_2m=ints(d["miss_rate_2m"]),
            off_road_rate=float(d["off_road_rate"]),
            sample_count=int(d["sample_count"]),
            k_list=tuple(d["k_list"]),
        )


def aggregate(predictions: Sequence[Prediction], gts, masks, cfg: RasterConfig,
              k_list=(5, 10), literal_fde: bool = False, any_miss: bool = False) -> MetricsReport:
    """Dataset-level report. k larger than the mode count is clamped to the mode count."""
    n = len(predictions)
    if n == 0:
        raise ValueError("cannot aggregate an empty dataset")
    if len(gts) != n or len(masks) != n:
        raise ValueError("predictions, ground truths and masks differ in length")
    ks = sorted(set(int(k) for k in k_list) | {1})

    def eff(p, k):
        return min(k, p.num_modes)

    report = MetricsReport(sample_count=n, k_list=tuple(int(k) for k in k_list))
    for k in ks:
        report.min_ade[k] = _mean([min_ade_k(p, g, eff(p, k)) for p, g in zip(predictions, gts)])
        report.min_fde[k] = _mean(
            [min_fde_k(p, g, eff(p, k), literal_fde) for p, g in zip(predictions, gts)])
        report.miss_rate_2m[k] = _mean(
            [sample_missed(p, g, eff(p, k), any_miss) for p, g in zip(predictions, gts)])
    report.off_road_rate = off_road_rate(predictions, masks, cfg)
    return report
