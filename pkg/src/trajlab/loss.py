"""Winner-takes-all trajectory losses.

The winner among K modes is the one whose final point makes the smallest angle
with the ground-truth final point. The MTP loss regresses that winner (mean
pointwise L2) and maximises its confidence; the angle-scaled loss multiplies
the MTP loss by ``exp(|steering angle in degrees| / 20)`` of the ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from trajlab.errors import DegenerateAngleError

DEGENERATE_EPS = 1e-6
PROB_FLOOR = 1e-12
PENALTY_SCALE_DEG = 20.0
VARIANTS = ("mtp", "angle_scaled")


@dataclass
class LossBreakdown:
    winner_index: int
    angle_deg: float
    regression: float
    classification: float
    penalty: float
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _final_cosines(finals: np.ndarray, gt_final: np.ndarray, eps: float) -> np.ndarray:
    norms = np.linalg.norm(finals, axis=-1)
    cos = finals @ gt_final / (np.maximum(norms, eps) * np.linalg.norm(gt_final))
    return np.where(norms > eps, np.clip(cos, -1.0, 1.0), np.nan)


def angle_between(traj, gt, eps: float = DEGENERATE_EPS) -> float:
    """Angle in degrees between the final points of two trajectories."""
    a = _np(traj)[-1]
    b = _np(gt)[-1]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise DegenerateAngleError(f"final point norm below {eps} m")
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def mode_angles(trajectories, gt, eps: float = DEGENERATE_EPS) -> np.ndarray:
    """Angles (degrees) of every mode's final point against gt; inf where a mode is degenerate."""
    trajs = _np(trajectories)
    g = _np(gt)[-1]
    if np.linalg.norm(g) <= eps:
        raise DegenerateAngleError("ground-truth final point is degenerate")
    cos = _final_cosines(trajs[:, -1], g, eps)
    return np.where(np.isnan(cos), np.inf, np.degrees(np.arccos(np.nan_to_num(cos))))


def select_winner(trajectories, gt, eps: float = DEGENERATE_EPS) -> int:
    """Index of the least-angle mode; lowest index on ties; min-ADE when gt is degenerate."""
    trajs = _np(trajectories)
    g = _np(gt)
    if len(trajs) < 1:
        raise ValueError("need at least one trajectory")
    try:
        angles = mode_angles(trajs, g, eps)
    except DegenerateAngleError:
        angles = None
    if angles is None or not np.isfinite(angles).any():
        ades = np.linalg.norm(trajs - g, axis=-1).mean(axis=-1)
        return int(np.argmin(ades))
    return int(np.argmin(angles))


def regression_loss(traj, gt, squared: bool = False):
    """Mean over time of pointwise L2 distance (or squared distance)."""
    if isinstance(traj, torch.Tensor) or isinstance(gt, torch.Tensor):
        traj = torch.as_tensor(traj)
        gt = torch.as_tensor(gt, dtype=traj.dtype)
        sq = ((traj - gt) ** 2).sum(-1)
        return sq.mean(-1) if squared else torch.sqrt(sq).mean(-1)
    d = np.asarray(traj, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    sq = (d**2).sum(-1)
    return float(sq.mean(-1) if squared else np.sqrt(sq).mean(-1))


def classification_loss(confidences, winner: int):
    """-ln(p_winner) with p floored at 1e-12."""
    if isinstance(confidences, torch.Tensor):
        return -torch.log(torch.clamp(confidences[..., winner], min=PROB_FLOOR))
    p = float(np.asarray(confidences, dtype=np.float64)[winner])
    return -math.log(max(p, PROB_FLOOR))


def angle_penalty(gt, eps: float = DEGENERATE_EPS) -> float:
    """exp(|atan2(y_T, x_T)| in degrees / 20); 1 when the final point is degenerate."""
    x, y = _np(gt)[-1]
    if math.hypot(x, y) <= eps:
        return 1.0
    alpha = math.degrees(math.atan2(y, x))
    return math.exp(abs(alpha) / PENALTY_SCALE_DEG)


def _breakdown(trajectories, confidences, gt, squared_regression: bool, penalty: float) -> LossBreakdown:
    trajs = torch.as_tensor(trajectories)
    conf = torch.as_tensor(confidences, dtype=trajs.dtype)
    g = torch.as_tensor(gt, dtype=trajs.dtype)
    winner = select_winner(trajs, g)
    try:
        angle = angle_between(_np(trajs)[winner], _np(g))
    except DegenerateAngleError:
        angle = float("nan")
    reg = regression_loss(trajs[winner], g, squared=squared_regression)
    cls = classification_loss(conf, winner)
    mtp = reg + cls
    total = mtp * penalty
    return LossBreakdown(
        winner_index=winner,
        angle_deg=angle,
        regression=float(reg),
        classification=float(cls),
        penalty=penalty,
        total=float(total),
        tensor=total,
    )


def mtp_loss(trajectories, confidences, gt, squared_regression: bool = False) -> LossBreakdown:
    """Regression + classification for the angle winner; ``tensor`` carries the graph."""
    return _breakdown(trajectories, confidences, gt, squared_regression, 1.0)


def angle_scaled_loss(trajectories, confidences, gt, squared_regression: bool = False) -> LossBreakdown:
    return _breakdown(trajectories, confidences, gt, squared_regression, angle_penalty(gt))


# ---------------------------------------------------------------------------
# batched form used for training


@dataclass
class BatchLoss:
    per_sample: torch.Tensor  # (B,) totals, differentiable
    winners: np.ndarray
    penalties: np.ndarray
    regression: torch.Tensor
    classification: torch.Tensor

    @property
    def mean(self) -> torch.Tensor:
        return self.per_sample.mean()


def batch_loss(trajectories: torch.Tensor, confidences: torch.Tensor, gt: torch.Tensor,
               variant: str = "mtp", squared_regression: bool = False) -> BatchLoss:
    """Per-sample losses for (B, M, T, 2) trajectories and (B, M) confidences.

    The angle penalty is applied per sample before any batch averaging and is a
    constant with respect to the model outputs.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    trajs_np = _np(trajectories)
    gt_np = _np(gt)
    winners = np.array([select_winner(t, g) for t, g in zip(trajs_np, gt_np)], dtype=np.int64)
    if variant == "angle_scaled":
        penalties = np.array([angle_penalty(g) for g in gt_np])
    else:
        penalties = np.ones(len(gt_np))
    idx = torch.as_tensor(winners)
    rows = torch.arange(len(winners))
    chosen = trajectories[rows, idx]
    reg = regression_loss(chosen, gt, squared=squared_regression)
    cls = -torch.log(torch.clamp(confidences[rows, idx], min=PROB_FLOOR))
    per_sample = (reg + cls) * torch.as_tensor(penalties, dtype=trajectories.dtype)
    return BatchLoss(per_sample=per_sample, winners=winners, penalties=penalties,
                     regression=reg, classification=cls)
