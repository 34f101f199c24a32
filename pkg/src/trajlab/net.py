"""MultiBackboneNet: one convnet per raster layer, per-backbone hypothesis heads, set-attention fusion.

Each raster layer gets its own small convnet. Its feature vector, concatenated
with the target's kinematics, goes through two fully connected layers that emit
K trajectories with confidence logits. All N*K hypotheses are pooled into one
unordered set, mixed by a self-attention block and reduced to M fused modes by
attention pooling against M learned seed vectors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from trajlab.errors import ConfigurationError, NumericalError


@dataclass
class NetConfig:
    num_backbones: int = 4
    size_px: int = 64
    horizon: int = 12
    modes_per_head: int = 12
    modes: int = 3
    conv_channels: tuple = (8, 16, 32, 32)
    feature_dim: int = 64
    head_hidden: int = 64
    d_model: int = 64
    num_heads: int = 4
    backbone_id: bool = True
    fusion_residual: bool = True
    activation: str = "relu"
    traj_scale: float = 10.0
    kinematics_scale: tuple = (0.1, 1.0, 1.0)
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.kinematics_scale = tuple(float(c) for c in self.kinematics_scale)
        if self.num_backbones < 1 or self.modes_per_head < 1 or self.modes < 1 or self.horizon < 1:
            raise ConfigurationError("backbone, mode and horizon counts must be positive")
        if self.d_model % self.num_heads:
            raise ConfigurationError("d_model must be divisible by num_heads")
        if self.activation not in ("relu", "identity"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.size_px >> len(self.conv_channels) < 1:
            raise ConfigurationError("too many stride-2 conv blocks for the raster size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["kinematics_scale"] = list(self.kinematics_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


def _act(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.Identity()


class Backbone(nn.Module):
    """Stride-2 conv blocks followed by a linear projection of the flattened map."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        layers = []
        c_in = 3
        for c_out in cfg.conv_channels:
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), _act(cfg.activation)]
            c_in = c_out
        self.convs = nn.Sequential(*layers)
        side = cfg.size_px
        for _ in cfg.conv_channels:
            side = (side + 1) // 2
        self.proj = nn.Linear(c_in * side * side, cfg.feature_dim)
        self.out_act = _act(cfg.activation)
        self.size_px = cfg.size_px

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3:] != (3, self.size_px, self.size_px):
            raise ConfigurationError(f"backbone expects (3, {self.size_px}, {self.size_px}) input, got {tuple(x.shape)}")
        return self.out_act(self.proj(self.convs(x).flatten(1)))


class HypothesisHead(nn.Module):
    """Two fully connected layers: feature + kinematics -> K trajectories and logits."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.k = cfg.modes_per_head
        self.t = cfg.horizon
        self.fc1 = nn.Linear(cfg.feature_dim + 3, cfg.head_hidden)
        self.act = _act(cfg.activation)
        self.fc2 = nn.Linear(cfg.head_hidden, self.k * (2 * self.t + 1))
        self.traj_scale = cfg.traj_scale
        self.register_buffer("kin_scale", torch.tensor(cfg.kinematics_scale))

    def forward(self, feature: Tensor, kinematics: Tensor) -> tuple[Tensor, Tensor]:
        kin = kinematics * self.kin_scale.to(kinematics.dtype)
        out = self.fc2(self.act(self.fc1(torch.cat([feature, kin], dim=-1))))
        out = out.view(-1, self.k, 2 * self.t + 1)
        trajs = out[..., : 2 * self.t].reshape(-1, self.k, self.t, 2) * self.traj_scale
        return trajs, out[..., -1]


class SetAttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int, activation: str):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, d), _act(activation), nn.Linear(d, d))

    def forward(self, x: Tensor) -> Tensor:
        h = x + self.attn(x, x, x, need_weights=False)[0]
        return h + self.ff(h)


class SeedPooling(nn.Module):
    """Pooling by attention: M learned seeds attend over the set."""

    def __init__(self, d: int, heads: int, num_seeds: int, activation: str):
        super().__init__()
        self.seeds = nn.Parameter(torch.zeros(num_seeds, d))
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, d), _act(activation), nn.Linear(d, d))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Pooled tokens (B, M, d) and head-averaged attention weights (B, M, P)."""
        s = self.seeds.unsqueeze(0).expand(x.shape[0], -1, -1)
        attended, weights = self.attn(s, x, x, need_weights=True, average_attn_weights=True)
        h = s + attended
        return h + self.ff(h), weights


class Fusion(nn.Module):
    """Permutation-invariant fusion of pooled hypotheses into M modes."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.t = cfg.horizon
        self.m = cfg.modes
        self.traj_scale = cfg.traj_scale
        self.embed = nn.Linear(2 * cfg.horizon + 1, cfg.d_model)
        self.source = nn.Embedding(cfg.num_backbones, cfg.d_model) if cfg.backbone_id else None
        self.sab = SetAttentionBlock(cfg.d_model, cfg.num_heads, cfg.activation)
        self.pool = SeedPooling(cfg.d_model, cfg.num_heads, cfg.modes, cfg.activation)
        self.decode = nn.Linear(cfg.d_model, 2 * cfg.horizon + 1)
        self.residual = cfg.fusion_residual

    def forward(self, trajs: Tensor, confidences: Tensor, source_ids: Tensor) -> tuple[Tensor, Tensor]:
        """trajs (B, P, T, 2), confidences (B, P), source_ids (P,) or (B, P)."""
        b, p, t, _ = trajs.shape
        if t != self.t:
            raise ConfigurationError(f"fusion expects horizon {self.t}, got {t}")
        tokens = torch.cat([trajs.reshape(b, p, 2 * t) / self.traj_scale, confidences.unsqueeze(-1)], dim=-1)
        x = self.embed(tokens)
        if self.source is not None:
            ids = source_ids if source_ids.dim() == 2 else source_ids.unsqueeze(0).expand(b, -1)
            x = x + self.source(ids)
        pooled, weights = self.pool(self.sab(x))
        out = self.decode(pooled)
        fused = out[..., : 2 * t].reshape(b, self.m, t, 2) * self.traj_scale
        if self.residual:
            # attention-weighted mixture of the input hypotheses plus a learned correction
            fused = fused + torch.einsum("bmp,bptc->bmtc", weights, trajs)
        return fused, torch.softmax(out[..., -1], dim=-1)


class MultiBackboneNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.backbones = nn.ModuleList(Backbone(cfg) for _ in range(cfg.num_backbones))
        self.heads = nn.ModuleList(HypothesisHead(cfg) for _ in range(cfg.num_backbones))
        self.fusion = Fusion(cfg)
        reset_parameters(self, cfg.seed, cfg.init_scale)

    def hypotheses(self, stack: Tensor, kinematics: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        """Per-backbone (trajectories, logits, confidences)."""
        if stack.dim() != 5 or stack.shape[1] != self.cfg.num_backbones:
            raise ConfigurationError(
                f"expected stack (B, {self.cfg.num_backbones}, 3, H, W), got {tuple(stack.shape)}")
        out = []
        for i, (bb, head) in enumerate(zip(self.backbones, self.heads)):
            trajs, logits = head(bb(stack[:, i]), kinematics)
            out.append((trajs, logits, torch.softmax(logits, dim=-1)))
        return out

    def fuse(self, sets: list[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
        """Fuse per-backbone (trajectories, confidences) pairs, in backbone order."""
        if not sets:
            raise ConfigurationError("fusion needs at least one hypothesis set")
        horizons = {s[0].shape[-2] for s in sets}
        if len(horizons) != 1:
            raise ConfigurationError(f"hypothesis sets disagree on horizon: {sorted(horizons)}")
        trajs = torch.cat([s[0] for s in sets], dim=1)
        confs = torch.cat([s[1] for s in sets], dim=1)
        ids = torch.cat([torch.full((s[0].shape[1],), i, dtype=torch.long) for i, s in enumerate(sets)])
        return self.fusion(trajs, confs, ids)

    def forward(self, stack: Tensor, kinematics: Tensor):
        hyps = self.hypotheses(stack, kinematics)
        fused, conf = self.fuse([(t, c) for t, _, c in hyps])
        return fused, conf, hyps


def reset_parameters(model: nn.Module, seed: int, scale: float = 1.0) -> None:
    """Uniform(-scale/sqrt(fan_in), scale/sqrt(fan_in)) weights, zero biases, zero seeds."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or name.endswith("seeds"):
                p.zero_()
                continue
            if name.endswith("in_proj_weight"):
                fan_in = p.shape[1]
            elif p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
            else:
                fan_in = p.shape[0]
            bound = scale / math.sqrt(fan_in)
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    if hasattr(model, "fusion") and model.fusion.pool.seeds is not None:
        # distinct seeds so the M pooled modes are not identical at init
        with torch.no_grad():
            s = model.fusion.pool.seeds
            s.copy_(torch.randn(s.shape, generator=gen, dtype=torch.float64).to(s.dtype))


def build_model(cfg: NetConfig, dtype=torch.float32) -> MultiBackboneNet:
    return MultiBackboneNet(cfg).to(dtype)


# ---------------------------------------------------------------------------
# single-sample functional surface


@dataclass
class Hypothesis:
    trajectory: np.ndarray
    confidence_logit: float


@dataclass
class HypothesisSet:
    trajectories: np.ndarray  # (K, T, 2)
    logits: np.ndarray
    confidences: np.ndarray

    @property
    def hypotheses(self) -> list[Hypothesis]:
        return [Hypothesis(t, float(l)) for t, l in zip(self.trajectories, self.logits)]

    @property
    def k(self) -> int:
        return len(self.confidences)


def _param_dtype(model: nn.Module):
    return next(model.parameters()).dtype


def _as_input(x, model) -> Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x, dtype=_param_dtype(model))


def backbone_forward(grid, model: MultiBackboneNet, index: int = 0) -> np.ndarray:
    """Features for one (H, W, 3) grid through backbone ``index``."""
    g = _as_input(grid, model)
    if g.dim() != 3 or g.shape[-1] != 3:
        raise ConfigurationError(f"grid must be (H, W, 3), got {tuple(g.shape)}")
    with torch.no_grad():
        return model.backbones[index](g.permute(2, 0, 1).unsqueeze(0))[0].numpy().copy()


def head_forward(feature, kinematics, model: MultiBackboneNet, index: int = 0) -> HypothesisSet:
    f = _as_input(feature, model).reshape(1, -1)
    k = _as_input(kinematics, model).reshape(1, 3)
    with torch.no_grad():
        trajs, logits = model.heads[index](f, k)
        conf = torch.softmax(logits, dim=-1)
    return HypothesisSet(trajs[0].numpy().copy(), logits[0].numpy().copy(), conf[0].numpy().copy())


def fuse_hypotheses(sets: list[HypothesisSet], model: MultiBackboneNet):
    from trajlab.metrics import Prediction

    if not sets:
        raise ConfigurationError("fusion needs at least one hypothesis set")
    pairs = [(_as_input(s.trajectories, model).unsqueeze(0), _as_input(s.confidences, model).unsqueeze(0))
             for s in sets]
    with torch.no_grad():
        fused, conf = model.fuse(pairs)
    return Prediction(fused[0].numpy().copy(), conf[0].numpy().copy())


def model_forward(stack, kinematics, model: MultiBackboneNet):
    """Prediction plus the per-backbone hypothesis sets for one RasterStack."""
    from trajlab.metrics import Prediction

    x = _as_input(stack.as_chw(), model).unsqueeze(0)
    k = _as_input(kinematics, model).reshape(1, 3)
    with torch.no_grad():
        fused, conf, hyps = model(x, k)
    sets = [HypothesisSet(t[0].numpy().copy(), l[0].numpy().copy(), c[0].numpy().copy()) for t, l, c in hyps]
    return Prediction(fused[0].numpy().copy(), conf[0].numpy().copy()), sets


# ---------------------------------------------------------------------------
# finite-difference gradient check


def gradient_check(fn, params: list[Tensor], epsilon: float = 1e-5, num_coords: int = 50,
                   seed: int = 0) -> float:
    """Max over sampled coordinates of |analytic - central difference| / max(1, |analytic|).

    ``fn`` maps the current values of ``params`` to a scalar tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    value = fn()
    if not torch.isfinite(value).all():
        raise NumericalError("loss is not finite at the check point")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(num_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for c in coords:
            which = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = params[which].view(-1)
            j = int(c - offsets[which])
            orig = flat[j].item()
            flat[j] = orig + epsilon
            plus = float(fn())
            flat[j] = orig - epsilon
            minus = float(fn())
            flat[j] = orig
            numeric = (plus - minus) / (2 * epsilon)
            analytic = float(grads[which].view(-1)[j])
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
