"""Mini-batch training, validation-best checkpointing and evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from trajlab import checkpoint as ckpt_io
from trajlab.checkpoint import Checkpoint
from trajlab.errors import ConfigurationError, NumericalError
from trajlab.loss import VARIANTS, batch_loss
from trajlab.metrics import MetricsReport, Prediction, aggregate
from trajlab.net import NetConfig, MultiBackboneNet, build_model
from trajlab.raster import RasterConfig, build_stack, drivable_mask, specs_for_subset
from trajlab.scenegen import Sample

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 100
    epochs: int = 20
    steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_variant: str = "mtp"
    modes: int = 3
    modes_per_head: int = 12
    layer_subset: tuple = (1, 2, 3, 4)
    squared_regression: bool = False
    grad_clip: float | None = None
    seed: int = 0
    dtype: str = "float32"
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_subset = tuple(int(i) for i in self.layer_subset)

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigurationError("steps must be >= 1 when given")
        if self.loss_variant not in VARIANTS:
            raise ConfigurationError(f"loss_variant must be one of {VARIANTS}")
        if self.modes < 1 or self.modes_per_head < 1:
            raise ConfigurationError("mode counts must be positive")
        if not self.layer_subset or len(set(self.layer_subset)) != len(self.layer_subset):
            raise ConfigurationError("layer_subset must be nonempty without repeats")
        specs_for_subset(self.layer_subset)
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_subset"] = list(self.layer_subset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def net_config(self, raster: RasterConfig, horizon: int) -> NetConfig:
        kw = dict(self.net)
        kw.update(
            num_backbones=len(self.layer_subset),
            size_px=raster.size_px,
            horizon=horizon,
            modes=self.modes,
            modes_per_head=self.modes_per_head,
            seed=self.seed,
        )
        return NetConfig.from_dict(kw)


def config_hash(train: TrainConfig, raster: RasterConfig) -> str:
    payload = json.dumps({"train": train.to_dict(), "raster": raster.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def split_by_id(samples: Sequence[Sample], val_fraction: float = 0.2):
    """Deterministic split: a sample goes to validation when its id hash falls below the fraction."""
    train, val = [], []
    for s in samples:
        h = int(hashlib.sha256(s.sample_id.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
        (val if h < val_fraction else train).append(s)
    return train, val


@dataclass
class Batchable:
    """Rasterized tensors for a list of samples."""

    ids: list
    stacks: np.ndarray  # (S, N, 3, H, W)
    kinematics: np.ndarray  # (S, 3)
    gts: np.ndarray  # (S, T, 2)
    masks: np.ndarray  # (S, H, W) bool
    turning: np.ndarray  # (S,) bool

    def __len__(self):
        return len(self.ids)

    def tensors(self, idx, dtype):
        return (torch.as_tensor(self.stacks[idx], dtype=dtype),
                torch.as_tensor(self.kinematics[idx], dtype=dtype),
                torch.as_tensor(self.gts[idx], dtype=dtype))


def prepare(samples: Sequence[Sample], layer_subset, raster: RasterConfig) -> Batchable:
    if len(samples) == 0:
        raise ValueError("dataset is empty")
    specs = specs_for_subset(layer_subset)
    horizons = {len(s.gt) for s in samples}
    if len(horizons) != 1:
        raise ConfigurationError(f"mixed horizons in dataset: {sorted(horizons)}")
    stacks = np.stack([build_stack(s.scene, specs, raster).as_chw() for s in samples]).astype(np.float32)
    return Batchable(
        ids=[s.sample_id for s in samples],
        stacks=stacks,
        kinematics=np.stack([s.kinematics for s in samples]),
        gts=np.stack([s.gt for s in samples]),
        masks=np.stack([drivable_mask(s.scene, raster) for s in samples]),
        turning=np.array([s.is_turning for s in samples]),
    )


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epochs: list
    step_losses: list
    penalties: dict
    final_state: dict = field(repr=False, default_factory=dict)

    def log_rows(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(["epoch", "train_loss", "val_loss", "wall_time"])]
        for e in self.epochs:
            lines.append(delimiter.join([str(e.epoch), f"{e.train_loss:.8g}", f"{e.val_loss:.8g}",
                                         f"{e.wall_time:.3f}"]))
        return "\n".join(lines) + "\n"


def _loss_over(model: MultiBackboneNet, data: Batchable, cfg: TrainConfig, dtype, batch: int = 64) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch):
            idx = np.arange(start, min(start + batch, len(data)))
            x, k, g = data.tensors(idx, dtype)
            fused, conf, _ = model(x, k)
            total += float(batch_loss(fused, conf, g, cfg.loss_variant, cfg.squared_regression).per_sample.sum())
    return total / len(data)


def _param_norm(model) -> float:
    return math.sqrt(sum(float((p.detach().double() ** 2).sum()) for p in model.parameters()))


def train(config: TrainConfig, train_set, val_set=None, raster: RasterConfig | None = None) -> TrainResult:
    """Train with Adam on shuffled mini-batches; return the best-validation checkpoint.

    ``train_set`` / ``val_set`` are sample lists or prepared :class:`Batchable`.
    Without a validation set the training samples are split 80/20 by id hash.
    """
    config.validate()
    raster = raster or RasterConfig()
    if not isinstance(train_set, Batchable) and val_set is None:
        train_set, val_set = split_by_id(train_set)
        if not train_set or not val_set:
            raise ConfigurationError("id-hash split produced an empty partition; pass a validation set")
    tr = train_set if isinstance(train_set, Batchable) else prepare(train_set, config.layer_subset, raster)
    va = val_set if isinstance(val_set, Batchable) else prepare(val_set, config.layer_subset, raster)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if tr.stacks.shape[1] != len(config.layer_subset) or tr.stacks.shape[-1] != raster.size_px:
        raise ConfigurationError("prepared data does not match layer subset / raster size")

    dtype = _DTYPES[config.dtype]
    torch.manual_seed(config.seed)
    net_cfg = config.net_config(raster, tr.gts.shape[1])
    model = build_model(net_cfg, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
    shuffle = np.random.default_rng(config.seed)

    steps_per_epoch = math.ceil(len(tr) / config.batch_size)
    epochs = config.epochs if config.steps is None else math.ceil(config.steps / steps_per_epoch)
    max_steps = config.steps if config.steps is not None else epochs * steps_per_epoch

    penalties = {}
    if config.loss_variant == "angle_scaled":
        from trajlab.loss import angle_penalty
        penalties = {sid: angle_penalty(g) for sid, g in zip(tr.ids, tr.gts)}

    chash = config_hash(config, raster)
    best = None
    history = []
    step_losses = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        model.train()
        order = shuffle.permutation(len(tr))
        epoch_total = 0.0
        epoch_count = 0
        for b, start in enumerate(range(0, len(tr), config.batch_size)):
            if step >= max_steps:
                break
            idx = order[start:start + config.batch_size]
            x, k, g = tr.tensors(idx, dtype)
            fused, conf, _ = model(x, k)
            loss = batch_loss(fused, conf, g, config.loss_variant, config.squared_regression).mean
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {b} (step {step}); "
                    f"parameter norm {_param_norm(model):.6g}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            step += 1
            step_losses.append(loss.item())
            epoch_total += step_losses[-1] * len(idx)
            epoch_count += len(idx)
        model.eval()
        val_loss = _loss_over(model, va, config, dtype)
        history.append(EpochLog(epoch, epoch_total / max(epoch_count, 1), val_loss, time.perf_counter() - t0))
        log.debug("epoch %d train %.4f val %.4f", epoch, history[-1].train_loss, val_loss)
        if best is None or val_loss < best[0]:
            best = (val_loss, copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()), step)
        if step >= max_steps:
            break

    _, state, opt_state, best_step = best
    ck = Checkpoint(
        net_config=net_cfg.to_dict(),
        model_state=state,
        optimizer_state=opt_state,
        step=best_step,
        config_hash=chash,
        best_validation=True,
        train_config=config.to_dict(),
        extra={"raster": raster.to_dict(), "val_loss": best[0]},
    )
    return TrainResult(checkpoint=ck, epochs=history, step_losses=step_losses, penalties=penalties,
                       final_state=copy.deepcopy(model.state_dict()))


def load_model(ck: Checkpoint) -> MultiBackboneNet:
    cfg = NetConfig.from_dict(ck.net_config)
    dtype = next(iter(ck.model_state.values())).dtype
    model = build_model(cfg, dtype)
    model.load_state_dict(ck.model_state)
    model.eval()
    return model


def predict(model: MultiBackboneNet, data: Batchable, batch: int = 64) -> list[Prediction]:
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch):
            idx = np.arange(start, min(start + batch, len(data)))
            x, k, _ = data.tensors(idx, dtype)
            fused, conf, _ = model(x, k)
            for f, c in zip(fused.double().numpy(), conf.double().numpy()):
                out.append(Prediction(f, c))
    return out


def evaluate(ck: Checkpoint, dataset, raster: RasterConfig | None = None, k_list=(5, 10),
             subset: np.ndarray | None = None) -> MetricsReport:
    """Metrics report for a checkpoint on samples (or prepared data)."""
    if raster is None:
        raster = RasterConfig.from_dict(ck.extra["raster"]) if "raster" in ck.extra else RasterConfig()
    net_cfg = NetConfig.from_dict(ck.net_config)
    layer_subset = tuple(ck.train_config.get("layer_subset", (1, 2, 3, 4)))
    if net_cfg.size_px != raster.size_px:
        raise ConfigurationError(f"checkpoint expects {net_cfg.size_px}px rasters, got {raster.size_px}px")
    data = dataset if isinstance(dataset, Batchable) else prepare(dataset, layer_subset, raster)
    if data.stacks.shape[1] != net_cfg.num_backbones:
        raise ConfigurationError("dataset layer count does not match checkpoint backbones")
    if data.gts.shape[1] != net_cfg.horizon:
        raise ConfigurationError("dataset horizon does not match checkpoint")
    preds = predict(load_model(ck), data)
    keep = np.arange(len(data)) if subset is None else np.flatnonzero(subset)
    return aggregate([preds[i] for i in keep], data.gts[keep], data.masks[keep], raster, k_list)


def save_checkpoint(ck: Checkpoint, path):
    return ckpt_io.save(ck, path)


def load_checkpoint(path) -> Checkpoint:
    return ckpt_io.load(path)
