"""Training loop and its configuration."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import NormStats, PoseDataset, load_dataset, normalize_x, normalize_y, occlusion_mask, split
from .errors import ConfigError, NumericError, ProvenanceError
from .mdn import total_loss
from .model import Architecture, MdnPoseNet
from .optim import Adam, AdamState, LrSchedule, apply_constraints
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

OUTPUT_FIELDS = ("checkpoint", "loss_log")


@dataclass
class TrainConfig:
    seed: int = 0
    M: int = 5
    lam: float = 2.0
    gamma_elu: float = 1.0
    lr: float = 1e-3
    decay_rate: float = 0.96
    decay_steps: int = 100_000
    batch_size: int = 64
    epochs: int = 200
    dropout: float = 0.5
    max_norm: float = 1.0
    alpha_clip: Tuple[float, float] = (1e-8, 1.0)
    sigma_clip: Tuple[float, float] = (1e-15, 1e15)
    # per-sample number of hidden limb joints is drawn uniformly from 0..occlusion_k
    occlusion_k: int = 0
    width: int = 1024
    n_blocks: int = 2
    val_fraction: float = 0.1
    train_data: Optional[str] = None
    checkpoint: Optional[str] = None
    loss_log: Optional[str] = None

    def __post_init__(self):
        self.alpha_clip = tuple(float(v) for v in self.alpha_clip)
        self.sigma_clip = tuple(float(v) for v in self.sigma_clip)
        self.validate()

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        need(isinstance(self.M, int) and self.M >= 1, "M", "must be a positive integer")
        need(self.lam > 0, "lam", "must be positive")
        need(self.gamma_elu > 0, "gamma_elu", "must be positive")
        need(self.lr > 0, "lr", "must be positive")
        need(0 < self.decay_rate <= 1, "decay_rate", "must lie in (0, 1]")
        need(self.decay_steps > 0, "decay_steps", "must be positive")
        need(self.batch_size >= 2, "batch_size", "must be at least 2 for batch norm")
        need(self.epochs >= 0, "epochs", "must be non-negative")
        need(0 <= self.dropout < 1, "dropout", "must lie in [0, 1)")
        need(self.max_norm > 0, "max_norm", "must be positive")
        need(0 < self.alpha_clip[0] < self.alpha_clip[1], "alpha_clip", "bounds must be positive and ordered")
        need(0 < self.sigma_clip[0] < self.sigma_clip[1], "sigma_clip", "bounds must be positive and ordered")
        need(self.occlusion_k >= 0, "occlusion_k", "must be non-negative")
        need(self.width >= 1, "width", "must be positive")
        need(self.n_blocks >= 0, "n_blocks", "must be non-negative")
        need(0 <= self.val_fraction < 1, "val_fraction", "must lie in [0, 1)")

    def architecture(self, n_joints: int) -> Architecture:
        return Architecture(n_joints=n_joints, M=self.M, width=self.width, n_blocks=self.n_blocks,
                            dropout=self.dropout, gamma_elu=self.gamma_elu, lam=self.lam,
                            alpha_clip=self.alpha_clip, sigma_clip=self.sigma_clip)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay_rate, self.decay_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_clip"] = list(self.alpha_clip)
        d["sigma_clip"] = list(self.sigma_clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a JSON config; ``overrides`` (e.g. from CLI flags) take precedence."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: MdnPoseNet
    stats: NormStats
    history: List[EpochRecord]
    optimizer: AdamState
    config: TrainConfig
    val: Optional[PoseDataset] = None
    start_epoch: int = 0

    def checkpoint(self) -> Checkpoint:
        epoch = self.history[-1].epoch + 1 if self.history else self.start_epoch
        # output locations do not affect the trajectory, so they stay out of the file
        config = {k: v for k, v in self.config.to_dict().items() if k not in OUTPUT_FIELDS}
        return Checkpoint.from_model(self.model, self.stats, self.optimizer,
                                     {"seed": self.config.seed, "next_epoch": epoch, "config": config})


class TrainingAborted(NumericError):
    def __init__(self, message, epoch, batch):
        super().__init__(message, index=batch)
        self.epoch = epoch
        self.batch = batch


def format_loss_log(history: List[EpochRecord]) -> str:
    rows = ["epoch,train_loss,val_loss,lr"]
    rows += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r}" for r in history]
    return "\n".join(rows) + "\n"


def prepare_split(ds: PoseDataset, config: TrainConfig):
    if config.val_fraction > 0:
        return split(ds, 1.0 - config.val_fraction, config.seed)
    return ds, None


def evaluate_loss(model: MdnPoseNet, xn: np.ndarray, yn: np.ndarray, batch_size: int = 1024) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(xn), batch_size):
            xb, yb = xn[start:start + batch_size], yn[start:start + batch_size]
            params = model(Tensor(xb), "eval")
            total += total_loss(params, Tensor(yb), model.cfg).item() * len(xb)
    return total / len(xn)


def train(
    config: TrainConfig,
    dataset: Optional[PoseDataset] = None,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[EpochRecord, "TrainResult"], None]] = None,
) -> TrainResult:
    """Run (or resume) training.

    Every epoch draws its shuffle order, dropout masks and occlusion masks
    from a generator seeded by ``(seed, epoch)``, so resuming from an epoch
    boundary continues the exact trajectory of an uninterrupted run.
    """
    if dataset is None:
        if config.train_data is None:
            raise ConfigError("train_data: no dataset given")
        dataset = load_dataset(config.train_data)
    train_ds, val_ds = prepare_split(dataset, config)
    stats = NormStats.compute(train_ds)
    root = train_ds.skeleton.root
    xn = normalize_x(train_ds.x, stats, train_ds.vis)
    yn = normalize_y(train_ds.y, stats, root)
    if val_ds is not None:
        val_xn, val_yn = normalize_x(val_ds.x, stats, val_ds.vis), normalize_y(val_ds.y, stats, root)

    arch = config.architecture(dataset.n_joints)
    start_epoch = 0
    if resume is not None:
        if resume.stats.fingerprint() != stats.fingerprint():
            raise ProvenanceError("resume checkpoint was trained with different normalization statistics")
        resume.check_compatible(arch.n_joints, arch.M)
        model = resume.build_model()
        if resume.optimizer is None:
            raise ConfigError("resume checkpoint carries no optimizer state")
        opt = Adam(model.parameters(), config.schedule(), resume.optimizer)
        start_epoch = int(resume.train.get("next_epoch", 0))
    else:
        model = MdnPoseNet(arch, np.random.default_rng([config.seed, 0]))
        opt = Adam(model.parameters(), config.schedule())

    result = TrainResult(model, stats, [], opt.state, config, val_ds, start_epoch)
    n = len(xn)
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, 1, epoch])
        order = rng.permutation(n)
        losses, counts = [], []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            xb = xn[idx]
            if config.occlusion_k:
                ks = rng.integers(0, config.occlusion_k + 1, size=len(idx))
                vis = occlusion_mask(len(idx), ks, train_ds.skeleton, rng)
                xb = np.where(np.repeat(vis, 2, axis=1), xb, 0.0)
            try:
                params = model(Tensor(xb), "train", rng)
                loss = total_loss(params, Tensor(yn[idx]), model.cfg)
            except NumericError as exc:
                raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            if not np.isfinite(loss.item()):
                raise TrainingAborted(f"epoch {epoch}, batch {b}: non-finite loss", epoch, b)
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except NumericError as exc:
                raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            apply_constraints(model, config.max_norm)
            losses.append(loss.item())
            counts.append(len(idx))
        train_loss = float(np.dot(losses, counts) / np.sum(counts)) if losses else float("nan")
        val_loss = evaluate_loss(model, val_xn, val_yn) if val_ds is not None else float("nan")
        record = EpochRecord(epoch, train_loss, val_loss, opt.lr)
        result.history.append(record)
        log.info("epoch %d train %.4f val %.4f lr %.6g", epoch, train_loss, val_loss, opt.lr)
        if config.checkpoint:
            save_checkpoint(result.checkpoint(), config.checkpoint)
        if config.loss_log:
            Path(config.loss_log).write_text(format_loss_log(_full_history(resume, result.history, config)))
        if on_epoch is not None:
            on_epoch(record, result)
    return result


def _full_history(resume: Optional[Checkpoint], history: List[EpochRecord], config: TrainConfig):
    """When resuming, keep earlier rows of an existing loss log."""
    if resume is None or not config.loss_log or not Path(config.loss_log).exists():
        return history
    earlier = []
    first = history[0].epoch if history else None
    for line in Path(config.loss_log).read_text().splitlines()[1:]:
        e, tl, vl, lr = line.split(",")
        if first is not None and int(e) >= first:
            break
        earlier.append(EpochRecord(int(e), float(tl), float(vl), float(lr)))
    return earlier + history
