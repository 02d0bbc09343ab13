"""Training loop: regression + row-wise KL, posterior-driven forward passes,
adaptive-moment updates, checkpointing, and seeded determinism.

The optimized objective per example is

    smooth_l1(t_s, gt_s) + smooth_l1(t_e, gt_e) + lambda * kl_rows(z_post, z_prior)

which is the negated evidence lower bound up to the constant likelihood
normalization. Batch gradients are means over examples; updates are clipped
at a global norm. With the same seed, config and corpus the per-epoch loss
sequence is bit-identical across runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputationError, ConfigError
from .model import ForwardResult, GroundingModel, PreparedExample
from .tensor import ParameterStore, Tensor, add, mul, smooth_l1, tsum


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-3
    kl_weight: float = 1.0
    seed: int = 0
    precision: str = "f64"
    clip_norm: float = 5.0
    checkpoint_every: int = 0          # epochs; 0 = final checkpoint only
    divergence_threshold: float = 1e6

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.kl_weight < 0:
            raise ConfigError("train.kl_weight must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    total: float
    regression: float
    kl: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    first_batch: dict | None = None
    final_checkpoint: str | None = None
    wall_time_s: float = 0.0
    diverged: bool = False
    steps: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": [{"epoch": e.epoch, "total": e.total, "regression": e.regression, "kl": e.kl}
                       for e in self.epochs],
            "first_batch": self.first_batch,
            "final_checkpoint": self.final_checkpoint,
            "wall_time_s": self.wall_time_s,
            "diverged": self.diverged,
            "steps": self.steps,
        }


def grounding_loss(pred: Tensor, gt: tuple[float, float], z_post, z_prior, kl_weight: float) -> Tensor:
    """Smooth-L1 over both endpoints plus the weighted row-wise KL."""
    reg = tsum(smooth_l1(pred, np.asarray(gt, dtype=np.float64)))
    if kl_weight and z_post is not None and z_prior is not None:
        from .correspondence import correspondence_kl

        return add(reg, mul(correspondence_kl(z_post, z_prior), kl_weight))
    return reg


def _loss_parts(res: ForwardResult, gt, kl_weight: float) -> tuple[Tensor, float, float]:
    reg = tsum(smooth_l1(res.pred, np.asarray(gt, dtype=np.float64)))
    reg_val = reg.item()
    if res.kl is not None:
        return add(reg, mul(res.kl, kl_weight)) if kl_weight else reg, reg_val, res.kl.item()
    return reg, reg_val, 0.0


class Adam:
    """Adaptive moment estimation over a ParameterStore; params with no grad are skipped."""

    def __init__(self, store: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.value) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.value) for name, t in store.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, tensor in self.store.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            tensor.value = tensor.value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train(model: GroundingModel, prepared: list[PreparedExample], config: TrainConfig,
          out_dir: str | None = None, log=None) -> TrainReport:
    """Gradient descent over shuffled mini-batches. Returns per-epoch losses.

    On divergence (non-finite or loss above the threshold) the parameters are
    restored to the last epoch-end snapshot and the report is flagged.
    """
    config.validate()
    if not prepared:
        raise ConfigError("training corpus is empty")
    for prep in prepared:
        if prep.gt is None:
            raise ConfigError(f"example {prep.example.query_id} has no ground truth")

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.store, lr=config.lr)
    report = TrainReport()
    snapshot = {name: t.value.copy() for name, t in model.store.items()}
    start = time.perf_counter()
    n = len(prepared)

    def write_checkpoint(tag: str) -> str | None:
        if out_dir is None:
            return None
        path = f"{out_dir}/checkpoint{tag}.json"
        model.store.save(path)
        return path

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        sums = {"total": 0.0, "regression": 0.0, "kl": 0.0}
        for lo in range(0, n, config.batch_size):
            batch = [prepared[i] for i in perm[lo:lo + config.batch_size]]
            model.store.zero_grad()
            total = None
            for prep in batch:
                res = model.forward_train(prep)
                loss, reg_val, kl_val = _loss_parts(res, prep.gt, config.kl_weight)
                total = loss if total is None else add(total, loss)
                sums["regression"] += reg_val
                sums["kl"] += kl_val
                sums["total"] += reg_val + config.kl_weight * kl_val
            batch_loss = mul(total, 1.0 / len(batch))
            value = batch_loss.item()
            if report.first_batch is None:
                report.first_batch = {
                    "total": sums["total"] / len(batch),
                    "regression": sums["regression"] / len(batch),
                    "kl": sums["kl"] / len(batch),
                }
            if not math.isfinite(value) or value > config.divergence_threshold:
                for name, t in model.store.items():
                    t.value = snapshot[name].copy()
                report.diverged = True
                report.final_checkpoint = write_checkpoint("")
                report.wall_time_s = time.perf_counter() - start
                if log:
                    log(f"diverged at epoch {epoch} (loss {value}); restored last good parameters")
                return report
            batch_loss.backward()
            model.store.clip_grads(config.clip_norm)
            opt.step()
            report.steps += 1
        stats = EpochStats(epoch, sums["total"] / n, sums["regression"] / n, sums["kl"] / n)
        report.epochs.append(stats)
        if log:
            log(f"epoch {epoch}/{config.epochs} total={stats.total:.6f} "
                f"reg={stats.regression:.6f} kl={stats.kl:.6f}")
        snapshot = {name: t.value.copy() for name, t in model.store.items()}
        if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
            write_checkpoint(f"_ep{epoch}")
    report.final_checkpoint = write_checkpoint("")
    report.wall_time_s = time.perf_counter() - start
    return report
