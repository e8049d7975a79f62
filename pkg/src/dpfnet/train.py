"""AMSGrad with decoupled weight decay, step learning-rate schedule, training loop."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import core
from .core import ParamStore, Rng, Tape
from .errors import NumericError, ParameterError
from .geometry import Mesh, sample_surface
from .model import DPFNet

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)

    def ensure(self, params: ParamStore) -> None:
        for name, val in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(val)
                self.v[name] = np.zeros_like(val)
                self.v_max[name] = np.zeros_like(val)


def opt_step(state: OptimizerState, params: ParamStore) -> OptimizerState:
    """One AMSGrad step from the accumulated grads, then decay ``theta *= 1 - lr*wd``."""
    state.ensure(params)
    state.t += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    decay = 1.0 - lr * state.weight_decay
    for name, theta in params.items():
        g = params.grad(name)
        m, v, vm = state.m[name], state.v[name], state.v_max[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        np.maximum(vm, v, out=vm)
        step = lr * (m / c1) / (np.sqrt(vm / c2) + state.eps)
        new = theta - step
        if state.weight_decay:
            new = new * decay
        params.set_value(name, new)
    return state


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** bisect.bisect_right(sorted(self.milestones), epoch)

    @classmethod
    def from_fractions(cls, base_lr, epochs, fractions=(0.5, 0.75), gamma=0.1):
        return cls(base_lr, tuple(int(math.floor(f * epochs)) for f in fractions), gamma)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    points: int = 2048
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_gamma: float = 0.1
    lr_milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of epochs
    clip_norm: float = 0.0  # 0 disables global-norm clipping
    checkpoint_interval: int = 0  # epochs; 0 disables periodic checkpoints
    log_interval: int = 1  # steps

    def __post_init__(self):
        for k in ("epochs", "batch_size", "points", "log_interval"):
            if getattr(self, k) < 1:
                raise ParameterError(f"{k} must be >= 1")

    def schedule(self) -> Schedule:
        return Schedule.from_fractions(self.lr, self.epochs, self.lr_milestones, self.lr_gamma)


@dataclass
class TrainState:
    """Everything needed to resume: optimizer moments, rng, completed epochs."""

    optimizer: OptimizerState
    rng: Rng
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        opt = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        return cls(opt, Rng(cfg.seed + 1))


def format_progress(rec: dict) -> str:
    return (f"epoch {rec['epoch']} step {rec['step']} loss {rec['loss']:.6f} "
            f"recon {rec['recon']:.6f} kl {rec['kl']:.6f} lr {rec['lr']:.6g}")


def _check_finite(loss: float, params: ParamStore) -> None:
    for name in params.names():
        if not np.all(np.isfinite(params.grad(name))):
            raise NumericError(f"non-finite gradient in parameter {name!r} (loss {loss})")
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")


def clip_grads(params: ParamStore, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(params.grad(n) ** 2)) for n in params.names()))
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        for n in params.names():
            params.grad(n)[...] *= f
    return norm


def train_step(net: DPFNet, shapes: Sequence[Mesh], cfg: TrainConfig, rng: Rng,
               opt: OptimizerState) -> dict:
    """Fresh clouds per shape, batch-mean negative ELBO, one optimizer step."""
    params = net.params
    params.zero_grads()
    tape = Tape()
    objective = None
    recon = kl = loss = 0.0
    inv = 1.0 / len(shapes)
    for mesh in shapes:
        X_enc = sample_surface(mesh, cfg.points, rng)
        X_dec = sample_surface(mesh, cfg.points, rng)
        terms = net.elbo(X_enc, X_dec, rng, tape)
        part = core.scale(terms.objective, inv, tape=tape)
        objective = part if objective is None else core.add(objective, part, tape)
        recon += terms.recon * inv
        kl += terms.kl * inv
        loss += terms.loss * inv
    tape.backward(objective)
    _check_finite(loss, params)
    grad_norm = clip_grads(params, cfg.clip_norm)
    opt_step(opt, params)
    return {"loss": loss, "recon": recon, "kl": kl, "loss_per_point": loss / cfg.points,
            "grad_norm": grad_norm}


def train(net: DPFNet, data: Sequence[Mesh], cfg: TrainConfig,
          sink: Callable[[dict], None] | None = None, state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run epochs ``state.epoch .. cfg.epochs - 1`` over ``data``.

    Each epoch shuffles the shapes and walks them in batches of
    ``cfg.batch_size``. ``sink`` receives one progress dict per logged step;
    ``on_epoch`` is called after every completed epoch (checkpointing hook).
    """
    if not data:
        raise ParameterError("training needs a nonempty dataset")
    state = state or TrainState.fresh(cfg)
    sched = cfg.schedule()
    rng = state.rng
    for epoch in range(state.epoch, cfg.epochs):
        state.optimizer.lr = sched.lr(epoch)
        order = rng.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[s:s + cfg.batch_size]]
            rec = train_step(net, batch, cfg, rng, state.optimizer)
            rec.update(epoch=epoch, step=state.step, lr=state.optimizer.lr)
            state.history.append(rec)
            if sink is not None and state.step % cfg.log_interval == 0:
                sink(rec)
            state.step += 1
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(state)
    return state


def evaluate_nll(net: DPFNet, data: Sequence[Mesh], points: int, seed: int) -> float:
    """Mean held-out negative ELBO per point (an upper bound on the per-point NLL)."""
    rng = Rng(seed)
    vals = []
    for mesh in data:
        X_enc = sample_surface(mesh, points, rng)
        X_dec = sample_surface(mesh, points, rng)
        vals.append(net.nll_per_point(X_enc, X_dec, rng))
    return float(np.mean(vals))
