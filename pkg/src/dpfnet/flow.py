"""Affine coupling flows: the shape-conditioned point flow and the latent prior flow.

Direction conventions: ``generate`` maps base samples to data, ``normalize``
maps data to the base space. Log-determinants are those of the map actually
applied, so the two directions of one layer give exact negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import core
from .core import MLP, Dense, ParamStore, Rng, Tape
from .errors import ParameterError

# updated coordinate sets, cycled through by the point flow
POINT_PARTITIONS = ((0,), (1,), (2,), (1, 2), (0, 2), (0, 1))


@dataclass(frozen=True)
class PartitionScheme:
    update_mask: tuple[bool, ...]

    def __post_init__(self):
        if all(self.update_mask) or not any(self.update_mask):
            raise ParameterError("partition needs at least one updated and one conditioning dim")

    @classmethod
    def from_updated(cls, dim: int, updated: Sequence[int]) -> "PartitionScheme":
        s = set(updated)
        return cls(tuple(i in s for i in range(dim)))

    @property
    def updated(self) -> list[int]:
        return [i for i, m in enumerate(self.update_mask) if m]

    @property
    def conditioning(self) -> list[int]:
        return [i for i, m in enumerate(self.update_mask) if not m]


@dataclass
class FlowResult:
    output: object  # Matrix or Node
    log_det: object  # n x 1


class CouplingLayer:
    """Affine coupling ``x_u = y_u * exp(l) + t`` with ``l = bound * tanh(raw)``.

    The conditioning coordinates go through a two-layer tanh trunk. With
    ``cond_dim > 0`` a separate two-layer net maps the context vector to FiLM
    coefficients ``(1 + gamma_raw, beta)`` that modulate the second trunk layer's
    activations. Scale and shift heads start at zero, so a new layer is the
    identity.
    """

    def __init__(self, store: ParamStore, name: str, partition: PartitionScheme, rng: Rng | None,
                 hidden: int = 64, cond_dim: int = 0, film_hidden: int = 64,
                 log_scale_bound: float = 5.0):
        self.store = store
        self.partition = partition
        self.upd = partition.updated
        self.cond = partition.conditioning
        self.bound = float(log_scale_bound)
        self.hidden = hidden
        self.cond_dim = cond_dim
        self.trunk = MLP(store, f"{name}.trunk", [len(self.cond), hidden, hidden], rng)
        self.film = None
        if cond_dim:
            self.film = MLP(store, f"{name}.film", [cond_dim, film_hidden, 2 * hidden], rng)
        self.scale_head = Dense(store, f"{name}.scale", hidden, len(self.upd), rng, "zeros")
        self.shift_head = Dense(store, f"{name}.shift", hidden, len(self.upd), rng, "zeros")

    def film_coeffs(self, z, tape: Tape | None = None):
        f = self.film(z, tape)
        gamma = core.scale(core.columns(f, range(self.hidden), tape), 1.0, 1.0, tape)
        beta = core.columns(f, range(self.hidden, 2 * self.hidden), tape)
        return gamma, beta

    def _dense(self, layer, x):
        out = x @ self.store.value(layer.w)
        out += self.store.value(layer.b)
        return out

    def _affine_raw(self, yc, z, film):
        """Untaped fast path; the same arithmetic, in the same order, as the op path."""
        h = np.tanh(self._dense(self.trunk.layers[0], yc))
        h = np.tanh(self._dense(self.trunk.layers[1], h))
        if self.film is not None:
            if film is None:
                f = self._dense(self.film.layers[1], np.tanh(self._dense(self.film.layers[0], z)))
                gamma, beta = f[:, :self.hidden] * 1.0 + 1.0, f[:, self.hidden:]
            else:
                gamma, beta = (core.value(a) for a in film)
            h = h * gamma + beta
        log_s = np.tanh(self._dense(self.scale_head, h)) * self.bound
        return log_s, self._dense(self.shift_head, h)

    def affine(self, yc, z=None, tape: Tape | None = None, film=None):
        """Log-scale and shift for the updated group given the conditioning group."""
        if tape is None and not isinstance(yc, core.Node) and not isinstance(z, core.Node):
            return self._affine_raw(yc, z, film)
        h = self.trunk(yc, tape, final_act=True)
        if self.film is not None:
            gamma, beta = film if film is not None else self.film_coeffs(z, tape)
            h = core.add(core.mul(h, gamma, tape), beta, tape)
        raw = self.scale_head(h, tape)
        log_s = core.scale(core.activation(raw, "tanh", tape), self.bound, tape=tape)
        shift = self.shift_head(h, tape)
        return log_s, shift

    def generate(self, y, z=None, tape: Tape | None = None, film=None) -> FlowResult:
        yc = core.columns(y, self.cond, tape)
        yu = core.columns(y, self.upd, tape)
        log_s, shift = self.affine(yc, z, tape, film)
        xu = core.add(core.mul(yu, core.exp(log_s, tape), tape), shift, tape)
        out = core.assemble_columns([yc, xu], [self.cond, self.upd], tape)
        return FlowResult(out, core.row_sum(log_s, tape))

    def normalize(self, x, z=None, tape: Tape | None = None, film=None) -> FlowResult:
        xc = core.columns(x, self.cond, tape)
        xu = core.columns(x, self.upd, tape)
        log_s, shift = self.affine(xc, z, tape, film)
        neg = core.scale(log_s, -1.0, tape=tape)
        yu = core.mul(core.sub(xu, shift, tape), core.exp(neg, tape), tape)
        out = core.assemble_columns([xc, yu], [self.cond, self.upd], tape)
        return FlowResult(out, core.row_sum(neg, tape))


ConditionalCouplingLayer = CouplingLayer


def _accumulate(total, ld, tape):
    return ld if total is None else core.add(total, ld, tape)


class PointFlow:
    """Shape-conditioned flow in R^3 with a z-dependent diagonal Gaussian base."""

    def __init__(self, store: ParamStore, latent_dim: int, rng: Rng | None, n_layers: int = 63,
                 hidden: int = 64, base_hidden: int = 64, log_scale_bound: float = 5.0,
                 name: str = "point_flow"):
        self.store = store
        self.latent_dim = latent_dim
        self.layers = [
            CouplingLayer(store, f"{name}.{i}",
                          PartitionScheme.from_updated(3, POINT_PARTITIONS[i % 6]), rng,
                          hidden=hidden, cond_dim=latent_dim, log_scale_bound=log_scale_bound)
            for i in range(n_layers)
        ]
        self.base_net = MLP(store, f"{name}.base", [latent_dim, base_hidden, base_hidden, 6], rng,
                            last_init="zeros")

    def base(self, z, tape: Tape | None = None):
        """Mean and log-variance of the 3-D base Gaussian for latent ``z``."""
        out = self.base_net(z, tape)
        return core.columns(out, [0, 1, 2], tape), core.columns(out, [3, 4, 5], tape)

    def _films(self, z, tape):
        return [layer.film_coeffs(z, tape) for layer in self.layers]

    def to_base(self, x, z, tape: Tape | None = None) -> FlowResult:
        films = self._films(z, tape)
        y, total = x, None
        for layer, film in zip(reversed(self.layers), reversed(films)):
            res = layer.normalize(y, tape=tape, film=film)
            y, total = res.output, _accumulate(total, res.log_det, tape)
        if total is None:
            total = np.zeros((core.value(x).shape[0], 1))
        return FlowResult(y, total)

    def from_base(self, y, z, tape: Tape | None = None, upto: int | None = None) -> FlowResult:
        layers = self.layers if upto is None else self.layers[:upto]
        x, total = y, None
        for layer in layers:
            res = layer.generate(x, z, tape)
            x, total = res.output, _accumulate(total, res.log_det, tape)
        if total is None:
            total = np.zeros((core.value(y).shape[0], 1))
        return FlowResult(x, total)

    def log_prob(self, x, z, tape: Tape | None = None):
        """Per-point log p(x | z), an n x 1 matrix."""
        res = self.to_base(x, z, tape)
        mu, lv = self.base(z, tape)
        return core.add(core.gaussian_log_prob(res.output, mu, lv, tape), res.log_det, tape)

    def sample_base(self, z, n: int, rng: Rng) -> np.ndarray:
        if n < 1:
            raise ParameterError("need n >= 1 points")
        mu, lv = self.base(core.value(z))
        lv = np.clip(lv, core.LOG_VAR_MIN, core.LOG_VAR_MAX)
        return mu + np.exp(0.5 * lv) * rng.normal((n, 3))

    def sample(self, z, n: int, rng: Rng) -> np.ndarray:
        z = core.value(z)
        return self.from_base(self.sample_base(z, n, rng), z).output

    def trace(self, z, n: int, checkpoints: Sequence[int], rng: Rng) -> list[np.ndarray]:
        """Clouds after the first ``k`` generate-direction layers for each k."""
        ks = [int(k) for k in checkpoints]
        if any(k < 0 or k > len(self.layers) for k in ks):
            raise ParameterError(f"trace checkpoints must lie in [0, {len(self.layers)}]")
        z = core.value(z)
        y = self.sample_base(z, n, rng)
        outs = {0: y}
        x = y
        for i, layer in enumerate(self.layers, 1):
            if i > max(ks, default=0):
                break
            x = layer.generate(x, z).output
            outs[i] = x
        return [outs[k] for k in ks]


def prior_partition(dim: int, i: int) -> PartitionScheme:
    """Alternate odd/even and half/half splits, flipping which group is updated."""
    kind = i % 4
    idx = np.arange(dim)
    if kind == 0:
        upd = idx % 2 == 0
    elif kind == 1:
        upd = idx < dim // 2
    elif kind == 2:
        upd = idx % 2 == 1
    else:
        upd = idx >= dim // 2
    return PartitionScheme(tuple(bool(u) for u in upd))


class PriorFlow:
    """Unconditional flow on R^D with a learnable diagonal Gaussian base."""

    def __init__(self, store: ParamStore, latent_dim: int, rng: Rng | None, n_layers: int = 14,
                 hidden: int = 256, log_scale_bound: float = 5.0, name: str = "prior"):
        if latent_dim < 2:
            raise ParameterError("prior flow needs latent_dim >= 2")
        self.store = store
        self.latent_dim = latent_dim
        self.layers = [
            CouplingLayer(store, f"{name}.{i}", prior_partition(latent_dim, i), rng,
                          hidden=hidden, log_scale_bound=log_scale_bound)
            for i in range(n_layers)
        ]
        self.mean_name = store.add(f"{name}.base_mean", np.zeros((1, latent_dim)))
        self.log_var_name = store.add(f"{name}.base_log_var", np.zeros((1, latent_dim)))

    def to_base(self, z, tape: Tape | None = None) -> FlowResult:
        e, total = z, None
        for layer in reversed(self.layers):
            res = layer.normalize(e, tape=tape)
            e, total = res.output, _accumulate(total, res.log_det, tape)
        if total is None:
            total = np.zeros((core.value(z).shape[0], 1))
        return FlowResult(e, total)

    def from_base(self, e, tape: Tape | None = None) -> FlowResult:
        z, total = e, None
        for layer in self.layers:
            res = layer.generate(z, tape=tape)
            z, total = res.output, _accumulate(total, res.log_det, tape)
        if total is None:
            total = np.zeros((core.value(e).shape[0], 1))
        return FlowResult(z, total)

    def log_prob(self, z, tape: Tape | None = None):
        res = self.to_base(z, tape)
        mu = self.store.get(self.mean_name, tape)
        lv = self.store.get(self.log_var_name, tape)
        return core.add(core.gaussian_log_prob(res.output, mu, lv, tape), res.log_det, tape)

    def sample(self, m: int, rng: Rng) -> np.ndarray:
        if m < 1:
            raise ParameterError("need m >= 1 latent samples")
        mu = self.store.value(self.mean_name)
        lv = np.clip(self.store.value(self.log_var_name), core.LOG_VAR_MIN, core.LOG_VAR_MAX)
        e = mu + np.exp(0.5 * lv) * rng.normal((m, self.latent_dim))
        return self.from_base(e).output
