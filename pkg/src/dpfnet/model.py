"""The full latent-variable model and its variational objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .core import ParamStore, Rng, Tape
from .encoder import PointNetEncoder
from .errors import ParameterError
from .flow import PointFlow, PriorFlow


@dataclass
class ModelConfig:
    latent_dim: int = 128
    point_layers: int = 63
    prior_layers: int = 14
    hidden: int = 64  # inflated width of point-flow coupling nets
    prior_hidden: int = 256
    log_scale_bound: float = 5.0


@dataclass
class ElboTerms:
    recon: float  # sum over decoded points of log p(x|z)
    kl: float
    loss: float  # kl - recon
    recon_per_point: float
    objective: object = None  # differentiable loss (Node when taped)


class DPFNet:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, **overrides):
        cfg = cfg or ModelConfig()
        if overrides:
            cfg = ModelConfig(**{**cfg.__dict__, **overrides})
        if cfg.latent_dim < 2:
            raise ParameterError("latent_dim must be >= 2")
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        self.params = ParamStore()
        rng = Rng(seed)
        self.encoder = PointNetEncoder(self.params, cfg.latent_dim, rng)
        self.prior = PriorFlow(self.params, cfg.latent_dim, rng, cfg.prior_layers,
                               cfg.prior_hidden, cfg.log_scale_bound)
        self.point_flow = PointFlow(self.params, cfg.latent_dim, rng, cfg.point_layers,
                                    cfg.hidden, log_scale_bound=cfg.log_scale_bound)

    # -- objective ----------------------------------------------------------

    def kl(self, mu, log_var, z, tape: Tape | None = None):
        """Single-sample KL(q || prior) = -H(q) - log p_prior(z)."""
        d = self.latent_dim
        half_lv = core.scale(core.total(log_var, tape), 0.5, 0.5 * d * (1.0 + core.LOG_2PI), tape)
        return core.sub(core.scale(half_lv, -1.0, tape=tape),
                        self.prior.log_prob(z, tape), tape)

    def elbo(self, X_enc, X_dec, rng: Rng, tape: Tape | None = None) -> ElboTerms:
        mu, log_var = self.encoder.encode(X_enc, tape)
        z = core.reparam_sample(mu, log_var, rng, tape)
        recon = core.total(self.point_flow.log_prob(X_dec, z, tape), tape)
        kl = self.kl(mu, log_var, z, tape)
        loss = core.sub(kl, recon, tape)
        r = core.as_float(recon)
        return ElboTerms(recon=r, kl=core.as_float(kl), loss=core.as_float(loss),
                         recon_per_point=r / len(core.value(X_dec)), objective=loss)

    def nll_per_point(self, X_enc, X_dec, rng: Rng) -> float:
        """Negative ELBO divided by the number of decoded points (no tape)."""
        t = self.elbo(X_enc, X_dec, rng)
        return t.loss / len(X_dec)

    # -- generation ---------------------------------------------------------

    def generate(self, k: int, n: int, rng: Rng) -> list[np.ndarray]:
        if k < 1 or n < 1:
            raise ParameterError("generate needs k >= 1 and n >= 1")
        zs = self.prior.sample(k, rng)
        return [self.point_flow.sample(zs[i:i + 1], n, rng) for i in range(k)]

    def latent(self, X, rng: Rng | None = None, mode: str = "mean") -> np.ndarray:
        mu, lv = self.encoder.encode(X)
        if mode == "mean":
            return mu
        if mode == "sample":
            if rng is None:
                raise ParameterError("sample mode needs an rng")
            return core.reparam_sample(mu, lv, rng)
        raise ParameterError(f"unknown mode {mode!r}")

    def reconstruct(self, X, n: int, rng: Rng, mode: str = "mean") -> np.ndarray:
        z = self.latent(X, rng, mode)
        return self.point_flow.sample(z, n, rng)

    def interpolate(self, X1, X2, steps: int, n: int, rng: Rng) -> list[np.ndarray]:
        """Decode ``steps`` evenly spaced points on the segment between posterior means.

        Every frame reuses a copy of ``rng`` so the base noise is shared across
        the path and each endpoint matches ``reconstruct(..., mode="mean")``.
        """
        if steps < 2:
            raise ParameterError("interpolation needs steps >= 2")
        a, b = self.latent(X1), self.latent(X2)
        frames = []
        for alpha in np.linspace(0.0, 1.0, steps):
            z = a if alpha == 0.0 else b if alpha == 1.0 else (1.0 - alpha) * a + alpha * b
            frames.append(self.point_flow.sample(z, n, rng.copy()))
        return frames


def gaussian_kl(mu: np.ndarray, log_var: np.ndarray) -> float:
    """Closed-form KL(N(mu, exp(log_var)) || N(0, I))."""
    return float(0.5 * np.sum(np.exp(log_var) + mu ** 2 - 1.0 - log_var))


def entropy_constant(d: int) -> float:
    return 0.5 * d * (1.0 + math.log(2.0 * math.pi))
