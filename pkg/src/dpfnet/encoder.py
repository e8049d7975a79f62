"""PointNet-style amortized inference network q(z | X)."""

from __future__ import annotations

from typing import Sequence

from . import core
from .core import MLP, ParamStore, Rng, Tape


class PointNetEncoder:
    """Shared per-point ReLU MLP, max-pool over points, then a two-layer head.

    The head emits ``2 * latent_dim`` values split into the posterior mean and
    log-variance. Max-pooling makes the output exactly invariant to row order
    and to repeating points.
    """

    def __init__(self, store: ParamStore, latent_dim: int, rng: Rng | None,
                 widths: Sequence[int] = (64, 128, 256, 512), head_hidden: int = 512,
                 name: str = "encoder"):
        self.latent_dim = latent_dim
        self.point_mlp = MLP(store, f"{name}.point", [3, *widths], rng, act="relu", init="he")
        self.head = MLP(store, f"{name}.head", [widths[-1], head_hidden, 2 * latent_dim], rng,
                        act="relu", init="he", last_init="glorot")

    def encode(self, X, tape: Tape | None = None):
        if core.value(X).shape[0] < 1:
            raise ValueError("encoder needs at least one point")
        if core.value(X).shape[0] == 1:
            # single rows take a different BLAS path; a duplicated row pools identically
            X = core.value(X)[[0, 0]] if not isinstance(X, core.Node) else X
        feats = self.point_mlp(X, tape, final_act=True)
        pooled = core.max_pool(feats, tape)
        out = self.head(pooled, tape)
        d = self.latent_dim
        mu = core.columns(out, range(d), tape)
        log_var = core.clamp_log_var(core.columns(out, range(d, 2 * d), tape), tape)
        return mu, log_var

    __call__ = encode
