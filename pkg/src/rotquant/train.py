"""Bundled Adam pretrainer for toy models on synthetic Markov data."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .data import MarkovSource
from .model import CalibrationSet, QuantSites, ToyTransformer, _loss_graph

log = logging.getLogger(__name__)


def pretrain(
    model: ToyTransformer,
    source: MarkovSource,
    steps: int,
    rng: np.random.Generator,
    batch: int = 16,
    seq_len: int | None = None,
    lr: float = 3e-3,
    betas: tuple[float, float] = (0.9, 0.99),
) -> tuple[ToyTransformer, list[float]]:
    """Train every tensor with Adam for ``steps`` full-precision steps.

    Returns the trained copy and the per-step training losses.
    """
    seq_len = seq_len or model.config.max_seq
    m = model.copy()
    names = list(m.tensors())
    moments = {n: (np.zeros_like(t), np.zeros_like(t)) for n, t in m.tensors().items()}
    losses = []
    b1, b2 = betas
    for step in range(1, steps + 1):
        tokens = source.sample(batch, seq_len, rng)
        params = {n: ad.Var(t) for n, t in m.tensors().items()}
        loss = _loss_graph(m, CalibrationSet(list(tokens)), QuantSites(), None, params=params)
        ad.backward(loss)
        tensors = m.tensors()
        for n in names:
            g = params[n].grad
            if g is None:
                continue
            mu, nu = moments[n]
            mu *= b1
            mu += (1 - b1) * g
            nu *= b2
            nu += (1 - b2) * g * g
            upd = lr * (mu / (1 - b1**step)) / (np.sqrt(nu / (1 - b2**step)) + 1e-8)
            tensors[n] -= upd  # in place on the model's arrays
        losses.append(float(loss.value))
        if step % 50 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    return m, losses
