"""Outlier and quantization-fidelity diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import READERS, QuantSites, ToyTransformer, _as_rotations, effective_weights, forward
from .quant import quant_dequant

INF = math.inf


class MetricsError(ValueError):
    pass


def kurtosis(x) -> float:
    """Population kurtosis m4/m2² over all elements (Gaussian ≈ 3)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise MetricsError("kurtosis needs at least 2 values")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0:
        raise MetricsError("kurtosis undefined for zero-variance data")
    return float(np.mean(d**4) / m2**2)


def snr_db(reference, test) -> float:
    """10·log10(‖ref‖² / ‖ref − test‖²); ``inf`` for an exact match."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise MetricsError(f"snr_db shape mismatch: {reference.shape} vs {test.shape}")
    noise = float(np.sum((reference - test) ** 2))
    if noise == 0:
        return INF
    return 10.0 * math.log10(float(np.sum(reference**2)) / noise)


def mse(reference, test) -> float:
    return float(np.mean((np.asarray(reference) - np.asarray(test)) ** 2))


@dataclass
class LayerStats:
    site: str
    kurtosis: float
    snr_db: float
    mse: float

    def __post_init__(self):
        if self.mse < 0:
            raise MetricsError("mse must be >= 0")


def site_stats(name: str, x: np.ndarray, spec) -> LayerStats:
    q = x if spec is None else quant_dequant(x, spec)
    return LayerStats(name, kurtosis(x), snr_db(x, q), mse(x, q))


def layer_sweep(model: ToyTransformer, tokens, sites: QuantSites, rotations=None) -> list[LayerStats]:
    """Kurtosis and quantization SNR/MSE at every residual-reading site.

    Activation sites are the inputs to Q/K/V (``attn_in``) and Gate/Up
    (``mlp_in``); the tensors are pooled over every element. Weight sites are
    the five reader weights as the forward consumes them (rotations merged).
    """
    c = model.config
    acts = [f"layers.{i}.{s}" for i in range(c.n_layers) for s in ("attn_in", "mlp_in")]
    _, captured = forward(model, tokens, sites, rotations, capture=acts)
    weights = effective_weights(model, _as_rotations(rotations))

    stats = []
    for i in range(c.n_layers):
        for s in ("attn_in", "mlp_in"):
            name = f"layers.{i}.{s}"
            stats.append(site_stats(name, captured[name], sites.activations))
        for n in READERS:
            name = f"layers.{i}.{n}"
            stats.append(site_stats(name, ad.value(weights[name]), sites.weights))
    return stats


def summarize(values) -> dict[str, float]:
    """min/max/mean/std (population) in a fixed key order."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise MetricsError("cannot summarize an empty sequence")
    return {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean()), "std": float(v.std())}
