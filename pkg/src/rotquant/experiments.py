"""End-to-end harness: toy setups, the quantization pipeline, and trial sweeps.

These are the building blocks behind the ``pipeline`` and ``variance``
subcommands; they take explicit seeds and never touch ambient randomness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cayley import CayleyConfig, optimize_rotations
from .data import MarkovSource
from .linalg import make_rng
from .metrics import snr_db
from .model import (
    CalibrationSet,
    ModelConfig,
    QuantSites,
    ToyTransformer,
    calibration_loss,
    fold_rmsnorm,
    forward,
    init_model,
    plant_outliers,
)
from .quant import GptqConfig, gptq_dequantized, rtn_quantize_weights
from .rotate import RotationSet, make_rotation_set, merge_rotations
from .train import pretrain

log = logging.getLogger(__name__)

LINEAR_INPUTS = {
    "wq": "attn_in", "wk": "attn_in", "wv": "attn_in", "wo": "o_in",
    "wgate": "mlp_in", "wup": "mlp_in", "wdown": "down_in",
}


@dataclass
class ToySetup:
    model: ToyTransformer  # rms-folded
    calib: CalibrationSet
    evalset: CalibrationSet
    source: MarkovSource


def build_model(config: ModelConfig, seed: int, pretrain_steps: int = 0, outlier_channels: int = 0,
                outlier_scale: float = 50.0, weight_outlier_scale: float = 1.0, embed_std: float = 0.02,
                batch: int = 16, pretrain_lr: float = 3e-3) -> ToyTransformer:
    """Seeded init, optional planted outliers, optional Markov pretraining (unfolded).

    Outliers are planted before pretraining so the trained network works
    with them, as large language models do with their massive channels.
    """
    model = init_model(config, make_rng(seed, 1), embed_std=embed_std)
    if outlier_channels:
        ch = make_rng(seed, 3).choice(config.d_model, size=outlier_channels, replace=False)
        model = plant_outliers(model, sorted(int(c) for c in ch), outlier_scale, weight_outlier_scale)
    if pretrain_steps > 0:
        source = MarkovSource(config.vocab, seed)
        model, _ = pretrain(model, source, pretrain_steps, make_rng(seed, 2), batch=batch, lr=pretrain_lr)
    return model


def build_setup(config: ModelConfig, seed: int, n_calib: int, n_eval: int, seq_len: int, **model_kw) -> ToySetup:
    model = fold_rmsnorm(build_model(config, seed, **model_kw))
    source = MarkovSource(config.vocab, seed)
    calib = source.calibration_set(n_calib, seq_len, make_rng(seed, 4))
    evalset = source.calibration_set(n_eval, seq_len, make_rng(seed, 5))
    return ToySetup(model, calib, evalset, source)


def collect_hessians(model: ToyTransformer, layer: int, calib: CalibrationSet) -> dict[str, np.ndarray]:
    """Input second moments XᵀX (mean over tokens) of each linear in one layer.

    Inputs are captured exactly as the linear consumes them at inference,
    i.e. after any online Hadamard, with quantizers off.
    """
    p = f"layers.{layer}."
    names = [p + s for s in ("attn_in", "o_in", "mlp_in", "down_in")]
    acc: dict[str, np.ndarray] = {}
    count = 0
    for batch in calib.batches():
        _, cap = forward(model, batch, QuantSites(), capture=names)
        for n in names:
            x = cap[n].reshape(-1, cap[n].shape[-1])
            acc[n] = acc.get(n, 0.0) + x.T @ x
        count += batch.shape[0] * batch.shape[1]
    return {w: acc[p + s] / count for w, s in LINEAR_INPUTS.items()}


def quantize_weights(model: ToyTransformer, spec, method: str = "rtn", calib: CalibrationSet | None = None,
                     gptq: GptqConfig | None = None) -> ToyTransformer:
    """Replace every linear weight by its RTN or GPTQ fake-quantized value.

    GPTQ runs layer by layer, with each layer's Hessians taken from the model
    whose earlier layers are already quantized.
    """
    m = model.copy()
    if spec is None:
        return m
    for i, layer in enumerate(m.layers):
        if method == "gptq":
            if calib is None:
                raise ValueError("GPTQ needs calibration data")
            cfg = gptq or GptqConfig()
            hess = collect_hessians(m, i, calib.subset(cfg.calib_sequences))
            for n, h in hess.items():
                setattr(layer, n, gptq_dequantized(getattr(layer, n), h, spec, cfg))
        elif method == "rtn":
            for n in LINEAR_INPUTS:
                setattr(layer, n, rtn_quantize_weights(getattr(layer, n), spec).dequantize())
        else:
            raise ValueError(f"unknown weight quantization method {method!r}")
    return m


def quantized_model(model: ToyTransformer, rot: RotationSet | None, sites: QuantSites, method: str = "rtn",
                    calib: CalibrationSet | None = None, gptq: GptqConfig | None = None) -> ToyTransformer:
    """Merge rotations (if any) then quantize weights per ``sites.weights``."""
    merged = merge_rotations(model, rot) if rot is not None else model
    return quantize_weights(merged, sites.weights, method, calib, gptq)


def evaluate(model_fp: ToyTransformer, model_q: ToyTransformer, sites: QuantSites, evalset: CalibrationSet) -> dict:
    """Quantized loss and end-to-end logits SNR against the full-precision model."""
    act_sites = sites.without_weights()
    loss = calibration_loss(model_q, evalset, act_sites)
    ref, test = [], []
    for batch in evalset.batches():
        ref.append(forward(model_fp, batch)[0].ravel())
        test.append(forward(model_q, batch, act_sites)[0].ravel())
    return {"loss": loss, "snr_db": snr_db(np.concatenate(ref), np.concatenate(test))}


def learn_rotation(setup: ToySetup, sites: QuantSites, init: RotationSet, cayley: CayleyConfig,
                   with_weight_quant: bool = False, on_step=None):
    learn_sites = sites if with_weight_quant else sites.without_weights()
    return optimize_rotations(setup.model, setup.calib, learn_sites, init, cayley, on_step)


@dataclass
class Trial:
    index: int
    seed: int
    kind: str
    loss: float
    snr_db: float
    pre_loss: float = float("nan")


def random_trial(setup: ToySetup, sites: QuantSites, kind: str, seed: int, index: int, r3=False, r4=False,
                 method="rtn", gptq=None) -> Trial:
    rot = make_rotation_set(setup.model.config, kind, make_rng(seed, 100 + index), r3, r4)
    mq = quantized_model(setup.model, rot, sites, method, setup.calib, gptq)
    ev = evaluate(setup.model, mq, sites, setup.evalset)
    return Trial(index, seed, kind, ev["loss"], ev["snr_db"])


@dataclass
class SnrComparison:
    none: dict
    random: dict
    learned: dict
    history: list = field(default_factory=list)


def compare_rotations(setup: ToySetup, sites: QuantSites, seed: int, cayley: CayleyConfig, kind="random_hadamard",
                      r3=False, r4=False, method="rtn", with_weight_quant: bool = False) -> SnrComparison:
    """No rotation vs a random rotation vs that rotation after Cayley learning."""
    none = evaluate(setup.model, quantized_model(setup.model, None, sites, method, setup.calib), sites, setup.evalset)
    init = make_rotation_set(setup.model.config, kind, make_rng(seed, 7), r3, r4)
    rand = evaluate(setup.model, quantized_model(setup.model, init, sites, method, setup.calib), sites, setup.evalset)
    learned_rot, hist = learn_rotation(setup, sites, init, cayley, with_weight_quant)
    learned = evaluate(setup.model, quantized_model(setup.model, learned_rot, sites, method, setup.calib), sites,
                       setup.evalset)
    return SnrComparison(none, rand, learned, hist)


def weights_snapshot(model: ToyTransformer) -> dict[str, bytes]:
    return {k: v.tobytes() for k, v in model.tensors().items()}


@dataclass
class VarianceStudy:
    """Quantized losses of random rotations per kind plus one learned rotation."""

    seed: int
    losses: dict[str, list[float]]
    learned_loss: float
    init_loss: float

    def median(self, kind: str) -> float:
        return float(np.median(self.losses[kind]))

    def spread(self, kind: str) -> float:
        return float(np.ptp(self.losses[kind]))


def variance_study(setup: ToySetup, sites: QuantSites, seed: int, n_trials: int, cayley: CayleyConfig,
                   kinds=("random_hadamard", "random_orthogonal"), learn_kind: str = "random_hadamard",
                   r3: bool = False, r4: bool = False, method: str = "rtn",
                   with_weight_quant: bool = False) -> VarianceStudy:
    """Evaluate ``n_trials`` random rotations of each kind and a rotation learned from a ``learn_kind`` init."""
    losses = {k: [random_trial(setup, sites, k, seed, i, r3, r4, method).loss for i in range(n_trials)] for k in kinds}
    init = make_rotation_set(setup.model.config, learn_kind, make_rng(seed, 7), r3, r4)
    init_loss = evaluate(setup.model, quantized_model(setup.model, init, sites, method, setup.calib), sites,
                         setup.evalset)["loss"]
    learned, _ = learn_rotation(setup, sites, init, cayley, with_weight_quant)
    learned_loss = evaluate(setup.model, quantized_model(setup.model, learned, sites, method, setup.calib), sites,
                            setup.evalset)["loss"]
    return VarianceStudy(seed, losses, learned_loss, init_loss)
