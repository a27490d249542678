"""Min-max fake quantization and GPTQ weight rounding.

Groups: ``per_tensor`` uses one (scale, offset) for the whole array;
``per_token`` and ``per_channel`` both group along the last axis, i.e. rows of
an activation matrix (tokens) or rows of an (out, in) weight (output channels).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

Mode = Literal["symmetric", "asymmetric"]
Granularity = Literal["per_tensor", "per_token", "per_channel"]


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    mode: Mode = "asymmetric"
    granularity: Granularity = "per_token"
    clip_ratio: float = 1.0

    def __post_init__(self):
        if not 2 <= int(self.bits) <= 16:
            raise QuantError(f"bits must be in [2, 16], got {self.bits}")
        if self.mode not in ("symmetric", "asymmetric"):
            raise QuantError(f"unknown mode {self.mode!r}")
        if self.granularity not in ("per_tensor", "per_token", "per_channel"):
            raise QuantError(f"unknown granularity {self.granularity!r}")
        if not 0.0 < self.clip_ratio <= 1.0:
            raise QuantError(f"clip_ratio must be in (0, 1], got {self.clip_ratio}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.mode == "symmetric" else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.mode == "symmetric" else 2**self.bits - 1

    def to_dict(self) -> dict:
        return asdict(self)


def weight_spec(bits: int = 4, clip_ratio: float = 1.0) -> QuantSpec:
    return QuantSpec(bits, "symmetric", "per_channel", clip_ratio)


def activation_spec(bits: int = 4, clip_ratio: float = 1.0) -> QuantSpec:
    return QuantSpec(bits, "asymmetric", "per_token", clip_ratio)


@dataclass
class QuantizedView:
    """Integer codes plus per-group scale α and offset β.

    ``dequantize`` returns the fake-quant output bit-for-bit. It is evaluated
    as β + range·(code/qmax) with range = α·qmax held exactly, which equals
    α·code + β up to one rounding and keeps grid endpoints exact.
    """

    codes: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    spec: QuantSpec
    span: np.ndarray | None = None

    def dequantize(self) -> np.ndarray:
        if self.span is None:
            return self.scale * self.codes + self.offset
        return _dequant(self.codes, self.offset, self.span, self.spec)


def _dequant(codes, offset, span, spec: QuantSpec) -> np.ndarray:
    return offset + span * (codes / spec.qmax)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise QuantError("quantizer input contains NaN or Inf")


def _group_reduce(x: np.ndarray, spec: QuantSpec, fn) -> np.ndarray:
    if spec.granularity == "per_tensor" or x.ndim == 0:
        return np.full((1,) * x.ndim, fn(x)) if x.size else np.zeros((1,) * x.ndim)
    return fn(x, axis=-1, keepdims=True)


def compute_params(x: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-group (scale, offset, lo, hi); lo/hi bound the clipped envelope.

    Degenerate groups (all zero, or constant in asymmetric mode) are flagged
    by ``lo == hi`` and get scale 1, code 0 and offset equal to the value.
    """
    x = np.asarray(x, dtype=np.float64)
    c = spec.clip_ratio
    if spec.mode == "symmetric":
        hi = c * _group_reduce(np.abs(x), spec, np.max)
        lo = -hi
        scale = hi / spec.qmax
        offset = np.zeros_like(scale)
    else:
        hi = c * _group_reduce(x, spec, np.max)
        lo = c * _group_reduce(x, spec, np.min)
        scale = (hi - lo) / spec.qmax
        offset = lo.copy()
    degenerate = scale == 0
    if degenerate.any():
        # constant group: code 0 with offset at the raw value reproduces it exactly
        raw = _group_reduce(x, spec, np.max) if spec.mode == "asymmetric" else np.zeros_like(scale)
        scale = np.where(degenerate, 1.0, scale)
        offset = np.where(degenerate, raw, offset)
    return scale, offset, lo, hi


def grid_span(lo, hi, spec: QuantSpec) -> np.ndarray:
    """α·qmax computed directly from the envelope (1 for degenerate groups)."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    span = hi if spec.mode == "symmetric" else hi - lo
    return np.where(lo == hi, 1.0 * spec.qmax, span)


def quantize_codes(x: np.ndarray, scale: np.ndarray, offset: np.ndarray, lo, hi, spec: QuantSpec) -> np.ndarray:
    xc = np.clip(x, lo, hi)
    # (x − β)/range·qmax instead of (x − β)/α: exact halves stay exact
    codes = np.clip(round_half_away((xc - offset) / grid_span(lo, hi, spec) * spec.qmax), spec.qmin, spec.qmax)
    degenerate = np.asarray(lo) == np.asarray(hi)
    if degenerate.any():
        codes = np.where(degenerate, 0.0, codes)
    return codes


def quantize(x: np.ndarray, spec: QuantSpec) -> QuantizedView:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    scale, offset, lo, hi = compute_params(x, spec)
    codes = quantize_codes(x, scale, offset, lo, hi, spec)
    return QuantizedView(codes, scale, offset, spec, grid_span(lo, hi, spec))


def quant_dequant(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize ``x``: α·round((clip(x) − β)/α) + β per group."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    scale, offset, lo, hi = compute_params(x, spec)
    codes = quantize_codes(x, scale, offset, lo, hi, spec)
    return _dequant(codes, offset, grid_span(lo, hi, spec), spec)


def ste_mask(x: np.ndarray, spec: QuantSpec) -> np.ndarray | None:
    """Straight-through gradient mask: ones inside the clipped envelope, zero outside.

    Returns None when clip_ratio is 1 (min-max never clips).
    """
    if spec.clip_ratio >= 1.0:
        return None
    _, _, lo, hi = compute_params(x, spec)
    return ((x >= lo) & (x <= hi)).astype(np.float64)


def rtn_quantize_weights(w: np.ndarray, spec: QuantSpec) -> QuantizedView:
    if spec.granularity == "per_token":
        raise QuantError("weight quantization needs per_channel or per_tensor granularity")
    return quantize(np.asarray(w, dtype=np.float64), spec)


def proxy_loss(w: np.ndarray, d: np.ndarray, hessian: np.ndarray) -> float:
    """Layer-output error proxy trace((W−D) H (W−D)ᵀ)."""
    e = np.asarray(w) - np.asarray(d)
    return float(np.einsum("ij,jk,ik->", e, hessian, e))


@dataclass(frozen=True)
class GptqConfig:
    block_size: int = 128
    damping: float = 0.01
    calib_sequences: int = 128
    sequence_length: int = 64

    def __post_init__(self):
        if self.damping <= 0:
            raise QuantError(f"damping must be > 0, got {self.damping}")
        if self.block_size < 1:
            raise QuantError(f"block_size must be >= 1, got {self.block_size}")


def gptq_quantize(w: np.ndarray, hessian: np.ndarray, spec: QuantSpec, cfg: GptqConfig = GptqConfig()) -> QuantizedView:
    """Column-sequential rounding with inverse-Hessian error feedback.

    ``w`` is (out, in); ``hessian`` is the (in, in) input second moment XᵀX.
    Group parameters are fixed from the unmodified weight, so an identity
    Hessian reproduces :func:`rtn_quantize_weights` exactly.
    """
    w = np.array(w, dtype=np.float64, copy=True)
    h = np.array(hessian, dtype=np.float64, copy=True)
    if spec.granularity == "per_token":
        raise QuantError("weight quantization needs per_channel or per_tensor granularity")
    _check_finite(w)
    if h.shape != (w.shape[1], w.shape[1]):
        raise QuantError(f"hessian shape {h.shape} does not match weight columns {w.shape[1]}")
    if np.max(np.abs(h - h.T), initial=0.0) > 1e-8:
        raise QuantError("hessian is not symmetric within 1e-8")

    scale, offset, lo, hi = compute_params(w, spec)
    n = w.shape[1]

    dead = np.diag(h) == 0
    h[dead, dead] = 1.0
    w[:, dead] = 0.0
    idx = np.arange(n)
    h[idx, idx] += cfg.damping * np.mean(np.diag(h))
    try:
        chol = np.linalg.cholesky(h)
        h_inv = np.linalg.inv(chol).T @ np.linalg.inv(chol)
        u = np.linalg.cholesky(h_inv).T  # upper factor of H⁻¹
    except np.linalg.LinAlgError as exc:
        raise QuantError(f"Cholesky factorization failed after damping: {exc}") from exc

    span = grid_span(lo, hi, spec)
    codes = np.zeros_like(w)
    s_col = np.broadcast_to(scale, w.shape)
    o_col = np.broadcast_to(offset, w.shape)
    sp_col = np.broadcast_to(span, w.shape)
    lo_col = np.broadcast_to(lo, w.shape)
    hi_col = np.broadcast_to(hi, w.shape)
    for b0 in range(0, n, cfg.block_size):
        b1 = min(b0 + cfg.block_size, n)
        wb = w[:, b0:b1].copy()
        err = np.zeros_like(wb)
        ub = u[b0:b1, b0:b1]
        for i in range(b1 - b0):
            j = b0 + i
            col = wb[:, i]
            q = quantize_codes(col, s_col[:, j], o_col[:, j], lo_col[:, j], hi_col[:, j], spec)
            codes[:, j] = q
            e = (col - _dequant(q, o_col[:, j], sp_col[:, j], spec)) / ub[i, i]
            err[:, i] = e
            wb[:, i:] -= np.outer(e, ub[i, i:])
        if b1 < n:
            w[:, b1:] -= err @ u[b0:b1, b1:]
    return QuantizedView(codes, scale, offset, spec, span)


def gptq_dequantized(w, hessian, spec, cfg=GptqConfig()) -> np.ndarray:
    return gptq_quantize(w, hessian, spec, cfg).dequantize()
