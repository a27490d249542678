"""Toy pre-norm transformer with fake-quant sites and rotation-aware forward.

Layout conventions: activations are row vectors, linear weights are (out, in)
and are applied as ``x @ W.T``. The residual stream has width ``d_model``.

A single forward routine serves three callers:

* plain inference on a (possibly merged) model,
* inference with a :class:`~rotquant.rotate.RotationSet` applied on the fly,
* gradient evaluation, where R1/R2 (or all weights, for pretraining) are
  :class:`~rotquant.autodiff.Var` leaves.

When rotations are applied on the fly the readers use R⁻ᵀ and the RMS
statistic is taken on ``x'·R1⁻¹``. For orthonormal R this is the merged
model exactly; off the manifold it keeps the full-precision objective
invariant for every invertible R, so the straight-through gradient is zero
whenever no quantizer is active.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .linalg import fwht, is_power_of_two
from .quant import QuantSpec, quant_dequant, ste_mask

WEIGHT_NAMES = ("wq", "wk", "wv", "wo", "wgate", "wup", "wdown")
READERS = ("wq", "wk", "wv", "wgate", "wup")
ACT_SITES = ("attn_in", "o_in", "mlp_in", "down_in")
KV_SITES = ("k", "v")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    rms_eps: float = 1e-5
    rope: bool = True
    max_seq: int = 64
    tied: bool = True

    def __post_init__(self):
        for name in ("vocab", "d_model", "n_layers", "n_heads", "d_ffn", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name, v in (("d_model", self.d_model), ("d_head", self.d_head), ("d_ffn", self.d_ffn)):
            if not is_power_of_two(v):
                raise ModelError(f"{name}={v} must be a power of two (Hadamard/FWHT applicability)")
        if self.rope and self.d_head % 2:
            raise ModelError("rotary embedding needs an even d_head")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Layer:
    rms1: np.ndarray
    rms2: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wgate: np.ndarray
    wup: np.ndarray
    wdown: np.ndarray


@dataclass
class ToyTransformer:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[Layer]
    final_rms: np.ndarray
    head: np.ndarray | None = None  # None: tied to the embedding
    online_r3: bool = False
    online_r4: bool = False

    @property
    def head_weight(self) -> np.ndarray:
        return self.embedding if self.head is None else self.head

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "final_rms": self.final_rms}
        if self.head is not None:
            out["head"] = self.head
        for i, layer in enumerate(self.layers):
            for name in ("rms1", "rms2", *WEIGHT_NAMES):
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray], online_r3=False, online_r4=False):
        layers = [
            Layer(**{n: np.asarray(tensors[f"layers.{i}.{n}"], dtype=np.float64) for n in ("rms1", "rms2", *WEIGHT_NAMES)})
            for i in range(config.n_layers)
        ]
        head = tensors.get("head")
        model = cls(
            config,
            np.asarray(tensors["embedding"], dtype=np.float64),
            layers,
            np.asarray(tensors["final_rms"], dtype=np.float64),
            None if head is None else np.asarray(head, dtype=np.float64),
            online_r3,
            online_r4,
        )
        model.validate()
        return model

    def copy(self) -> "ToyTransformer":
        return ToyTransformer.from_tensors(
            self.config, {k: v.copy() for k, v in self.tensors().items()}, self.online_r3, self.online_r4
        )

    def validate(self) -> None:
        c = self.config
        d, f = c.d_model, c.d_ffn
        expect = {"embedding": (c.vocab, d), "final_rms": (d,), "head": (c.vocab, d)}
        for i in range(c.n_layers):
            expect.update({
                f"layers.{i}.rms1": (d,), f"layers.{i}.rms2": (d,),
                f"layers.{i}.wq": (d, d), f"layers.{i}.wk": (d, d), f"layers.{i}.wv": (d, d), f"layers.{i}.wo": (d, d),
                f"layers.{i}.wgate": (f, d), f"layers.{i}.wup": (f, d), f"layers.{i}.wdown": (d, f),
            })
        if len(self.layers) != c.n_layers:
            raise ModelError(f"expected {c.n_layers} layers, found {len(self.layers)}")
        for name, t in self.tensors().items():
            if t.shape != expect[name]:
                raise ModelError(f"tensor {name} has shape {t.shape}, expected {expect[name]}")
            if not np.all(np.isfinite(t)):
                raise ModelError(f"tensor {name} has non-finite entries")

    def is_folded(self) -> bool:
        return all(np.all(l.rms1 == 1) and np.all(l.rms2 == 1) for l in self.layers) and np.all(self.final_rms == 1)


def init_model(config: ModelConfig, rng: np.random.Generator, embed_std: float = 0.02) -> ToyTransformer:
    """Random init: N(0, 1/fan_in) linears, small embeddings (near-uniform logits), unit norms."""
    d, f = config.d_model, config.d_ffn

    def lin(out_dim, in_dim):
        return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)

    emb = rng.standard_normal((config.vocab, d)) * embed_std
    layers = []
    for _ in range(config.n_layers):
        layers.append(Layer(
            rms1=np.ones(d), rms2=np.ones(d),
            wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d) / np.sqrt(2 * config.n_layers),
            wgate=lin(f, d), wup=lin(f, d), wdown=lin(d, f) / np.sqrt(2 * config.n_layers),
        ))
    head = None if config.tied else rng.standard_normal((config.vocab, d)) * embed_std
    return ToyTransformer(config, emb, layers, np.ones(d), head)


def plant_outliers(model: ToyTransformer, channels: Sequence[int], act_scale: float = 50.0, weight_scale: float = 1.0) -> ToyTransformer:
    """Amplify residual channels to create persistent activation (and weight) outliers.

    Every write into the chosen channels (embedding columns, Wo/Wdown output
    rows) is multiplied by ``act_scale`` so the channels dominate the residual
    stream at every depth. ``weight_scale`` multiplies the matching entries of
    each RMSNorm scale, which become weight-column outliers after folding. A
    tied head is untied first so the output head itself is unchanged.
    """
    m = model.copy()
    ch = list(channels)
    if m.head is None:
        m.head = model.embedding.copy()
    m.embedding[:, ch] *= act_scale
    for layer in m.layers:
        layer.wo[ch, :] *= act_scale
        layer.wdown[ch, :] *= act_scale
        layer.rms1[ch] *= weight_scale
        layer.rms2[ch] *= weight_scale
    return m


def plant_key_outliers(model: ToyTransformer, rng: np.random.Generator, scale: float = 10.0) -> ToyTransformer:
    """Scale one Wk row per head so the key cache carries a channel outlier.

    Residual outliers are normalized away by RMSNorm before Wk, so key
    outliers have to be planted on the key projection itself.
    """
    m = model.copy()
    dh = m.config.d_head
    for layer in m.layers:
        for h in range(m.config.n_heads):
            layer.wk[h * dh + int(rng.integers(dh)), :] *= scale
    return m


@dataclass(frozen=True)
class QuantSites:
    """Per-site quantizers; ``None`` means the site is off (an exact no-op)."""

    weights: QuantSpec | None = None
    activations: QuantSpec | None = None
    k_cache: QuantSpec | None = None
    v_cache: QuantSpec | None = None

    @classmethod
    def off(cls) -> "QuantSites":
        return cls()

    @classmethod
    def wakv(cls, w: int | None, a: int | None, kv: int | None) -> "QuantSites":
        """Defaults per bit-width triple: symmetric per-channel weights, asymmetric per-token A/KV."""
        from .quant import activation_spec, weight_spec

        def mk(bits, fn):
            return None if bits is None else fn(bits)

        return cls(mk(w, weight_spec), mk(a, activation_spec), mk(kv, activation_spec), mk(kv, activation_spec))

    def without_weights(self) -> "QuantSites":
        return replace(self, weights=None)

    def any_on(self) -> bool:
        return any(s is not None for s in (self.weights, self.activations, self.k_cache, self.v_cache))


def site_names(config: ModelConfig) -> list[str]:
    names = []
    for i in range(config.n_layers):
        names += [f"layers.{i}.{s}" for s in ACT_SITES + KV_SITES + WEIGHT_NAMES]
    return names


Quantizer = Callable[[str, np.ndarray, QuantSpec], np.ndarray]


def default_quantizer(name: str, x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return quant_dequant(x, spec)


class NoiseRecorder:
    """Quantizer hook that records the additive error e = Q(x) − x per site."""

    def __init__(self):
        self.noise: dict[str, np.ndarray] = {}

    def __call__(self, name, x, spec):
        out = quant_dequant(x, spec)
        self.noise[name] = out - x
        return out


class FrozenNoise:
    """Quantizer hook replaying recorded errors: Q(x) := x + e₀.

    The straight-through gradient is the exact gradient of this surrogate,
    which makes it the right reference for finite-difference checks.
    """

    def __init__(self, noise: dict[str, np.ndarray]):
        self.noise = noise

    def __call__(self, name, x, spec):
        return x + self.noise[name]


def _rope_tables(t: int, d_head: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    freq = 10000.0 ** (-np.arange(half) / half)
    ang = np.arange(offset, offset + t)[:, None] * freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def rope(x, cos, sin):
    return ad.linear_op(x, lambda v: _rope_apply(v, cos, sin), lambda g: _rope_apply(g, cos, -sin))


def online_hadamard(x):
    """Online FWHT along the last axis (self-adjoint)."""
    return ad.linear_op(x, fwht, fwht)


@dataclass
class Rotations:
    """On-the-fly rotation parameters; entries may be arrays or autodiff Vars."""

    r1: object = None
    r2: list = field(default_factory=list)
    r3: bool = False
    r4: bool = False


@dataclass
class ForwardResult:
    logits: np.ndarray | ad.Var
    captured: dict[str, np.ndarray]
    weights: dict[str, object] = field(default_factory=dict)


def effective_weights(model: ToyTransformer, rot: Rotations | None, params: dict | None = None) -> dict[str, object]:
    """Weights as the forward consumes them, with R1/R2/R4 composed in."""
    params = params or {}
    tensors = model.tensors()

    def get(name):
        return params.get(name, tensors.get(name))

    c = model.config
    out = {"embedding": get("embedding"), "final_rms": get("final_rms")}
    out["head"] = get("head") if "head" in tensors or "head" in params else get("embedding")
    for i in range(c.n_layers):
        for n in ("rms1", "rms2", *WEIGHT_NAMES):
            out[f"layers.{i}.{n}"] = get(f"layers.{i}.{n}")
    if rot is None:
        return out

    h, dh, d = c.n_heads, c.d_head, c.d_model
    r1 = rot.r1
    r1_inv_t = ad.swapaxes(ad.inv(r1), 0, 1) if r1 is not None else None
    if r1 is not None:
        out["head"] = ad.matmul(out["head"], r1_inv_t)
    for i in range(c.n_layers):
        p = f"layers.{i}."
        if r1 is not None:
            for n in READERS:
                out[p + n] = ad.matmul(out[p + n], r1_inv_t)
        if rot.r2:
            r2 = rot.r2[i]
            wv = ad.reshape(out[p + "wv"], (h, dh, d))
            out[p + "wv"] = ad.reshape(ad.matmul(ad.swapaxes(r2, 0, 1), wv), (d, d))
            wo = ad.transpose(ad.reshape(out[p + "wo"], (d, h, dh)), (1, 0, 2))
            wo = ad.matmul(wo, ad.swapaxes(ad.inv(r2), 0, 1))
            out[p + "wo"] = ad.reshape(ad.transpose(wo, (1, 0, 2)), (d, d))
        if rot.r4:
            out[p + "wdown"] = ad.linear_op(out[p + "wdown"], fwht, fwht)  # Wdown·H, H symmetric
        if r1 is not None:
            r1_t = ad.swapaxes(r1, 0, 1)
            out[p + "wo"] = ad.matmul(r1_t, out[p + "wo"])
            out[p + "wdown"] = ad.matmul(r1_t, out[p + "wdown"])
    return out


def _rmsnorm(x, ref, scale, eps):
    """x / rms(ref) · scale; ``ref`` is x itself unless the stream is rotated on the fly."""
    inv_rms = ad.rsqrt(ad.mean_last(ad.mul(ref, ref)), eps)
    return ad.mul(ad.mul(x, inv_rms), scale)


def run(
    model: ToyTransformer,
    tokens: np.ndarray,
    sites: QuantSites = QuantSites(),
    rotations: Rotations | None = None,
    capture: Iterable[str] = (),
    quantizer: Quantizer | None = None,
    params: dict | None = None,
) -> ForwardResult:
    """Core forward over a (batch, time) token array."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    c = model.config
    if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab):
        raise ModelError(f"token ids must lie in [0, {c.vocab})")
    if tokens.shape[1] > c.max_seq:
        raise ModelError(f"sequence length {tokens.shape[1]} exceeds max_seq={c.max_seq}")
    capture = set(capture)
    unknown = capture - set(site_names(c))
    if unknown:
        raise ModelError(f"unknown capture site(s): {sorted(unknown)}")
    if rotations is not None and ((rotations.r3 and model.online_r3) or (rotations.r4 and model.online_r4)):
        raise ModelError("online rotation requested twice: model already carries merged R3/R4")
    quantizer = quantizer or default_quantizer
    r3 = model.online_r3 or (rotations is not None and rotations.r3)
    r4 = model.online_r4 or (rotations is not None and rotations.r4)

    w = effective_weights(model, rotations, params)
    captured: dict[str, np.ndarray] = {}

    def quant(name, x, spec):
        if name in capture:
            captured[name] = ad.value(x).copy()
        if spec is None:
            return x
        xv = ad.value(x)
        return ad.straight_through(x, quantizer(name, xv, spec), ste_mask(xv, spec))

    r1 = rotations.r1 if rotations is not None else None
    r1_inv = ad.inv(r1) if r1 is not None else None

    b, t = tokens.shape
    h, dh, d = c.n_heads, c.d_head, c.d_model
    x = ad.take_rows(w["embedding"], tokens)
    if r1 is not None:
        x = ad.matmul(x, r1)
    cos, sin = _rope_tables(t, dh)

    for i in range(c.n_layers):
        p = f"layers.{i}."
        wt = {n: quant(p + n, w[p + n], sites.weights) for n in WEIGHT_NAMES}
        ref = x if r1_inv is None else ad.matmul(x, r1_inv)
        a_in = quant(p + "attn_in", _rmsnorm(x, ref, w[p + "rms1"], c.rms_eps), sites.activations)

        def heads(z):
            return ad.transpose(ad.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q = heads(ad.matmul(a_in, ad.swapaxes(wt["wq"], 0, 1)))
        k = heads(ad.matmul(a_in, ad.swapaxes(wt["wk"], 0, 1)))
        v = heads(ad.matmul(a_in, ad.swapaxes(wt["wv"], 0, 1)))
        if c.rope:
            q, k = rope(q, cos, sin), rope(k, cos, sin)
        if r3:
            q, k = online_hadamard(q), online_hadamard(k)
        k = quant(p + "k", k, sites.k_cache)
        v = quant(p + "v", v, sites.v_cache)
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        o = ad.matmul(ad.causal_softmax(scores), v)
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, t, d))
        o = quant(p + "o_in", o, sites.activations)
        x = ad.add(x, ad.matmul(o, ad.swapaxes(wt["wo"], 0, 1)))

        ref = x if r1_inv is None else ad.matmul(x, r1_inv)
        m_in = quant(p + "mlp_in", _rmsnorm(x, ref, w[p + "rms2"], c.rms_eps), sites.activations)
        gate = ad.matmul(m_in, ad.swapaxes(wt["wgate"], 0, 1))
        up = ad.matmul(m_in, ad.swapaxes(wt["wup"], 0, 1))
        act = ad.mul(ad.silu(gate), up)
        if r4:
            act = online_hadamard(act)
        act = quant(p + "down_in", act, sites.activations)
        x = ad.add(x, ad.matmul(act, ad.swapaxes(wt["wdown"], 0, 1)))

    ref = x if r1_inv is None else ad.matmul(x, r1_inv)
    hf = _rmsnorm(x, ref, w["final_rms"], c.rms_eps)
    logits = ad.matmul(hf, ad.swapaxes(w["head"], 0, 1))
    return ForwardResult(logits, captured, w)


def forward(model, tokens, sites=QuantSites(), rotations=None, capture=(), quantizer=None):
    """Logits (batch, time, vocab) as an array plus captured pre-quantizer tensors by site name."""
    res = run(model, tokens, sites, _as_rotations(rotations), capture, quantizer)
    return ad.value(res.logits), res.captured


def kv_cache_quant_forward(model, tokens, sites: QuantSites, rotations=None) -> np.ndarray:
    """Forward with the K/V cache quantized (after RoPE and R3 for K, after Wv for V)."""
    if sites.k_cache is None and sites.v_cache is None:
        raise ModelError("kv_cache_quant_forward needs the k_cache or v_cache site enabled")
    return forward(model, tokens, sites, rotations)[0]


def _as_rotations(rot) -> Rotations | None:
    if rot is None or isinstance(rot, Rotations):
        return rot
    # rotate.RotationSet duck-typing; avoids an import cycle
    return Rotations(rot.r1, list(rot.r2), rot.r3_enabled, rot.r4_enabled)


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]

    @property
    def count(self) -> int:
        return len(self.sequences)

    def validate(self, config: ModelConfig) -> None:
        if not self.sequences:
            raise ModelError("calibration set is empty")
        for n, s in enumerate(self.sequences):
            if len(s) > config.max_seq:
                raise ModelError(f"sequence {n} has length {len(s)} > max_seq={config.max_seq}")
            if len(s) and (s.min() < 0 or s.max() >= config.vocab):
                raise ModelError(f"sequence {n} has token ids outside [0, {config.vocab})")

    def batches(self) -> list[np.ndarray]:
        """Equal-length groups as (batch, time) arrays in a fixed (length, index) order."""
        by_len: dict[int, list[np.ndarray]] = {}
        for s in self.sequences:
            by_len.setdefault(len(s), []).append(s)
        return [np.stack(by_len[n]) for n in sorted(by_len) if n >= 2]

    def positions(self) -> int:
        return sum(max(len(s) - 1, 0) for s in self.sequences)

    def subset(self, n: int) -> "CalibrationSet":
        return CalibrationSet(self.sequences[:n])


def _loss_graph(model, calib, sites, rotations, quantizer=None, params=None):
    calib.validate(model.config)
    total_pos = calib.positions()
    if total_pos == 0:
        raise ModelError("calibration set has no predicted positions")
    loss = 0.0
    for batch in calib.batches():
        res = run(model, batch[:, :-1], sites, rotations, quantizer=quantizer, params=params)
        loss = ad.add(loss, ad.cross_entropy(res.logits, batch[:, 1:], 1.0 / total_pos))
    return loss


def calibration_loss(model, calib: CalibrationSet, sites=QuantSites(), rotations=None, quantizer=None) -> float:
    """Mean next-token cross-entropy (nats) over every predicted position."""
    return float(ad.value(_loss_graph(model, calib, sites, _as_rotations(rotations), quantizer)))


def loss_and_grad_rotations(model, calib, sites, rotations, quantizer=None):
    """(loss, dL/dR1, [dL/dR2 per layer]) with straight-through quantizers.

    ``rotations`` is a RotationSet or Rotations holding arrays; R3/R4 flags
    are honoured but not differentiated.
    """
    rot = _as_rotations(rotations)
    if rot is None or rot.r1 is None:
        raise ModelError("loss_and_grad_rotations needs rotations")
    r1 = ad.Var(rot.r1)
    r2 = [ad.Var(r) for r in rot.r2]
    loss = _loss_graph(model, calib, sites, Rotations(r1, r2, rot.r3, rot.r4), quantizer)
    ad.backward(loss)

    def g(v):
        return np.zeros_like(v.value) if v.grad is None else v.grad

    return float(loss.value), g(r1), [g(v) for v in r2]


def fold_rmsnorm(model: ToyTransformer) -> ToyTransformer:
    """Absorb every RMSNorm scale into the input columns of the linears it feeds."""
    m = model.copy()
    for layer in m.layers:
        for n in ("wq", "wk", "wv"):
            setattr(layer, n, getattr(layer, n) * layer.rms1[None, :])
        for n in ("wgate", "wup"):
            setattr(layer, n, getattr(layer, n) * layer.rms2[None, :])
        layer.rms1 = np.ones_like(layer.rms1)
        layer.rms2 = np.ones_like(layer.rms2)
    if not np.all(m.final_rms == 1):
        m.head = m.head_weight * m.final_rms[None, :]  # unties a tied head
        m.final_rms = np.ones_like(m.final_rms)
    return m


def save_model(path, model: ToyTransformer, storage: str = "f64") -> None:
    from . import archive

    meta = {"kind": "model", "model": model.config.to_dict(), "online_r3": model.online_r3, "online_r4": model.online_r4}
    archive.write(path, model.tensors(), meta, storage)


def load_model(path) -> ToyTransformer:
    from . import archive

    tensors, meta = archive.read(path)
    if not meta or meta.get("kind") != "model":
        raise archive.ArchiveError(f"{path}: not a model archive")
    return ToyTransformer.from_tensors(ModelConfig(**meta["model"]), tensors, meta["online_r3"], meta["online_r4"])
