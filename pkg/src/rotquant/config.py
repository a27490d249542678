"""Run configuration: one JSON document, strict keys, explicit seeds.

Every section maps onto a dataclass with the same field names; an unknown
key anywhere is an error. Relative paths are resolved against the config
file's directory. Example::

    {
      "seed": 3,
      "model": {"config": {"vocab": 64, "d_model": 64, "d_ffn": 128, "max_seq": 32},
                "pretrain_steps": 200, "outlier_channels": 1},
      "calibration": {"n_sequences": 32, "n_eval": 32, "seq_len": 32},
      "sites": {"weights": 4, "activations": 4, "kv": null},
      "rotation": {"kind": "random_hadamard", "r4": true},
      "cayley": {"iterations": 100, "lr0": 1.5},
      "gptq": null,
      "trials": 25
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cayley import CayleyConfig, CayleyError
from .model import ModelConfig, ModelError, QuantSites
from .quant import GptqConfig, QuantError, activation_spec, weight_spec
from .rotate import KINDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSource:
    """Load ``path`` or generate from ``config`` with the run seed."""

    path: str | None = None
    config: ModelConfig = field(default_factory=ModelConfig)
    pretrain_steps: int = 0
    pretrain_batch: int = 16
    pretrain_lr: float = 3e-3
    outlier_channels: int = 0
    outlier_scale: float = 50.0
    weight_outlier_scale: float = 1.0
    embed_std: float = 0.02


@dataclass(frozen=True)
class DataConfig:
    """Token files, or synthetic Markov tokens drawn with the run seed."""

    path: str | None = None
    eval_path: str | None = None
    n_sequences: int = 800
    n_eval: int = 64
    seq_len: int = 64


@dataclass(frozen=True)
class SitesConfig:
    """Bit-widths per site; ``null`` switches a site off."""

    weights: int | None = 4
    activations: int | None = 4
    kv: int | None = None
    weight_clip: float = 1.0
    activation_clip: float = 1.0
    kv_clip: float = 1.0

    def build(self) -> QuantSites:
        def mk(bits, fn, clip):
            return None if bits is None else fn(bits, clip)

        kv = mk(self.kv, activation_spec, self.kv_clip)
        return QuantSites(mk(self.weights, weight_spec, self.weight_clip),
                          mk(self.activations, activation_spec, self.activation_clip), kv, kv)


@dataclass(frozen=True)
class RotationConfig:
    """Initial rotation (or a saved one at ``path``) and learning options.

    By default rotations are learned against the activation/KV-quantized
    network with full-precision weights; ``learn_weight_quant`` also
    fake-quantizes the weights during learning (useful with RTN, which does
    not compensate weight error afterwards). ``seed`` null means the run seed.
    """

    kind: str = "random_hadamard"
    seed: int | None = None
    r3: bool = False
    r4: bool = False
    path: str | None = None
    learn_weight_quant: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSource = field(default_factory=ModelSource)
    calibration: DataConfig = field(default_factory=DataConfig)
    sites: SitesConfig = field(default_factory=SitesConfig)
    rotation: RotationConfig = field(default_factory=RotationConfig)
    cayley: CayleyConfig = field(default_factory=CayleyConfig)
    gptq: GptqConfig | None = field(default_factory=GptqConfig)
    out: str = "out"
    trials: int = 25
    trial_seeds: tuple[int, ...] | None = None
    workers: int = 1

    @property
    def weight_method(self) -> str:
        return "rtn" if self.gptq is None else "gptq"

    @property
    def rotation_seed(self) -> int:
        return self.seed if self.rotation.seed is None else self.rotation.seed

    @property
    def learn_weight_quant(self) -> bool:
        return self.rotation.learn_weight_quant

    def seeds_for_trials(self) -> list[int]:
        """Explicit ``trial_seeds`` or ``trials`` seeds derived from the run seed."""
        if self.trial_seeds is not None:
            return list(self.trial_seeds)
        ss = np.random.SeedSequence([self.seed, 0x7E51])
        return [int(s) for s in ss.generate_state(self.trials, dtype=np.uint32)]

    def to_dict(self) -> dict:
        def conv(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return conv(self)


_SECTIONS = {
    "model": ModelSource, "calibration": DataConfig, "sites": SitesConfig,
    "rotation": RotationConfig, "cayley": CayleyConfig, "gptq": GptqConfig,
}


def _strict(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    return dict(raw)


def _check_types(cls, kw: dict, where: str) -> None:
    for f in fields(cls):
        if f.name not in kw:
            continue
        v, t = kw[f.name], str(f.type)
        ok = True
        if v is None:
            ok = "None" in t
        elif t.startswith("int") or t.startswith("tuple"):
            ok = (isinstance(v, int) and not isinstance(v, bool)) if t.startswith("int") else isinstance(v, list)
        elif t.startswith("float"):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        elif t.startswith("bool"):
            ok = isinstance(v, bool)
        elif t.startswith("str"):
            ok = isinstance(v, str)
        if not ok:
            raise ConfigError(f"{where}.{f.name}: bad value {v!r} (expected {t})")


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    kw = _strict(RunConfig, raw, "config")
    try:
        for key, cls in _SECTIONS.items():
            if key not in kw:
                continue
            if kw[key] is None and key == "gptq":
                continue
            sec = _strict(cls, kw[key], key)
            if key == "model" and "config" in sec:
                mc = _strict(ModelConfig, sec["config"], "model.config")
                _check_types(ModelConfig, mc, "model.config")
                sec["config"] = ModelConfig(**mc)
            _check_types(cls, sec, key)
            kw[key] = cls(**sec)
        _check_types(RunConfig, kw, "config")
        if kw.get("trial_seeds") is not None:
            kw["trial_seeds"] = tuple(int(s) for s in kw["trial_seeds"])
        rc = RunConfig(**kw)
    except (ModelError, QuantError, CayleyError, TypeError) as e:
        raise ConfigError(str(e)) from None
    if base_dir is not None:
        rc = _resolve_paths(rc, Path(base_dir))
    validate(rc)
    return rc


def _resolve_paths(rc: RunConfig, base: Path) -> RunConfig:
    def res(p):
        return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

    return replace(
        rc,
        model=replace(rc.model, path=res(rc.model.path)),
        calibration=replace(rc.calibration, path=res(rc.calibration.path), eval_path=res(rc.calibration.eval_path)),
        rotation=replace(rc.rotation, path=res(rc.rotation.path)),
        out=res(rc.out),
    )


def validate(rc: RunConfig) -> None:
    seeds = [("seed", rc.seed), ("rotation.seed", rc.rotation.seed)]
    seeds += [(f"trial_seeds[{i}]", s) for i, s in enumerate(rc.trial_seeds or ())]
    for where, s in seeds:
        if s is not None and not 0 <= s < 2**64:
            raise ConfigError(f"{where} must be an unsigned 64-bit integer, got {s}")
    if rc.rotation.kind not in KINDS:
        raise ConfigError(f"rotation.kind {rc.rotation.kind!r} is not one of {', '.join(KINDS)}")
    if rc.calibration.seq_len < 2:
        raise ConfigError("calibration.seq_len must be >= 2")
    if rc.calibration.n_sequences < 1 or rc.calibration.n_eval < 1:
        raise ConfigError("calibration.n_sequences and n_eval must be >= 1")
    if rc.model.path is None and rc.calibration.seq_len > rc.model.config.max_seq:
        raise ConfigError(f"calibration.seq_len={rc.calibration.seq_len} exceeds model max_seq={rc.model.config.max_seq}")
    for name in ("weights", "activations", "kv"):
        bits = getattr(rc.sites, name)
        if bits is not None and not 2 <= bits <= 16:
            raise ConfigError(f"sites.{name} must be null or in [2, 16], got {bits}")
    for name in ("weight_clip", "activation_clip", "kv_clip"):
        c = getattr(rc.sites, name)
        if not 0.0 < c <= 1.0:
            raise ConfigError(f"sites.{name} must be in (0, 1], got {c}")
    if rc.trials < 1 or rc.workers < 1:
        raise ConfigError("trials and workers must be >= 1")
    if rc.trial_seeds is not None and len(rc.trial_seeds) != rc.trials:
        raise ConfigError(f"trial_seeds has {len(rc.trial_seeds)} entries but trials={rc.trials}")
    if rc.model.outlier_channels > rc.model.config.d_model:
        raise ConfigError("model.outlier_channels exceeds d_model")
    for p, what in ((rc.model.path, "model.path"), (rc.calibration.path, "calibration.path"),
                    (rc.calibration.eval_path, "calibration.eval_path"), (rc.rotation.path, "rotation.path")):
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"{what}: {p} does not exist")


def load(path, seed: int | None = None, out: str | None = None, trials: int | None = None) -> RunConfig:
    """Parse a config file, then apply command-line overrides."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if out is not None:
        raw = {**raw, "out": str(Path(out).resolve())}
    if seed is not None:
        raw = {**raw, "seed": seed}
    if trials is not None:
        raw = {**raw, "trials": trials}
        if raw.get("trial_seeds") is not None and len(raw["trial_seeds"]) != trials:
            raise ConfigError("--trials conflicts with the length of trial_seeds")
    return from_dict(raw, base_dir=path.parent)
