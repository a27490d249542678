"""Rotation sets, exact absorption into weights, and the axis-maxima demo."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import archive
from .linalg import (
    is_power_of_two,
    orthonormality_residual,
    random_hadamard,
    random_orthogonal,
    sylvester_hadamard,
)
from .model import ModelConfig, ModelError, Rotations, ToyTransformer

Kind = Literal["identity", "random_orthogonal", "random_hadamard"]
KINDS = ("identity", "random_orthogonal", "random_hadamard")


class RotationError(ValueError):
    pass


@dataclass
class RotationSet:
    r1: np.ndarray
    r2: list[np.ndarray] = field(default_factory=list)
    r3_enabled: bool = False
    r4_enabled: bool = False

    def residual(self) -> float:
        """Largest max|RᵀR − I| over R1 and every R2."""
        return max([orthonormality_residual(self.r1)] + [orthonormality_residual(r) for r in self.r2])

    def check(self, tol: float = 1e-10) -> None:
        res = self.residual()
        if res > tol:
            raise RotationError(f"rotation set is not orthonormal: residual {res:.3e} > {tol:g}")

    def transposed(self) -> "RotationSet":
        return RotationSet(self.r1.T.copy(), [r.T.copy() for r in self.r2], self.r3_enabled, self.r4_enabled)

    def as_rotations(self) -> Rotations:
        return Rotations(self.r1, list(self.r2), self.r3_enabled, self.r4_enabled)

    def copy(self) -> "RotationSet":
        return RotationSet(self.r1.copy(), [r.copy() for r in self.r2], self.r3_enabled, self.r4_enabled)


def make_rotation_set(config: ModelConfig, kind: Kind, rng: np.random.Generator | None = None,
                      r3: bool = False, r4: bool = False) -> RotationSet:
    """R1 (d_model) and one R2 (d_head) per layer, all of the given kind."""
    if kind not in KINDS:
        raise RotationError(f"unknown rotation kind {kind!r}; expected one of {KINDS}")
    if kind != "identity" and rng is None:
        raise RotationError(f"kind {kind!r} needs an rng")
    if kind == "random_hadamard" or r3 or r4:
        for name, n in (("d_model", config.d_model), ("d_head", config.d_head), ("d_ffn", config.d_ffn)):
            if not is_power_of_two(n):
                raise RotationError(f"{name}={n} must be a power of two for Hadamard rotations")

    def build(n):
        if kind == "identity":
            return np.eye(n)
        if kind == "random_orthogonal":
            return random_orthogonal(n, rng)
        return random_hadamard(n, rng)

    r1 = build(config.d_model)
    r2 = [build(config.d_head) for _ in range(config.n_layers)]
    return RotationSet(r1, r2, r3, r4)


def merge_rotations(model: ToyTransformer, rot: RotationSet) -> ToyTransformer:
    """Absorb R1/R2 (and the weight half of R4) into a new model.

    Readers (Wq, Wk, Wv, Wgate, Wup, head) → W·R1; writers (Wo, Wdown) → R1ᵀ·W;
    per head: Wv block → R2ᵀ·Wv_h, Wo block → Wo_h·R2; R4 → Wdown·H. The
    returned model carries the R3/R4 online flags for its forward.
    """
    if not model.is_folded():
        raise RotationError("merge_rotations needs RMSNorm scales folded first (call fold_rmsnorm)")
    c = model.config
    if rot.r1.shape != (c.d_model, c.d_model):
        raise RotationError(f"R1 shape {rot.r1.shape} does not match d_model={c.d_model}")
    if rot.r2 and (len(rot.r2) != c.n_layers or any(r.shape != (c.d_head, c.d_head) for r in rot.r2)):
        raise RotationError(f"R2 must be {c.n_layers} matrices of shape ({c.d_head}, {c.d_head})")
    if (rot.r3_enabled and model.online_r3) or (rot.r4_enabled and model.online_r4):
        raise RotationError("model already carries online R3/R4")

    m = model.copy()
    r1 = rot.r1
    h, dh, d = c.n_heads, c.d_head, c.d_model
    tied = m.head is None
    m.embedding = m.embedding @ r1
    if not tied:
        m.head = m.head @ r1
    had = sylvester_hadamard(c.d_ffn) if rot.r4_enabled else None
    for i, layer in enumerate(m.layers):
        for n in ("wq", "wk", "wv", "wgate", "wup"):
            setattr(layer, n, getattr(layer, n) @ r1)
        if rot.r2:
            r2 = rot.r2[i]
            layer.wv = np.einsum("ba,hbk->hak", r2, layer.wv.reshape(h, dh, d)).reshape(d, d)
            layer.wo = (layer.wo.reshape(d, h, dh) @ r2).reshape(d, d)
        if had is not None:
            layer.wdown = layer.wdown @ had
        layer.wo = r1.T @ layer.wo
        layer.wdown = r1.T @ layer.wdown
    m.online_r3 = model.online_r3 or rot.r3_enabled
    m.online_r4 = model.online_r4 or rot.r4_enabled
    return m


def axis_max_redistribution(maxima: Sequence[float], plane_rotations: Sequence[tuple[int, int, float]],
                            extreme: str = "axes") -> np.ndarray:
    """Per-axis maxima after a sequence of Givens plane rotations.

    Each plane rotation ``(i, j, degrees)`` maps x_i ← cos·x_i − sin·x_j and
    x_j ← sin·x_i + cos·x_j. ``extreme="axes"`` rotates the points ±mᵢeᵢ, one
    outlier per axis: with maxima [2, 0.5, 0.5] and 45° in the (x1, x3) then
    (x1, x2) planes the maxima become [1, 1, √2]. ``extreme="box"`` rotates
    all 2ⁿ vertices of the box ∏[−mᵢ, mᵢ] instead.
    """
    m = np.asarray(maxima, dtype=np.float64)
    if np.any(m < 0):
        raise RotationError("maxima must be nonnegative")
    n = m.size
    if extreme == "axes":
        pts = np.concatenate([np.diag(m), -np.diag(m)])  # rows are points
    elif extreme == "box":
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T
        pts = signs * m
    else:
        raise RotationError(f"extreme must be 'axes' or 'box', got {extreme!r}")
    for i, j, deg in plane_rotations:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise RotationError(f"axis pair ({i}, {j}) out of range for {n} axes")
        th = np.deg2rad(deg)
        xi, xj = pts[:, i].copy(), pts[:, j].copy()
        pts[:, i] = np.cos(th) * xi - np.sin(th) * xj
        pts[:, j] = np.sin(th) * xi + np.cos(th) * xj
    return np.abs(pts).max(axis=0)


def save_rotations(path, rot: RotationSet) -> None:
    tensors = {"r1": rot.r1}
    tensors.update({f"r2.{i}": r for i, r in enumerate(rot.r2)})
    meta = {"kind": "rotations", "n_layers": len(rot.r2), "r3_enabled": rot.r3_enabled, "r4_enabled": rot.r4_enabled}
    archive.write(path, tensors, meta)


def load_rotations(path) -> RotationSet:
    tensors, meta = archive.read(path)
    if not meta or meta.get("kind") != "rotations":
        raise archive.ArchiveError(f"{path}: not a rotation archive")
    r2 = [tensors[f"r2.{i}"] for i in range(meta["n_layers"])]
    return RotationSet(tensors["r1"], r2, bool(meta["r3_enabled"]), bool(meta["r4_enabled"]))


__all__ = [
    "KINDS", "RotationError", "RotationSet", "axis_max_redistribution", "load_rotations",
    "make_rotation_set", "merge_rotations", "save_rotations", "ModelError",
]
