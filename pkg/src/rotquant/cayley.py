"""Cayley SGD on the orthogonal group for the mergeable rotations R1/R2."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .linalg import orthonormality_residual, skew_residual, solve
from .model import (
    CalibrationSet,
    ModelError,
    QuantSites,
    ToyTransformer,
    calibration_loss,
    loss_and_grad_rotations,
)
from .rotate import RotationSet

log = logging.getLogger(__name__)

ABORT_RESIDUAL = 1e-6


class CayleyError(ValueError):
    pass


class OrthonormalityError(RuntimeError):
    """A rotation drifted off the manifold beyond the abort threshold."""


@dataclass(frozen=True)
class CayleyConfig:
    lr0: float = 1.5
    iterations: int = 100
    fixed_point_tol: float = 1e-12
    fixed_point_max_iters: int = 10
    mode: Literal["exact_solve", "fixed_point"] = "exact_solve"
    momentum: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise CayleyError(f"lr0 must be > 0, got {self.lr0}")
        if self.iterations < 1:
            raise CayleyError(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in ("exact_solve", "fixed_point"):
            raise CayleyError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise CayleyError(f"momentum must be in [0, 1), got {self.momentum}")

    def lr(self, step: int) -> float:
        """Linear decay from lr0 to 0 over the iteration budget."""
        return self.lr0 * (1.0 - step / self.iterations)


def project_gradient(g: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Y = Ĝ − Ĝᵀ with Ĝ = G Rᵀ − ½ R Rᵀ G Rᵀ."""
    g = np.asarray(g, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if g.shape != r.shape or g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise CayleyError(f"project_gradient needs equal square shapes, got {g.shape} and {r.shape}")
    grt = g @ r.T
    g_hat = grt - 0.5 * r @ (r.T @ grt)
    return g_hat - g_hat.T


def cayley_step(r: np.ndarray, y: np.ndarray, lr: float, cfg: CayleyConfig = CayleyConfig()) -> np.ndarray:
    """R′ = (I − lr/2·Y)⁻¹ (I + lr/2·Y) R.

    ``fixed_point`` mode iterates R′ ← R + lr/2·Y·(R + R′) from R′ = R + lr·Y·R.
    If that has not converged within the iteration cap it falls back to the
    exact solve (the iteration only contracts for lr/2·‖Y‖ < 1).
    """
    r = np.asarray(r, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if skew_residual(y) > 1e-10:
        raise CayleyError(f"Y is not skew-symmetric (max|Y + Yᵀ| = {skew_residual(y):.3e})")
    if not np.any(y):
        return r.copy()
    half = 0.5 * lr * y
    if cfg.mode == "fixed_point":
        yr = half @ r
        new = r + 2.0 * yr
        for _ in range(cfg.fixed_point_max_iters):
            nxt = r + yr + half @ new
            delta = np.max(np.abs(nxt - new))
            new = nxt
            if delta < cfg.fixed_point_tol:
                return new
        log.debug("fixed-point Cayley did not converge (last update %.2e); using exact solve", delta)
    eye = np.eye(r.shape[0])
    return solve(eye - half, (eye + half) @ r)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    residual: float


@dataclass
class OptimState:
    step: int
    rotations: RotationSet
    history: list[StepRecord] = field(default_factory=list)


def optimize_rotations(
    model: ToyTransformer,
    calib: CalibrationSet,
    sites: QuantSites,
    init: RotationSet,
    cfg: CayleyConfig = CayleyConfig(),
    on_step: Callable[[StepRecord], None] | None = None,
) -> tuple[RotationSet, list[StepRecord]]:
    """Cayley SGD on R1 and every R2 against the quantized calibration loss.

    Each step takes one full-batch straight-through gradient, forms the
    tangent direction from −G and applies a Cayley update with
    lr(t) = lr0·(1 − t/T). Weights are never modified. The history holds one
    record per step (loss before the update) plus a final record at step T.
    """
    if not model.is_folded():
        raise ModelError("optimize_rotations needs an RMSNorm-folded model")
    init.check(1e-8)
    state = OptimState(0, init.copy())
    buf_r1 = np.zeros_like(init.r1)
    buf_r2 = [np.zeros_like(r) for r in init.r2]

    def update(r, g, buf, lr):
        direction = -g + cfg.momentum * buf if cfg.momentum else -g
        y = project_gradient(direction, r)
        new = cayley_step(r, y, lr, cfg)
        return new, (y @ r if cfg.momentum else buf)

    def record(step, lr, loss):
        rec = StepRecord(step, lr, loss, state.rotations.residual())
        if rec.residual > ABORT_RESIDUAL:
            raise OrthonormalityError(f"step {step}: orthonormality residual {rec.residual:.3e} > {ABORT_RESIDUAL:g}")
        state.history.append(rec)
        if on_step is not None:
            on_step(rec)

    for t in range(cfg.iterations):
        lr = cfg.lr(t)
        rot = state.rotations
        loss, g1, g2 = loss_and_grad_rotations(model, calib, sites, rot)
        record(t, lr, loss)
        r1, buf_r1 = update(rot.r1, g1, buf_r1, lr)
        r2 = []
        for i, (r, g) in enumerate(zip(rot.r2, g2)):
            new, buf_r2[i] = update(r, g, buf_r2[i], lr)
            r2.append(new)
        state.rotations = RotationSet(r1, r2, rot.r3_enabled, rot.r4_enabled)
        state.step = t + 1
    record(cfg.iterations, 0.0, calibration_loss(model, calib, sites, state.rotations))
    return state.rotations, state.history


def random_walk(r: np.ndarray, steps: int, rng: np.random.Generator, lr: float, cfg: CayleyConfig = CayleyConfig(),
                grad_scale: float = 1.0) -> tuple[np.ndarray, float]:
    """Apply ``steps`` Cayley updates driven by random gradients; returns (R, worst residual)."""
    worst = 0.0
    n = r.shape[0]
    for _ in range(steps):
        g = rng.standard_normal((n, n)) * grad_scale
        r = cayley_step(r, project_gradient(g, r), lr, cfg)
        worst = max(worst, orthonormality_residual(r))
    return r, worst
