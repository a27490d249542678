"""Token files and the seeded synthetic Markov token source.

Binary token files hold little-endian u32 ids with each sequence terminated
by the sentinel 0xFFFFFFFF. Text files (``.txt``) hold whitespace-separated
decimal ids, one sequence per line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import CalibrationSet

SENTINEL = 0xFFFFFFFF


class TokenFileError(ValueError):
    pass


def load_tokens(path, vocab: int | None = None) -> CalibrationSet:
    path = Path(path)
    if not path.exists():
        raise TokenFileError(f"{path}: no such token file")
    if path.suffix == ".txt":
        seqs = _parse_text(path.read_text(), vocab, path)
    else:
        seqs = _parse_binary(path.read_bytes(), vocab, path)
    if not seqs:
        raise TokenFileError(f"{path}: empty token file")
    return CalibrationSet(seqs)


def _parse_text(text: str, vocab, path) -> list[np.ndarray]:
    seqs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        ids = []
        for col, tok in enumerate(line.split()):
            try:
                v = int(tok)
            except ValueError:
                raise TokenFileError(f"{path}:{lineno}: token {col} is not a decimal id: {tok!r}") from None
            if v < 0 or (vocab is not None and v >= vocab):
                raise TokenFileError(f"{path}:{lineno}: token {col} has id {v} outside [0, {vocab})")
            ids.append(v)
        seqs.append(np.array(ids, dtype=np.int64))
    return seqs


def _parse_binary(data: bytes, vocab, path) -> list[np.ndarray]:
    if not data:
        raise TokenFileError(f"{path}: empty token file")
    if len(data) % 4:
        raise TokenFileError(f"{path}: size {len(data)} is not a multiple of 4 bytes")
    ids = np.frombuffer(data, dtype="<u4").astype(np.int64)
    if ids[-1] != SENTINEL:
        raise TokenFileError(f"{path}: malformed sentinel: last sequence is not terminated by 0xFFFFFFFF")
    if vocab is not None:
        bad = np.flatnonzero((ids != SENTINEL) & (ids >= vocab))
        if bad.size:
            off = int(bad[0])
            raise TokenFileError(f"{path}: token at offset {off} (byte {4 * off}) has id {int(ids[off])} >= vocab {vocab}")
    ends = np.flatnonzero(ids == SENTINEL)
    seqs, start = [], 0
    for e in ends:
        seqs.append(ids[start:e].copy())
        start = e + 1
    return seqs


def write_tokens(path, calib: CalibrationSet | list) -> None:
    seqs = calib.sequences if isinstance(calib, CalibrationSet) else [np.asarray(s) for s in calib]
    path = Path(path)
    if path.suffix == ".txt":
        path.write_text("".join(" ".join(str(int(t)) for t in s) + "\n" for s in seqs))
        return
    parts = []
    for s in seqs:
        parts.append(np.asarray(s, dtype="<u4").tobytes())
        parts.append(np.array([SENTINEL], dtype="<u4").tobytes())
    path.write_bytes(b"".join(parts))


class MarkovSource:
    """First-order Markov chain with a few likely successors per token."""

    def __init__(self, vocab: int, seed: int, successors: int = 4, concentration: float = 0.5):
        rng = np.random.default_rng([int(seed), 0x4D41524B])
        self.vocab = vocab
        k = min(successors, vocab)
        self.transitions = np.zeros((vocab, vocab))
        for t in range(vocab):
            nxt = rng.choice(vocab, size=k, replace=False)
            self.transitions[t, nxt] = rng.dirichlet(np.full(k, concentration))
        self.cdf = np.cumsum(self.transitions, axis=1)
        self.cdf[:, -1] = 1.0

    def sample(self, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, length), dtype=np.int64)
        out[:, 0] = rng.integers(0, self.vocab, size=n)
        for t in range(1, length):
            u = rng.random(n)
            out[:, t] = np.minimum((self.cdf[out[:, t - 1]] < u[:, None]).sum(axis=1), self.vocab - 1)
        return out

    def entropy_rate(self) -> float:
        """Mean per-token conditional entropy under a uniform state distribution (nats)."""
        p = self.transitions
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
        return float(h.mean())

    def calibration_set(self, n: int, length: int, rng: np.random.Generator) -> CalibrationSet:
        return CalibrationSet(list(self.sample(n, length, rng)))
