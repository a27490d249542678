"""Experiment reports: per-trial and per-layer rows plus a derived summary.

Reports are written either as two CSV tables with a JSON summary
(``trials.csv``, ``layers.csv``, ``summary.json``) or as one ``report.json``.
Floats are written with ``repr`` so they parse back bit-exactly; non-finite
values are written as the strings ``"inf"``, ``"-inf"`` and ``"nan"``.

CSV columns:

    trials.csv  index, seed, kind, pre_loss, post_loss, snr_db
    layers.csv  trial, site, kurtosis, snr_db, mse

The summary is a pure function of the trial rows and is recomputed and
compared on load, so a hand-edited or truncated report is rejected.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .metrics import summarize

REFERENCE_KINDS = ("full_precision", "none")
LEARNED = "learned"
LOSS_NOTE = ("quantized loss is mean next-token cross-entropy in nats on held-out synthetic tokens; "
             "it stands in for zero-shot accuracy, which has no desk-scale counterpart")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class TrialRow:
    index: int
    seed: int
    kind: str
    pre_loss: float
    post_loss: float
    snr_db: float


@dataclass(frozen=True)
class LayerRow:
    trial: int
    site: str
    kurtosis: float
    snr_db: float
    mse: float


def compute_summary(trials: list[TrialRow]) -> dict:
    """Loss statistics over the rotation trials, per kind, and the learned rank.

    Reference rows (full precision, no rotation) are excluded from the pooled
    statistics. ``learned_rank`` is 1 + the number of random trials with a
    strictly lower loss than the learned rotation.
    """
    rotated = [t for t in trials if t.kind not in REFERENCE_KINDS and t.kind != LEARNED]
    out: dict = {"n_trials": len(trials)}
    if rotated:
        losses = [t.post_loss for t in rotated]
        out["loss"] = summarize(losses)
        out["spread"] = out["loss"]["max"] - out["loss"]["min"]
    by_kind: dict = {}
    for kind in sorted({t.kind for t in trials}):
        by_kind[kind] = summarize([t.post_loss for t in trials if t.kind == kind])
    out["by_kind"] = by_kind
    learned = [t for t in trials if t.kind == LEARNED]
    if learned and rotated:
        ll = learned[0].post_loss
        out["learned_loss"] = ll
        out["learned_rank"] = 1 + sum(t.post_loss < ll for t in rotated)
        ordered = sorted(t.post_loss for t in rotated)
        mid = len(ordered) // 2
        out["median_random_loss"] = ordered[mid] if len(ordered) % 2 else 0.5 * (ordered[mid - 1] + ordered[mid])
    return out


@dataclass
class ExperimentReport:
    command: str
    metadata: dict
    trials: list[TrialRow] = field(default_factory=list)
    layers: list[LayerRow] = field(default_factory=list)

    def __post_init__(self):
        self.trials = sorted(self.trials, key=lambda t: t.index)

    @property
    def summary(self) -> dict:
        return compute_summary(self.trials)

    def to_json_dict(self) -> dict:
        return {
            "command": self.command,
            "metadata": self.metadata,
            "summary": self.summary,
            "trials": [_encode_row(r) for r in self.trials],
            "layers": [_encode_row(r) for r in self.layers],
        }

    def emit(self, fmt: str = "csv") -> dict[str, str]:
        """Serialize to ``{file name: text}``."""
        if fmt == "json":
            return {"report.json": _dumps(self.to_json_dict())}
        if fmt != "csv":
            raise ReportError(f"unknown report format {fmt!r}")
        head = {"command": self.command, "metadata": self.metadata, "summary": self.summary}
        return {
            "trials.csv": _csv(TrialRow, self.trials),
            "layers.csv": _csv(LayerRow, self.layers),
            "summary.json": _dumps(head),
        }

    def write(self, out_dir, fmt: str = "csv") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, text in self.emit(fmt).items():
            p = out_dir / name
            p.write_text(text, encoding="utf-8", newline="")
            paths.append(p)
        return paths


def parse(files: dict[str, str]) -> ExperimentReport:
    """Inverse of :meth:`ExperimentReport.emit`; verifies the stored summary."""
    if "report.json" in files:
        doc = json.loads(files["report.json"])
        trials = [_decode_row(TrialRow, r) for r in doc["trials"]]
        layers = [_decode_row(LayerRow, r) for r in doc["layers"]]
    else:
        try:
            doc = json.loads(files["summary.json"])
            trials = [_decode_row(TrialRow, r) for r in csv.DictReader(io.StringIO(files["trials.csv"]))]
            layers = [_decode_row(LayerRow, r) for r in csv.DictReader(io.StringIO(files["layers.csv"]))]
        except KeyError as e:
            raise ReportError(f"report is missing {e.args[0]}") from None
    rep = ExperimentReport(doc["command"], _decode_floats(doc["metadata"]), trials, layers)
    stored = _decode_floats(doc["summary"])
    if not _same(stored, rep.summary):
        raise ReportError("stored summary does not match the per-trial rows")
    return rep


def read(out_dir) -> ExperimentReport:
    out_dir = Path(out_dir)
    names = ["report.json"] if (out_dir / "report.json").exists() else ["trials.csv", "layers.csv", "summary.json"]
    files = {}
    for n in names:
        try:
            files[n] = (out_dir / n).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ReportError(f"{out_dir}: missing {n}") from None
    return parse(files)


def _fmt(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _encode_row(row) -> dict:
    return {k: _fmt(v) for k, v in asdict(row).items()}


def _decode_row(cls, raw: dict):
    kw = {}
    for f in fields(cls):
        if f.name not in raw:
            raise ReportError(f"{cls.__name__} row is missing column {f.name!r}")
        v = raw[f.name]
        if f.type in ("float", float):
            kw[f.name] = float(v)
        elif f.type in ("int", int):
            kw[f.name] = int(v)
        else:
            kw[f.name] = str(v)
    return cls(**kw)


def _decode_floats(obj):
    if isinstance(obj, dict):
        return {k: _decode_floats(v) for k, v in obj.items()}
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


def _encode_floats(obj):
    if isinstance(obj, dict):
        return {k: _encode_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_encode_floats(v) for v in obj]
    return _fmt(obj)


def _same(a, b) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def _dumps(obj) -> str:
    return json.dumps(_encode_floats(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv(cls, rows) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(cls)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    return buf.getvalue()
