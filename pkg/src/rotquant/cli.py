"""Command-line driver for the rotation + quantization workflow.

    rotquant <subcommand> --config run.json [--seed N] [--out DIR] [--trials N] [--format csv|json]

Subcommands: gen-model, pretrain, calibrate-stats, optimize, merge, quantize,
eval, pipeline, variance. Exit codes: 0 success, 2 config error, 3 numeric
invariant violation, 4 IO error. Outputs are byte-identical for identical
configs and seeds; nothing depends on wall-clock time or ambient entropy.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from . import config as cfgmod
from .archive import ArchiveError
from .cayley import ABORT_RESIDUAL, CayleyError, OrthonormalityError
from .config import ConfigError, RunConfig
from .data import MarkovSource, TokenFileError, load_tokens
from .experiments import build_model, evaluate, quantize_weights
from .linalg import LinalgError, make_rng
from .metrics import MetricsError, layer_sweep
from .model import CalibrationSet, ModelError, QuantSites, ToyTransformer, calibration_loss, fold_rmsnorm, load_model, save_model
from .quant import QuantError
from .report import LOSS_NOTE, ExperimentReport, LayerRow, ReportError, TrialRow
from .rotate import RotationError, RotationSet, load_rotations, make_rotation_set, merge_rotations, save_rotations
from .train import pretrain

log = logging.getLogger("rotquant")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("gen-model", "pretrain", "calibrate-stats", "optimize", "merge", "quantize", "eval", "pipeline", "variance")


class StageError(Exception):
    """A failure inside a named stage; keeps the original exception as ``cause``."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def exit_code(exc: BaseException) -> int:
    exc = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(exc, (ConfigError, ModelError)):
        return EXIT_CONFIG
    if isinstance(exc, (OrthonormalityError, CayleyError, LinalgError, RotationError, QuantError, MetricsError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, ArchiveError, TokenFileError, ReportError)):
        return EXIT_IO
    return 1


def check_residual(rot: RotationSet, where: str) -> float:
    """Log the orthonormality residual and abort above the fail-loud threshold."""
    res = rot.residual()
    log.info("%s: orthonormality residual %.3e", where, res)
    if res > ABORT_RESIDUAL:
        raise OrthonormalityError(f"{where}: orthonormality residual {res:.3e} > {ABORT_RESIDUAL:g}")
    return res


# -- shared building blocks -------------------------------------------------


def generate_model(rc: RunConfig, with_pretrain: bool = True) -> tuple[ToyTransformer, list[float]]:
    ms = rc.model
    model = build_model(ms.config, rc.seed, 0, ms.outlier_channels, ms.outlier_scale, ms.weight_outlier_scale,
                        ms.embed_std)
    losses: list[float] = []
    if with_pretrain and ms.pretrain_steps > 0:
        model, losses = run_pretrain(rc, model)
    return model, losses


def run_pretrain(rc: RunConfig, model: ToyTransformer) -> tuple[ToyTransformer, list[float]]:
    ms = rc.model
    source = MarkovSource(model.config.vocab, rc.seed)
    return pretrain(model, source, ms.pretrain_steps, make_rng(rc.seed, 2), batch=ms.pretrain_batch, lr=ms.pretrain_lr)


def source_model(rc: RunConfig) -> ToyTransformer:
    if rc.model.path is not None:
        return load_model(rc.model.path)
    return generate_model(rc)[0]


def datasets(rc: RunConfig, model: ToyTransformer) -> tuple[CalibrationSet, CalibrationSet]:
    c, dc = model.config, rc.calibration
    source = MarkovSource(c.vocab, rc.seed)
    if dc.path is not None:
        calib = load_tokens(dc.path, c.vocab)
    else:
        calib = source.calibration_set(dc.n_sequences, dc.seq_len, make_rng(rc.seed, 4))
    if dc.eval_path is not None:
        evalset = load_tokens(dc.eval_path, c.vocab)
    else:
        evalset = source.calibration_set(dc.n_eval, dc.seq_len, make_rng(rc.seed, 5))
    calib.validate(c)
    evalset.validate(c)
    return calib, evalset


def initial_rotation(rc: RunConfig, model: ToyTransformer) -> RotationSet:
    if rc.rotation.path is not None:
        rot = load_rotations(rc.rotation.path)
    else:
        rot = make_rotation_set(model.config, rc.rotation.kind, make_rng(rc.rotation_seed, 7), rc.rotation.r3,
                                rc.rotation.r4)
    check_residual(rot, "initial rotation")
    return rot


def quantize_merged(merged: ToyTransformer, rc: RunConfig, sites: QuantSites, calib) -> ToyTransformer:
    return quantize_weights(merged, sites.weights, rc.weight_method, calib, rc.gptq)


def measure(index: int, seed: int, kind: str, fp_model: ToyTransformer, merged: ToyTransformer,
            quantized: ToyTransformer, sites: QuantSites, evalset: CalibrationSet,
            pre_loss: float | None = None) -> tuple[TrialRow, list[LayerRow]]:
    """Quantized loss/SNR of one configuration plus its per-layer statistics."""
    ev = evaluate(fp_model, quantized, sites, evalset)
    row = TrialRow(index, seed, kind, ev["loss"] if pre_loss is None else pre_loss, ev["loss"], ev["snr_db"])
    stats = layer_sweep(merged, evalset.batches()[0], sites)
    return row, [LayerRow(index, s.site, s.kurtosis, s.snr_db, s.mse) for s in stats]


def reference_row(index: int, seed: int, model: ToyTransformer, evalset) -> TrialRow:
    loss = calibration_loss(model, evalset)
    return TrialRow(index, seed, "full_precision", loss, loss, float("inf"))


def metadata(rc: RunConfig, command: str) -> dict:
    return {
        "command": command,
        "config": rc.to_dict() | {"out": None},
        "loss_metric": LOSS_NOTE,
        "weight_method": rc.weight_method,
        "learn_weight_quant": rc.learn_weight_quant,
    }


def learn(rc: RunConfig, model, calib, sites: QuantSites, init: RotationSet):
    from .cayley import optimize_rotations

    learn_sites = sites if rc.learn_weight_quant else sites.without_weights()
    rot, hist = optimize_rotations(model, calib, learn_sites, init, rc.cayley)
    check_residual(rot, "learned rotation")
    return rot, hist


def history_csv(hist) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "loss", "residual"])
    for h in hist:
        w.writerow([h.step, h.lr, h.loss, h.residual])
    return buf.getvalue()


def losses_csv(losses) -> str:
    return "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(losses))


class Outputs:
    """Collects written paths so the command can list them on stdout."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.paths: list[Path] = []

    def model(self, name, model):
        p = self.dir / name
        save_model(p, model)
        self.paths.append(p)

    def rotations(self, name, rot):
        p = self.dir / name
        save_rotations(p, rot)
        self.paths.append(p)

    def text(self, name, text):
        p = self.dir / name
        p.write_text(text, encoding="utf-8", newline="")
        self.paths.append(p)

    def report(self, rep: ExperimentReport, fmt: str):
        self.paths.extend(rep.write(self.dir, fmt))


# -- subcommands -------------------------------------------------------------


def cmd_gen_model(rc: RunConfig, out: Outputs, fmt: str) -> None:
    with stage("generate"):
        model, losses = generate_model(rc)
    with stage("write"):
        out.model("model.spnq", model)
        if losses:
            out.text("pretrain_losses.csv", losses_csv(losses))


def cmd_pretrain(rc: RunConfig, out: Outputs, fmt: str) -> None:
    with stage("load"):
        model = load_model(rc.model.path) if rc.model.path else generate_model(rc, with_pretrain=False)[0]
    if rc.model.pretrain_steps < 1:
        raise ConfigError("pretrain needs model.pretrain_steps >= 1")
    with stage("pretrain"):
        model, losses = run_pretrain(rc, model)
    log.info("final training loss %.4f", losses[-1])
    with stage("write"):
        out.model("model.spnq", model)
        out.text("pretrain_losses.csv", losses_csv(losses))


def cmd_calibrate_stats(rc: RunConfig, out: Outputs, fmt: str) -> None:
    sites = rc.sites.build()
    with stage("load"):
        model = fold_rmsnorm(source_model(rc))
        calib, evalset = datasets(rc, model)
        rot = initial_rotation(rc, model)
    with stage("measure"):
        rows, layers = [reference_row(0, rc.seed, model, evalset)], []
        for idx, (kind, merged) in enumerate((("none", model), (rc.rotation.kind, merge_rotations(model, rot))), 1):
            r, ls = measure(idx, rc.rotation_seed, kind, model, merged, quantize_merged(merged, rc, sites, calib),
                            sites, evalset)
            rows.append(r)
            layers.extend(ls)
    out.report(ExperimentReport("calibrate-stats", metadata(rc, "calibrate-stats"), rows, layers), fmt)


def cmd_optimize(rc: RunConfig, out: Outputs, fmt: str) -> None:
    sites = rc.sites.build()
    with stage("fold"):
        model = fold_rmsnorm(source_model(rc))
        calib, _ = datasets(rc, model)
        init = initial_rotation(rc, model)
    with stage("optimize"):
        rot, hist = learn(rc, model, calib, sites, init)
    with stage("write"):
        out.rotations("rotations.spnq", rot)
        out.text("history.csv", history_csv(hist))


def cmd_merge(rc: RunConfig, out: Outputs, fmt: str) -> None:
    with stage("fold"):
        model = fold_rmsnorm(source_model(rc))
        rot = initial_rotation(rc, model)
    with stage("merge"):
        merged = merge_rotations(model, rot)
        check_residual(rot, "merge")
    with stage("write"):
        out.model("merged_model.spnq", merged)


def cmd_quantize(rc: RunConfig, out: Outputs, fmt: str) -> None:
    sites = rc.sites.build()
    with stage("load"):
        model = source_model(rc)
        calib, _ = datasets(rc, model)
    with stage("quantize"):
        q = quantize_merged(model, rc, sites, calib)
    with stage("write"):
        out.model("quantized_model.spnq", q)


def cmd_eval(rc: RunConfig, out: Outputs, fmt: str) -> None:
    sites = rc.sites.build()
    with stage("load"):
        model = source_model(rc)
        _, evalset = datasets(rc, model)
    with stage("eval"):
        ref = reference_row(0, rc.seed, model, evalset)
        row, layers = measure(1, rc.seed, "as_loaded", model, model, model, sites, evalset)
    out.report(ExperimentReport("eval", metadata(rc, "eval"), [ref, row], layers), fmt)


def cmd_pipeline(rc: RunConfig, out: Outputs, fmt: str) -> None:
    """fold → optimize → merge → GPTQ/RTN → evaluate, with every stage named on failure."""
    sites = rc.sites.build()
    with stage("load"):
        raw = source_model(rc)
        calib, evalset = datasets(rc, raw)
    with stage("fold"):
        model = fold_rmsnorm(raw)
        init = initial_rotation(rc, model)
    rows, layers = [reference_row(0, rc.seed, model, evalset)], []
    with stage("baseline"):
        for idx, (kind, rot) in enumerate((("none", None), (rc.rotation.kind, init)), 1):
            merged = merge_rotations(model, rot) if rot is not None else model
            r, ls = measure(idx, rc.rotation_seed, kind, model, merged, quantize_merged(merged, rc, sites, calib),
                            sites, evalset)
            rows.append(r)
            layers.extend(ls)
    with stage("optimize"):
        learned, hist = learn(rc, model, calib, sites, init)
    with stage("merge"):
        check_residual(learned, "merge (pre)")
        merged = merge_rotations(model, learned)
        check_residual(learned, "merge (post)")
    with stage("quantize"):
        quantized = quantize_merged(merged, rc, sites, calib)
    with stage("eval"):
        r, ls = measure(3, rc.rotation_seed, "learned", model, merged, quantized, sites, evalset,
                        pre_loss=rows[2].post_loss)
        rows.append(r)
        layers.extend(ls)
    with stage("write"):
        out.report(ExperimentReport("pipeline", metadata(rc, "pipeline"), rows, layers), fmt)
        out.rotations("rotations.spnq", learned)
        out.model("rotated_model.spnq", merged)
        out.model("quantized_model.spnq", quantized)
        out.text("history.csv", history_csv(hist))


def _variance_trial(args) -> tuple[TrialRow, list[LayerRow]]:
    rc, model, calib, evalset, sites, index, seed = args
    rot = make_rotation_set(model.config, rc.rotation.kind, make_rng(seed), rc.rotation.r3, rc.rotation.r4)
    merged = merge_rotations(model, rot)
    return measure(index, seed, rc.rotation.kind, model, merged, quantize_merged(merged, rc, sites, calib), sites,
                   evalset)


def cmd_variance(rc: RunConfig, out: Outputs, fmt: str) -> None:
    """T random rotations of the configured kind plus one Cayley-learned rotation."""
    if rc.trials < 2:
        raise ConfigError(f"variance needs trials >= 2, got {rc.trials}")
    sites = rc.sites.build()
    with stage("load"):
        raw = source_model(rc)
        calib, evalset = datasets(rc, raw)
        model = fold_rmsnorm(raw)
    seeds = rc.seeds_for_trials()
    jobs = [(rc, model, calib, evalset, sites, i, s) for i, s in enumerate(seeds)]
    with stage("random trials"):
        if rc.workers > 1:
            with ProcessPoolExecutor(max_workers=rc.workers) as pool:
                results = list(pool.map(_variance_trial, jobs))
        else:
            results = [_variance_trial(j) for j in jobs]
    results.sort(key=lambda r: r[0].index)
    rows = [r for r, _ in results]
    layers = [lr for _, ls in results for lr in ls]
    T = len(seeds)
    with stage("learn"):
        init = initial_rotation(rc, model)
        init_merged = merge_rotations(model, init)
        pre = evaluate(model, quantize_merged(init_merged, rc, sites, calib), sites, evalset)["loss"]
        learned, _ = learn(rc, model, calib, sites, init)
        merged = merge_rotations(model, learned)
        r, ls = measure(T, rc.rotation_seed, "learned", model, merged, quantize_merged(merged, rc, sites, calib),
                        sites, evalset, pre_loss=pre)
        rows.append(r)
        layers.extend(ls)
    with stage("baseline"):
        r, ls = measure(T + 1, rc.seed, "none", model, model, quantize_merged(model, rc, sites, calib), sites, evalset)
        rows += [r, reference_row(T + 2, rc.seed, model, evalset)]
        layers.extend(ls)
    rep = ExperimentReport("variance", metadata(rc, "variance"), rows, layers)
    s = rep.summary
    log.info("spread %.4g, learned rank %d of %d", s["spread"], s["learned_rank"], T + 1)
    with stage("write"):
        out.report(rep, fmt)


HANDLERS = {
    "gen-model": cmd_gen_model, "pretrain": cmd_pretrain, "calibrate-stats": cmd_calibrate_stats,
    "optimize": cmd_optimize, "merge": cmd_merge, "quantize": cmd_quantize, "eval": cmd_eval,
    "pipeline": cmd_pipeline, "variance": cmd_variance,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotquant", description="Rotation-aware post-training quantization toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--trials", type=int, help="override the number of variance trials")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = cfgmod.load(args.config, seed=args.seed, out=args.out, trials=args.trials)
        out = Outputs(rc.out)
        HANDLERS[args.command](rc, out, args.format)
    except Exception as e:
        code = exit_code(e)
        if code == 1:
            raise
        print(f"rotquant {args.command}: error: {e}", file=sys.stderr)
        return code
    for p in out.paths:
        print(f"wrote {p}")
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
