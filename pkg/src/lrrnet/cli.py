"""Command-line entry point: ``lrrnet <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
input files), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import lowrank, metrics, synth
from .io import atomic_write_text, load_image, save_tensor
from .model import ModelConfig, build, build_for_gradcheck, load_checkpoint, param_count
from .train import Dataset, TrainConfig, evaluate, split, train_loop

log = logging.getLogger("lrrnet")

PRESETS = ("default", "tiny", "micro")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config resolution: flags > --config (JSON file or preset) > defaults
# ---------------------------------------------------------------------------


def _load_config_arg(value: str | None) -> dict:
    """A preset name gives ``{"model": preset}``; anything else is read as JSON."""
    if value is None:
        return {}
    if value in PRESETS:
        return {"model": ModelConfig.preset(value).to_dict()}
    path = Path(value)
    if not path.exists():
        raise UsageError(f"--config: {value!r} is neither a preset ({', '.join(PRESETS)}) nor an existing file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {value}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"--config {value}: top level must be an object")
    if "preset" in data:
        base = ModelConfig.preset(data.pop("preset")).to_dict()
        data["model"] = {**base, **data.get("model", {})}
    return data


def _resolve(cls, section: str, file_cfg: dict, args, rename: dict | None = None, base: dict | None = None):
    """Build ``cls`` from defaults, then the config file section, then explicit flags."""
    rename = rename or {}
    names = [f.name for f in fields(cls)]
    values = dict(base or {})
    sec = file_cfg.get(section, {})
    unknown = set(sec) - set(names)
    if unknown:
        raise UsageError(f"config section {section!r}: unknown keys {sorted(unknown)}")
    values.update(sec)
    for name in names:
        dest = rename.get(name, name)
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    if "channels" in values:
        values["channels"] = tuple(values["channels"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} configuration: {exc}") from exc


def _echo(resolved: dict):
    print(json.dumps(resolved, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# flag groups
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON config file with optional sections scene/model/train/patch, or a model preset name (default, tiny, micro)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity on stderr")


def _add_scene(p):
    g = p.add_argument_group("scene")
    g.add_argument("--H", type=int, help="image height in pixels (>= 32)")
    g.add_argument("--W", type=int, help="image width in pixels (>= 32)")
    g.add_argument("--bg-rank", type=int, help="rank of the synthetic background")
    g.add_argument("--bg-smooth", type=float, help="Gaussian smoothing of background factors, pixels")
    g.add_argument("--n-targets", type=int, help="targets per scene")
    g.add_argument("--target-amp", type=float, help="target peak amplitude in (0, 1]")
    g.add_argument("--target-sigma", type=float, help="target Gaussian width, pixels")
    g.add_argument("--noise-sigma", type=float, help="noise standard deviation on the 0-255 scale")
    g.add_argument("--mask-frac", type=float, help="mask threshold as a fraction of the peak")


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=PRESETS, help="model preset used as the base before other model flags")
    g.add_argument("--stages", type=int, help="number of encoder/decoder stages")
    g.add_argument("--channels", type=int, nargs="+", help="channel width per stage, doubling")
    g.add_argument("--resblocks-per-encoder-stage", type=int, help="ResBlocks per encoder stage")
    g.add_argument("--attention-blocks", type=int, help="self-attention blocks at the bottleneck (0, 1 or 2)")
    g.add_argument("--groupnorm-groups", type=int, help="preferred GroupNorm group count")
    g.add_argument("--dense-skips", dest="dense_skips", action="store_true", default=None, help="concatenate every encoder ResBlock output into the decoder")
    g.add_argument("--no-dense-skips", dest="dense_skips", action="store_false", help="use only the last encoder ResBlock output per stage")
    g.add_argument("--subtraction-resblocks", type=int, help="ResBlocks in the subtraction module")
    g.add_argument("--model-seed", type=int, help="parameter initialisation seed")
    g.add_argument("--dtype", choices=["float32", "float64"], help="parameter precision (default float32)")


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--lr0", type=float, help="initial learning rate")
    g.add_argument("--beta1", type=float, help="Adam first-moment decay")
    g.add_argument("--beta2", type=float, help="Adam second-moment decay")
    g.add_argument("--eps", type=float, help="Adam epsilon")
    g.add_argument("--weight-decay", type=float, help="L2 weight decay added to gradients")
    g.add_argument("--batch", type=int, help="mini-batch size")
    g.add_argument("--epochs", type=int, help="number of epochs")
    g.add_argument("--poly-power", type=float, help="exponent of the poly learning-rate decay")
    g.add_argument("--lambda", dest="lam", type=float, help="weight of the reconstruction MSE term")
    g.add_argument("--eval-tau", type=float, help="binarisation threshold for validation metrics")
    g.add_argument("--val-fraction", type=float, help="fraction of scenes held out by index hash")
    g.add_argument("--eval-every", type=int, help="validate every N epochs (and after the last)")
    g.add_argument("--grad-clip", type=float, help="global gradient-norm clip (off when omitted)")


def _add_patch(p):
    g = p.add_argument_group("patch-image")
    g.add_argument("--patch", type=int, help="patch side length")
    g.add_argument("--stride", type=int, help="sliding-window stride")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lrrnet", description="Low-rank reconstruction network for infrared small target detection: synthetic data, training, evaluation and an RPCA baseline.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-gen", help="write a synthetic scene dataset", description="Write img_%%05d.pgm / mask_%%05d.pgm pairs and manifest.json.")
    _add_common(p)
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="base seed; every scene seed is derived from it")
    p.add_argument("--min-scr", type=float, help="redraw scenes until every target reaches this SCR")
    _add_scene(p)

    p = sub.add_parser("train", help="train a model on a dataset directory", description="Train on a synth-gen directory; writes history.csv, best.ckpt, final.ckpt and config.json.")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory produced by synth-gen")
    p.add_argument("--out", required=True, help="output directory for checkpoints and history")
    p.add_argument("--seed", type=int, help="shuffle and split seed")
    _add_model(p)
    _add_train(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint", description="Pixel and object metrics plus ROC over 101 thresholds.")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=["all", "val", "train"], default="all", help="which part of the dataset to score")
    p.add_argument("--seed", type=int, default=0, help="split seed (must match training to score its validation part)")
    p.add_argument("--val-fraction", type=float, default=0.2, help="validation fraction used to reproduce the split")
    p.add_argument("--tau", type=float, default=0.5, help="binarisation threshold")
    p.add_argument("--out", required=True, help="output directory for metrics.csv and roc.csv")

    p = sub.add_parser("rpca-baseline", help="patch-image RPCA detector on one image", description="Run the RPCA baseline on a PGM; writes an LRRT confidence map and a stats JSON.")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True, help="input PGM image")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.lrrt and <out>.json")
    _add_patch(p)
    p.add_argument("--lam", type=float, help="sparsity weight (default 1/sqrt(max(m, n)))")
    p.add_argument("--tol", type=float, default=1e-7, help="relative residual stopping tolerance")
    p.add_argument("--max-iter", type=int, default=500, help="iteration cap")
    p.add_argument("--tau-rel", type=float, default=0.1, help="normalisation guard relative to the image range")

    p = sub.add_parser("svspectrum", help="singular spectrum of an image's patch-image", description="Normalised singular values of the patch-image and the 99%% energy rank.")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True, help="input PGM image")
    p.add_argument("--out", required=True, help="output CSV with columns index,sigma")
    _add_patch(p)
    p.add_argument("--energy", type=float, default=0.99, help="energy fraction for the reported rank")

    p = sub.add_parser("roc", help="ROC curve as CSV and SVG", description="Sweep thresholds for a checkpoint on a dataset, or redraw an existing roc.csv.")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (with --data)")
    p.add_argument("--data", help="dataset directory (with --checkpoint)")
    p.add_argument("--from-csv", help="existing roc.csv with columns tau,fa,pd to plot instead")
    p.add_argument("--thresholds", type=int, default=101, help="number of thresholds on linspace(1, 0)")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.svg")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network", description="Compare tape gradients of the full network with central differences in float64.")
    _add_common(p)
    p.add_argument("--size", type=int, default=16, help="input side length (multiple of 2**stages)")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument("--max-coords", type=int, default=300, help="parameter coordinates probed")
    p.add_argument("--tol", type=float, default=1e-4, help="pass threshold on the max relative error")
    p.add_argument("--seed", type=int, default=0, help="seed for the input and probed coordinates")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _scene_cfg(args, file_cfg) -> synth.SceneConfig:
    return _resolve(synth.SceneConfig, "scene", file_cfg, args, rename={"seed": "_no_such_flag"})


def _model_cfg(args, file_cfg) -> ModelConfig:
    base = ModelConfig.preset(args.preset).to_dict() if getattr(args, "preset", None) else None
    return _resolve(ModelConfig, "model", file_cfg, args, rename={"seed": "model_seed"}, base=base)


def _patch_cfg(args, file_cfg) -> lowrank.PatchConfig:
    return _resolve(lowrank.PatchConfig, "patch", file_cfg, args)


def _load_data(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"dataset directory {d} does not exist")
    images, masks, _ = synth.load_dataset(d)
    if not images:
        raise UsageError(f"no img_*.pgm files in {d}")
    return Dataset(np.stack(images), np.stack(masks))


def cmd_synth_gen(args, file_cfg):
    cfg = _scene_cfg(args, file_cfg)
    cfg = synth.SceneConfig(**{**cfg.to_dict(), "seed": args.seed})
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    _echo({"command": "synth-gen", "scene": cfg.to_dict(), "count": args.count, "out": args.out, "min_scr": args.min_scr})
    manifest = synth.gen_dataset(cfg, args.count, args.out, min_scr=args.min_scr)
    scrs = [s["scr"] for s in manifest["scenes"]]
    if scrs:
        log.info("wrote %d scenes, SCR min %.2f median %.2f", len(scrs), min(scrs), float(np.median(scrs)))
    return 0


def cmd_train(args, file_cfg):
    mcfg = _model_cfg(args, file_cfg)
    tcfg = _resolve(TrainConfig, "train", file_cfg, args)
    dtype = args.dtype or file_cfg.get("dtype", "float32")
    _echo({"command": "train", "model": mcfg.to_dict(), "train": tcfg.to_dict(), "dtype": dtype, "data": args.data, "out": args.out})
    data = _load_data(args.data)
    model = build(mcfg, np.dtype(dtype))
    log.info("model with %d parameters", param_count(model))
    out = Path(args.out)
    atomic_write_text(out / "config.json", json.dumps({"model": mcfg.to_dict(), "train": tcfg.to_dict(), "dtype": dtype}, indent=2, sort_keys=True) + "\n")
    res = train_loop(model, data, tcfg, out_dir=out)
    log.info("best validation IoU %.4f at epoch %d (%.1fs)", res.best_val_iou, res.best_epoch, res.seconds)
    return 0


def cmd_eval(args, file_cfg):
    _echo({"command": "eval", "checkpoint": args.checkpoint, "data": args.data, "split": args.split, "seed": args.seed, "val_fraction": args.val_fraction, "tau": args.tau})
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    model = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    if args.split != "all":
        tr, va = split(data, args.val_fraction, args.seed)
        data = va if args.split == "val" else tr
    rep = evaluate(model, data, args.tau)
    out = Path(args.out)
    rep.save(out / "metrics.csv", out / "roc.csv")
    log.info("IoU %.4f nIoU %.4f Pd %.4f Fa %.3f AUC %.4f", rep.iou, rep.niou, rep.pd, rep.fa, rep.auc)
    return 0


def _read_input(path):
    if not Path(path).exists():
        raise UsageError(f"input {path} does not exist")
    try:
        return load_image(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_rpca(args, file_cfg):
    pcfg = _patch_cfg(args, file_cfg)
    _echo({"command": "rpca-baseline", "patch": {"patch": pcfg.patch, "stride": pcfg.stride}, "lam": args.lam, "tol": args.tol, "max_iter": args.max_iter, "tau_rel": args.tau_rel, "in": args.input})
    img = _read_input(args.input)
    try:
        pcfg.check(*img.shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    conf, res = lowrank.rpca_detect(img, pcfg, tau_rel=args.tau_rel, lam=args.lam, tol=args.tol, max_iter=args.max_iter)
    stats = {**res.stats(), "seconds": time.perf_counter() - t0, "image_shape": list(img.shape)}
    save_tensor(args.out + ".lrrt", conf)
    atomic_write_text(args.out + ".json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    log.info("rpca: %d iterations, rank %d, residual %.2e", res.iterations, res.rank, res.residual)
    return 0


def cmd_svspectrum(args, file_cfg):
    pcfg = _patch_cfg(args, file_cfg)
    _echo({"command": "svspectrum", "patch": {"patch": pcfg.patch, "stride": pcfg.stride}, "energy": args.energy, "in": args.input})
    img = _read_input(args.input)
    try:
        sv = lowrank.singular_spectrum(img, pcfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    k = lowrank.energy_rank(sv, args.energy)
    lines = ["index,sigma"] + [f"{i},{float(s)!r}" for i, s in enumerate(sv)]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"energy_rank({args.energy}) = {k}")
    return 0


def roc_svg(rows, width: int = 360, height: int = 300, pad: int = 40) -> str:
    """Pd against normalised Fa as a single SVG polyline."""
    pts = sorted((float(fa), float(pd)) for _, fa, pd in rows)
    fa_max = max((p[0] for p in pts), default=0.0) or 1.0
    w, h = width - 2 * pad, height - 2 * pad
    coords = " ".join(f"{pad + w * fa / fa_max:.2f},{pad + h * (1 - pd):.2f}" for fa, pd in pts)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">\n'
        f'<rect x="{pad}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="#888"/>\n'
        f'<polyline fill="none" stroke="#c03" stroke-width="2" points="{coords}"/>\n'
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">Fa / {fa_max:.4g}e-6</text>\n'
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" text-anchor="middle">Pd</text>\n'
        "</svg>\n"
    )


def cmd_roc(args, file_cfg):
    _echo({"command": "roc", "checkpoint": args.checkpoint, "data": args.data, "from_csv": args.from_csv, "thresholds": args.thresholds})
    if args.from_csv:
        if not Path(args.from_csv).exists():
            raise UsageError(f"{args.from_csv} does not exist")
        text = Path(args.from_csv).read_text().splitlines()
        if not text or text[0].strip() != "tau,fa,pd":
            raise UsageError(f"{args.from_csv}: expected header tau,fa,pd")
        rows = [tuple(float(v) for v in line.split(",")) for line in text[1:] if line.strip()]
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("roc needs --checkpoint and --data, or --from-csv")
        if args.thresholds < 2:
            raise UsageError("--thresholds must be >= 2")
        if not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint {args.checkpoint} does not exist")
        model = load_checkpoint(args.checkpoint)
        data = _load_data(args.data)
        from .train import predict

        confs = predict(model, data.images)
        rows = metrics.roc_curve(list(confs), list(data.masks), metrics.default_thresholds(args.thresholds))
    report = metrics.MetricsReport(0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0, roc=rows)
    atomic_write_text(args.out + ".csv", report.roc_csv())
    atomic_write_text(args.out + ".svg", roc_svg(rows))
    print(f"auc = {metrics.auc_from_points([(fa, pd) for _, fa, pd in rows])!r}")
    return 0


def cmd_gradcheck(args, file_cfg):
    from .diffcore import Tensor, grad_check
    from .losses import LossWeights, total_loss
    from .model import forward

    mcfg = _resolve(ModelConfig, "model", file_cfg, argparse.Namespace())
    _echo({"command": "gradcheck", "model": mcfg.to_dict(), "size": args.size, "batch": args.batch, "max_coords": args.max_coords, "tol": args.tol, "seed": args.seed})
    if args.size % mcfg.divisor:
        raise UsageError(f"--size must be a multiple of {mcfg.divisor}")
    model = build_for_gradcheck(mcfg)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0, 1, (args.batch, 1, args.size, args.size))
    y = (rng.uniform(0, 1, x.shape) > 0.9).astype(np.float64)
    params = list(model.parameters().values())

    def f(*_):
        conf, rec = forward(model, x)
        return total_loss(conf, y, rec, x, LossWeights())[0]

    rep = grad_check(f, params, tol=args.tol, max_coords=args.max_coords, seed=args.seed)
    print(f"max_rel_err = {rep.max_rel_err:.3e} over {rep.checked} coordinates: {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 2


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "rpca-baseline": cmd_rpca,
    "svspectrum": cmd_svspectrum,
    "roc": cmd_roc,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        file_cfg = _load_config_arg(args.config)
        return COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
