"""Command-line entry point: ``aescnn <command> [flags]``.

Every command writes ``effective_config.txt`` into its output directory.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attention, config, dataio, ensemble, metrics, modelb, trainer
from .config import Option, parse_bool
from .errors import ConfigError, DataError, NumericError, ShapeError

log = logging.getLogger("aescnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _profile(text: str) -> dict[int, float]:
    """'5:0.5,7:0.2' -> {5: 0.5, 7: 0.2}"""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        score, frac = part.split(":")
        out[int(score)] = float(frac)
    return out


SEED = Option("seed", int, 0, "root seed; every random stream derives from it")
BATCH = Option("batch_size", int, 16, "mini-batch size")
LR = Option("learning_rate", float, 0.01, "SGD learning rate")
MOMENTUM = Option("momentum", float, 0.9, "SGD momentum coefficient")
LABELS = Option("labels", str, "", "labels file (default: <data>/labels.csv)")


def _out(default):
    return Option("out", str, default, "output directory")


COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "synth": ("write a synthetic composition dataset", [
        Option("count", int, 200, "number of images"),
        Option("resolution", int, 192, "image resolution (192 or 227)"),
        Option("profile", str, "", "imbalance profile, e.g. '5:0.5' for half score-5 images"),
        SEED, _out("synth"),
    ]),
    "train": ("train a model B network", [
        Option("variant", str, "B4", "model variant B1, B2, B3 or B4"),
        Option("data", str, "synth", "image directory"),
        LABELS,
        Option("epochs", int, 30, "training epochs"),
        BATCH, LR, MOMENTUM, SEED,
        Option("init_checkpoint", str, "", "warm-start from this checkpoint"),
        _out("run-train"),
    ]),
    "rsrl": ("repetitive self-revised learning from a trained checkpoint", [
        Option("checkpoint", str, "run-train/model.ckpt", "starting checkpoint"),
        Option("data", str, "synth", "image directory"),
        LABELS,
        Option("iterations", int, 5, "RSRL rounds"),
        Option("drop_fraction", float, 0.1, "fraction of each majority class dropped per round"),
        Option("epochs", int, 5, "retraining epochs per round"),
        Option("val_fraction", float, 0.2, "stratified validation fraction"),
        BATCH, LR, MOMENTUM, SEED,
        _out("run-rsrl"),
    ]),
    "predict": ("class probabilities and scores for a directory of images", [
        Option("checkpoint", str, "run-train/model.ckpt", "model checkpoint"),
        Option("data", str, "synth", "image directory"),
        Option("labels", str, "", "optional labels file restricting/ordering the images"),
        Option("batch_size", int, 32, "inference batch size"),
        _out("run-predict"),
    ]),
    "ensemble-sweep": ("sweep fusion weights of two probability files", [
        Option("prob_a", str, "", "model A probability file"),
        Option("prob_b", str, "", "model B probability file"),
        Option("labels", str, "", "ground-truth labels file"),
        Option("step", float, 0.1, "grid step for w1"),
        _out("run-sweep"),
    ]),
    "eval": ("precision/recall/F1/accuracy of predicted scores", [
        Option("labels", str, "", "ground-truth labels file"),
        Option("pred", str, "run-predict/scores.csv", "predicted scores file (id,score)"),
        Option("binarize", parse_bool, False, "map scores to low (<5) / high (>=5)"),
        _out("run-eval"),
    ]),
    "attention": ("FFP/AIR maps and overlays", [
        Option("checkpoint", str, "run-train/model.ckpt", "model checkpoint"),
        Option("data", str, "synth", "image directory"),
        Option("labels", str, "", "optional labels file restricting/ordering the images"),
        Option("selector", str, "mean", "channel selector: mean, sum or max"),
        Option("alpha", float, attention.DEFAULT_ALPHA, "overlay opacity"),
        Option("limit", int, 0, "process only the first N images (0 = all)"),
        _out("run-attention"),
    ]),
    "report": ("summarize an RSRL trace", [
        Option("trace", str, "run-rsrl/rsrl_trace.jsonl", "trace file"),
    ]),
}
KNOWN_KEYS = {opt.name for _, opts in COMMANDS.values() for opt in opts}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aescnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (desc, options) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="flat key = value configuration file (flags win)")
        for opt in options:
            kind = opt.type if opt.type is not parse_bool else parse_bool
            p.add_argument(opt.flag, dest=opt.name, type=kind, default=None,
                           help=f"{opt.help} (default: {opt.default!r})")
    return parser


# --------------------------------------------------------------------------
# helpers


SUBSYSTEMS = ("init", "shuffle", "split", "synth")


def _seed_lines(cfg) -> str:
    if "seed" not in cfg:
        return ""
    return "".join(f"# seed.{name} = {trainer.derive_seed(cfg['seed'], name)}\n" for name in SUBSYSTEMS)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labels_path(cfg) -> Path:
    return Path(cfg["labels"]) if cfg["labels"] else Path(cfg["data"]) / dataio.LABELS_FILENAME


def _read_checkpoint(path) -> modelb.Network:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return modelb.load_checkpoint(path.read_bytes())


def _load_images(cfg, resolution: int) -> tuple[list[str], np.ndarray]:
    spec = dataio.PreprocessSpec(resolution)
    if cfg.get("labels"):
        names = sorted(name for name, _ in dataio.read_labels(cfg["labels"]))
    else:
        names = dataio.list_images(cfg["data"])
    images = np.empty((len(names), 3, resolution, resolution), dtype=np.float32)
    for i, name in enumerate(names):
        images[i] = dataio.load_image(Path(cfg["data"]) / name, spec)
    return names, images


def _read_scores(path) -> dict[str, int]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"scores file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "score"]:
            raise DataError(f"{path}: expected header 'id,score'")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[row[0].strip()] = int(row[1])
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed row") from None
    return out


def _write_text(path: Path, text: str):
    path.write_text(text)
    log.info("wrote %s", path)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    out = _out_dir(cfg)
    data = dataio.synthesize(cfg["count"], cfg["resolution"], trainer.derive_seed(cfg["seed"], "synth"),
                             _profile(cfg["profile"]))
    dataio.write_dataset(data, out)
    print(f"wrote {len(data)} images to {out}; counts {data.counts}")


def cmd_train(cfg):
    if cfg["init_checkpoint"]:
        net = _read_checkpoint(cfg["init_checkpoint"])
        if net.config.variant != cfg["variant"]:
            raise ConfigError(f"checkpoint is {net.config.variant}, --variant is {cfg['variant']}")
    else:
        net = modelb.build(modelb.ModelConfig.for_variant(cfg["variant"]),
                           seed=trainer.derive_seed(cfg["seed"], "init"))
    data = dataio.load_dataset(cfg["data"], _labels_path(cfg),
                               dataio.PreprocessSpec(net.config.input_resolution))
    out = _out_dir(cfg)
    run = trainer.TrainRun(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                           shuffle_seed=trainer.derive_seed(cfg["seed"], "shuffle"),
                           learning_rate=cfg["learning_rate"], momentum=cfg["momentum"])
    trainer.train(net, data, run)
    (out / "model.ckpt").write_bytes(modelb.save_checkpoint(net))
    _write_text(out / "loss_trace.csv",
                "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(run.loss_trace)))
    acc = trainer.accuracy(net, data)
    print(f"trained {cfg['variant']} for {cfg['epochs']} epochs; train accuracy {acc:.4f}")


def cmd_rsrl(cfg):
    net = _read_checkpoint(cfg["checkpoint"])
    data = dataio.load_dataset(cfg["data"], _labels_path(cfg),
                               dataio.PreprocessSpec(net.config.input_resolution))
    v = cfg["val_fraction"]
    train_split, val_split, _ = dataio.split(data, (1.0 - v, v, 0.0),
                                             seed=trainer.derive_seed(cfg["seed"], "split"))
    plan = trainer.RsrlPlan(cfg["iterations"], cfg["drop_fraction"])
    run = trainer.TrainRun(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                           shuffle_seed=trainer.derive_seed(cfg["seed"], "shuffle"),
                           learning_rate=cfg["learning_rate"], momentum=cfg["momentum"])
    best, trace = trainer.rsrl(net, train_split, val_split, plan, run)
    out = _out_dir(cfg)
    (out / "best.ckpt").write_bytes(modelb.save_checkpoint(best))
    _write_text(out / "rsrl_trace.jsonl", trace.dumps())
    print(f"rsrl: {len(trace.iterations)} iterations, best snapshot {trace.best_snapshot}")


def cmd_predict(cfg):
    net = _read_checkpoint(cfg["checkpoint"])
    names, images = _load_images(cfg, net.config.input_resolution)
    probs = trainer.predict_probs(net, images, cfg["batch_size"]).astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    table = ensemble.ProbabilityTable(names, probs, name=net.config.variant)
    out = _out_dir(cfg)
    ensemble.export_probabilities(table, out / "probs.csv")
    scores = ensemble.predict(table)
    _write_text(out / "scores.csv",
                "id,score\n" + "".join(f"{n},{int(s)}\n" for n, s in zip(names, scores)))
    print(f"predicted {len(names)} images")


def cmd_ensemble_sweep(cfg):
    for key in ("prob_a", "prob_b", "labels"):
        if not cfg[key]:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    a = ensemble.import_probabilities(cfg["prob_a"])
    b = ensemble.import_probabilities(cfg["prob_b"])
    truth = dict(dataio.read_labels(cfg["labels"]))
    result = ensemble.sweep(a, b, truth, cfg["step"])
    out = _out_dir(cfg)
    _write_text(out / "sweep.csv", result.to_csv())
    _write_text(out / "best.txt", f"w1 = {result.best.w1:.4f}\nw2 = {result.best.w2:.4f}\n"
                                  f"aveF1 = {result.best_f1:.9f}\n")
    print(result.to_csv(), end="")
    print(f"best w1={result.best.w1:.4f} w2={result.best.w2:.4f} aveF1={result.best_f1:.6f}")


def cmd_eval(cfg):
    if not cfg["labels"]:
        raise ConfigError("--labels is required")
    truth = dict(dataio.read_labels(cfg["labels"]))
    pred = _read_scores(cfg["pred"])
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise DataError(f"no prediction for {len(missing)} labelled images (e.g. {missing[0]})")
    ids = sorted(truth)
    t = [truth[i] for i in ids]
    p = [pred[i] for i in ids]
    if cfg["binarize"]:
        report = metrics.evaluate(metrics.binarize(t), metrics.binarize(p), metrics.BINARY_CLASSES)
    else:
        report = metrics.evaluate(t, p, metrics.SCORE_CLASSES)
    out = _out_dir(cfg)
    _write_text(out / "metrics.txt", report.to_text())
    _write_text(out / "metrics.csv", report.to_csv())
    print(report.to_text(), end="")


def cmd_attention(cfg):
    net = _read_checkpoint(cfg["checkpoint"])
    if cfg["selector"] not in attention.SELECTORS:
        raise ConfigError(f"selector must be one of {attention.SELECTORS}")
    names, images = _load_images(cfg, net.config.input_resolution)
    if cfg["limit"] > 0:
        names, images = names[: cfg["limit"]], images[: cfg["limit"]]
    out = _out_dir(cfg)
    meta = []
    for name, img in zip(names, images):
        artifacts = net.forward(img[None], "infer")
        maps = attention.extract(artifacts.last_conv_maps, net.config.input_resolution,
                                 cfg["selector"])
        stem = Path(name).stem
        pixels = attention.to_uint8_image(img)
        attention.save_png(out / f"{stem}_ffp.png", attention.render_overlay(pixels, maps.ffp, cfg["alpha"]))
        attention.save_png(out / f"{stem}_air.png", attention.render_overlay(pixels, maps.air, cfg["alpha"]))
        attention.dump_grid(out / f"{stem}_ffp.txt", maps.ffp)
        attention.dump_grid(out / f"{stem}_air.txt", maps.air)
        raw = artifacts.last_conv_maps[0]
        attention.dump_grid(out / f"{stem}_maps.txt", raw.reshape(raw.shape[0], -1))
        meta.append({"id": name, "score": int(np.argmax(artifacts.probs[0])) + 2, **maps.metadata()})
    _write_text(out / "attention.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"wrote FFP/AIR overlays for {len(names)} images to {out}")


def cmd_report(cfg):
    path = Path(cfg["trace"])
    if not path.is_file():
        raise DataError(f"trace file not found: {path}")
    trace = trainer.RsrlTrace.loads(path.read_text())
    print(f"RSRL: {trace.plan.iterations} iterations, drop fraction {trace.plan.drop_fraction}")
    print(f"{'iter':>4}  {'majority':>10}  {'dropped':>7}  {'before':>6}  {'after':>6}  {'val F1':>8}")
    for it in trace.iterations:
        maj = ",".join(str(s) for s in it.majority_scores) or "-"
        print(f"{it.iteration:>4}  {maj:>10}  {len(it.dropped):>7}  {it.size_before:>6}  "
              f"{it.size_after:>6}  {it.val_macro_f1:8.4f}")
    print(f"best snapshot: {trace.best_snapshot}")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "rsrl": cmd_rsrl, "predict": cmd_predict,
    "ensemble-sweep": cmd_ensemble_sweep, "eval": cmd_eval, "attention": cmd_attention,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _, options = COMMANDS[args.command]
    try:
        file_values = config.read_config_file(args.config) if args.config else {}
        cfg = config.resolve(options, file_values, vars(args), KNOWN_KEYS)
        effective = config.dumps(args.command, cfg) + _seed_lines(cfg)
        print(effective, end="")
        if "out" in cfg:
            _write_text(_out_dir(cfg) / "effective_config.txt", effective)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"aescnn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"aescnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"aescnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
