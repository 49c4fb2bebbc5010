"""Command-line interface: ``osld <command> [options]``.

Every command writes its outputs under ``--out`` together with ``run.json``,
a snapshot of the resolved parameters.  Passing that file back through
``--config`` (with a new ``--out``) reproduces the run byte for byte.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as pl
from .ablation import A_SERIES, ablation_table, benchmark_config, full_grid, named_settings, run_ablation
from .datasets import (
    DetectorSimParams,
    SyntheticConfig,
    generate_synthetic,
    load_manifest,
    open_set_split,
    read_detections,
    simulate_detector,
    write_detections,
)
from .embednet import (
    NetworkConfig,
    TrainConfig,
    load_checkpoint,
    round_to_float32,
    save_checkpoint,
    train,
)
from .errors import ConfigError, DataError, NumericalError
from .losses import LossKind, LossParams
from .matching import add_class, load_index, save_index
from .preprocess import CROP_RANDOM, CROP_RRC, AugmentConfig, crop_box

log = logging.getLogger("osld")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- parameter plumbing ------------------------------------------------------------

DEFAULTS = {
    "generate": {
        "seed": 0, "preset": "default", "classes": None, "fractions": None,
        "instances": None, "canvas_size": None,
    },
    "validate": {"data": None},
    "train": {
        "data": None, "seed": 0, "sampler": "bhnm", "loss": "bindev", "alpha": 3.0, "margin": 0.3,
        "stage1_epochs": 10, "stage2_epochs": 50, "n_per_batch": 60, "constant_lr": None,
        "pad": True, "crop": CROP_RRC, "train_size": 32, "hidden": [256], "embedding_dim": 64,
        "fp_negatives": True, "calibrate": True,
    },
    "embed": {"data": None, "model": None, "split": "test"},
    "index build": {"data": None, "model": None, "split": "test", "classes": None},
    "index add": {"data": None, "model": None, "index": None, "classes": None},
    "detect": {
        "data": None, "model": None, "index": None, "split": "test", "candidates": None,
        "gt_boxes": False, "threshold": None, "seed": 0,
        "jitter": 0.05, "fp_rate": 0.5, "miss_rate": 0.05,
    },
    "eval": {
        "data": None, "split": "test", "detections": None, "gt_boxes": False,
        "model": None, "index": None, "threshold": 0.0, "iou": 0.5,
    },
    "ablate": {
        "data": None, "benchmark": "standard", "grid": "a-series", "settings": None,
        "seeds": [0, 1, 2], "stage2_epochs": 50,
    },
}

PATH_KEYS = ("data", "model", "index", "candidates", "detections")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="run.json snapshot (or params JSON) to start from")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=False)

    parser = _Parser(prog="osld", description="Open-set logo detection by embedding matching.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def cmd(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, argument_default=argparse.SUPPRESS)

    p = cmd("generate", "render a synthetic open-set logo dataset")
    p.add_argument("--preset", choices=["default", "ablation", "ablation-high-aspect"])
    p.add_argument("--classes", type=int, help="total class count (with --fractions)")
    p.add_argument("--fractions", type=_float_list, help="train,val,test class fractions")
    p.add_argument("--instances", type=int, help="scenes per class")
    p.add_argument("--canvas-size", dest="canvas_size", type=int)

    p = cmd("validate", "check a dataset manifest")
    p.add_argument("--data")

    p = cmd("train", "train the embedding network")
    p.add_argument("--data")
    p.add_argument("--sampler", choices=["bhnm", "random"])
    p.add_argument("--loss", choices=[k.value for k in LossKind])
    p.add_argument("--alpha", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    p.add_argument("--n-per-batch", dest="n_per_batch", type=int)
    p.add_argument("--constant-lr", dest="constant_lr", type=float)
    p.add_argument("--no-pad", dest="pad", action="store_false")
    p.add_argument("--crop", choices=[CROP_RRC, CROP_RANDOM])
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--hidden", type=_int_list)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--no-fp-negatives", dest="fp_negatives", action="store_false")
    p.add_argument("--no-calibrate", dest="calibrate", action="store_false")

    p = cmd("embed", "embed canonical images and GT crops of a split")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--split", choices=["train", "val", "test"])

    p = sub.add_parser("index", help="build or extend a canonical-logo index")
    isub = p.add_subparsers(dest="index_command", parser_class=_Parser, required=True)
    q = isub.add_parser("build", parents=[common], argument_default=argparse.SUPPRESS)
    q.add_argument("--data")
    q.add_argument("--model")
    q.add_argument("--split", choices=["train", "val", "test"])
    q.add_argument("--classes", type=_int_list)
    q = isub.add_parser("add", parents=[common], argument_default=argparse.SUPPRESS)
    q.add_argument("--data")
    q.add_argument("--model")
    q.add_argument("--index")
    q.add_argument("--classes", type=_int_list)

    p = cmd("detect", "crop, embed and label candidate regions")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--index")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--candidates", help="candidate-box file; default simulates a generic detector")
    p.add_argument("--gt-boxes", dest="gt_boxes", action="store_true")
    p.add_argument("--threshold", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--fp-rate", dest="fp_rate", type=float)
    p.add_argument("--miss-rate", dest="miss_rate", type=float)

    p = cmd("eval", "score detections (bbox, image-based and generic AP)")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--detections")
    p.add_argument("--gt-boxes", dest="gt_boxes", action="store_true")
    p.add_argument("--model")
    p.add_argument("--index")
    p.add_argument("--threshold", type=float)
    p.add_argument("--iou", type=float)

    p = cmd("ablate", "run the recipe ablation grid")
    p.add_argument("--data", help="dataset; generated from --benchmark when omitted")
    p.add_argument("--benchmark", choices=["standard", "high-aspect"])
    p.add_argument("--grid", choices=["a-series", "full"])
    p.add_argument("--settings", type=_str_list, help="named variants, e.g. bhnm,random")
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    return parser


def resolve_params(command: str, ns: argparse.Namespace) -> tuple[dict, Path | None, bool]:
    """Defaults, then the --config file, then explicit flags."""
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "index_command")}
    verbose = given.pop("verbose", False)
    out = given.pop("out", None)
    params = dict(DEFAULTS[command])
    cfg_path = given.pop("config", None)
    if cfg_path is not None:
        try:
            raw = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
        if "command" in raw and raw["command"] != command:
            raise ConfigError(f"config is for {raw['command']!r}, not {command!r}")
        loaded = raw.get("params", raw)
        unknown = set(loaded) - set(params) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        params.update(loaded)
    params.update(given)
    for k in PATH_KEYS:
        if params.get(k) is not None:
            params[k] = str(Path(params[k]).resolve())
    return params, Path(out) if out is not None else None, verbose


def _need(params: dict, *keys: str) -> None:
    missing = [k for k in keys if params.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(out: Path | None) -> Path:
    if out is None:
        raise UsageError("missing required option: --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_snapshot(out: Path, command: str, params: dict) -> None:
    _dump(out / "run.json", {"schema_version": 1, "command": command, "params": params})


# --- model bundle ------------------------------------------------------------------

def _model_file(path: str) -> Path:
    p = Path(path)
    return p / "model.bin" if p.is_dir() else p


def load_model(path: str):
    """Checkpoint plus the preprocessing it was trained with."""
    model = _model_file(path)
    net = load_checkpoint(model)
    pre = model.parent / "preprocess.json"
    aug = AugmentConfig.desk()
    if pre.exists():
        d = json.loads(pre.read_text(encoding="utf-8"))
        aug = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    return net, aug


def _calibrated_threshold(model_path: str, fallback: float = 0.5) -> float:
    cal = _model_file(model_path).parent / "calibration.json"
    if cal.exists():
        return float(json.loads(cal.read_text(encoding="utf-8"))["threshold"])
    return fallback


# --- commands ----------------------------------------------------------------------

def cmd_generate(params: dict, out: Path | None) -> None:
    presets = {
        "default": SyntheticConfig(),
        "ablation": benchmark_config(False),
        "ablation-high-aspect": benchmark_config(True),
    }
    if params["preset"] not in presets:
        raise ConfigError(f"unknown preset {params['preset']!r}")
    cfg = replace(presets[params["preset"]], seed=params["seed"])
    if params["fractions"] is not None:
        if params["classes"] is None:
            raise UsageError("--fractions needs --classes")
        fr = list(params["fractions"])
        if len(fr) != 3:
            raise ConfigError("--fractions takes exactly three values (train,val,test)")
        parts = open_set_split(range(params["classes"]), fr, params["seed"])
        cfg = replace(cfg, train_classes=len(parts[0]), val_classes=len(parts[1]), test_classes=len(parts[2]))
    elif params["classes"] is not None:
        raise UsageError("--classes needs --fractions")
    if params["instances"] is not None:
        cfg = replace(cfg, instances_per_class=params["instances"])
    if params["canvas_size"] is not None:
        cfg = replace(cfg, canvas_size=params["canvas_size"])
    out = _out_dir(out)
    manifest = generate_synthetic(cfg, out)
    _dump(out / "synthetic.json", cfg.to_dict())
    print(f"wrote {len(manifest.images)} scenes, {len(manifest.canonicals)} classes to {out}")


def cmd_validate(params: dict, out: Path | None) -> None:
    _need(params, "data")
    m = load_manifest(params["data"])
    for split in ("train", "val", "test"):
        print(f"{split}\tclasses={len(m.classes_in_split(split))}\timages={len(m.images_in_split(split))}")
    print("ok")


def _train_configs(params: dict) -> tuple[NetworkConfig, TrainConfig, AugmentConfig]:
    aug = AugmentConfig.desk(train_size=params["train_size"], pad_to_square=params["pad"], crop_mode=params["crop"])
    net_cfg = NetworkConfig(
        input_dim=3 * aug.test_crop ** 2,
        hidden_dims=tuple(params["hidden"]),
        embedding_dim=params["embedding_dim"],
    )
    train_cfg = TrainConfig(
        n_per_batch=params["n_per_batch"],
        stage1_epochs=params["stage1_epochs"],
        stage2_epochs=params["stage2_epochs"],
        constant_lr=params["constant_lr"],
        loss=LossParams(params["alpha"], params["margin"], LossKind(params["loss"])),
        sampler=params["sampler"],
        seed=params["seed"],
    )
    return net_cfg, train_cfg, aug


def cmd_train(params: dict, out: Path | None) -> None:
    from .plotting import plot_training_curve

    _need(params, "data")
    out = _out_dir(out)
    manifest = load_manifest(params["data"])
    net_cfg, train_cfg, aug = _train_configs(params)
    items = pl.training_set(manifest, aug, fp_negatives=params["fp_negatives"], seed=params["seed"])
    val = pl.validation_set(manifest, aug)

    def progress(entry):
        log.info("epoch %d  stage %d  lr %.2e  loss %.5f", entry["epoch"], entry["stage"], entry["lr"], entry["mean_loss"])

    result = train(items, net_cfg, train_cfg, val, progress=progress)
    net = round_to_float32(result.network)
    save_checkpoint(out / "model.bin", net)
    _dump(out / "preprocess.json", asdict(aug))
    result.log["train_config"] = train_cfg.to_dict()
    result.log["network_config"] = asdict(net_cfg)
    _dump(out / "train_log.json", result.log)
    plot_training_curve(result.log, out / "training_curve.png")
    if params["calibrate"]:
        val_classes = manifest.classes_in_split("val")
        index = pl.logo_index(net, manifest, val_classes, aug)
        cands = simulate_detector(manifest, DetectorSimParams(), np.random.default_rng([params["seed"], 11]), "val")
        matched = pl.match_candidates(net, index, manifest, cands, aug)
        threshold, score = pl.calibrate(manifest, "val", matched)
        _dump(out / "calibration.json", {"threshold": threshold, "val_bbox_map": score, "split": "val"})
        log.info("calibrated threshold %.2f (val bbox mAP %.4f)", threshold, score)
    print(f"best epoch {result.log['best_epoch']}  val R@1 {result.log['best_recall_at_1']:.4f}  -> {out / 'model.bin'}")


def cmd_embed(params: dict, out: Path | None) -> None:
    _need(params, "data", "model")
    out = _out_dir(out)
    manifest = load_manifest(params["data"])
    net, aug = load_model(params["model"])
    split = params["split"]
    wanted = set(manifest.classes_in_split(split))
    rows = []
    for c in manifest.canonicals:
        if c.class_id in wanted:
            for image_id, p in zip(c.image_ids(), c.paths):
                rows.append((image_id, c.class_id, "canonical", pl.load_image(manifest, p)))
    for rec in manifest.images_in_split(split):
        scene = pl.load_image(manifest, rec.path)
        for k, b in enumerate(rec.boxes):
            rows.append((f"{rec.image_id}#{k}", b.class_id, "gt", crop_box(scene, b.box)))
    emb = net.embed(pl.test_vectors([r[3] for r in rows], aug)) if rows else np.zeros((0, net.config.embedding_dim))
    head = ["item", "class_id", "source"] + [f"e{i}" for i in range(emb.shape[1])]
    lines = ["\t".join(head)]
    for (item, cls, src, _), e in zip(rows, emb):
        lines.append("\t".join([item, str(cls), src] + [f"{float(v):.9g}" for v in e]))
    (out / "embeddings.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"embedded {len(rows)} items -> {out / 'embeddings.tsv'}")


def cmd_index_build(params: dict, out: Path | None) -> None:
    _need(params, "data", "model")
    out = _out_dir(out)
    manifest = load_manifest(params["data"])
    net, aug = load_model(params["model"])
    classes = params["classes"] if params["classes"] is not None else manifest.classes_in_split(params["split"])
    index = pl.logo_index(net, manifest, classes, aug)
    save_index(out / "index.bin", index)
    print(f"indexed {len(index)} canonical images of {len(index.class_names)} classes -> {out / 'index.bin'}")


def cmd_index_add(params: dict, out: Path | None) -> None:
    _need(params, "data", "model", "index", "classes")
    out = _out_dir(out)
    manifest = load_manifest(params["data"])
    net, aug = load_model(params["model"])
    base = load_index(params["index"])
    extra = pl.logo_index(net, manifest, params["classes"], aug)
    index = add_class(base, extra.entries, extra.class_names)
    save_index(out / "index.bin", index)
    print(f"index now holds {len(index)} entries of {len(index.class_names)} classes -> {out / 'index.bin'}")


def _candidates(params: dict, manifest) -> dict:
    split = params["split"]
    if params["gt_boxes"]:
        return pl.gt_candidates(manifest, split)
    if params["candidates"] is not None:
        cands = read_detections(params["candidates"])
        known = {r.image_id for r in manifest.images}
        stray = sorted(set(cands) - known)
        if stray:
            raise DataError(f"candidate file names unknown images, e.g. {stray[0]!r}")
        return cands
    sim = DetectorSimParams(params["jitter"], params["fp_rate"], params["miss_rate"])
    return simulate_detector(manifest, sim, np.random.default_rng([params["seed"], 13]), split)


def cmd_detect(params: dict, out: Path | None) -> None:
    _need(params, "data", "model", "index")
    out = _out_dir(out)
    manifest = load_manifest(params["data"])
    net, aug = load_model(params["model"])
    index = load_index(params["index"])
    if index.dim != net.config.embedding_dim:
        raise DataError(f"index dim {index.dim} does not match model embedding dim {net.config.embedding_dim}")
    cands = _candidates(params, manifest)
    threshold = params["threshold"]
    if threshold is None:
        threshold = _calibrated_threshold(params["model"])
    dets = pl.detect(net, index, manifest, cands, aug, threshold)
    write_detections(out / "candidates.jsonl", cands)
    write_detections(out / "detections.jsonl", dets)
    n = sum(len(d) for d in dets.values())
    print(f"{n} labelled detections at threshold {threshold:.2f} -> {out / 'detections.jsonl'}")


def cmd_eval(params: dict, out: Path | None) -> None:
    from .plotting import plot_pr_curves

    _need(params, "data")
    out = _out_dir(out)
    manifest = load_manifest(params["data"])
    split = params["split"]
    if params["gt_boxes"]:
        _need(params, "model", "index")
        net, aug = load_model(params["model"])
        index = load_index(params["index"])
        matched = pl.match_candidates(net, index, manifest, pl.gt_candidates(manifest, split), aug)
        dets = matched.detections(params["threshold"])
    else:
        _need(params, "detections")
        dets = read_detections(params["detections"])
    reports = pl.evaluate_detections(manifest, split, dets, params["iou"])
    lines = ["protocol\tmAP\trecall\timages\tground_truth\tdetections"]
    for name, rep in reports.items():
        (out / f"{name}.json").write_text(rep.to_json(), encoding="utf-8")
        lines.append(f"{name}\t{rep.mean_ap:.6f}\t{rep.recall:.6f}\t{rep.n_images}\t{rep.n_ground_truth}\t{rep.n_detections}")
    (out / "summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plot_pr_curves(reports["bbox"].curves, out / "pr_curves.png", title="bbox-based PR")
    print("\n".join(lines))


def cmd_ablate(params: dict, out: Path | None) -> None:
    from .plotting import plot_ablation

    out = _out_dir(out)
    if params["data"] is None:
        data = out / "data"
        generate_synthetic(benchmark_config(params["benchmark"] == "high-aspect"), data)
        manifest = load_manifest(data)
    else:
        manifest = load_manifest(params["data"])
    if params["settings"]:
        settings = named_settings(params["settings"])
    elif params["grid"] == "full":
        settings = full_grid()
    else:
        settings = list(A_SERIES)
    base = TrainConfig(stage2_epochs=params["stage2_epochs"])

    def progress(name, seed, r1):
        log.info("%s seed %d: R@1 %.4f", name, seed, r1)

    rows = run_ablation(manifest, settings, params["seeds"], base_train=base, progress=progress)
    table = ablation_table(rows)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    plot_ablation([r.setting.name for r in rows], [r.median for r in rows], [r.recall_at_1 for r in rows],
                  out / "ablation.png")
    sys.stdout.write(table)


COMMANDS = {
    "generate": cmd_generate,
    "validate": cmd_validate,
    "train": cmd_train,
    "embed": cmd_embed,
    "index build": cmd_index_build,
    "index add": cmd_index_add,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    command = ns.command if ns.command != "index" else f"index {ns.index_command}"
    params, out, verbose = resolve_params(command, ns)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    COMMANDS[command](params, out)
    if out is not None and out.is_dir():
        write_snapshot(out, command, params)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:
        # argparse exits on bad flags and --help; report its code instead
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"osld: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"osld: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, OSError) as exc:
        print(f"osld: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
