"""Command-line surface: synthesize data, train both stages, predict with
overlays, evaluate, and fit the glaucoma classifier.

Subcommands: ``synth``, ``train``, ``predict``, ``evaluate``, ``classify``.
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. The seed is mandatory (``--seed`` or the ``seed`` config key);
nothing is ever seeded from the clock.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import GraphError, SgdConfig, ShapeError
from .cascade import CascadeConfig, run_cascade, train_stage
from .checkpoint import (Checkpoint, CheckpointError, checkpoint_from_model,
                         load_checkpoint, model_from_checkpoint, save_checkpoint)
from .classifier import fit_sigmoid, predict as clf_predict
from .data import (FormatError, MaskValueError, SynthConfig, decode_mask,
                   encode_mask, load_dataset, load_labels, synth_generate,
                   write_dataset)
from .metrics import auc as metrics_auc
from .metrics import build_report, format_report, write_report_csv
from .model import FcnConfig, build_fcn

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; populated from a ``key = value`` config file
    plus command-line overrides."""

    data_dir: Path | None = None
    out_dir: Path = Path("out")
    checkpoint_stage1: Path | None = None
    checkpoint_stage2: Path | None = None
    stage1: FcnConfig = field(default_factory=lambda: FcnConfig(in_channels=1))
    stage2: FcnConfig = field(default_factory=lambda: FcnConfig(in_channels=3))
    sgd: SgdConfig = field(default_factory=SgdConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int | None = None
    augment: bool = True


_PATH_KEYS = ("data_dir", "out_dir", "checkpoint_stage1", "checkpoint_stage2")


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_pair(value: str) -> tuple[float, float]:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {value!r}")
    return float(parts[0]), float(parts[1])


def _known_keys() -> dict[str, type]:
    keys: dict[str, type] = {k: Path for k in _PATH_KEYS}
    keys["seed"] = int
    keys["augment"] = bool
    for prefix, cfg_type in (("stage1", FcnConfig), ("stage2", FcnConfig),
                             ("sgd", SgdConfig), ("cascade", CascadeConfig),
                             ("synth", SynthConfig)):
        for f in fields(cfg_type):
            keys[f"{prefix}.{f.name}"] = f.type  # noqa: unused value, presence matters
    return keys


def parse_config_file(path: Path) -> dict[str, str]:
    """Strict ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = _known_keys()
    raw: dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise UsageError(f"{path}:{lineno}: duplicate config key {key!r}")
        raw[key] = value
    return raw


def build_run_config(raw: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    groups = {"stage1": {}, "stage2": {}, "sgd": {}, "cascade": {}, "synth": {}}
    try:
        for key, value in raw.items():
            if key in _PATH_KEYS:
                setattr(cfg, key, Path(value))
            elif key == "seed":
                cfg.seed = int(value)
            elif key == "augment":
                cfg.augment = _parse_bool(value)
            else:
                group, name = key.split(".", 1)
                if name in ("learning_rate", "threshold", "margin_frac", "noise_amp"):
                    groups[group][name] = float(value)
                elif name in ("disk_radius", "cdr_normal", "cdr_glaucoma"):
                    groups[group][name] = _parse_pair(value)
                else:
                    groups[group][name] = int(value)
        cfg.stage1 = replace(cfg.stage1, **groups["stage1"])
        cfg.stage2 = replace(cfg.stage2, **groups["stage2"])
        cfg.sgd = replace(cfg.sgd, **groups["sgd"])
        cfg.cascade = replace(cfg.cascade, **groups["cascade"])
        cfg.synth = replace(cfg.synth, **groups["synth"])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config value: {exc}") from exc
    return cfg


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = build_run_config(parse_config_file(Path(args.config))) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    if cfg.seed is None:
        raise UsageError("a seed is required: pass --seed or set 'seed' in the config")
    return cfg


def _require_dir(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is not configured")
    if not path.is_dir():
        raise DataError(f"{what} {path} is not a directory")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, force: bool) -> int:
    out = Path(cfg.out_dir)
    samples = synth_generate(replace(cfg.synth, seed=cfg.seed))
    try:
        write_dataset(samples, out, force=force)
    except FileExistsError as exc:
        raise DataError(str(exc)) from exc
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig, stage: int) -> Path:
    configured = cfg.checkpoint_stage1 if stage == 1 else cfg.checkpoint_stage2
    return configured or (Path(cfg.out_dir) / f"stage{stage}.dsfc")


def cmd_train(cfg: RunConfig, stage: int, stage1_checkpoint: Path | None) -> int:
    data_dir = _require_dir(cfg.data_dir, "data_dir")
    dataset = load_dataset(data_dir)
    if not dataset:
        raise DataError(f"no samples found under {data_dir}")
    stage_cfg = cfg.stage1 if stage == 1 else cfg.stage2
    model = build_fcn(stage_cfg, seed=cfg.seed)
    stage1_model = None
    if stage == 2:
        ckpt_path = stage1_checkpoint or cfg.checkpoint_stage1
        if ckpt_path is None:
            raise UsageError("stage 2 training requires --stage1-checkpoint")
        if not Path(ckpt_path).is_file():
            raise DataError(f"stage-1 checkpoint {ckpt_path} does not exist")
        stage1_model = model_from_checkpoint(load_checkpoint(ckpt_path))
    model, history = train_stage(model, dataset, cfg.sgd, stage, stage1_model,
                                 cascade=cfg.cascade, seed=cfg.seed,
                                 augment_data=cfg.augment)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = _checkpoint_path(cfg, stage)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(checkpoint_from_model(model, stage), ckpt_path)
    loss_path = out / f"stage{stage}_loss.csv"
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(history):
            writer.writerow([epoch, f"{loss:.6f}"])
    print(f"stage {stage}: {len(history)} epochs, checkpoint {ckpt_path}, losses {loss_path}")
    return EXIT_OK


def _boundary(mask: np.ndarray) -> np.ndarray:
    inner = mask.copy()
    inner[1:] &= mask[:-1]
    inner[:-1] &= mask[1:]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    return mask & ~inner


def _render_overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    overlay = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    overlay[_boundary(mask >= 1)] = (0, 255, 0)   # disk boundary
    overlay[_boundary(mask == 2)] = (255, 0, 0)   # cup boundary
    return overlay


def cmd_predict(cfg: RunConfig, image_paths: list[Path]) -> int:
    models = []
    for stage in (1, 2):
        path = _checkpoint_path(cfg, stage)
        if not Path(path).is_file():
            raise DataError(f"stage-{stage} checkpoint {path} does not exist")
        models.append(model_from_checkpoint(load_checkpoint(path)))
    out = Path(cfg.out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    rows = []
    for image_path in sorted(image_paths):
        if not image_path.is_file():
            raise DataError(f"input image {image_path} does not exist")
        with Image.open(image_path) as im:
            if im.mode != "RGB":
                raise FormatError(f"{image_path}: expected 8-bit RGB, got mode {im.mode!r}")
            image = np.asarray(im, dtype=np.float32) / 255.0
        result = run_cascade(models[0], models[1], image, cfg.cascade)
        sid = image_path.stem
        Image.fromarray(encode_mask(result.mask), mode="L").save(out / "masks" / f"{sid}.png")
        Image.fromarray(_render_overlay(image, result.mask), mode="RGB").save(
            out / "overlays" / f"{sid}.png")
        rows.append((sid, result.gamma))
    with open(out / "gammas.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "gamma"])
        for sid, gamma in rows:
            writer.writerow([sid, f"{gamma:.6f}"])
    print(f"predicted {len(rows)} images into {out}")
    return EXIT_OK


def _mask_dir_ids(root: Path) -> dict[str, Path]:
    mask_dir = root / "masks" if (root / "masks").is_dir() else root
    if not mask_dir.is_dir():
        raise DataError(f"{root} has no masks directory")
    return {p.stem: p for p in sorted(mask_dir.glob("*.png"))}


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: expected 8-bit grayscale, got mode {im.mode!r}")
        return decode_mask(np.asarray(im))


def cmd_evaluate(cfg: RunConfig, pred_dir: Path, gt_dir: Path) -> int:
    pred_ids = _mask_dir_ids(pred_dir)
    gt_ids = _mask_dir_ids(gt_dir)
    if set(pred_ids) != set(gt_ids):
        missing_pred = sorted(set(gt_ids) - set(pred_ids))
        missing_gt = sorted(set(pred_ids) - set(gt_ids))
        raise DataError(f"id mismatch between {pred_dir} and {gt_dir}: "
                        f"missing predictions {missing_pred}, missing ground truth {missing_gt}")
    ids = sorted(pred_ids)
    preds = [_read_mask(pred_ids[i]) for i in ids]
    gts = [_read_mask(gt_ids[i]) for i in ids]
    labels = None
    labels_path = gt_dir / "labels.csv"
    if labels_path.exists():
        by_id = load_labels(labels_path)
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"labels.csv is missing ids {missing}")
        labels = [by_id[i] for i in ids]
    report = build_report(ids, preds, gts, labels)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "report.csv")
    summary = format_report(report)
    if labels is not None:
        gammas = [row.cdr_area for row in report.rows]
        clf = fit_sigmoid(gammas, labels)
        probs = np.asarray(clf_predict(clf, np.asarray(gammas)))
        positives = np.asarray(labels) == 1
        sensitivity = float(np.mean(probs[positives] >= 0.5))
        summary += (f"\nclassifier: a={clf.a:.4f} b={clf.b:.4f} "
                    f"auc={report.auc:.4f} sensitivity={sensitivity:.4f}")
    print(summary)
    print(f"report written to {out / 'report.csv'}")
    return EXIT_OK


def _read_two_column_csv(path: Path, value_name: str) -> dict[str, str]:
    if not path.is_file():
        raise DataError(f"{path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 2 or header[0] != "id" or header[1] != value_name:
            raise DataError(f"{path}: expected header 'id,{value_name}', got {header}")
        return {row[0]: row[1] for row in reader if row}


def cmd_classify(cfg: RunConfig, gammas_path: Path, labels_path: Path,
                 checkpoint_path: Path | None) -> int:
    gamma_rows = _read_two_column_csv(gammas_path, "gamma")
    label_rows = _read_two_column_csv(labels_path, "glaucoma")
    ids = sorted(gamma_rows)
    missing = [i for i in ids if i not in label_rows]
    if missing:
        raise DataError(f"labels are missing ids {missing}")
    try:
        gammas = [float(gamma_rows[i]) for i in ids]
        labels = [int(label_rows[i]) for i in ids]
    except ValueError as exc:
        raise DataError(f"bad value in input CSVs: {exc}") from exc
    try:
        clf = fit_sigmoid(gammas, labels)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    probs = np.asarray(clf_predict(clf, np.asarray(gammas)))
    score = metrics_auc(gammas, labels)
    positives = np.asarray(labels) == 1
    sensitivity = float(np.mean(probs[positives] >= 0.5))
    print(f"fitted: a={clf.a:.6f} b={clf.b:.6f} loss={clf.fit_loss:.6f} "
          f"auc={score:.4f} sensitivity={sensitivity:.4f}")
    if checkpoint_path is not None:
        if not checkpoint_path.is_file():
            raise DataError(f"checkpoint {checkpoint_path} does not exist")
        ckpt = load_checkpoint(checkpoint_path)
        ckpt.classifier = clf
        save_checkpoint(ckpt, checkpoint_path)
        print(f"classifier stored in {checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems map to exit code 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="dsfcn", description=__doc__)
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key = value config file")
    common.add_argument("--seed", type=int, default=None, help="run seed (mandatory here or in config)")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--stage1-checkpoint", type=Path, default=None)

    p = sub.add_parser("predict", parents=[common], help="run the cascade on images")
    p.add_argument("images", type=Path, nargs="+")

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    p.add_argument("pred_dir", type=Path)
    p.add_argument("gt_dir", type=Path)

    p = sub.add_parser("classify", parents=[common], help="fit the glaucoma sigmoid")
    p.add_argument("--gammas", type=Path, required=True, help="CSV with header id,gamma")
    p.add_argument("--labels", type=Path, required=True, help="CSV with header id,glaucoma")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="store the fitted (a, b) inside this checkpoint")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, force=args.force)
        if args.command == "train":
            return cmd_train(cfg, stage=args.stage, stage1_checkpoint=args.stage1_checkpoint)
        if args.command == "predict":
            return cmd_predict(cfg, image_paths=args.images)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, pred_dir=args.pred_dir, gt_dir=args.gt_dir)
        if args.command == "classify":
            return cmd_classify(cfg, gammas_path=args.gammas, labels_path=args.labels,
                                checkpoint_path=args.checkpoint)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, FormatError, MaskValueError,
            CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (GraphError, ShapeError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
