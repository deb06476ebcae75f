"""Command-line entry point: ``fovit <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import numeric as nc
from .adversarial import AttackConfig, robustness_sweep
from .config import Config, ConfigError, load_config
from .data import load_dataset, save_class_map
from .episode import (
    EpisodeConfig,
    TrainSchedule,
    as_image_tensor,
    compute_confidence_threshold,
    ensemble_evaluate,
    episodes_over,
    predict_unfoveated,
    run_episodes,
    train,
)
from .geometry import FoveaLayout, build_canonical_layout
from .traces import TraceFile, overlay_svg, write_trace
from .vit import ModelConfig, VisionTransformer, load_model, save_model

logger = logging.getLogger("fovit")

COMMANDS = ("train", "eval", "ensemble", "threshold", "attack", "trace", "layout-dump")


class CommandError(RuntimeError):
    pass


# --- shared helpers ---------------------------------------------------------


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Tab-separated table with a header line; floats keep full precision."""
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def write_table(cfg: Config, name: str, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = cfg.out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    text = format_table(rows, columns)
    path.write_text(text)
    print(text, end="")
    logger.info("wrote %s", path)
    return path


def get_layout(cfg: Config) -> FoveaLayout:
    if cfg.layout.file:
        try:
            return FoveaLayout.parse(Path(cfg.layout.file).read_text())
        except OSError as exc:
            raise CommandError(f"cannot read layout file {cfg.layout.file}: {exc}") from exc
    return build_canonical_layout()


def get_model(cfg: Config, name: str) -> VisionTransformer:
    path = cfg.checkpoint(name)
    if not path.exists():
        raise CommandError(f"checkpoint not found: {path} (run `fovit train` first or set checkpoints.{name})")
    model, _ = load_model(path, get_layout(cfg))
    return model


def get_data(cfg: Config):
    try:
        return load_dataset(cfg.dataset)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc


def _take(n: int | None, *arrays):
    return arrays if n is None else tuple(a[:n] for a in arrays)


# --- commands ---------------------------------------------------------------


def cmd_train(cfg: Config) -> None:
    data = get_data(cfg)
    layout = get_layout(cfg)
    save_class_map(_mkdir(cfg.out) / "classes.json", data.class_names)
    targets = ["unfoveated", "foveated"] if cfg.training.target == "both" else [cfg.training.target]
    for target in targets:
        mc = ModelConfig(**{**cfg.model.to_dict(), "n_classes": data.n_classes, "capacity": layout.capacity})
        torch.manual_seed(cfg.training.seed)
        model = VisionTransformer(mc, layout)
        t = cfg.training
        schedule = TrainSchedule(
            epochs=t.epochs if target == "foveated" else t.unfoveated_epochs,
            batch_size=t.batch_size,
            lr_init=t.lr_init,
            lr_min=t.lr_min,
            weight_decay=t.weight_decay,
            n_fixations=t.n_fixations,
            seed=t.seed,
        )
        logger.info("training %s model for %d epochs on %d images", target, schedule.epochs, len(data.train_labels))
        ckpt_dir = cfg.out / "checkpoints" / f"{target}-epochs" if t.save_every_epoch else None
        hist = train(
            model, data.train_images, data.train_labels, schedule, foveated=target == "foveated",
            checkpoint_dir=ckpt_dir,
        )
        save_model(model, cfg.checkpoint(target), {"target": target, "epochs": schedule.epochs, "classes": data.class_names})
        rows = [
            {"epoch": i + 1, "loss": loss, "train_accuracy": acc}
            for i, (loss, acc) in enumerate(zip(hist.epoch_loss, hist.epoch_accuracy))
        ]
        write_table(cfg, f"train_{target}.tsv", rows)


def cmd_eval(cfg: Config) -> None:
    data = get_data(cfg)
    images, labels = _take(cfg.episode.n_images, data.val_images, data.val_labels)
    rows = []
    fov_path = cfg.checkpoint("foveated")
    if fov_path.exists():
        fov = get_model(cfg, "foveated")
        for policy in cfg.episode.policies:
            ep = EpisodeConfig(cfg.episode.n_fixations, policy, None, cfg.episode.seed)
            batch = episodes_over(fov, images, ep, batch_size=cfg.episode.batch_size)
            acc = (batch.logits.argmax(-1) == labels[:, None]).mean(0)
            for k, a in enumerate(acc, start=1):
                rows.append({"model": "foveated", "policy": policy, "fixations": k, "accuracy": float(a)})
    unf_path = cfg.checkpoint("unfoveated")
    if unf_path.exists():
        unf = get_model(cfg, "unfoveated")
        acc = float((predict_unfoveated(unf, images).argmax(-1) == labels).mean())
        rows.append({"model": "unfoveated", "policy": "", "fixations": "", "accuracy": acc})
    if not rows:
        raise CommandError(f"no checkpoints found ({fov_path}, {unf_path}); run `fovit train` first")
    write_table(cfg, "eval.tsv", rows, ["model", "policy", "fixations", "accuracy"])


def _threshold(cfg: Config, fov: VisionTransformer, data) -> float:
    if cfg.ensemble.threshold is not None:
        return cfg.ensemble.threshold
    images, labels = _take(cfg.ensemble.threshold_images, data.train_images, data.train_labels)
    try:
        return compute_confidence_threshold(fov, images, labels, seed=cfg.ensemble.seed)
    except RuntimeError as exc:
        raise CommandError(str(exc)) from exc


def cmd_threshold(cfg: Config) -> None:
    data = get_data(cfg)
    fov = get_model(cfg, "foveated")
    n = len(data.train_labels) if cfg.ensemble.threshold_images is None else min(cfg.ensemble.threshold_images, len(data.train_labels))
    tau = _threshold(cfg, fov, data)
    write_table(cfg, "threshold.tsv", [{"threshold": tau, "images": n}])


def cmd_ensemble(cfg: Config) -> None:
    data = get_data(cfg)
    fov = get_model(cfg, "foveated")
    unf = get_model(cfg, "unfoveated")
    tau = _threshold(cfg, fov, data)
    images, labels = _take(cfg.episode.n_images, data.val_images, data.val_labels)
    res = ensemble_evaluate(fov, unf, images, labels, tau, cfg.ensemble.n_stages, cfg.ensemble.seed)
    write_table(cfg, "ensemble.tsv", res.table)
    unf_acc = float((predict_unfoveated(unf, images).argmax(-1) == labels).mean())
    summary = [
        {
            "threshold": tau,
            "ensemble_accuracy": res.accuracy,
            "unfoveated_accuracy": unf_acc,
            "total_cost": res.ledger.total,
            "baseline_cost": res.ledger.baseline,
            "relative_cost": f"{res.ledger.relative.numerator}/{res.ledger.relative.denominator}",
            "relative_cost_pct": 100.0 * float(res.ledger.relative),
            "fixations": res.ledger.fixations,
            "escalations": res.ledger.escalations,
        }
    ]
    write_table(cfg, "ensemble_summary.tsv", summary)


def cmd_attack(cfg: Config) -> None:
    data = get_data(cfg)
    a = cfg.attack
    images, labels = _take(a.n_images, data.val_images, data.val_labels)
    models = {name: (name, get_model(cfg, name)) for name in a.models}
    base = AttackConfig("fgsm", 0.0, a.pgd_steps, a.pgd_step_size, a.random_start, a.seed)
    ep = EpisodeConfig(cfg.episode.n_fixations, "guided", None, cfg.episode.seed)
    rows = robustness_sweep(models, images, labels, a.epsilons, tuple(a.kinds), base, ep, a.batch_size)
    write_table(cfg, "attack.tsv", rows)


def cmd_trace(cfg: Config) -> None:
    data = get_data(cfg)
    fov = get_model(cfg, "foveated")
    layout = get_layout(cfg)
    images = data.val_images if cfg.trace.split == "val" else data.train_images
    labels = data.val_labels if cfg.trace.split == "val" else data.train_labels
    idx = np.asarray(cfg.trace.indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(images):
        raise CommandError(f"trace.indices must lie in [0, {len(images)})")
    ep = EpisodeConfig(cfg.episode.n_fixations, cfg.trace.policy, cfg.trace.threshold, cfg.episode.seed)
    out = _mkdir(cfg.out / "traces")
    rows = []
    # run every index at its own position so the per-image seed matches eval
    for i in idx:
        with torch.no_grad():
            feats = fov.embed_with_positions(as_image_tensor(images[i : i + 1]))
            batch = run_episodes(fov, feats, ep, [int(i)], record_maps=True)
        trace = TraceFile.from_episode(batch.trace(0, int(labels[i])), {"split": cfg.trace.split, "index": int(i)})
        stem = f"{cfg.trace.split}-{int(i):05d}"
        write_trace(out / f"{stem}.json", trace)
        svg = overlay_svg(images[i], trace, fov.config.patch_side, layout, data.class_names)
        (out / f"{stem}.svg").write_text(svg)
        last = trace.fixations[-1]
        rows.append({"index": int(i), "label": int(labels[i]), "predicted": last.predicted,
                     "probability": last.probability, "fixations": len(trace.fixations), "cost": trace.cost})
    write_table(cfg, "traces.tsv", rows)


def cmd_layout_dump(cfg: Config) -> None:
    text = get_layout(cfg).dump()
    path = _mkdir(cfg.out) / "layout.txt"
    path.write_text(text)
    print(text, end="")
    logger.info("wrote %s", path)


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "threshold": cmd_threshold,
    "attack": cmd_attack,
    "trace": cmd_trace,
    "layout-dump": cmd_layout_dump,
}


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fovit", description="Foveated vision transformer experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("-c", "--config", help="YAML config file")
    parser.add_argument(
        "-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value by dotted path, e.g. training.epochs=5 (repeatable)",
    )
    parser.add_argument("-o", "--output-dir", help="same as --set output_dir=DIR")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"fovit: invalid config: {exc}", file=sys.stderr)
        return 2
    echo = cfg.dump()
    sys.stderr.write("# resolved config\n" + echo)
    _mkdir(cfg.out)
    (cfg.out / f"{args.command}.config.yaml").write_text(echo)
    if cfg.reference_mode:
        nc.reference_mode()
    try:
        HANDLERS[args.command](cfg)
    except (CommandError, ConfigError) as exc:
        print(f"fovit {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
