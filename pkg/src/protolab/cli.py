"""Command-line front end: ``protolab <command> [flags]``.

Exit codes: 0 success, 1 gradcheck failure, 2 usage error, 3 training
divergence, 4 experiment precondition violated, 5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (AttackConfig, ProtocolError, SusceptibilityConfig, attack_record, complement,
                     pgd_location_shift, prototype_map, sample_candidates, select_source_patch,
                     susceptibility_rate, write_records)
from .codec import CodecConfig
from .corruption import (consistency_experiment, corrupt_dataset, summarize, top_similarity_histogram,
                         write_histogram_csv, write_records_csv)
from .data import DatasetError, SynthConfig, generate, load_dataset, save_dataset
from .gradcheck import run_gradcheck
from .model import CheckpointError, ModelConfig, ProtoPNet, upsample_activation
from .presets import regime_settings
from .report import GREEN, YELLOW, mask_box, paired_bar_svg, save_overlay
from .seeding import derive_seed
from .training import (METRIC_FIELDS, PGDEvalConfig, TrainConfig, TrainingDiverged, evaluate,
                       train_schedule)

log = logging.getLogger("protolab")

EXIT_GRADCHECK, EXIT_USAGE, EXIT_DIVERGED, EXIT_PROTOCOL, EXIT_MISMATCH = 1, 2, 3, 4, 5

SUSCEPTIBILITY_FIELDS = ("checkpoint", "regime", "clean_accuracy", "adversarial_accuracy", "success_rate",
                         "n_images", "still_correct_fraction")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _apply_thread_cap() -> None:
    cap = os.environ.get("PROTO_LAB_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn/scipy stacks
        return
    threadpool_limits(int(cap))


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, seed, outputs: list[Path],
                    started: str) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _load_checkpoint(path) -> ProtoPNet:
    try:
        return ProtoPNet.load(path)
    except (OSError, CheckpointError) as exc:
        raise CommandError(EXIT_MISMATCH, f"cannot read checkpoint {path}: {exc}") from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, DatasetError) as exc:
        raise CommandError(EXIT_USAGE, f"cannot read dataset {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv) -> None:
    started = _now()
    cfg = SynthConfig(classes=args.classes, train_per_class=args.train_per_class,
                      test_per_class=args.test_per_class, seed=args.seed)
    try:
        dataset = generate(cfg)
    except DatasetError as exc:
        raise CommandError(EXIT_USAGE, str(exc)) from exc
    if args.corrupt_fraction > 0:
        dataset = corrupt_dataset(dataset, args.corrupt_fraction, args.quality,
                                  derive_seed(args.seed, "corrupt"))
    out = Path(args.out)
    save_dataset(dataset, out)
    outputs = [out / "manifest.csv", out / "corrupted_classes.txt"]
    outputs += sorted((out / "images").glob("*.ppm"))
    config = {"synth": asdict(cfg), "corrupt_fraction": args.corrupt_fraction, "quality": args.quality}
    _write_manifest(out, "gen-data", argv, config, args.seed, outputs, started)
    print(f"wrote {len(dataset.train) + len(dataset.test)} images to {out}")


def cmd_train(args, argv) -> None:
    started = _now()
    dataset = _load_data(args.data)
    train_cfg, augment_cfg, adv_cfg = regime_settings(args.regime, args.preset, seed=args.seed)
    overrides = {k: getattr(args, k) for k in ("warmup_epochs", "joint_epochs", "last_layer_iters")
                 if getattr(args, k) is not None}
    if overrides:
        train_cfg = TrainConfig(**{**asdict(train_cfg), **overrides})
    model_cfg = ModelConfig(num_classes=dataset.num_classes,
                            image_height=dataset.train.images.shape[2], image_width=dataset.train.images.shape[3],
                            distance_mode=args.distance_mode)
    model = ProtoPNet.initialize(model_cfg, np.random.default_rng(derive_seed(args.seed, "init")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, restval="")
        writer.writeheader()

        def on_metrics(row):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in METRIC_FIELDS})
            fh.flush()

        try:
            result = train_schedule(model, dataset, train_cfg, augment_cfg, adv_cfg, on_metrics)
        except TrainingDiverged as exc:
            raise CommandError(EXIT_DIVERGED, str(exc)) from exc
    result.pushed.save(out / "pushed.ckpt")
    result.model.save(out / "model.ckpt")
    config = {"regime": args.regime, "preset": args.preset, "train": asdict(train_cfg),
              "augment": None if augment_cfg is None else asdict(augment_cfg),
              "adversarial": None if adv_cfg is None else asdict(adv_cfg), "model": model_cfg.to_dict(),
              "data": str(args.data), "corrupted_classes": dataset.corrupted_classes}
    _write_manifest(out, "train", argv, config, args.seed, [metrics_path, out / "pushed.ckpt", out / "model.ckpt"],
                    started)
    print(f"best test accuracy {result.best_test_accuracy:.4f}; checkpoint {out / 'model.ckpt'}")


def _find_image(dataset, image_id: str):
    for split in (dataset.test, dataset.train):
        if image_id in split.ids:
            i = split.ids.index(image_id)
            return split.images[i], int(split.labels[i])
    raise CommandError(EXIT_USAGE, f"image id {image_id!r} not in dataset")


def _parse_cells(text: str | None):
    if not text:
        return None
    cells = []
    for part in text.split(";"):
        r, c = part.split(",")
        cells.append((int(r), int(c)))
    return cells


def cmd_attack(args, argv) -> None:
    started = _now()
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    image, label = _find_image(dataset, args.image_id)
    config = AttackConfig(budget=args.budget, step=args.step, iterations=args.iterations, mask_mode=args.mask_mode,
                          source_rule=args.source_rule, top_n=args.top_n)
    proto = args.prototype
    if proto is None:
        proto = int(np.argmax(model.pooled_scores(image)))
    try:
        source = select_source_patch(model, image, proto, label, config.source_rule, config.top_n)
    except ProtocolError as exc:
        raise CommandError(EXIT_PROTOCOL, f"{args.image_id}: {exc}") from exc
    hw = model.config.latent_hw
    target = _parse_cells(args.target)
    if target is None:
        # the latent cell farthest from the source set
        cells = complement(source, hw)
        far = max(cells, key=lambda c: min(abs(c[0] - s[0]) + abs(c[1] - s[1]) for s in source))
        target = [far]
    try:
        result = pgd_location_shift(model, image, proto, source, target, config, label, args.image_id)
    except ValueError as exc:
        raise CommandError(EXIT_USAGE, str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = (model.config.image_height, model.config.image_width)
    heat0, box0 = upsample_activation(prototype_map(model, image, proto).data, dims)
    attacked = image + result.delta
    heat1, box1 = upsample_activation(prototype_map(model, attacked, proto).data, dims)
    noise_box = mask_box(result.mask)
    record = attack_record(result, image)
    record.update({"clean_box": list(box0), "attacked_box": list(box1),
                   "noise_box": None if noise_box is None else list(noise_box)})
    outputs = [out / "attack.json", out / "clean_overlay.ppm", out / "attacked_overlay.ppm"]
    write_records(out / "attack.json", [record])
    noise = [(noise_box, GREEN)] if noise_box else []
    save_overlay(out / "clean_overlay.ppm", image, heat0, [(box0, YELLOW)] + noise)
    save_overlay(out / "attacked_overlay.ppm", attacked, heat1, [(box1, YELLOW)] + noise)
    prov = model.bank.provenance[proto]
    if prov is not None and any(prov.image_id in s.ids for s in (dataset.train, dataset.test)):
        src_img, _ = _find_image(dataset, prov.image_id)
        src_heat, src_box = upsample_activation(prototype_map(model, src_img, proto).data, dims)
        save_overlay(out / "prototype_source.ppm", src_img, src_heat, [(src_box, YELLOW)])
        outputs.append(out / "prototype_source.ppm")
    _write_manifest(out, "attack", argv, {"attack": asdict(config), "prototype": proto, "image_id": args.image_id,
                                          "checkpoint": str(args.checkpoint)}, None, outputs, started)
    print(json.dumps({k: record[k] for k in ("success", "target_max_after", "source_max_after")}))


def cmd_susceptibility(args, argv) -> None:
    started = _now()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = SusceptibilityConfig(k=args.k, n_images=args.n_images, iterations=args.iterations, seed=args.seed)
    dataset = _load_data(args.data) if args.checkpoint else None
    rows = []
    records = []
    models = [_load_checkpoint(c) for c in args.checkpoint]
    candidates = None
    if models:
        # one shared image set: test images every checkpoint classifies correctly
        test = dataset.test
        candidates = sample_candidates(models, test.images, test.labels, cfg.n_images, cfg.seed)
    for ckpt, model in zip(args.checkpoint, models):
        clean = evaluate(model, test.images, test.labels,
                         PGDEvalConfig() if not args.skip_adversarial_accuracy else None)
        res = susceptibility_rate(model, test.images, test.labels, cfg, test.ids, candidates)
        regime = _regime_of(ckpt)
        rows.append({"checkpoint": str(ckpt), "regime": regime, "clean_accuracy": repr(clean["accuracy"]),
                     "adversarial_accuracy": repr(clean.get("adversarial_accuracy", float("nan"))),
                     "success_rate": repr(res.rate), "n_images": res.n_images,
                     "still_correct_fraction": repr(res.still_correct_fraction)})
        idx = {i: k for k, i in enumerate(test.ids)}
        for a in res.attacks:
            rec = attack_record(a, test.images[idx[a.image_id]])
            rec["checkpoint"] = str(ckpt)
            records.append(rec)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUSCEPTIBILITY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    outputs = [out]
    if records:
        rec_path = out.with_suffix(".records.json")
        write_records(rec_path, records)
        outputs.append(rec_path)
    _write_manifest(out.parent, "susceptibility", argv, {"susceptibility": asdict(cfg),
                                                          "checkpoints": [str(c) for c in args.checkpoint]},
                    args.seed, outputs, started)
    print(f"wrote {len(rows)} rows to {out}")


def _regime_of(ckpt) -> str:
    manifest = Path(ckpt).parent / "run_manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text()).get("config", {}).get("regime", "unknown")
    return "unknown"


def cmd_jpeg_exp(args, argv) -> None:
    started = _now()
    model = _load_checkpoint(args.checkpoint)
    corrupted = _load_data(args.data)
    clean = _load_data(args.clean_data)
    manifest = Path(args.checkpoint).parent / "run_manifest.json"
    if manifest.exists():
        trained_on = json.loads(manifest.read_text()).get("config", {}).get("corrupted_classes")
        if trained_on is not None and sorted(trained_on) != sorted(corrupted.corrupted_classes):
            raise CommandError(EXIT_MISMATCH, f"checkpoint trained with corrupted classes {trained_on}, "
                                              f"dataset lists {corrupted.corrupted_classes}")
    if clean.test.ids != corrupted.test.ids or not np.array_equal(clean.test.labels, corrupted.test.labels):
        raise CommandError(EXIT_MISMATCH, "clean and corrupted datasets do not describe the same test images")
    codec = CodecConfig(quality=args.quality, chroma_subsampling=not args.no_subsampling)
    if args.recompress:
        compressed = None
    else:
        compressed = corrupted.test.images
    records = consistency_experiment(model, clean.test, corrupted.corrupted_classes, codec, compressed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "consistency.csv", records)
    summary = summarize(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    outputs = [out / "consistency.csv", out / "summary.json"]
    by_id = {i: k for k, i in enumerate(clean.test.ids)}
    for rec in records[: args.histograms]:
        k = by_id[rec.image_id]
        comp_img = corrupted.test.images[k] if compressed is not None else None
        if comp_img is None:
            from .codec import compress_decompress

            comp_img = compress_decompress(clean.test.images[k], codec)
        hist = top_similarity_histogram(model, comp_img, clean.test.images[k], args.n)
        csv_path = out / f"hist_{rec.image_id}.csv"
        write_histogram_csv(csv_path, hist)
        paired_bar_svg(out / f"hist_{rec.image_id}_compressed_first.svg", f"{rec.image_id}: top on compressed",
                       hist["compressed_first"], "compressed", "clean")
        paired_bar_svg(out / f"hist_{rec.image_id}_clean_first.svg", f"{rec.image_id}: top on clean",
                       hist["clean_first"], "clean", "compressed")
        outputs += [csv_path, out / f"hist_{rec.image_id}_compressed_first.svg",
                    out / f"hist_{rec.image_id}_clean_first.svg"]
    _write_manifest(out, "jpeg-exp", argv, {"codec": asdict(codec), "n": args.n, "checkpoint": str(args.checkpoint)},
                    None, outputs, started)
    print(json.dumps(summary, sort_keys=True))


def cmd_gradcheck(args, argv) -> None:
    report = run_gradcheck(seed=args.seed, instances=args.instances, inject_fault=args.inject_fault)
    width = max(len(r.name) for r in report)
    print(f"{'check':<{width}}  {'max rel err':>12}  {'tolerance':>9}  status")
    for r in report:
        print(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.tolerance:9.0e}  {'ok' if r.passed else 'FAIL'}")
    if not all(r.passed for r in report):
        raise CommandError(EXIT_GRADCHECK, "gradient check failed")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protolab", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic part dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-per-class", type=int, default=160)
    p.add_argument("--test-per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--corrupt-fraction", type=float, default=0.0)
    p.add_argument("--quality", type=int, default=20)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regime", choices=("standard", "adv", "jpeg-aug"), default="standard")
    p.add_argument("--preset", choices=("reference", "paper"), default="reference")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--distance-mode", choices=("squared", "euclidean"), default="squared")
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--joint-epochs", type=int)
    p.add_argument("--last-layer-iters", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="relocate one prototype's activation in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prototype", type=int)
    p.add_argument("--target", help="latent cells 'r,c;r,c' (default: farthest cell from the source)")
    p.add_argument("--budget", type=float, default=8 / 255)
    p.add_argument("--step", type=float, default=2 / 255)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--mask-mode", choices=("receptive_field", "full_image"), default="receptive_field")
    p.add_argument("--source-rule", choices=("argmax_ties", "top_n"), default="argmax_ties")
    p.add_argument("--top-n", type=int, default=1)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("susceptibility", help="success rate of the attack over top-k prototypes")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--skip-adversarial-accuracy", action="store_true")
    p.set_defaults(func=cmd_susceptibility)

    p = sub.add_parser("jpeg-exp", help="compressed-vs-clean prototype consistency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corrupted dataset")
    p.add_argument("--clean-data", required=True, help="the same dataset without corruption")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=75)
    p.add_argument("--quality", type=int, default=20)
    p.add_argument("--no-subsampling", action="store_true")
    p.add_argument("--recompress", action="store_true",
                   help="recompute compressed images with --quality instead of reading them from --data")
    p.add_argument("--histograms", type=int, default=3, help="number of images to chart")
    p.set_defaults(func=cmd_jpeg_exp)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _apply_thread_cap()
    if args.command == "susceptibility" and args.checkpoint and not args.data:
        parser.print_usage(sys.stderr)
        print("protolab susceptibility: --data is required with --checkpoint", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args, argv)
    except CommandError as exc:
        print(f"protolab {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
