"""
Command-line entry point.

    python app.py stats data/train.json --out runs/stats
    python app.py gen --spec specs/manhattan.cfg --n 20 --seed 0 --out runs/synth
    python app.py train --data runs/synth/annotations.json --preset toy --out runs/toy
    python app.py eval --pred runs/toy/model.pt --gt runs/synth/annotations.json --mode both --out runs/toy/eval

Exit status: 0 on success, 2 when validation violations are reported, 1 for
any other error.
"""
import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch

from config import Config, load_run_config, load_synth_spec
from layout_data.coco_io import (dataset_stats, load_coco, read_split_manifest, sample_fraction, save_coco,
                                 stratified_split, subset_stats, write_split)
from layout_data.errors import DatasetValidationError, TaxonomyMismatchError
from layout_data.taxonomy import (BUILTIN_MAPS, BUILTIN_TAXONOMIES, apply_map, builtin_map, builtin_taxonomy,
                                  coverage_report, identity_map, load_label_map)
from layout_data.types import Dataset
from layout_data.validation import validate_dataset
from layout_engine.evaluator import (MODES, compare_runs, evaluate, evaluate_by_subset, format_report_table,
                                     per_category_report, read_results, write_results)
from layout_engine.mask_codec import MaskCodec
from layout_engine.model import init_model, load_checkpoint
from layout_engine.pipeline import generate_job_id, run_job
from layout_engine.synth import generate_corpus
from layout_engine.trainer import fit_codec, predict_pages, train
from utils.exporters import format_stats_table, write_frame, write_run_manifest, write_stats_table, write_text
from utils.helpers import codec_cache_path, file_sha256, load_page_images

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_VIOLATIONS = 0, 1, 2


@dataclass
class CommandResult:
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    seed: Optional[int] = None
    exit_code: int = EXIT_OK


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_violations(violations) -> None:
    print(f"{len(violations)} validation violation(s):")
    for v in violations:
        print(f"  {v}")


def cmd_stats(args) -> CommandResult:
    d = load_coco(args.input)
    split = read_split_manifest(args.split_manifest) if args.split_manifest else None
    stats = dataset_stats(d, split, workers=args.workers)
    print(format_stats_table(stats))
    out = _out_dir(args)
    table = write_stats_table(stats, out / "stats.tsv")
    subsets = write_frame(subset_stats(d), out / "subsets.tsv")
    return CommandResult({"annotations": args.input}, {"stats": str(table), "subsets": str(subsets)})


def cmd_split(args) -> CommandResult:
    ratios = tuple(float(r) for r in args.ratios.split(","))
    d = load_coco(args.input)
    assignment = stratified_split(d, ratios, args.seed)
    files = write_split(d, assignment, _out_dir(args))
    for split, n in assignment.sizes().items():
        print(f"{split.value}\t{n}")
    return CommandResult({"annotations": args.input}, {k: str(v) for k, v in files.items()},
                         {"ratios": list(ratios)}, args.seed)


def _resolve_map(name_or_path: str, d: Dataset):
    if name_or_path in BUILTIN_MAPS:
        return builtin_map(name_or_path)
    if name_or_path == "identity":
        return identity_map(d.taxonomy)
    return load_label_map(name_or_path, source_taxonomy_id=None)


def cmd_remap(args) -> CommandResult:
    taxonomy = builtin_taxonomy(args.taxonomy) if args.taxonomy else None
    if taxonomy is None and args.map in BUILTIN_MAPS:
        taxonomy = builtin_taxonomy(builtin_map(args.map).source_taxonomy_id)
    d = load_coco(args.input, taxonomy=taxonomy)
    m = _resolve_map(args.map, d)
    report = coverage_report(m, d.taxonomy)
    if report.unmapped:
        logger.warning("Map leaves %d categories unmapped: %s", len(report.unmapped), ", ".join(report.unmapped))
    mapped = apply_map(d, m)
    out = _out_dir(args) / f"{mapped.taxonomy.id}.json"
    save_coco(mapped, out)
    print(f"{d.instance_count()} -> {mapped.instance_count()} instances, "
          f"{len(mapped.taxonomy)} target categories ({len(report.dropped)} dropped)")
    return CommandResult({"annotations": args.input, "map": args.map}, {"annotations": str(out)})


def cmd_gen(args) -> CommandResult:
    overrides = {"family": args.family, "min_instances": args.min_instances, "max_instances": args.max_instances}
    spec = load_synth_spec(args.spec, overrides)
    out = _out_dir(args)
    corpus = generate_corpus(spec, args.n, args.seed, workers=args.workers, out_dir=out)
    print(f"{len(corpus.dataset)} pages, {corpus.dataset.instance_count()} instances")
    snapshot = {k: (v.value if hasattr(v, "value") else (list(v) if isinstance(v, tuple) else v))
                for k, v in vars(spec).items()}
    return CommandResult({"spec": args.spec or ""}, {"annotations": str(out / "annotations.json"),
                                                     "images": str(out / "images")}, snapshot, args.seed)


def _codec_for(annotations: str, d: Dataset, dim: int, patch_size: int) -> Optional[MaskCodec]:
    """Fitted mask codec, reused from the cache directory when the annotations are unchanged."""
    path = codec_cache_path(file_sha256(annotations), dim, patch_size)
    if path.exists():
        logger.info("Using cached mask codec %s", path)
        return MaskCodec.from_state(torch.load(path, map_location="cpu", weights_only=True))
    codec = fit_codec(d, dim, patch_size)
    if codec is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(codec.to_state(), path)
    return codec


def cmd_train(args) -> CommandResult:
    d = load_coco(args.data)
    if args.fraction != 1.0:
        full = len(d)
        d = sample_fraction(d, args.fraction, args.seed or 0)
        logger.info("Training on %d of %d pages (fraction %g)", len(d), full, args.fraction)
    images_root = args.images or str(Path(args.data).parent)
    images = load_page_images(d, images_root)
    overrides = {
        "num_classes": len(d.taxonomy),
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "use_encoder": False if args.no_encoder else None,
        "use_dynamic_decoder": False if args.no_dynamic_decoder else None,
        "share_heads": False if args.no_shared_heads else None,
    }
    cfg = load_run_config(args.config, args.preset, overrides)
    out = _out_dir(args)
    model = init_model(cfg.model, cfg.train.seed)
    if args.fraction < 1.0:
        # the codec cache is keyed by the whole annotation file
        model.codec = fit_codec(d, cfg.model.mask_embedding_dim, cfg.model.mask_patch_size)
    else:
        model.codec = _codec_for(args.data, d, cfg.model.mask_embedding_dim, cfg.model.mask_patch_size)
    result = train(model, d, cfg.train, images, out_dir=out, augment_cfg=cfg.augment, workers=args.workers,
                   job_id=args.job_id)
    last = result.log.records[-1]
    print(f"{result.steps} steps, final loss {last['loss']:.5f}")
    snapshot = cfg.snapshot()
    snapshot["fraction"] = args.fraction
    snapshot["train_pages"] = len(d)
    return CommandResult({"annotations": args.data, "images": images_root, "config": args.config or ""},
                         {"checkpoint": str(result.checkpoint), "metrics": str(out / "metrics.jsonl")},
                         snapshot, cfg.train.seed)


def _load_predictions(args, gt: Dataset) -> Dataset:
    if Path(args.pred).suffix == ".pt":
        model, names = load_checkpoint(args.pred)
        if names and names != gt.taxonomy.names:
            raise TaxonomyMismatchError(f"checkpoint was trained on {len(names)} categories that differ "
                                        f"from taxonomy '{gt.taxonomy.id}'")
        images = load_page_images(gt, args.images or str(Path(args.gt).parent))
        preds = predict_pages(model, gt, images, args.score_threshold, args.max_dets, args.workers)
        return gt.with_pages([p.with_instances(preds[p.image_id]) for p in gt.pages])
    return load_coco(args.pred, taxonomy=gt.taxonomy, strict=False)


def cmd_eval(args) -> CommandResult:
    gt = load_coco(args.gt)
    preds = _load_predictions(args, gt)
    out = _out_dir(args)
    outputs = {}
    if Path(args.pred).suffix == ".pt":
        save_coco(preds, out / "predictions.json")
        outputs["predictions"] = str(out / "predictions.json")

    modes = MODES if args.mode == "both" else (args.mode,)
    results = []
    for mode in modes:
        r = evaluate(preds, gt, mode=mode, workers=args.workers)
        results.append(r)
        print(f"{mode}: mAP {r.mAP:.4f}  AP50 {r.AP50:.4f}  AP75 {r.AP75:.4f}  AR {r.AR:.4f}")
        table = format_report_table(per_category_report(r))
        outputs[f"report_{mode}"] = str(write_text(table, out / f"report_{mode}.txt"))
        if args.by_subset:
            per_subset = evaluate_by_subset(preds, gt, mode=mode, workers=args.workers)
            for subset, sr in per_subset.items():
                print(f"  {subset.value}: mAP {sr.mAP:.4f}  AP50 {sr.AP50:.4f}  AP75 {sr.AP75:.4f}")
            path = write_results(per_subset.values(), out / f"subsets_{mode}.jsonl")
            outputs[f"subsets_{mode}"] = str(path)
    outputs["results"] = str(write_results(results, out / "results.jsonl"))
    return CommandResult({"predictions": args.pred, "ground_truth": args.gt}, outputs, {"mode": args.mode})


def cmd_compare(args) -> CommandResult:
    a = {r.mode: r for r in read_results(args.a)}
    b = {r.mode: r for r in read_results(args.b)}
    common = [m for m in MODES if m in a and m in b]
    if not common:
        raise ValueError(f"{args.a} and {args.b} share no evaluation mode")
    out = _out_dir(args)
    outputs = {}
    for mode in common:
        diff = compare_runs(a[mode], b[mode])
        print(f"== {mode} ==")
        print(diff.head(args.top).to_string(index=False))
        outputs[f"compare_{mode}"] = str(write_frame(diff, out / f"compare_{mode}.tsv"))
    return CommandResult({"a": args.a, "b": args.b}, outputs)


def cmd_validate(args) -> CommandResult:
    taxonomy = builtin_taxonomy(args.taxonomy) if args.taxonomy else None
    d = load_coco(args.input, taxonomy=taxonomy, strict=False)
    violations = validate_dataset(d)
    out = _out_dir(args)
    report = write_text("\n".join(str(v) for v in violations) or "ok", out / "violations.txt")
    if violations:
        _print_violations(violations)
    else:
        print(f"{args.input}: {len(d)} pages, {d.instance_count()} instances, no violations")
    return CommandResult({"annotations": args.input}, {"report": str(report)},
                         exit_code=EXIT_VIOLATIONS if violations else EXIT_OK)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="Document layout analysis toolkit")
    parser.add_argument("--workers", type=int, default=1, help="worker threads (1 = deterministic)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-category and per-subset tallies")
    p.add_argument("input")
    p.add_argument("--split-manifest", help="split_manifest.tsv from the split command")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("split", help="stratified train/val/test split")
    p.add_argument("input")
    p.add_argument("--ratios", default="6,1,3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("remap", help="apply a label map")
    p.add_argument("input")
    p.add_argument("--map", required=True,
                   help=f"builtin map ({', '.join(BUILTIN_MAPS)}), 'identity', or a map file")
    p.add_argument("--taxonomy", choices=sorted(BUILTIN_TAXONOMIES), help="taxonomy of the input file")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_remap)

    p = sub.add_parser("gen", help="render a synthetic corpus")
    p.add_argument("--spec", help="key=value page-generator spec file")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=["rectangular", "manhattan", "non_manhattan", "multi_column"])
    p.add_argument("--min-instances", type=int)
    p.add_argument("--max-instances", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("train", help="train TransDLANet")
    p.add_argument("--data", required=True, help="COCO annotation file")
    p.add_argument("--images", help="image root (default: the annotation file's directory)")
    p.add_argument("--preset", default="toy", choices=list(Config.PRESETS))
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--fraction", type=float, default=1.0, help="train on a seeded fraction of the pages")
    p.add_argument("--no-encoder", action="store_true")
    p.add_argument("--no-dynamic-decoder", action="store_true")
    p.add_argument("--no-shared-heads", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file")
    p.add_argument("--pred", required=True, help="checkpoint (.pt) or COCO prediction file with scores")
    p.add_argument("--gt", required=True)
    p.add_argument("--images", help="image root for checkpoint inference")
    p.add_argument("--mode", default="both", choices=["boxes", "masks", "both"])
    p.add_argument("--by-subset", action="store_true")
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--max-dets", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("compare", help="per-metric deltas between two results files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("validate", help="report validation violations")
    p.add_argument("input")
    p.add_argument("--taxonomy", choices=sorted(BUILTIN_TAXONOMIES))
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=Config.LOG_FORMAT, force=True)
    args.job_id = generate_job_id()
    started = time.perf_counter()
    try:
        result = run_job(args.job_id, args.handler, args)
    except DatasetValidationError as e:
        _print_violations(e.violations)
        return EXIT_VIOLATIONS
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_ERROR
    elapsed = time.perf_counter() - started
    write_run_manifest(args.out, args.command, result.config, result.seed, result.inputs, result.outputs, elapsed)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
