"""Operator CLI: gradcheck, toy training, evaluation, granularity sweep, stats.

Every command is deterministic given its flags (seed included) and writes
machine-readable artifacts (JSON always, CSV for tables) that embed the
resolved run configuration and a schema version. The default output
directory comes from ``--out-dir`` or the ``MOGREF_OUT_DIR`` environment
variable, falling back to ``./runs``.

Exit codes: 0 success, 2 validation/schema problems, 3 numerical failures
(divergence, gradient-check breaches), 4 I/O problems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from mogref.data import (
    GenerationError,
    SyntheticSceneSpec,
    ValidationError,
    default_vocab,
    generate_scene,
    load_annotations,
    save_annotations,
    write_ppm,
)
from mogref.gradcheck import run_gradcheck
from mogref.metrics import STAT_DEFINITIONS, dataset_stats
from mogref.model import ModelConfig, SCSModel
from mogref.rng import RngState
from mogref.tensor import DegenerateMaskError, ShapeError
from mogref.train import (
    DivergenceError,
    TrainConfig,
    build_synthetic_dataset,
    evaluate_model,
    load_dataset_dir,
    train_log_csv,
    train_toy,
)

ARTIFACT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# Full-scale reference results for the granularity sweep (per-branch count ->
# P@0.5..P@0.8, mP). Informational context only; desk-scale runs are not
# expected to reproduce them and nothing asserts against them.
FULL_SCALE_SWEEP_REFERENCE = {
    1: {"P@0.5": 25.52, "P@0.6": 20.96, "P@0.7": 13.45, "P@0.8": 5.17, "mP": 16.27},
    2: {"P@0.5": 26.07, "P@0.6": 21.23, "P@0.7": 14.32, "P@0.8": 5.65, "mP": 16.81},
    3: {"P@0.5": 27.51, "P@0.6": 22.13, "P@0.7": 14.75, "P@0.8": 6.12, "mP": 17.62},
    4: {"P@0.5": 28.15, "P@0.6": 23.37, "P@0.7": 15.23, "P@0.8": 6.41, "mP": 18.29},
    5: {"P@0.5": 28.05, "P@0.6": 23.17, "P@0.7": 15.01, "P@0.8": 6.15, "mP": 18.09},
    6: {"P@0.5": 27.82, "P@0.6": 22.23, "P@0.7": 14.67, "P@0.8": 5.93, "mP": 17.66},
}


def _out_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get("MOGREF_OUT_DIR", "runs"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def _write_json(path: Path, payload: dict, args) -> None:
    doc = {"schema_version": ARTIFACT_SCHEMA_VERSION, "run_config": _run_config(args)}
    doc.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"wrote {path}")


def _csv_text(header: list[str], rows: list[list[str]], args,
              comments: tuple[str, ...] = ()) -> str:
    lines = [f"# schema_version: {ARTIFACT_SCHEMA_VERSION}",
             f"# run_config: {json.dumps(_run_config(args), sort_keys=True)}"]
    lines += [f"# {c}" for c in comments]
    lines.append(",".join(header))
    lines += [",".join(row) for row in rows]
    return "\n".join(lines) + "\n"


def _parse_dilations(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ValidationError(f"bad --dilations value {text!r}") from exc


def _model_config(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        model_dim=args.model_dim,
        num_heads=args.num_heads,
        dilations=_parse_dilations(args.dilations),
        sce_blocks=args.sce_blocks,
        scd_blocks=args.scd_blocks,
        ssd_blocks=args.ssd_blocks,
        num_queries=args.num_queries,
        ffn_dim=args.ffn_dim,
        image_size=args.image_size,
        patch_size=args.patch_size,
        vocab_size=vocab_size,
    )


def _add_model_flags(p: argparse.ArgumentParser, dilations: bool = True) -> None:
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--num-heads", type=int, default=4)
    if dilations:
        p.add_argument("--dilations", default="1,2,3,4",
                       help="comma-separated dilation per granularity branch")
    p.add_argument("--sce-blocks", type=int, default=2)
    p.add_argument("--scd-blocks", type=int, default=1)
    p.add_argument("--ssd-blocks", type=int, default=1)
    p.add_argument("--num-queries", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=8)


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--sizes", default="small,medium,large",
                   help="comma-separated size classes for generated objects")
    p.add_argument("--templates", default="attribute,position,relation")


def _scene_spec(args) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(
        image_size=args.image_size,
        num_distractors=args.distractors,
        size_classes=tuple(s for s in args.sizes.split(",") if s),
        templates=tuple(t for t in args.templates.split(",") if t),
    )


def _load_any_dataset(args, vocab):
    if args.data:
        return load_dataset_dir(args.data, vocab)
    return build_synthetic_dataset(args.scenes, _scene_spec(args), vocab, args.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    only = [s for s in args.only.split(",") if s] if args.only else None
    results = run_gradcheck(seed=args.seed, fault_op=args.fault_inject, only=only)
    all_passed = all(r.passed for r in results)
    for r in results:
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {r.op:28s} worst_rel_err={r.worst_rel_err:.3e} "
              f"(tol {r.tolerance:g}, param {r.worst_param})")
    _write_json(_out_dir(args) / "gradcheck.json",
                {"results": [r.to_json() for r in results], "all_passed": all_passed},
                args)
    if not all_passed:
        failed = [r.op for r in results if not r.passed]
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_make_data(args) -> int:
    out = _out_dir(args)
    spec = _scene_spec(args)
    root = RngState(args.seed)
    records = []
    images = []
    for i in range(args.scenes):
        image, record = generate_scene(spec, root.derive(i), image_id=f"scene-{i:05d}")
        records.append(record)
        images.append(image)
    save_annotations(out / "annotations.json", records)
    print(f"wrote {out / 'annotations.json'} ({len(records)} records)")
    if args.ppm:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for record, image in zip(records, images):
            write_ppm(img_dir / f"{record.image_id}.ppm", image)
        print(f"wrote {len(images)} rasters under {img_dir}")
    _write_json(out / "make_data.json", {"scenes": len(records)}, args)
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    vocab = default_vocab()
    dataset = _load_any_dataset(args, vocab)
    model = SCSModel(_model_config(args, len(vocab)), vocab, RngState(args.seed))
    cfg = TrainConfig(
        steps=args.steps,
        lr=args.lr,
        batch_size=args.batch_size,
        eval_every=args.eval_every,
        target_train_p50=None if args.target_p50 <= 0 else args.target_p50,
        projector_lr=args.projector_lr,
        freeze_projector_steps=args.freeze_projector_steps,
    )
    t0 = time.time()
    result = train_toy(model, dataset, cfg)
    elapsed = time.time() - t0
    ckpt = out / "checkpoint.json"
    model.save(ckpt)
    (out / "train_log.csv").write_text(train_log_csv(result.log, _run_config(args)))
    print(f"wrote {out / 'train_log.csv'}")
    print(f"wrote {ckpt}")
    _write_json(out / "train_summary.json", {
        "steps_run": result.steps_run,
        "fit_step": result.fit_step,
        "final_train_p50": result.final_train_p50,
        "final_loss": result.log[-1]["loss"] if result.log else None,
        "elapsed_seconds": elapsed,
        "checkpoint": str(ckpt),
    }, args)
    if result.log:
        print(f"trained {result.steps_run} steps in {elapsed:.1f}s; "
              f"final loss {result.log[-1]['loss']:.4f}, "
              f"train P@0.5 {result.final_train_p50}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model = SCSModel.load(args.checkpoint)
    dataset = _load_any_dataset(args, model.vocab)
    result = evaluate_model(model, dataset)
    _write_json(out / "eval.json", {"eval": result.to_json()}, args)
    csv_text = _csv_text(result.csv_header() + ["count"],
                         [result.csv_row() + [str(result.count)]], args)
    (out / "eval.csv").write_text(csv_text)
    print(f"wrote {out / 'eval.csv'}")
    cells = " ".join(f"P@{k:g}={v:.4f}" for k, v in result.precisions.items())
    print(f"{cells} mP={result.mp:.4f} over {result.count} samples")
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    vocab = default_vocab()
    spec = _scene_spec(args)
    train_ds = build_synthetic_dataset(args.scenes, spec, vocab, args.seed)
    if args.eval_scenes > 0:
        eval_ds = build_synthetic_dataset(args.eval_scenes, spec, vocab, args.seed + 7919)
    else:
        # desk-scale models memorize; fit on the training scenes is the
        # informative per-granularity measurement, so it is the default
        eval_ds = train_ds
    rows = []
    table = []
    for g in range(1, args.gmax + 1):
        config = ModelConfig(
            model_dim=args.model_dim, num_heads=args.num_heads,
            dilations=tuple(range(1, g + 1)),
            sce_blocks=args.sce_blocks, scd_blocks=args.scd_blocks,
            ssd_blocks=args.ssd_blocks, num_queries=args.num_queries,
            ffn_dim=args.ffn_dim, image_size=args.image_size,
            patch_size=args.patch_size, vocab_size=len(vocab),
        )
        model = SCSModel(config, vocab, RngState(args.seed))
        train_toy(model, train_ds, TrainConfig(
            steps=args.steps, lr=args.lr, batch_size=args.batch_size,
            eval_every=0, target_train_p50=None,
        ))
        result = evaluate_model(model, eval_ds)
        print(f"granularities={g} " +
              " ".join(f"P@{t:g}={p:.4f}" for t, p in result.precisions.items()) +
              f" mP={result.mp:.4f}")
        rows.append([str(g)] + result.csv_row())
        table.append({"granularity": g, **result.to_json()})
    header = ["Granularity", "P@0.5", "P@0.6", "P@0.7", "P@0.8", "mP"]
    (out / "sweep.csv").write_text(_csv_text(header, rows, args))
    print(f"wrote {out / 'sweep.csv'}")
    _write_json(out / "sweep.json", {
        "rows": table,
        "full_scale_reference": {str(k): v for k, v in FULL_SCALE_SWEEP_REFERENCE.items()},
        "reference_note": "full-scale reference numbers for context; not asserted at desk scale",
    }, args)
    return EXIT_OK


def cmd_stats(args) -> int:
    out = _out_dir(args)
    records = load_annotations(args.data)
    if not records:
        raise ValidationError(f"{args.data}: no records to summarize")
    stats = dataset_stats(records)
    _write_json(out / "stats.json", {"stats": stats.to_json()}, args)
    header = ["O2S Ratio Mean (%)", "O2S Ratio Std (%)", "Word No. Mean",
              "Word No. Std", "Target No.", "Bbox No.", "Image No."]
    row = [repr(stats.o2s_mean), repr(stats.o2s_std), repr(stats.words_mean),
           repr(stats.words_std), repr(stats.targets_per_image_mean),
           str(stats.bbox_count), str(stats.image_count)]
    (out / "stats.csv").write_text(_csv_text(header, [row], args, comments=STAT_DEFINITIONS))
    print(f"wrote {out / 'stats.csv'}")
    print(f"o2s {stats.o2s_mean:.3f}% (std {stats.o2s_std:.3f}), "
          f"words {stats.words_mean:.2f} (std {stats.words_std:.2f}), "
          f"{stats.bbox_count} boxes over {stats.image_count} images")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mogref",
        description="mixture-of-granularity referring grounding: train, evaluate, sweep, summarize",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference validation of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault-inject", default=None, metavar="OP",
                   help="sign-flip the analytic gradient of one op (harness self-test)")
    p.add_argument("--only", default=None, metavar="OPS",
                   help="comma-separated case names to restrict the run")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-data", help="generate a synthetic referring dataset")
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    _add_scene_flags(p)
    p.add_argument("--ppm", action="store_true", help="also write images/<id>.ppm rasters")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train the toy grounding model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--data", default=None,
                   help="dataset directory (annotations.json + images/); default: synthetic scenes")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8, help="0 = full batch")
    p.add_argument("--eval-every", type=int, default=20)
    p.add_argument("--target-p50", type=float, default=1.0,
                   help="stop once train P@0.5 reaches this; <=0 disables")
    p.add_argument("--projector-lr", type=float, default=None,
                   help="separate fine-tune rate for the projector (off by default)")
    p.add_argument("--freeze-projector-steps", type=int, default=0,
                   help="skip projector updates for the first N steps (off by default)")
    _add_model_flags(p)
    _add_scene_flags(p)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint: P@theta table and mP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="dataset directory; default: synthetic scenes from --seed/--scenes")
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    _add_scene_flags(p)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate granularity counts 1..G under one budget")
    p.add_argument("--gmax", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--eval-scenes", type=int, default=0,
                   help="held-out scene count; 0 (default) evaluates the training scenes")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    _add_model_flags(p, dilations=False)  # the sweep sets dilations 1..G per row
    _add_scene_flags(p)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="summarize an annotation file")
    p.add_argument("--data", required=True, help="annotation JSON file")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ShapeError, DegenerateMaskError, GenerationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
