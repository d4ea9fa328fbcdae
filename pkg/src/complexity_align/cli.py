"""Command-line entry point: ``complexity-align <verb> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .captions import STYLE_INSTRUCTIONS, caption_manifest
from .config import build_train_config, read_config_file
from .datamodel import attach_scene_texts, load_manifest, load_split, make_split, save_split
from .experiments import (
    BRANCHES,
    ExperimentGrid,
    apply_branch,
    cross_dataset_eval,
    emit_scatter,
    run_experiment,
)
from .inference import read_scores, score_manifest, write_scores
from .metrics import evaluate
from .pipeline import DESK_PROFILE, TrainConfig, load_model, prepare_manifest, save_model, train

EXIT_PARTIAL = 3

TRAIN_FLAGS = ("batch_size", "learning_rate", "epochs", "alpha", "beta", "anchor", "prompt_levels", "seed",
               "trainable_scope")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--profile", choices=("full", "desk"), default="full",
                   help="built-in defaults: full-scale protocol or the desk-scale fixture profile")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--branch", choices=BRANCHES, help="branch configuration (default C+A)")
    p.add_argument("--anchor", type=int, help="1-based anchor prompt, -1 = most complex (default)")
    p.add_argument("--prompt-levels", type=int, choices=(3, 5, 7))
    p.add_argument("--seed", type=int)
    p.add_argument("--trainable-scope", choices=("all", "prompts_only"))


def _train_config(args, ignore=frozenset()) -> TrainConfig:
    base = TrainConfig(**DESK_PROFILE) if args.profile == "desk" else TrainConfig()
    file_layer = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in TRAIN_FLAGS}
    cfg = build_train_config(base, file_layer, flags, strict=False, ignore=set(ignore))
    branch = args.branch or file_layer.get("branch")
    return apply_branch(cfg, branch) if branch else cfg


def _split_for(args, manifest):
    if getattr(args, "split", None):
        return load_split(args.split)
    return None


def cmd_ingest(args) -> int:
    m = load_manifest(args.manifest)
    print(f"{m.name}: {len(m)} records, raw range [{m.raw_score_min}, {m.raw_score_max}]")
    if args.sidecar:
        res = attach_scene_texts(m, args.sidecar)
        for w in res.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"scene descriptions: {len(m) - len(res.flagged)} attached, {len(res.flagged)} missing")
        for i in sorted(res.flagged):
            print(f"missing\t{i}")
    return 0


def cmd_caption(args) -> int:
    m = load_manifest(args.manifest)
    rep = caption_manifest(m, args.sidecar, style=args.style, endpoint=args.endpoint, offline=args.offline,
                           source=args.source, retries=args.retries)
    print(f"captioned {len(rep.written)}, failed {len(rep.flagged)}")
    for i in rep.flagged:
        print(f"flagged\t{i}", file=sys.stderr)
    return EXIT_PARTIAL if rep.flagged else 0


def cmd_split(args) -> int:
    m = load_manifest(args.manifest)
    sp = make_split(m, args.seed, args.ratio)
    save_split(sp, args.out)
    print(f"train {len(sp.train_ids)}, test {len(sp.test_ids)} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    m = prepare_manifest(load_manifest(args.manifest), args.sidecar, cfg)
    sp = load_split(args.split) if args.split else make_split(m, cfg.seed, 0.8)
    result = train(cfg, m, sp, log_path=args.log, checkpoint_dir=args.checkpoint_dir, resume_from=args.resume)
    save_model(result, args.out)
    last = result.log[-1] if result.log else None
    if last is not None:
        print(f"epoch {last.epoch} step {last.step} L={last.loss:.6f} -> {args.out}")
    return 0


def cmd_score(args) -> int:
    model = load_model(args.model)
    m = load_manifest(args.manifest)
    if model.mode == "direct":
        if not args.sidecar:
            print("error: this model scores against scene descriptions; pass --sidecar", file=sys.stderr)
            return 2
        m = attach_scene_texts(m, args.sidecar).manifest
    result = score_manifest(model, m, _split_for(args, m), stride=args.stride, rmae_root=not args.plain_mae)
    write_scores(result, args.out)
    if result.report is not None:
        print(result.report.as_text())
    return EXIT_PARTIAL if result.partial else 0


def cmd_eval(args) -> int:
    scores = read_scores(args.scores)
    m = load_manifest(args.manifest)
    sp = _split_for(args, m)
    keep = None if sp is None else set(sp.test_ids)
    pred, gt = [], []
    for r in m.records:
        if r.image_id in scores and (keep is None or r.image_id in keep):
            pred.append(scores[r.image_id])
            gt.append(r.mos)
    print(evaluate(pred, gt, rmae_root=not args.plain_mae).as_text())
    return 0


def _parse_list(text: str | None, kind=str):
    if not text:
        return ()
    return tuple(kind(x.strip()) for x in text.split(",") if x.strip())


def _parse_weights(text: str | None):
    return tuple(tuple(float(v) for v in x.split(":")) for x in _parse_list(text))


def cmd_grid(args) -> int:
    file_layer = read_config_file(args.config) if args.config else {}
    cfg = _train_config(args)
    grid = ExperimentGrid(
        base=cfg,
        branch_axis=_parse_list(args.branches or file_layer.get("branch_axis")),
        level_axis=_parse_list(args.levels or file_layer.get("level_axis"), int),
        weight_axis=_parse_weights(args.weights or file_layer.get("weight_axis")),
        caption_source_axis=_parse_list(args.caption_sources or file_layer.get("caption_source_axis")),
        caption_length_axis=_parse_list(args.caption_lengths or file_layer.get("caption_length_axis")),
    )
    m = load_manifest(args.manifest)
    sp = load_split(args.split) if args.split else make_split(m, cfg.seed, 0.8)
    sidecars = args.sidecar
    if args.sidecars:
        sidecars = {}
        for item in args.sidecars:
            key, _, path = item.partition("=")
            source, _, length = key.partition(":")
            sidecars[(source, length)] = path
    rows = run_experiment(grid, m, sp, sidecars, out_path=args.out)
    failed = sum(r["error"] != "-" for r in rows)
    print(f"{len(rows)} cells, {failed} failed -> {args.out}")
    return EXIT_PARTIAL if failed else 0


def cmd_crossval(args) -> int:
    model = load_model(args.model)
    tests = {}
    for item in args.test:
        name, _, rest = item.partition("=")
        manifest_path, _, split_path = rest.partition(",")
        if not Path(manifest_path).exists():
            tests[name] = (None, None)
            continue
        tests[name] = (load_manifest(manifest_path), load_split(split_path) if split_path else None)
    rows = cross_dataset_eval(model, args.train_name, tests, out_path=args.out)
    for r in rows:
        print("\t".join(r.values()))
    return 0


def cmd_plot(args) -> int:
    scores = read_scores(args.scores)
    m = load_manifest(args.manifest)
    pairs = [(r.mos, scores[r.image_id]) for r in m.records if r.image_id in scores]
    emit_scatter(pairs, args.out, title=args.title)
    print(f"{len(pairs)} points -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import VARIANT_B, GeneratorParams, generate_fixture

    params = VARIANT_B if args.variant == "b" else GeneratorParams()
    if args.side:
        from dataclasses import replace

        params = replace(params, side=args.side)
    manifest, sidecar = generate_fixture(args.out, n=args.n, seed=args.seed, params=params, name=args.name)
    print(f"{manifest}\n{sidecar}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="complexity-align", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and report scene-description coverage")
    p.add_argument("manifest", type=Path)
    p.add_argument("--sidecar", type=Path)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("caption", help="fill a scene sidecar from an external captioning service")
    p.add_argument("manifest", type=Path)
    p.add_argument("--sidecar", type=Path, required=True)
    p.add_argument("--style", choices=sorted(STYLE_INSTRUCTIONS), default="medium")
    p.add_argument("--endpoint")
    p.add_argument("--source", default="external", help="caption source tag recorded in the sidecar")
    p.add_argument("--offline", action="store_true", help="read the existing sidecar only")
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("split", help="seeded train/test split")
    p.add_argument("manifest", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train both branches")
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--sidecar", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path)
    p.add_argument("--checkpoint-dir", type=Path)
    p.add_argument("--resume", type=Path)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="patch-based scoring of a manifest")
    p.add_argument("model", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", type=Path, help="score only the test ids of this split")
    p.add_argument("--sidecar", type=Path)
    p.add_argument("--stride", type=int)
    p.add_argument("--plain-mae", action="store_true", help="report MAE instead of its square root")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="metrics of a score file against a manifest")
    p.add_argument("scores", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--plain-mae", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run an ablation grid")
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--sidecar", type=Path)
    p.add_argument("--sidecars", nargs="*", help="source:length=path entries for caption axes")
    p.add_argument("--branches", help="comma list of C, A, C+A")
    p.add_argument("--levels", help="comma list of 3, 5, 7")
    p.add_argument("--weights", help="comma list of alpha:beta pairs")
    p.add_argument("--caption-sources")
    p.add_argument("--caption-lengths")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("crossval", help="evaluate a trained model on other datasets")
    p.add_argument("model", type=Path)
    p.add_argument("--train-name", required=True)
    p.add_argument("--test", action="append", default=[], help="name=manifest[,split]")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("plot", help="scatter of predicted vs. ground-truth scores")
    p.add_argument("scores", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="generate the procedural fixture dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int)
    p.add_argument("--variant", choices=("a", "b"), default="a")
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
