"""Command-line entry points.

Every command resolves a YAML run config, executes one stage, and writes
its outputs plus a provenance block into a run directory named by wall
time and config digest. File contents themselves carry no timestamps, so
identical runs produce identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .attack import (
    AttackMode,
    load_patch,
    load_trace_checkpoints,
    run_attack,
    save_patch,
    save_trace,
)
from .config import EvalSettings, RunConfig, config_dict, config_digest, load_run_config
from .corpus import BackgroundKind, SceneCorpus, build_synthetic_corpus, load_corpus
from .detector import load_checkpoint, save_checkpoint, train_toy_detector, weight_checksum
from .errors import PatchForgeError
from .evaluation import (
    AreaRatioCurve,
    SuccessRule,
    SweepGrid,
    area_ratio_curve,
    interference_heatmap,
    run_sweep,
    save_curve_png,
    save_heatmap_png,
)
from .scene import SceneSpec

DEFAULT_RATIOS = (0.05, 0.10, 0.15, 0.20, 0.25)


def _workers(requested: int | None) -> int:
    limit = os.cpu_count() or 1
    value = requested if requested is not None else int(os.environ.get("PATCHFORGE_WORKERS", "1"))
    value = max(1, min(value, limit))
    torch.set_num_threads(value)
    return value


def _run_root(explicit: str | None) -> Path:
    return Path(explicit or os.environ.get("PATCHFORGE_RUN_ROOT", "runs"))


def _make_run_dir(root: Path, name: str, digest: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = root / f"{name}-{stamp}-{digest[:8]}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def _provenance(config: RunConfig, **extra) -> dict:
    return {
        "package_version": __version__,
        "torch_version": torch.__version__,
        "config_digest": config_digest(config),
        "seed": config.seed,
        **extra,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _emit_config(run_dir: Path, config: RunConfig) -> None:
    _write_json(run_dir / "config.json", config_dict(config))


def _load_inputs(args, config: RunConfig, need_detector: bool = True):
    corpus = load_corpus(args.corpus)
    model = load_checkpoint(args.detector) if need_detector else None
    return corpus, model


def cmd_build_corpus(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out) if args.out else _make_run_dir(
        _run_root(args.run_root), "corpus", config_digest(config))
    corpus = build_synthetic_corpus(config.corpus, out_dir=out)
    _write_json(out / "provenance.json", _provenance(
        config, corpus_checksum=corpus.manifest_checksum))
    n_ct = sum(1 for r in corpus.records if r.kind is BackgroundKind.CONTAINS_TARGET)
    print(f"built {len(corpus)} records ({n_ct} contain the target) at {out}")
    print(f"manifest checksum {corpus.manifest_checksum[:16]}")
    return 0


def cmd_train_detector(args) -> int:
    config = load_run_config(args.config)
    corpus = load_corpus(args.corpus)
    model = train_toy_detector(corpus, config.training, config.detector)
    out = Path(args.out) if args.out else _make_run_dir(
        _run_root(args.run_root), "detector", config_digest(config)) / "detector.pt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, extra=_provenance(config))
    rate = model.train_meta["clean_detection_rate"]
    print(f"trained detector: clean detection {rate:.1f}% "
          f"after {model.train_meta['epochs_run']} epochs")
    print(f"checkpoint {out} (weights {weight_checksum(model)[:16]})")
    return 0


def cmd_attack(args) -> int:
    config = load_run_config(args.config)
    attack_cfg = config.attack
    if args.mode:
        attack_cfg = replace(attack_cfg, mode=AttackMode(args.mode))
    if args.iterations is not None:
        attack_cfg = replace(attack_cfg, iterations=args.iterations)
    config = replace(config, attack=attack_cfg)
    corpus, model = _load_inputs(args, config)
    run_dir = Path(args.out) if args.out else _make_run_dir(
        _run_root(args.run_root), f"attack-{attack_cfg.mode.value}", config_digest(config))
    run_dir.mkdir(parents=True, exist_ok=True)
    patch, trace = run_attack(model, corpus, attack_cfg)
    save_patch(patch, run_dir, meta={
        "iterations": attack_cfg.iterations,
        "config_digest": config_digest(config),
        "final_loss": trace.rows[-1].loss if trace.rows else None,
    })
    save_trace(trace, run_dir)
    _emit_config(run_dir, config)
    _write_json(run_dir / "provenance.json", _provenance(
        config,
        corpus_checksum=corpus.manifest_checksum,
        detector_checksum=weight_checksum(model),
    ))
    last = trace.rows[-1] if trace.rows else None
    loss_msg = f"final loss {last.loss:.4f}" if last else "no iterations run"
    print(f"{attack_cfg.mode.value} attack done: {loss_msg}; artifacts at {run_dir}")
    return 0


def _sweep_grid(settings: EvalSettings) -> SweepGrid:
    return SweepGrid(scale_bins=settings.scale_bins, angle_bins=settings.angle_bins,
                     frames_per_cell=settings.frames_per_cell)


def cmd_evaluate(args) -> int:
    config = load_run_config(args.config)
    corpus, model = _load_inputs(args, config)
    patch = load_patch(args.patch) if args.patch else None
    rule = SuccessRule(args.rule)
    grid = _sweep_grid(config.eval)
    report = run_sweep(model, corpus, patch, grid, rule,
                       seed=config.eval.seed, window=config.eval.window)
    run_dir = Path(args.out) if args.out else _make_run_dir(
        _run_root(args.run_root), f"eval-{rule.value}", config_digest(config))
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["provenance"] = _provenance(
        config,
        corpus_checksum=corpus.manifest_checksum,
        detector_checksum=weight_checksum(model),
    )
    _write_json(run_dir / "report.json", payload)
    print(f"{rule.value} success {report.overall:.1f}% over {report.total_frames} frames")
    for scale in grid.scale_bins:
        print(f"  scale {scale:.3f}: {report.marginal(scale=scale):.1f}%")
    print(f"report at {run_dir / 'report.json'}")
    return 0


def _heatmap_scene(corpus: SceneCorpus, seed: int) -> SceneSpec:
    for record in corpus.records:
        if record.kind is BackgroundKind.CONTAINS_TARGET:
            return SceneSpec(
                background_id=record.background_id,
                placement_box=record.target_box,
                view_angle=0.0,
                scale=0.5,
                grayscale_factor=0.0,
                noise_sigma=0.0,
                seed=seed,
            )
    raise PatchForgeError("interference analysis needs a contains_target record")


def cmd_analyze_interference(args) -> int:
    config = load_run_config(args.config)
    corpus, model = _load_inputs(args, config)
    patch = load_patch(args.attack_run)
    # leading None column measures the unperturbed scene (exactly zero)
    checkpoints = [(-1, None)] + load_trace_checkpoints(args.attack_run)
    spec = _heatmap_scene(corpus, config.eval.seed)
    heatmap = interference_heatmap(model, corpus, patch, checkpoints, spec)
    run_dir = Path(args.out) if args.out else _make_run_dir(
        _run_root(args.run_root), "interference", config_digest(config))
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "heatmap.json", {
        "layer_ids": list(heatmap.layer_ids),
        "iterations": list(heatmap.iterations),
        "matrix": heatmap.matrix.tolist(),
        "provenance": _provenance(config, detector_checksum=weight_checksum(model)),
    })
    save_heatmap_png(heatmap, run_dir / "heatmap.png")
    final = heatmap.matrix[:, -1]
    top = heatmap.layer_ids[int(final.argmax())]
    print(f"interference heatmap over {len(heatmap.iterations)} checkpoints; "
          f"strongest final-layer shift at {top}")
    print(f"artifacts at {run_dir}")
    return 0


def cmd_area_curve(args) -> int:
    config = load_run_config(args.config)
    corpus, model = _load_inputs(args, config)
    ratios = tuple(float(r) for r in args.ratios.split(",")) if args.ratios else DEFAULT_RATIOS
    attack_cfg = replace(config.attack, mode=AttackMode.HIDE)
    if args.iterations is not None:
        attack_cfg = replace(attack_cfg, iterations=args.iterations)
    curve = area_ratio_curve(model, corpus, ratios, attack_cfg,
                             trials_per_ratio=args.trials, seed=config.seed)
    run_dir = Path(args.out) if args.out else _make_run_dir(
        _run_root(args.run_root), "area-curve", config_digest(config))
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "curve.json", {
        "points": [{"ratio": p.ratio, "rate": p.rate, "trials": p.trials} for p in curve.points],
        "monotone_fit": curve.monotone_fit(),
        "provenance": _provenance(config, detector_checksum=weight_checksum(model)),
    })
    save_curve_png(curve, run_dir / "curve.png")
    for point in curve.points:
        print(f"  ratio {point.ratio:.2f}: hiding success {point.rate:.1f}%")
    print(f"artifacts at {run_dir}")
    return 0


def cmd_reproduce_all(args) -> int:
    config = load_run_config(args.config)
    digest = config_digest(config)
    root = _make_run_dir(_run_root(args.run_root), "reproduce", digest)
    _emit_config(root, config)
    print(f"[1/7] corpus -> {root / 'corpus'}")
    corpus = build_synthetic_corpus(config.corpus, out_dir=root / "corpus")

    print("[2/7] detector training")
    model = train_toy_detector(corpus, config.training, config.detector)
    save_checkpoint(model, root / "detector.pt", extra=_provenance(config))
    print(f"      clean detection {model.train_meta['clean_detection_rate']:.1f}%")

    print("[3/7] hiding attack")
    hide_cfg = replace(config.attack, mode=AttackMode.HIDE)
    hide_patch, hide_trace = run_attack(model, corpus, hide_cfg)
    hide_dir = root / "attack-hide"
    save_patch(hide_patch, hide_dir, meta={"config_digest": digest})
    save_trace(hide_trace, hide_dir)

    print("[4/7] hiding evaluation")
    grid = _sweep_grid(config.eval)
    hide_report = run_sweep(model, corpus, hide_patch, grid, SuccessRule.HIDE,
                            seed=config.eval.seed, window=config.eval.window)
    _write_json(root / "report-hide.json", hide_report.to_dict())
    print(f"      hiding success {hide_report.overall:.1f}%")

    print("[5/7] interference heatmap")
    heatmap = interference_heatmap(model, corpus, hide_patch, hide_trace.checkpoints,
                                   _heatmap_scene(corpus, config.eval.seed))
    _write_json(root / "heatmap.json", {
        "layer_ids": list(heatmap.layer_ids),
        "iterations": list(heatmap.iterations),
        "matrix": heatmap.matrix.tolist(),
    })
    save_heatmap_png(heatmap, root / "heatmap.png")

    print("[6/7] appearing attack and evaluation")
    appear_cfg = replace(config.attack, mode=AttackMode.APPEAR)
    appear_patch, appear_trace = run_attack(model, corpus, appear_cfg)
    appear_dir = root / "attack-appear"
    save_patch(appear_patch, appear_dir, meta={"config_digest": digest})
    save_trace(appear_trace, appear_dir)
    appear_report = run_sweep(model, corpus, appear_patch, grid, SuccessRule.APPEAR,
                              seed=config.eval.seed, window=config.eval.window)
    _write_json(root / "report-appear.json", appear_report.to_dict())
    print(f"      appearing success {appear_report.overall:.1f}%")

    print("[7/7] area ratio curve")
    curve_iters = max(1, config.attack.iterations // 4)
    curve = area_ratio_curve(model, corpus, DEFAULT_RATIOS,
                             replace(hide_cfg, iterations=curve_iters),
                             trials_per_ratio=200, seed=config.seed)
    _write_json(root / "curve.json", {
        "points": [{"ratio": p.ratio, "rate": p.rate, "trials": p.trials} for p in curve.points],
        "monotone_fit": curve.monotone_fit(),
    })
    save_curve_png(curve, root / "curve.png")

    _write_json(root / "summary.json", {
        "provenance": _provenance(
            config,
            corpus_checksum=corpus.manifest_checksum,
            detector_checksum=weight_checksum(model),
        ),
        "clean_detection_rate": model.train_meta["clean_detection_rate"],
        "hide_success": hide_report.overall,
        "appear_success": appear_report.overall,
        "area_curve": {str(p.ratio): p.rate for p in curve.points},
    })
    print(f"all artifacts at {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchforge",
        description="Adversarial patch attacks against a toy grid detector.")
    parser.add_argument("--workers", type=int, default=None,
                        help="torch thread cap (default: PATCHFORGE_WORKERS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, detector=True, corpus=True):
        p.add_argument("--config", default=None, help="YAML run config (defaults apply if omitted)")
        p.add_argument("--run-root", default=None,
                       help="parent for auto-named run dirs (default: PATCHFORGE_RUN_ROOT or ./runs)")
        p.add_argument("--out", default=None, help="explicit output path")
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus directory")
        if detector:
            p.add_argument("--detector", required=True, help="detector checkpoint file")

    p = sub.add_parser("build-corpus", help="draw backgrounds and the target sprite")
    common(p, detector=False, corpus=False)
    p.set_defaults(fn=cmd_build_corpus)

    p = sub.add_parser("train-detector", help="train the toy detector on rendered scenes")
    common(p, detector=False)
    p.set_defaults(fn=cmd_train_detector)

    p = sub.add_parser("attack", help="optimize a patch")
    common(p)
    p.add_argument("--mode", choices=[m.value for m in AttackMode], default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("evaluate", help="sweep a patch over distance/angle/illumination")
    common(p)
    p.add_argument("--patch", default=None, help="attack run directory holding patch.npy")
    p.add_argument("--rule", choices=[r.value for r in SuccessRule], required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze-interference",
                       help="per-layer feature shift across attack checkpoints")
    common(p)
    p.add_argument("--attack-run", required=True, help="attack run directory with saved trace")
    p.set_defaults(fn=cmd_analyze_interference)

    p = sub.add_parser("area-curve", help="hiding success as a function of patch area")
    common(p)
    p.add_argument("--ratios", default=None, help="comma-separated area ratios")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(fn=cmd_area_curve)

    p = sub.add_parser("reproduce-all", help="corpus, detector, attacks, and analyses in one run")
    p.add_argument("--config", default=None)
    p.add_argument("--run-root", default=None)
    p.set_defaults(fn=cmd_reproduce_all)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _workers(args.workers)
    try:
        return args.fn(args)
    except PatchForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
