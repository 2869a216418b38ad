"""Command-line surface.

Subcommands:
    synth   — generate a synthetic defect dataset from a [synth] spec file
    train   — train on a dataset root, writing logs/checkpoint to an out dir
    eval    — evaluate a checkpoint on a dataset's test split, writing CSV
    score   — score a single image and export a heatmap (plus raw map)
    ablate  — run a component or MoE hyperparameter grid of train+eval runs

Exit codes: 0 success, 2 usage errors, 1 runtime failures (with a
stage-tagged diagnostic on stderr).
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import metrics as metrics_mod
from . import scoring as scoring_mod
from .config import RunConfig, load_config
from .data import ImageSample, load_dataset, load_image
from .errors import NormdistillError
from .heatmap import export_heatmap
from .pipeline import fit, load_checkpoint
from .synthetic import generate_synthetic, load_synth_spec


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normdistill",
        description="Multi-class anomaly detection via cross-modal normality distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic defect dataset")
    p_synth.add_argument("--spec", required=True, help="INI file with a [synth] section")
    p_synth.add_argument("--out", required=True, help="dataset root to create")
    p_synth.add_argument("--overwrite", action="store_true")

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", required=True, help="run configuration INI")
    p_train.add_argument("--data-root", default=None, help="dataset root (overrides [data] root)")
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override [train] seed")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-root", default=None)
    p_eval.add_argument("--report", required=True, help="output CSV path")

    p_score = sub.add_parser("score", help="score one image, export a heatmap")
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--image", required=True)
    p_score.add_argument("--heatmap", required=True, help="overlay PNG output")
    p_score.add_argument("--raw", default=None, help="optional raw float32 map output")

    p_ablate = sub.add_parser("ablate", help="run an ablation grid")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--grid", required=True, choices=("moe", "components"))
    p_ablate.add_argument("--out-dir", required=True)
    p_ablate.add_argument("--data-root", default=None)
    return parser


def _resolve_root(config: RunConfig, override) -> str:
    root = override if override else config.data.root
    if not root:
        raise NormdistillError("no dataset root: pass --data-root or set [data] root")
    return root


def _cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    root = generate_synthetic(spec, args.out, overwrite=args.overwrite)
    print(f"wrote synthetic dataset to {root}")
    return 0


def _train_once(config: RunConfig, root: str, out_dir) -> None:
    samples = load_dataset(root, "train", resolution=config.train.resolution)
    fit(samples, config, out_dir=out_dir)


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    root = _resolve_root(config, args.data_root)
    _train_once(config, root, args.out_dir)
    print(f"training finished; outputs in {args.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    root = _resolve_root(state.config, args.data_root)
    samples = load_dataset(root, "test", resolution=state.config.train.resolution)
    results = scoring_mod.score_dataset(state, samples)
    report = metrics_mod.evaluate_scored(samples, results)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(report_path)
    print(f"wrote metric report to {report_path}")
    return 0


def _cmd_score(args) -> int:
    state = load_checkpoint(args.checkpoint)
    res = state.config.train.resolution
    pixels = load_image(args.image, resolution=res)
    sample = ImageSample(pixels=pixels, category="cli", is_anomalous=False)
    result = scoring_mod.score_dataset(state, [sample])[0]
    export_heatmap(result, pixels.numpy(), args.heatmap, raw_path=args.raw)
    print(f"image score {result.image_score:.6f}; heatmap at {args.heatmap}")
    return 0


def _components_grid():
    for guidance in (False, True):
        for moe_on in (False, True):
            name = f"guidance_{'on' if guidance else 'off'}_moe_{'on' if moe_on else 'off'}"
            yield name, {"prompt_guidance": guidance, "moe_enabled": moe_on}


def _moe_grid():
    for num_experts in range(1, 7):
        for top_k in range(1, min(num_experts, 4) + 1):
            yield f"T{num_experts}_K{top_k}", {"num_experts": num_experts, "top_k": top_k}


def _cmd_ablate(args) -> int:
    config = load_config(args.config)
    root = _resolve_root(config, args.data_root)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = _components_grid() if args.grid == "components" else _moe_grid()
    summary_rows = []
    for name, overrides in grid:
        variant = config
        if "prompt_guidance" in overrides:
            variant = replace(variant, train=replace(
                variant.train, prompt_guidance=overrides["prompt_guidance"]))
        if "moe_enabled" in overrides:
            variant = replace(variant, moe=replace(variant.moe, enabled=overrides["moe_enabled"]))
        if "num_experts" in overrides:
            variant = replace(variant, moe=replace(
                variant.moe, enabled=True, num_experts=overrides["num_experts"],
                top_k=overrides["top_k"]))
        run_dir = out / name
        train_samples = load_dataset(root, "train", resolution=variant.train.resolution)
        state, _ = fit(train_samples, variant, out_dir=run_dir)
        test_samples = load_dataset(root, "test", resolution=variant.train.resolution)
        report = metrics_mod.evaluate(state, test_samples)
        report.write_csv(run_dir / "report.csv")
        summary_rows.append((name, report.mean))
        print(f"[{name}] mean i_auroc={report.mean.i_auroc:.4f} p_auroc={report.mean.p_auroc:.4f}")
    with open(out / "ablation_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant",) + metrics_mod.METRIC_COLUMNS)
        for name, mean in summary_rows:
            writer.writerow([name] + [repr(getattr(mean, c)) for c in metrics_mod.METRIC_COLUMNS])
    print(f"ablation summary in {out / 'ablation_summary.csv'}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "score": _cmd_score,
    "ablate": _cmd_ablate,
}


def cli(argv=None) -> int:
    """Run the CLI; returns the process exit code instead of raising SystemExit."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors with code 2
        return int(exc.code or 0)
    command = args.command
    try:
        return _COMMANDS[command](args)
    except NormdistillError as exc:
        print(f"error[{command}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[{command}]: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(cli())


__all__ = ["cli", "entrypoint"]
