"""Command-line front end.

Subcommands cover the whole pipeline: RIR simulation, dataset synthesis,
training, evaluation, and the three analysis artifacts (permutation census,
per-position SI-SDRi scatter, inter-channel attention grids).  Every command
writes a run_manifest.json into its output directory, uses atomic writes
only, and exits 0 on success, 1 on runtime failure, 2 on usage or config
errors.
"""

import argparse
import csv
import dataclasses
import io
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .acoustics import AcousticsError, RirCache
from .autodiff import ConfigError, no_grad
from .dataset import (REGION_ORDER, SAMPLE_RATE, SPLITS, VARIANTS,
                      build_dataset, cabin_array, cabin_regions, cabin_room,
                      load_dataset_config, load_example, load_manifest,
                      sample_positions)
from .fileio import (atomic_write_text, read_jsonl, read_wav, write_jsonl,
                     write_wav)
from .objectives import permutation_census
from .separator import ModelConfig, init_params, load_checkpoint, separate
from .training import (TrainConfig, TrainingError, evaluate,
                       load_training_examples, train)

CSV_FLOAT_FORMAT = "{:.6f}"


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:          # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _model_config(table: dict) -> ModelConfig:
    allowed = set(ModelConfig.__dataclass_fields__)
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown model config keys: {unknown}")
    return ModelConfig(**table)


def _require(args, parser, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names
               if getattr(args, n, None) is None]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")


# ---------------------------------------------------------------------------
# run manifests and logs


def write_run_manifest(out_dir, command: str, config: dict, seed,
                       inputs: dict, outputs: List[str],
                       deterministic: bool) -> None:
    """One manifest per output directory; reruns replace it atomically."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(o) for o in outputs),
        "created_at": ("" if deterministic
                       else datetime.now(timezone.utc).isoformat()),
    }
    atomic_write_text(Path(out_dir) / "run_manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_run_log(out_dir, events: List[dict]) -> None:
    write_jsonl(Path(out_dir) / "run_log.jsonl", events)


# ---------------------------------------------------------------------------
# CSV rendering


def _csv_text(rows: List[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value: float) -> str:
    return CSV_FLOAT_FORMAT.format(value)


def metrics_csv(metrics, set_name: str, model_name: str) -> str:
    """Result table: averages first, then per-region columns."""
    header = ["set", "model", "avg_sisdr", "avg_sisdri"]
    row = [set_name, model_name,
           _fmt(metrics.average_si_sdr), _fmt(metrics.average_si_sdri)]
    for label in metrics.region_labels:
        header += [f"{label}_sisdr", f"{label}_sisdri"]
        row += [_fmt(metrics.si_sdr[label]), _fmt(metrics.si_sdri[label])]
    return _csv_text([header, row])


def census_csv(report) -> str:
    """Census table: majority, correct count, pairwise confusions, flag.

    All label pairs are always present (zeros included); cyclic confusions
    keep their own rows so the counts still total the example count.
    """
    labels = report.labels
    rows = [["metric", "value"],
            ["majority", "".join(report.majority)],
            ["correct", report.correct]]
    pair_keys = sorted(f"{labels[i]}<->{labels[j]}"
                       for i in range(len(labels))
                       for j in range(i + 1, len(labels)))
    for key in pair_keys:
        rows.append([key, report.confusions.get(key, 0)])
    for key in sorted(set(report.confusions) - set(pair_keys)):
        rows.append([key, report.confusions[key]])
    rows.append(["all_have_one_correct",
                 "true" if report.all_have_one_correct else "false"])
    return _csv_text(rows)


# ---------------------------------------------------------------------------
# SVG rendering (static figures; no plotting dependency)


def _svg_document(width: int, height: int, body: List[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


REGION_COLORS = {"D": "#1f77b4", "C": "#ff7f0e", "B": "#2ca02c"}


def scatter_svg(points: List[dict], extent=(3.0, 2.0)) -> str:
    """Top view of the room; marker area tracks mean SI-SDRi."""
    width, height, pad = 480, 320, 20
    sx = (width - 2 * pad) / extent[0]
    sy = (height - 2 * pad) / extent[1]
    means = [p["mean_sisdri"] for p in points]
    lo, hi = min(means), max(means)
    span = (hi - lo) or 1.0
    body = [f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" '
            f'height="{height - 2 * pad}" fill="none" stroke="#888"/>']
    for p in points:
        cx = pad + p["x"] * sx
        cy = height - pad - p["y"] * sy
        radius = 2.0 + 8.0 * (p["mean_sisdri"] - lo) / span
        color = REGION_COLORS.get(p["region"], "#444444")
        body.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius:.2f}" '
                    f'fill="{color}" fill-opacity="0.7">'
                    f'<title>{p["region"]} {p["mean_sisdri"]:.2f} dB'
                    f' (n={p["count"]})</title></circle>')
    return _svg_document(width, height, body)


def attention_svg(grids: Dict[str, np.ndarray]) -> str:
    """Heat grids: one row per region, one panel per head, M x M cells."""
    cell, gap, pad = 18, 26, 30
    regions = sorted(grids)
    heads, m, _ = grids[regions[0]].shape
    panel = m * cell
    width = pad * 2 + heads * panel + (heads - 1) * gap
    height = pad * 2 + len(regions) * panel + (len(regions) - 1) * gap
    body = []
    for gi, region in enumerate(regions):
        top = pad + gi * (panel + gap)
        body.append(f'<text x="4" y="{top + panel / 2:.0f}" '
                    f'font-size="12">{region}</text>')
        for h in range(heads):
            left = pad + h * (panel + gap)
            if gi == 0:
                body.append(f'<text x="{left}" y="{pad - 8}" '
                            f'font-size="12">head {h}</text>')
            for i in range(m):
                for j in range(m):
                    w = float(grids[region][h, i, j])
                    shade = int(round(255 * (1.0 - max(0.0, min(1.0, w)))))
                    body.append(
                        f'<rect x="{left + j * cell}" y="{top + i * cell}" '
                        f'width="{cell}" height="{cell}" '
                        f'fill="rgb({shade},{shade},255)" stroke="#ccc"/>')
    return _svg_document(width, height, body)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate_rirs(args, parser) -> int:
    _require(args, parser, "config", "out")
    config = load_dataset_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    cache_dir = Path(args.out)
    cache = RirCache(cache_dir)
    rooms = {t: cabin_room(t) for t in config.t60_grid}
    array = cabin_array()
    regions = cabin_regions()
    for region in regions:
        region.validate_inside(rooms[config.t60_grid[0]])
    bank = sample_positions(rooms[config.t60_grid[0]], regions,
                            config.position_counts, config.seed)

    before = len(list(cache_dir.glob("*.f32")))
    done = 0
    total = sum(config.position_counts) * len(array) * len(config.t60_grid)
    for t60 in config.t60_grid:
        for label in REGION_ORDER:
            for split in SPLITS:
                for pos in bank.points(label, split):
                    for mic in array.mic_positions:
                        cache.get(rooms[t60], pos, mic,
                                  max_order=config.max_order)
                        done += 1
                        if done % 200 == 0:
                            print(f"simulate-rirs: {done}/{total}",
                                  file=sys.stderr)
    new = len(list(cache_dir.glob("*.f32"))) - before

    write_run_log(cache_dir, [{"event": "simulate-rirs", "total": done,
                               "new": new, "cached": done - new}])
    write_run_manifest(cache_dir, "simulate-rirs",
                       {"dataset": asdict(config)}, config.seed,
                       {"config": args.config}, ["run_log.jsonl"],
                       args.deterministic)
    print(f"simulate-rirs: {done} RIRs ({new} new, {done - new} cached)")
    return 0


def cmd_synth_dataset(args, parser) -> int:
    _require(args, parser, "config")
    config = load_dataset_config(args.config)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=str(args.out))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if not config.out_dir:
        parser.error("synth-dataset needs an output directory "
                     "(--out or dataset.out_dir)")
    manifests = build_dataset(config)
    counts = {name: len(rows) for name, rows in manifests.items()}
    out = Path(config.out_dir)
    write_run_log(out, [{"event": "synth-dataset", "counts": counts}])
    write_run_manifest(out, "synth-dataset", {"dataset": asdict(config)},
                       config.seed, {"config": args.config},
                       [f"manifests/{n}.jsonl" for n in sorted(counts)],
                       args.deterministic)
    print("synth-dataset: " + ", ".join(f"{n}={c}"
                                        for n, c in sorted(counts.items())))
    return 0


def cmd_train(args, parser) -> int:
    _require(args, parser, "config", "out")
    raw = _load_toml(args.config)
    if "model" not in raw or "train" not in raw:
        raise ConfigError(f"{args.config} needs [model] and [train] tables")
    model_config = _model_config(raw["model"])
    train_config = TrainConfig.from_dict(raw["train"])
    if args.regime is not None:
        train_config = dataclasses.replace(train_config, regime=args.regime)
    if args.seed is not None:
        train_config = dataclasses.replace(train_config, seed=args.seed)
    if args.deterministic:
        train_config = dataclasses.replace(train_config, deterministic=True)

    data_dir = args.data or train_config.manifest
    if data_dir is None:
        parser.error("train needs a dataset (--data or train.manifest)")
    train_manifest = Path(data_dir) / "manifests" / "train.jsonl"
    if not train_manifest.exists():
        raise FileNotFoundError(f"no manifest at {train_manifest}")

    rows = load_manifest(data_dir, "train")
    refs = {row.get("reference_index") for row in rows}
    reference_index = refs.pop() if len(refs) == 1 else None

    examples = load_training_examples(data_dir, "train")
    val = None
    if (Path(data_dir) / "manifests" / "val.jsonl").exists():
        val = load_training_examples(data_dir, "val")

    params = init_params(model_config, seed=train_config.seed,
                         dtype=np.float32)
    out = Path(args.out)
    params, log = train(params, model_config, examples, train_config,
                        out_dir=out, val_data=val,
                        reference_index=reference_index)

    steps = [r for r in log if r["kind"] == "step"]
    write_run_manifest(out, "train",
                       {"model": asdict(model_config),
                        "train": asdict(train_config)},
                       train_config.seed, {"config": args.config,
                                           "data": data_dir},
                       ["train_log.jsonl", "final.ckpt"],
                       train_config.deterministic)
    print(f"train: {len(steps)} steps, final loss "
          f"{steps[-1]['loss']:.3f}, checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_evaluate(args, parser) -> int:
    _require(args, parser, "checkpoint", "data", "variant", "out")
    params, model_config = load_checkpoint(args.checkpoint, dtype=np.float32)
    if args.config is not None:
        raw = _load_toml(args.config)
        if "model" in raw and _model_config(raw["model"]) != model_config:
            raise ConfigError(
                f"model table in {args.config} does not match the "
                f"checkpoint config {model_config}")

    result = evaluate(params, model_config, args.data, args.variant)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_name = args.model_name or Path(args.checkpoint).stem
    set_name = (f"test_{args.variant.lower()}"
                if args.variant in VARIANTS else args.variant)
    atomic_write_text(out / "results.csv",
                      metrics_csv(result.metrics, set_name, model_name))
    atomic_write_text(out / "census.csv", census_csv(result.census))
    atomic_write_text(out / "metrics.json",
                      json.dumps({"metrics": result.metrics.to_json_dict(),
                                  "census": result.census.to_json_dict()},
                                 indent=2, sort_keys=True) + "\n")
    write_jsonl(out / "eval_records.jsonl", result.records)

    outputs = ["results.csv", "census.csv", "metrics.json",
               "eval_records.jsonl"]
    if args.save_estimates:
        est_dir = out / "estimates"
        dtype = params["encoder.kernels"].data.dtype
        rows = load_manifest(args.data, set_name)
        for row in rows:
            ex = load_example(args.data, row)
            with no_grad():
                sep = separate(ex.mics.astype(dtype), params, model_config,
                               row.get("reference_index"))
            for k in range(model_config.num_regions):
                write_wav(est_dir / f"ex{row['index']:05d}_est{k}.wav",
                          np.asarray(sep.estimates.data)[k], SAMPLE_RATE)
        outputs.append("estimates")

    write_run_manifest(out, "evaluate", {"model": asdict(model_config)},
                       args.seed, {"checkpoint": args.checkpoint,
                                   "data": args.data,
                                   "variant": args.variant},
                       outputs, args.deterministic)
    print(f"evaluate: {result.metrics.count} examples, "
          f"avg SI-SDRi {result.metrics.average_si_sdri:.2f} dB, "
          f"census correct {result.census.correct}/{result.census.total}")
    return 0


def cmd_analyze_permutations(args, parser) -> int:
    _require(args, parser, "estimates", "data", "manifest", "out")
    rows = load_manifest(args.data, args.manifest)
    if not rows:
        raise ConfigError(f"manifest {args.manifest} has no examples")
    est_dir = Path(args.estimates)
    pairs = []
    for row in rows:
        ex = load_example(args.data, row)
        r = ex.targets.shape[0]
        est = []
        for k in range(r):
            path = est_dir / f"ex{row['index']:05d}_est{k}.wav"
            if not path.exists():
                raise ConfigError(
                    f"estimates misaligned with manifest: missing {path}")
            est.append(read_wav(path)[1])
        lengths = {len(e) for e in est} | {ex.targets.shape[1]}
        if len(lengths) != 1:
            raise ConfigError(
                f"estimates misaligned with manifest: example "
                f"{row['index']} mixes lengths {sorted(lengths)}")
        pairs.append((np.stack(est), ex.targets))

    report = permutation_census(pairs, labels=REGION_ORDER[:len(pairs[0][0])])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "census.csv", census_csv(report))
    atomic_write_text(out / "census.json",
                      json.dumps(report.to_json_dict(), indent=2,
                                 sort_keys=True) + "\n")
    write_run_manifest(out, "analyze-permutations", {}, args.seed,
                       {"estimates": args.estimates, "data": args.data,
                        "manifest": args.manifest},
                       ["census.csv", "census.json"], args.deterministic)
    print(f"analyze-permutations: majority {''.join(report.majority)}, "
          f"correct {report.correct}/{report.total}")
    return 0


def cmd_scatter_sisdri(args, parser) -> int:
    _require(args, parser, "records", "out")
    records_path = Path(args.records)
    if not records_path.exists():
        raise FileNotFoundError(f"no evaluation records at {records_path}")
    records = read_jsonl(records_path)
    groups: Dict[tuple, List[float]] = {}
    for record in records:
        for region, entry in record.get("per_region", {}).items():
            position = entry.get("position")
            if position is None:
                continue
            key = (region, round(position[0], 9), round(position[1], 9))
            groups.setdefault(key, []).append(entry["si_sdri"])
    if not groups:
        raise ConfigError(f"{records_path} has no positioned examples")

    points = [{"region": region, "x": x, "y": y,
               "mean_sisdri": float(np.mean(vals)), "count": len(vals)}
              for (region, x, y), vals in sorted(groups.items())]
    rows = [["x", "y", "region", "mean_sisdri", "count"]]
    for p in points:
        rows.append([_fmt(p["x"]), _fmt(p["y"]), p["region"],
                     _fmt(p["mean_sisdri"]), p["count"]])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "scatter.csv", _csv_text(rows))
    outputs = ["scatter.csv"]
    if args.svg:
        atomic_write_text(out / "scatter.svg", scatter_svg(points))
        outputs.append("scatter.svg")
    write_run_manifest(out, "scatter-sisdri", {}, args.seed,
                       {"records": args.records}, outputs,
                       args.deterministic)
    print(f"scatter-sisdri: {len(points)} positions")
    return 0


def cmd_inspect_attention(args, parser) -> int:
    _require(args, parser, "checkpoint", "data", "manifest", "out")
    params, model_config = load_checkpoint(args.checkpoint, dtype=np.float32)
    rows = load_manifest(args.data, args.manifest)
    labels = REGION_ORDER[:model_config.num_regions]

    per_region: Dict[str, List[list]] = {}
    for row in rows:
        ex = load_example(args.data, row)
        energies = np.sum(ex.targets.astype(np.float64) ** 2, axis=1)
        active = [i for i, e in enumerate(energies) if e > 0.0]
        if len(active) != 1:
            names = [labels[i] for i in active] or ["none"]
            raise ConfigError(
                f"example {row['index']} must have exactly one active "
                f"region, found {'+'.join(names)}")
        region = labels[active[0]]
        if len(per_region.get(region, [])) >= args.limit:
            continue
        with no_grad():
            sep = separate(ex.mics.astype(np.float32), params, model_config,
                           row.get("reference_index"))
        per_region.setdefault(region, []).append(sep.attention)

    if not per_region:
        raise ConfigError(f"manifest {args.manifest} yielded no examples")

    # average the per-block (heads, M, M) grids over examples
    averaged: Dict[str, List[np.ndarray]] = {
        region: [np.mean([a[b] for a in atts], axis=0)
                 for b in range(model_config.num_blocks)]
        for region, atts in per_region.items()}

    # nine decimals so quantization cannot push row sums past the 1e-6
    # normalization contract
    rows_out = [["region", "block", "head", "row", "col", "weight"]]
    for region in sorted(averaged):
        for b, grid in enumerate(averaged[region]):
            heads, m, _ = grid.shape
            for h in range(heads):
                for i in range(m):
                    for j in range(m):
                        rows_out.append([region, b, h, i, j,
                                         f"{float(grid[h, i, j]):.9f}"])

    first_block = {region: averaged[region][0] for region in averaged}
    regions = sorted(first_block)
    diffs = [float(np.mean(np.abs(first_block[a] - first_block[b])))
             for i, a in enumerate(regions) for b in regions[i + 1:]]
    similarity = {"block0_cross_region_mean_abs_diff":
                  (float(np.mean(diffs)) if diffs else 0.0),
                  "regions": regions,
                  "examples_per_region": {r: len(per_region[r])
                                          for r in regions}}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "attention.csv", _csv_text(rows_out))
    atomic_write_text(out / "attention.svg", attention_svg(first_block))
    atomic_write_text(out / "similarity.json",
                      json.dumps(similarity, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, "inspect-attention",
                       {"model": asdict(model_config)}, args.seed,
                       {"checkpoint": args.checkpoint, "data": args.data,
                        "manifest": args.manifest},
                       ["attention.csv", "attention.svg", "similarity.json"],
                       args.deterministic)
    print(f"inspect-attention: regions {', '.join(regions)}; "
          f"block-0 cross-region mean |diff| "
          f"{similarity['block0_cross_region_mean_abs_diff']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# wiring


_COMMANDS = {
    "simulate-rirs": cmd_simulate_rirs,
    "synth-dataset": cmd_synth_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze-permutations": cmd_analyze_permutations,
    "scatter-sisdri": cmd_scatter_sisdri,
    "inspect-attention": cmd_inspect_attention,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="TOML configuration file")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--deterministic", action="store_true",
                        help="zero wall-clock fields for replayable outputs")

    parser = argparse.ArgumentParser(
        prog="regionsep",
        description="Region-based multichannel speech separation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate-rirs", parents=[shared],
                   help="fill the impulse-response cache for a scenario")
    sub.add_parser("synth-dataset", parents=[shared],
                   help="render mixtures, targets, and manifests")

    p_train = sub.add_parser("train", parents=[shared],
                             help="optimize a separator on a dataset build")
    p_train.add_argument("--data", help="dataset build directory")
    p_train.add_argument("--regime", choices=["pit", "fixed"])

    p_eval = sub.add_parser("evaluate", parents=[shared],
                            help="score a checkpoint on a test manifest")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--data", help="dataset build directory")
    p_eval.add_argument("--variant",
                        help="FC, WN, PO, or a literal manifest name")
    p_eval.add_argument("--model-name", dest="model_name")
    p_eval.add_argument("--save-estimates", action="store_true",
                        dest="save_estimates")

    p_census = sub.add_parser("analyze-permutations", parents=[shared],
                              help="census of best output-region assignments")
    p_census.add_argument("--estimates", help="directory of estimate wavs")
    p_census.add_argument("--data", help="dataset build directory")
    p_census.add_argument("--manifest", help="manifest name, e.g. test_fc")

    p_scatter = sub.add_parser("scatter-sisdri", parents=[shared],
                               help="per-position mean SI-SDRi table")
    p_scatter.add_argument("--records", help="eval_records.jsonl path")
    p_scatter.add_argument("--svg", action="store_true")

    p_attn = sub.add_parser("inspect-attention", parents=[shared],
                            help="average inter-channel attention grids")
    p_attn.add_argument("--checkpoint")
    p_attn.add_argument("--data", help="dataset build directory")
    p_attn.add_argument("--manifest",
                        help="manifest of single-active-region examples")
    p_attn.add_argument("--limit", type=int, default=10,
                        help="examples averaged per region")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args, parser)
    except SystemExit as exc:            # parser.error inside a command
        return int(exc.code or 0)
    except (ConfigError, AcousticsError, FileNotFoundError) as exc:
        print(f"regionsep {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, ValueError) as exc:
        print(f"regionsep {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
