"""Command-line surface: simulate, train, eval, and report.

One JSON run config feeds every subcommand; unknown keys are rejected
with their path. Precedence is CLI flag > LENSFORMER_SEED (seed only)
> config file > built-in default, and the effective merged config is
echoed into the output directory for provenance. Outputs are
byte-reproducible for a fixed seed; wall-clock timestamps go only to
``run.log``.

Exit codes: 0 success, 1 usage or config error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .detector import DetectorModel, ModelConfig, build, desk_config
from .errors import ConfigError, ContractError, DimensionError, TrainingDiverged
from .lenssim import SimConfig, desk_sim_config, generate_dataset, load_dataset
from .metrics import (
    evaluate,
    read_scores_csv,
    samples_from_arrays,
    write_report_json,
    write_roc_csv,
    write_roc_svg,
    write_scores_csv,
)
from .training import TrainConfig, fine_tune, rescale_pixels, save_history, score_dataset, train

SEED_ENV_VAR = "LENSFORMER_SEED"

_TRAIN_KEYS = {"stages", "batch_size", "val_fraction", "augment_rotations",
               "augment_rescale", "stage_offset"}
_SIM_KEYS = {"n", "lens_fraction", "ranges"}
_EVAL_KEYS = {"thresholds", "stratify", "stratify_edges", "tpr10_max_fp", "rescale"}
_MODEL_KEYS = {"input_bands", "input_size", "backbone", "attention", "num_encoders",
               "ffn_head", "towers", "pe_base", "ffn_hidden"}
_CONV_KEYS = {"out_channels", "kernel", "stride", "padding", "pool"}
_ATTN_KEYS = {"num_heads", "head_dim"}


def default_run_config() -> dict:
    return {
        "seed": 0,
        "model": desk_config().to_dict(),
        "train": {
            "stages": [[1e-4, 30]],
            "batch_size": 32,
            "val_fraction": 0.1,
            "augment_rotations": True,
            "augment_rescale": True,
            "stage_offset": 0,
        },
        "simulate": {
            "n": 200,
            "lens_fraction": 0.5,
            "ranges": desk_sim_config().to_dict(),
        },
        "eval": {
            "thresholds": [0.5, 0.8, 0.95, 0.999],
            "stratify": [],
            "stratify_edges": {},
            "tpr10_max_fp": 9,
            "rescale": True,
        },
    }


def _check_keys(section: dict, allowed: set, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {path}{key}")


def _validate_run_config(cfg: dict) -> None:
    _check_keys(cfg, {"seed", "model", "train", "simulate", "eval"}, "")
    _check_keys(cfg.get("model", {}), _MODEL_KEYS, "model.")
    for i, spec in enumerate(cfg.get("model", {}).get("backbone", [])):
        _check_keys(spec, _CONV_KEYS, f"model.backbone[{i}].")
    attn = cfg.get("model", {}).get("attention")
    if attn is not None:
        _check_keys(attn, _ATTN_KEYS, "model.attention.")
    _check_keys(cfg.get("train", {}), _TRAIN_KEYS, "train.")
    _check_keys(cfg.get("simulate", {}), _SIM_KEYS, "simulate.")
    try:
        SimConfig.from_dict(cfg["simulate"]["ranges"])
    except ContractError as exc:
        raise ConfigError(f"simulate.ranges: {exc}") from None
    _check_keys(cfg.get("eval", {}), _EVAL_KEYS, "eval.")


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key: {path}{key}")
        if isinstance(value, dict) and isinstance(base[key], dict) and key != "stratify_edges":
            out[key] = _merge(base[key], value, path=f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path: Optional[str], seed_flag: Optional[int] = None) -> dict:
    """Defaults, overlaid by the config file, the seed env var, and flags."""
    cfg = default_run_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if "model" in user and "backbone" in user["model"]:
            cfg["model"]["backbone"] = []  # replace, not merge, layer lists
        cfg = _merge(cfg, user)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
    if seed_flag is not None:
        cfg["seed"] = seed_flag
    _validate_run_config(cfg)
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _log(out_dir: Path, message: str) -> None:
    stamp = datetime.now(timezone.utc).isoformat()
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"{stamp} {message}\n")


def _parse_stages(text: str) -> tuple[tuple[float, int], ...]:
    """"1e-4:30,1e-5:10" -> ((1e-4, 30), (1e-5, 10))."""
    stages = []
    for part in text.split(","):
        try:
            lr_text, ep_text = part.split(":")
            stages.append((float(lr_text), int(ep_text)))
        except ValueError:
            raise ConfigError(f"bad stage syntax {part!r}; expected LR:EPOCHS[,LR:EPOCHS...]") from None
    return tuple(stages)


def _train_config(cfg: dict, stages_flag: Optional[str], stage_offset: Optional[int]) -> TrainConfig:
    section = cfg["train"]
    stages = _parse_stages(stages_flag) if stages_flag else tuple(
        (float(lr), int(ep)) for lr, ep in section["stages"])
    return TrainConfig(
        stages=stages,
        batch_size=int(section["batch_size"]),
        seed=int(cfg["seed"]),
        val_fraction=float(section["val_fraction"]),
        augment_rotations=bool(section["augment_rotations"]),
        augment_rescale=bool(section["augment_rescale"]),
        stage_offset=int(stage_offset if stage_offset is not None else section["stage_offset"]),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    section = cfg["simulate"]
    n = args.n if args.n is not None else int(section["n"])
    lens_fraction = args.lens_fraction if args.lens_fraction is not None else float(section["lens_fraction"])
    ranges = dict(section["ranges"])
    if args.bands is not None:
        nb = args.bands
        ranges["bands"] = nb
        for key in ("lens_band_flux", "source_band_flux", "psf_fwhm"):
            vals = list(ranges[key])
            ranges[key] = (vals * nb)[:nb] if len(vals) != nb else vals
    if args.size is not None:
        ranges["size"] = args.size
    sim = SimConfig.from_dict(ranges)
    out_dir = Path(args.out_dir)
    cfg["simulate"] = {"n": n, "lens_fraction": lens_fraction, "ranges": sim.to_dict()}
    _echo_config(cfg, out_dir)
    manifest = generate_dataset(out_dir, n, lens_fraction, sim, seed=int(cfg["seed"]))
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    lenses = [r for r in rows if r["label"] == 1]
    theta = [r["theta_e"] for r in lenses]
    print(f"simulated {len(rows)} stamps ({sim.bands} bands, {sim.size}px): "
          f"{len(lenses)} lenses, {len(rows) - len(lenses)} non-lenses, "
          f"theta_e [{min(theta):.3f}, {max(theta):.3f}] arcsec")
    print(f"manifest: {manifest}")
    _log(out_dir, f"simulate n={len(rows)} seed={cfg['seed']}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    train_cfg = _train_config(cfg, args.stages, args.stage_offset)
    dataset = load_dataset(args.dataset)
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    try:
        if args.resume:
            model, history = fine_tune(args.resume, dataset, train_cfg, out_dir=out_dir)
        else:
            model = build(ModelConfig.from_dict(cfg["model"]), seed=int(cfg["seed"]))
            model, history = train(model, dataset, train_cfg, out_dir=out_dir)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.last_checkpoint is not None:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 2
    model.save(out_dir / "model.ckpt")
    save_history(history, out_dir / "history.csv")
    if history:
        final = history[-1]
        print(f"trained {final['epoch']} epochs over {len(train_cfg.stages)} stage(s); "
              f"final val_loss={final['val_loss']:.4f} val_accuracy={final['val_accuracy']:.4f}")
    print(f"model: {out_dir / 'model.ckpt'}")
    _log(out_dir, f"train epochs={len(history)} seed={cfg['seed']}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    section = cfg["eval"]
    model = DetectorModel.load(args.model)
    dataset = load_dataset(args.dataset)
    if dataset.bands != model.config.input_bands or dataset.size != model.config.input_size:
        print(f"error: checkpoint expects ({model.config.input_bands} bands, "
              f"{model.config.input_size}px) but the dataset has "
              f"({dataset.bands} bands, {dataset.size}px)", file=sys.stderr)
        return 2
    thresholds = tuple(float(t) for t in (
        args.thresholds.split(",") if args.thresholds else section["thresholds"]))
    stratify = tuple(args.stratify) if args.stratify else tuple(section["stratify"])
    rescale = section["rescale"] if args.rescale is None else args.rescale
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)

    pixels = rescale_pixels(dataset.pixels) if rescale else dataset.pixels.astype(np.float32)
    scores = score_dataset(model, pixels)
    samples = samples_from_arrays(scores, dataset.labels, dataset.meta)
    report = evaluate(samples, thresholds=thresholds, stratify_keys=stratify,
                      stratify_edges=section.get("stratify_edges") or None,
                      tpr10_max_fp=int(section["tpr10_max_fp"]))
    write_scores_csv(samples, out_dir / "scores.csv")
    write_report_json(report, out_dir / "report.json")
    write_roc_csv(report.roc, out_dir / "roc.csv")
    write_roc_svg(report.roc, out_dir / "roc.svg", title=Path(args.model).stem)
    print(f"n={report.n} accuracy={report.accuracy:.4f} auroc={report.auroc:.4f} "
          f"tpr0={report.tpr0:.4f} tpr10={report.tpr10:.4f}")
    for key, strata in report.stratified.items():
        for s in strata:
            rate = s.fn_rate(0.5) if 0.5 in s.confusions else None
            rate_text = "n/a" if rate is None else f"{rate:.4f}"
            print(f"  {key} [{s.lo:.4g}, {s.hi:.4g}): n={s.count} fn_rate@0.5={rate_text}")
    print(f"report: {out_dir / 'report.json'}")
    _log(out_dir, f"eval n={report.n} model={args.model}")
    return 0


REPORT_COLUMNS = ("run", "accuracy", "auroc", "tpr0", "tpr10")


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            print(f"warning: {path} missing, skipped", file=sys.stderr)
            continue
        data = json.loads(path.read_text())
        rows.append({"run": Path(run_dir).name, "accuracy": data["accuracy"],
                     "auroc": data["auroc"], "tpr0": data["tpr0"], "tpr10": data["tpr10"]})
    if not rows:
        print("error: no completed runs found", file=sys.stderr)
        return 2
    if args.sort not in REPORT_COLUMNS[1:]:
        raise ConfigError(f"sort key must be one of {REPORT_COLUMNS[1:]}, got {args.sort!r}")
    rows.sort(key=lambda r: r[args.sort], reverse=True)
    widths = {c: max(len(c), *(len(f"{r[c]:.4f}") if c != "run" else len(r[c]) for r in rows))
              for c in REPORT_COLUMNS}
    header = "  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)
    print(header)
    print("-" * len(header))
    for r in rows:
        cells = [r["run"].ljust(widths["run"])] + [
            f"{r[c]:.4f}".ljust(widths[c]) for c in REPORT_COLUMNS[1:]]
        print("  ".join(cells))
    out_csv = Path(args.out)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"comparison: {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lensformer",
                     description="simulate mock lenses, train detectors, evaluate, compare")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a labelled mock dataset")
    sim.add_argument("out_dir")
    sim.add_argument("--config", default=None, help="run config JSON")
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--lens-fraction", type=float, default=None, dest="lens_fraction")
    sim.add_argument("--bands", type=int, default=None)
    sim.add_argument("--size", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="train a detector on a simulated dataset")
    tr.add_argument("out_dir")
    tr.add_argument("--dataset", required=True, help="manifest.jsonl path")
    tr.add_argument("--config", default=None)
    tr.add_argument("--stages", default=None, help="schedule as LR:EPOCHS[,LR:EPOCHS...]")
    tr.add_argument("--resume", default=None, help="checkpoint to fine-tune from")
    tr.add_argument("--stage-offset", type=int, default=None, dest="stage_offset")
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a dataset and emit the metric report")
    ev.add_argument("out_dir")
    ev.add_argument("--model", required=True, help="checkpoint path")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--thresholds", default=None, help="comma-separated probabilities")
    ev.add_argument("--stratify", action="append", default=None,
                    help="metadata key to stratify on (repeatable)")
    ev.add_argument("--rescale", dest="rescale", action="store_true", default=None)
    ev.add_argument("--no-rescale", dest="rescale", action="store_false")
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="tabulate completed eval runs")
    rp.add_argument("run_dirs", nargs="+")
    rp.add_argument("--sort", default="auroc")
    rp.add_argument("--out", default="comparison.csv")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DimensionError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
