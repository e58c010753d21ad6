import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np
from pydantic import ValidationError

from src.config import PROFILES, RunConfig, config
from src.errors import ChmflError, ConfigError, ShapeError
from src.evaluation import compare_reports, cross_validate, predict_volumes, weight_sweep
from src.imaging import (
    Modality,
    PatientRecord,
    Volume,
    bounding_box,
    load_manifest,
    normalize_intensity,
    paste_bounding_box,
    preprocess_record,
    read_volume,
    resample_isotropic,
    write_volume,
)
from src.logger import setup_logging
from src.network import ChmflNetwork, load_checkpoint, parameter_table, save_checkpoint, trace_shapes
from src.optim import train
from src.phantom import export, generate
from src.reports import (
    crossval_table,
    format_table,
    load_crossval,
    sweep_table,
    write_crossval,
    write_history,
    write_sweep,
    write_text,
)

logger = logging.getLogger("src.main")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# shorthand flag -> RunConfig key, per command
SHORTHANDS = {
    "synth": {"n": "phantom.n_patients", "out": "data_dir"},
    "train": {"manifest": "manifest", "w": "training.w", "epochs": "training.max_epochs",
              "out": "out_dir", "checkpoint": "checkpoint"},
    "crossval": {"manifest": "manifest", "w": "training.w", "epochs": "training.max_epochs",
                 "k": "k", "out": "out_dir"},
    "sweep": {"manifest": "manifest", "epochs": "training.max_epochs", "k": "k", "out": "out_dir"},
    "predict": {"checkpoint": "checkpoint", "out": "out_dir"},
    "compare": {"out": "out_dir"},
    "audit": {"out": "out_dir"},
}


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"[!!] {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(
        prog="python -m src.main",
        description="CHMFL: PET/CT distant-metastasis prediction with a segmentation-constrained network.",
        epilog="Any config field can be overridden with --section.field value (e.g. --network.base_channels 4).",
        allow_abbrev=False,
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help, allow_abbrev=False)
        sub.add_argument("--config", help="JSON config file")
        sub.add_argument("--profile", choices=sorted(PROFILES), default="full")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--workers", type=int)
        sub.add_argument("--out")
        return sub

    synth = command("synth", "generate a synthetic PET/CT phantom cohort")
    synth.add_argument("--n", type=int, help="number of patients")

    for name, help in (("train", "train one model on a manifest"),
                       ("crossval", "k-fold cross-validation"),
                       ("sweep", "cross-validate over a grid of CFL weights")):
        sub = command(name, help)
        sub.add_argument("--manifest")
        sub.add_argument("--epochs", type=int)
        if name != "sweep":
            sub.add_argument("--w", type=float, help="CFL weight in [0, 1]")
        if name != "train":
            sub.add_argument("--k", type=int, help="number of folds")
        if name == "train":
            sub.add_argument("--checkpoint", help="checkpoint output path")

    predict = command("predict", "DM probability and tumor segmentation for one patient")
    predict.add_argument("--checkpoint")
    predict.add_argument("--pet", required=True)
    predict.add_argument("--ct", required=True)
    predict.add_argument("--mask", help="tumor mask; enables resampling and cropping around it")

    compare = command("compare", "t-test on per-fold metrics of two cross-validation reports")
    compare.add_argument("report_a")
    compare.add_argument("report_b")
    compare.add_argument("--metric", default="acc")

    command("audit", "print the output shape of every network block")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        try:
            return json.loads(f"[{text}]")
        except json.JSONDecodeError:
            pass
    return text


def parse_overrides(extra: list[str]) -> list[tuple[str, object]]:
    """``--section.field value`` / ``--section.field=value`` pairs left over by argparse."""
    overrides, i = [], 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"unexpected argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for '{token}'")
            value = extra[i + 1]
            i += 2
        overrides.append((key.replace("-", "_"), _parse_value(value)))
    return overrides


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _assign(data: dict, dotted: str, value) -> None:
    *sections, field = dotted.split(".")
    node = data
    for section in sections:
        child = node.setdefault(section, {})
        if not isinstance(child, dict):
            raise ConfigError(f"'{section}' in '{dotted}' is not a config section")
        node = child
    node[field] = value


def resolve_config(profile: str = "full", path: str | None = None,
                   overrides: list[tuple[str, object]] = ()) -> RunConfig:
    """Profile defaults, then the config file, then command-line overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}'")
    data = _merge({}, PROFILES[profile])
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        data = _merge(data, loaded)
    for key, value in overrides:
        _assign(data, key, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from None


def shorthand_overrides(args: argparse.Namespace) -> list[tuple[str, object]]:
    mapping = {"seed": "seed", "workers": "workers", **SHORTHANDS[args.command]}
    return [(key, getattr(args, flag)) for flag, key in mapping.items() if getattr(args, flag, None) is not None]


def output_dir(cfg: RunConfig, command: str) -> str:
    return cfg.data_dir if command == "synth" else cfg.out_dir


def echo_config(cfg: RunConfig, directory: str) -> None:
    text = cfg.model_dump_json(indent=2)
    print(text)
    os.makedirs(directory, exist_ok=True)
    write_text(os.path.join(directory, "resolved_config.json"), text + "\n")


def run_seed(cfg: RunConfig) -> int:
    return cfg.seed if cfg.seed is not None else cfg.training.seed


def load_dataset(cfg: RunConfig) -> list[PatientRecord]:
    records = load_manifest(cfg.manifest_path())
    if cfg.workers > 1 and len(records) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            dataset = list(pool.map(partial(preprocess_record, cfg=cfg.preprocess), records))
    else:
        dataset = [preprocess_record(r, cfg.preprocess) for r in records]
    logger.info(f"Preprocessed {len(dataset)} patients to {cfg.network.input_extents}")
    return dataset


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = generate(cfg.phantom, cfg.workers)
    path = export(dataset, cfg.data_dir)
    logger.info(f"Manifest written to {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(cfg)
    rng = np.random.default_rng(cfg.training.seed)
    network = ChmflNetwork(cfg.network, rng=rng, dtype=np.dtype(cfg.training.dtype))
    params, history = train(network, dataset, cfg.training, rng)
    checkpoint = cfg.checkpoint or os.path.join(cfg.out_dir, "model.chck")
    os.makedirs(os.path.dirname(os.path.abspath(checkpoint)), exist_ok=True)
    save_checkpoint(params, cfg.network, checkpoint)
    write_history(history, os.path.join(cfg.out_dir, "history.tsv"))
    logger.info(f"Best epoch {history.best_epoch} with mean loss {history.best_loss:.5f}")
    return EXIT_OK


def cmd_crossval(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(cfg)
    result = cross_validate(dataset, cfg.network, cfg.training, cfg.k, run_seed(cfg), cfg.workers)
    write_crossval(result, cfg.out_dir)
    print(crossval_table(result))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(cfg)
    rows, results = weight_sweep(dataset, cfg.network, cfg.training, cfg.w_values, cfg.k, run_seed(cfg), cfg.workers)
    write_sweep(rows, results, cfg.out_dir)
    print(sweep_table(rows))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    if not cfg.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    params, net_cfg = load_checkpoint(cfg.checkpoint)
    network = ChmflNetwork(net_cfg, params)
    pet, ct = read_volume(args.pet), read_volume(args.ct)

    if args.mask:
        mask = read_volume(args.mask)
        record = preprocess_record(PatientRecord("predict", pet, ct, mask, 0), cfg.preprocess)
        probability, segmentation = predict_volumes(network, record.pet, record.ct, record.mask)
        if segmentation is not None:
            grid = resample_isotropic(mask, cfg.preprocess.target_mm)
            start, _ = bounding_box(grid, cfg.preprocess.box_mm)
            segmentation = paste_bounding_box(segmentation, start, grid.extents)
            spacing = grid.spacing
    else:
        if net_cfg.variant == "mask_hmfl":
            raise ShapeError("the mask_hmfl variant needs --mask")
        pet, ct = normalize_intensity(pet, cfg.preprocess.clip_percentiles), normalize_intensity(ct, cfg.preprocess.clip_percentiles)
        probability, segmentation = predict_volumes(network, pet, ct)
        spacing = pet.spacing

    print(f"dm_probability={probability:.6f}")
    if segmentation is not None:
        path = os.path.join(cfg.out_dir, "segmentation.chvl")
        write_volume(Volume(segmentation.astype(np.float32), spacing, Modality.MASK), path)
        logger.info(f"Segmentation ({int(segmentation.sum())} tumor voxels) written to {path}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args: argparse.Namespace) -> int:
    a, b = load_crossval(args.report_a), load_crossval(args.report_b)
    t, p = compare_reports(a, b, args.metric)
    print(f"metric={args.metric} n_a={len(a.fold_values(args.metric))} "
          f"n_b={len(b.fold_values(args.metric))} t={t:.4f} p={p:.4f}")
    return EXIT_OK


def cmd_audit(cfg: RunConfig, args: argparse.Namespace) -> int:
    rows = [[name, "x".join(str(n) for n in shape)] for name, shape in trace_shapes(cfg.network)]
    print(format_table(["block", "output size"], rows))
    total = sum(int(np.prod(spec.shape)) for spec in parameter_table(cfg.network).values())
    print(f"parameters: {total}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "compare": cmd_compare,
    "audit": cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(config.LOG_LEVEL)

    try:
        cfg = resolve_config(args.profile, args.config, parse_overrides(extra) + shorthand_overrides(args))
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE

    try:
        echo_config(cfg, output_dir(cfg, args.command))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (ChmflError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n[*] Interrupted")
        sys.exit(EXIT_RUNTIME)
