"""Unified command-line entry point.

Option precedence: CLI flag > config file > TUMORFORGE_DATA env var (for
data roots) > built-in default. Every run echoes its fully resolved
configuration to ``run_config.txt`` next to its outputs. Exit codes:
0 success, 2 usage error, 3 data error, 4 training/numeric error.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DataError,
    MissingRequired,
    NumericError,
    TumorForgeError,
    UnknownCommand,
    UnknownOption,
    UsageError,
)

ENV_DATA_ROOT = "TUMORFORGE_DATA"

_REQUIRED = object()


@dataclass(frozen=True)
class _Opt:
    name: str
    type: type
    default: object = None
    from_env: bool = False  # TUMORFORGE_DATA supplies the default


_TRAIN_OPTS = [
    _Opt("config", str),
    _Opt("data", str, _REQUIRED, from_env=True),
    _Opt("out", str, _REQUIRED),
    _Opt("seed", int, 0),
    _Opt("learning-rate", float, 1e-3),
    _Opt("epochs", int, 200),
    _Opt("batch-size", int, 8),
    _Opt("checkpoint-every", int, 10),
    _Opt("w-pix", float, 1.0),
    _Opt("w-cont", float, 0.1),
    _Opt("w-adv", float, 0.01),
    _Opt("reduction", str, "mean"),
]

COMMANDS: dict[str, list[_Opt]] = {
    "phantom-gen": [
        _Opt("out", str, _REQUIRED),
        _Opt("size", int, 64),
        _Opt("subjects", int, 40),
        _Opt("slices", int, 10),
        _Opt("tumor-prob", float, 0.8),
        _Opt("seed", int, 0),
    ],
    "preprocess": [
        _Opt("data", str, _REQUIRED, from_env=True),
        _Opt("out", str, _REQUIRED),
    ],
    "train-masks": list(_TRAIN_OPTS),
    "train-inpaint": list(_TRAIN_OPTS),
    "train-seg": list(_TRAIN_OPTS) + [_Opt("synth", str)],
    "synth": [
        _Opt("models", str, _REQUIRED),
        _Opt("normals", str, _REQUIRED, from_env=True),
        _Opt("n", int, _REQUIRED),
        _Opt("seed", int, 0),
        _Opt("out", str, _REQUIRED),
        _Opt("circles", str),
        _Opt("max-attempts", int, 100),
    ],
    "eval-fid": [
        _Opt("set-a", str, _REQUIRED),
        _Opt("set-b", str, _REQUIRED),
        _Opt("seed", int, 0),
        _Opt("shrinkage", float, 0.0),
        _Opt("out", str),
    ],
    "eval-seg": [
        _Opt("model", str, _REQUIRED),
        _Opt("data", str, _REQUIRED, from_env=True),
        _Opt("split", str, "test"),
        _Opt("label", str, "model"),
        _Opt("out", str),
        _Opt("seed", int, 0),
    ],
    "report": [
        _Opt("experiment", str, _REQUIRED),
    ],
}


@dataclass
class RunConfig:
    command: str
    options: dict = field(default_factory=dict)
    seed: int = 0


def _coerce(opt: _Opt, raw: str):
    try:
        return opt.type(raw)
    except ValueError as exc:
        raise UsageError(f"option --{opt.name} expects {opt.type.__name__}, got {raw!r}") from exc


def _read_config_file(path: str, schema: dict[str, _Opt]) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("_", "-")
        if key not in schema:
            raise UnknownOption(key)
        values[key] = _coerce(schema[key], raw.strip())
    return values


def parse_args(argv: list[str]) -> RunConfig:
    """Resolve a command line into a RunConfig (flag > file > env > default)."""
    if not argv:
        raise UnknownCommand("(no command given; expected one of "
                             f"{', '.join(sorted(COMMANDS))})")
    command = argv[0]
    if command not in COMMANDS:
        raise UnknownCommand(command)
    schema = {o.name: o for o in COMMANDS[command]}

    flags: dict[str, object] = {}
    tokens = argv[1:]
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UnknownOption(tok)
        name, eq, inline = tok[2:].partition("=")
        if name not in schema:
            raise UnknownOption(tok)
        if eq:
            raw = inline
        else:
            i += 1
            if i >= len(tokens):
                raise UsageError(f"option --{name} requires a value")
            raw = tokens[i]
        flags[name] = _coerce(schema[name], raw)
        i += 1

    resolved: dict[str, object] = {}
    from_file = {}
    config_path = flags.get("config")
    if config_path:
        from_file = _read_config_file(str(config_path), schema)
    env_root = os.environ.get(ENV_DATA_ROOT)
    for opt in COMMANDS[command]:
        if opt.name in flags:
            resolved[opt.name] = flags[opt.name]
        elif opt.name in from_file:
            resolved[opt.name] = from_file[opt.name]
        elif opt.from_env and env_root:
            resolved[opt.name] = env_root
        elif opt.default is _REQUIRED:
            raise MissingRequired(opt.name)
        else:
            resolved[opt.name] = opt.default
    return RunConfig(command=command, options=resolved, seed=int(resolved.get("seed", 0)))


def _write_run_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {config.command}"]
    for key in sorted(config.options):
        lines.append(f"{key} = {config.options[key]}")
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n")


def _train_config(opts: dict):
    from .losses import LossWeights
    from .training import TrainConfig

    return TrainConfig(
        learning_rate=float(opts["learning-rate"]),
        epochs=int(opts["epochs"]),
        batch_size=int(opts["batch-size"]),
        checkpoint_every=int(opts["checkpoint-every"]),
        seed=int(opts["seed"]),
        loss_weights=LossWeights(
            w_pix=float(opts["w-pix"]),
            w_cont=float(opts["w-cont"]),
            w_adv=float(opts["w-adv"]),
            reduction=str(opts["reduction"]),
        ),
    )


def _write_report_logs(out: Path, name: str, report) -> None:
    import json

    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    (logs / f"{name}_report.json").write_text(
        json.dumps(report.curves_dict(), indent=2, sort_keys=True) + "\n"
    )
    (logs / f"{name}_timing.txt").write_text(f"wall_time_s = {report.wall_time_s:.3f}\n")


def run(config: RunConfig) -> int:
    """Dispatch a resolved RunConfig; returns the process exit status."""
    opts = config.options
    cmd = config.command

    if cmd == "phantom-gen":
        from .phantom import PhantomConfig, generate_phantom

        out = Path(opts["out"])
        _write_run_config(config, out)
        pc = PhantomConfig(
            size=opts["size"],
            n_subjects=opts["subjects"],
            slices_per_subject=opts["slices"],
            tumor_probability=opts["tumor-prob"],
            seed=opts["seed"],
        )
        manifest = generate_phantom(pc, out)
        print(f"phantom-gen: {len(manifest.records)} slices -> {out}")
        return 0

    if cmd == "preprocess":
        from .core_data import load_manifest, normalize_slice, write_dataset

        out = Path(opts["out"])
        _write_run_config(config, out)
        manifest = load_manifest(opts["data"])
        records = []
        for rec in manifest.iter_all():
            rec.images = normalize_slice(rec.images)
            records.append(rec)
        write_dataset(records, manifest.splits, out)
        print(f"preprocess: normalized {len(records)} slices -> {out}")
        return 0

    if cmd == "train-masks":
        from .core_data import load_manifest
        from .training import train_g_binary, train_g_grade

        out = Path(opts["out"])
        _write_run_config(config, out)
        data = load_manifest(opts["data"])
        cfg = _train_config(opts)
        net_b, rep_b = train_g_binary(data, cfg, out_dir=out)
        _write_report_logs(out, "g_binary", rep_b)
        print(f"train-masks: g_binary best epoch {rep_b.chosen_epoch} "
              f"val {rep_b.val_loss[rep_b.chosen_epoch - 1] if rep_b.chosen_epoch else float('nan'):.6f}")
        net_g, rep_g = train_g_grade(data, cfg, out_dir=out)
        _write_report_logs(out, "g_grade", rep_g)
        print(f"train-masks: g_grade best epoch {rep_g.chosen_epoch} "
              f"val {rep_g.val_loss[rep_g.chosen_epoch - 1] if rep_g.chosen_epoch else float('nan'):.6f}")
        return 0

    if cmd == "train-inpaint":
        from .core_data import load_manifest
        from .training import train_inpaint

        out = Path(opts["out"])
        _write_run_config(config, out)
        data = load_manifest(opts["data"])
        cfg = _train_config(opts)
        _, _, report = train_inpaint(data, cfg, out_dir=out)
        _write_report_logs(out, "g_inpaint", report)
        print(f"train-inpaint: best epoch {report.chosen_epoch}")
        return 0

    if cmd == "train-seg":
        from .core_data import load_manifest
        from .training import train_segmentation

        out = Path(opts["out"])
        _write_run_config(config, out)
        data = load_manifest(opts["data"])
        extra = None
        if opts.get("synth"):
            synth_manifest = load_manifest(opts["synth"])
            extra = list(synth_manifest.iter_all())
        cfg = _train_config(opts)
        _, report = train_segmentation(data, cfg, out_dir=out, extra_records=extra)
        _write_report_logs(out, "unet_seg", report)
        print(f"train-seg: best epoch {report.chosen_epoch}")
        return 0

    if cmd == "synth":
        from .core_data import load_manifest
        from .geometry import ConcentricCircles
        from .networks import load_model_bundle
        from .synthesis import SynthesisConfig, synthesize_batch

        out = Path(opts["out"])
        _write_run_config(config, out)
        models = load_model_bundle(opts["models"])
        models.require_generators()
        normals = load_manifest(opts["normals"])
        first = normals.load_record(normals.record_ids()[0])
        cfg = SynthesisConfig.for_size(
            first.images.height,
            n_images=opts["n"],
            seed=opts["seed"],
            max_attempts_per_image=opts["max-attempts"],
        )
        fixed = None
        if opts.get("circles"):
            vals = [float(v) for v in str(opts["circles"]).split(",")]
            if len(vals) != 5:
                raise UsageError("--circles expects cx,cy,r1,r2,r3")
            fixed = ConcentricCircles(*vals)
        manifest = synthesize_batch(normals, cfg, models, out, fixed_circles=fixed)
        print(f"synth: {len(manifest.records)} images -> {out}")
        return 0

    if cmd == "eval-fid":
        from .core_data import load_manifest
        from .evaluation import embed_features, fid

        set_a = load_manifest(opts["set-a"])
        set_b = load_manifest(opts["set-b"])
        feats_a = embed_features(list(set_a.iter_all()), seed=opts["seed"])
        feats_b = embed_features(list(set_b.iter_all()), seed=opts["seed"])
        score = fid(feats_a, feats_b, shrinkage=opts["shrinkage"])
        if opts.get("out"):
            out = Path(opts["out"])
            _write_run_config(config, out)
            (out / "fid.txt").write_text(f"{score:.6f}\n")
        print(f"fid = {score:.6f}")
        return 0

    if cmd == "eval-seg":
        from .core_data import load_manifest
        from .evaluation import evaluate_segmentation, format_score_table, write_scores
        from .networks import load_checkpoint

        handle, _ = load_checkpoint(opts["model"])
        data = load_manifest(opts["data"])
        ids = data.split_ids(opts["split"]) or data.record_ids()
        records = [data.load_record(rid) for rid in ids]
        scores = evaluate_segmentation(handle, records)
        print(format_score_table([(opts["label"], scores)]))
        if opts.get("out"):
            out = Path(opts["out"])
            _write_run_config(config, out)
            write_scores(scores, out / f"{opts['label']}.scores.json", label=opts["label"])
        return 0

    if cmd == "report":
        from .evaluation import format_score_table, load_scores, score_table_csv

        exp = Path(opts["experiment"])
        paths = sorted(exp.glob("*.scores.json"))
        if not paths:
            raise DataError(f"no *.scores.json files under {exp}")
        rows = [load_scores(p) for p in paths]
        rows.sort(key=lambda r: (r[0] != "baseline", r[0]))
        table = format_score_table(rows)
        (exp / "report.txt").write_text(table + "\n")
        (exp / "report.csv").write_text(score_table_csv(rows))
        print(table)
        return 0

    raise UnknownCommand(cmd)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = parse_args(argv)
        return run(config)
    except UsageError as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    except TumorForgeError as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
