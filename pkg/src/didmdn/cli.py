"""Command-line entry point.

Subcommands mirror the workflow: synth -> train-classifier / train-derainer
-> derain -> evaluate, plus ablate for the four-way configuration study.
Options resolve with precedence flag > config file > default (the output
directory can additionally be set via DIDMDN_OUTPUT_DIR), and every run
echoes its fully resolved options into the output directory.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
from pathlib import Path

from .ablation import run_ablation
from .checkpoint import Checkpoint
from .classifier import ClassifierConfig, DensityClassifier
from .density import DensityLabel
from .derainer import DerainerConfig, MultiStreamDerainNet, VARIANTS
from .errors import DidmdnError, UntrainedModel
from .metrics import evaluate_dataset, format_psnr
from .raingen import DatasetManifest, build_dataset, load_image_u8, save_image_u8
from .report import write_ablation_report, write_evaluation_report, write_loss_curve
from .trainer import (
    CLASSIFIER_CURVE_COLUMNS,
    DERAINER_CURVE_COLUMNS,
    OptimConfig,
    model_from_checkpoint,
    train_classifier,
    train_derainer,
)

OUTPUT_DIR_ENV = "DIDMDN_OUTPUT_DIR"


class CliParser(argparse.ArgumentParser):
    """argparse parser with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    """Bad or missing options detected after config-file resolution."""


@dataclasses.dataclass
class Opt:
    flag: str
    type: type | None
    default: object
    help: str
    choices: tuple | None = None
    is_flag: bool = False

    @property
    def key(self) -> str:
        return self.flag.lstrip("-")

    @property
    def dest(self) -> str:
        return self.key.replace("-", "_")


def _type_name(opt: Opt) -> str:
    if opt.is_flag:
        return "flag"
    return {int: "int", float: "float", str: "str"}.get(opt.type, "str")


def _add_opts(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        text = f"{opt.help} [{_type_name(opt)}, default: {opt.default}]"
        if opt.is_flag:
            parser.add_argument(opt.flag, action="store_const", const=True, default=None, help=text)
        else:
            parser.add_argument(
                opt.flag, type=opt.type, default=None, choices=opt.choices, help=text
            )


def _coerce(opt: Opt, raw: str):
    if opt.is_flag:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return opt.type(raw) if opt.type is not None else raw


def resolve_options(ns: argparse.Namespace, opts: list[Opt], section: str) -> dict:
    """Merge flag values, the optional config file, and defaults."""
    file_section = {}
    if getattr(ns, "config", None):
        cfg = configparser.ConfigParser()
        cfg.read(ns.config)
        if cfg.has_section(section):
            file_section = dict(cfg.items(section))
    resolved = {}
    for opt in opts:
        value = getattr(ns, opt.dest)
        if value is None and opt.key == "out" and os.environ.get(OUTPUT_DIR_ENV):
            value = os.environ[OUTPUT_DIR_ENV]
        if value is None and opt.key in file_section:
            value = _coerce(opt, file_section[opt.key])
        if value is None:
            value = opt.default
        resolved[opt.dest] = value
    return resolved


def echo_config(resolved: dict, section: str, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = configparser.ConfigParser()
    cfg[section] = {k.replace("_", "-"): str(v) for k, v in resolved.items() if v is not None}
    with (out_dir / "config_used.ini").open("w") as fh:
        cfg.write(fh)


CONFIG_OPT = Opt("--config", str, None, "optional INI config file; flags take precedence")
SEED_OPT = Opt("--seed", int, 0, "global random seed")

MODEL_OPTS = [
    Opt("--variant", str, "didmdn", "model configuration", choices=VARIANTS),
    Opt("--width", int, 8, "transition layer channel width"),
    Opt("--growth", int, 8, "channels added per dense layer"),
    Opt("--layers", int, 3, "conv layers per dense block"),
    Opt("--lambda-f", float, 1.0, "feature loss weight"),
]

OPTIM_OPTS = [
    Opt("--lr", float, 0.001, "initial learning rate"),
    Opt("--lr-drop-epoch", int, 20, "epoch after which the rate drops"),
    Opt("--lr-drop-factor", float, 10.0, "divisor applied at the drop epoch"),
    Opt("--weight-decay", float, 0.0001, "decoupled weight decay"),
    Opt("--crop", int, 64, "training crop size"),
    Opt("--source-size", int, 80, "expected source image size"),
]


def _optim_config(r: dict, epochs: int) -> OptimConfig:
    return OptimConfig(
        lr0=r["lr"],
        lr_drop_epoch=r["lr_drop_epoch"],
        lr_drop_factor=r["lr_drop_factor"],
        weight_decay=r["weight_decay"],
        epochs=epochs,
        crop=(r["crop"], r["source_size"]),
    )


def _model_config(r: dict) -> DerainerConfig:
    return DerainerConfig(
        variant=r["variant"],
        width=r["width"],
        growth=r["growth"],
        n_layers=r["layers"],
        lambda_F=r["lambda_f"],
    )


SYNTH_OPTS = [
    Opt("--clean-dir", str, None, "directory of clean background images"),
    Opt("--per-label", int, 4, "samples per density label"),
    SEED_OPT,
    Opt("--out", str, None, "output dataset directory"),
    CONFIG_OPT,
]


def cmd_synth(ns) -> int:
    r = resolve_options(ns, SYNTH_OPTS, "synth")
    if not r["clean_dir"] or not r["out"]:
        raise UsageError("synth requires --clean-dir and --out")
    manifest = build_dataset(Path(r["clean_dir"]), r["per_label"], r["seed"], Path(r["out"]))
    echo_config(r, "synth", Path(r["out"]))
    print(f"wrote {len(manifest)} records to {Path(r['out']) / 'manifest.json'}")
    return 0


TRAIN_DERAINER_OPTS = [
    Opt("--manifest", str, None, "training dataset manifest"),
    Opt("--out", str, None, "output directory for checkpoint and curves"),
    SEED_OPT,
    Opt("--epochs", int, 30, "training epochs"),
    Opt("--max-steps", int, 0, "hard step cap; 0 means no cap"),
    Opt("--checkpoint-every", int, 0, "save a checkpoint every N epochs; 0 disables"),
    Opt("--resume", str, None, "checkpoint to resume from"),
    *MODEL_OPTS,
    *OPTIM_OPTS,
    CONFIG_OPT,
]


def cmd_train_derainer(ns) -> int:
    r = resolve_options(ns, TRAIN_DERAINER_OPTS, "train-derainer")
    if not r["manifest"] or not r["out"]:
        raise UsageError("train-derainer requires --manifest and --out")
    manifest = DatasetManifest.load(Path(r["manifest"]))
    out_dir = Path(r["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    resume = Checkpoint.load(Path(r["resume"])) if r["resume"] else None
    result = train_derainer(
        manifest,
        _model_config(r),
        _optim_config(r, r["epochs"]),
        seed=r["seed"],
        max_steps=r["max_steps"] or None,
        out_dir=out_dir,
        checkpoint_every=r["checkpoint_every"] or None,
        resume_from=resume,
    )
    result.checkpoint.save(out_dir / "derainer.ckpt")
    write_loss_curve(
        result.curve, DERAINER_CURVE_COLUMNS, out_dir / "loss_curve.csv", out_dir / "loss_curve.png"
    )
    echo_config(r, "train-derainer", out_dir)
    final = result.curve[-1][4] if result.curve else float("nan")
    print(f"trained {r['variant']} for {len(result.curve)} steps, final loss {final:.6f}")
    print(f"checkpoint: {out_dir / 'derainer.ckpt'}")
    return 0


TRAIN_CLASSIFIER_OPTS = [
    Opt("--manifest", str, None, "training dataset manifest"),
    Opt("--out", str, None, "output directory for checkpoint and curves"),
    SEED_OPT,
    Opt("--stage-epochs", str, "3,3,2", "epochs for the three training stages"),
    Opt("--width", int, 8, "transition layer channel width of the extractor"),
    Opt("--growth", int, 8, "channels added per dense layer"),
    Opt("--layers", int, 3, "conv layers per dense block"),
    *OPTIM_OPTS,
    CONFIG_OPT,
]


def cmd_train_classifier(ns) -> int:
    r = resolve_options(ns, TRAIN_CLASSIFIER_OPTS, "train-classifier")
    if not r["manifest"] or not r["out"]:
        raise UsageError("train-classifier requires --manifest and --out")
    manifest = DatasetManifest.load(Path(r["manifest"]))
    out_dir = Path(r["out"])
    stages = tuple(int(s) for s in str(r["stage_epochs"]).split(","))
    if len(stages) != 3:
        raise UsageError("--stage-epochs expects three comma-separated integers")
    trunk = DerainerConfig(
        variant="multi_no_label", width=r["width"], growth=r["growth"], n_layers=r["layers"]
    )
    clf_cfg = ClassifierConfig(trunk=trunk)
    result = train_classifier(
        manifest, clf_cfg, _optim_config(r, sum(stages)), seed=r["seed"], stage_epochs=stages
    )
    result.checkpoint.save(out_dir / "classifier.ckpt")
    write_loss_curve(
        result.curve, CLASSIFIER_CURVE_COLUMNS, out_dir / "loss_curve.csv", out_dir / "loss_curve.png"
    )
    echo_config(r, "train-classifier", out_dir)
    print(f"trained classifier for {len(result.curve)} steps")
    print(f"checkpoint: {out_dir / 'classifier.ckpt'}")
    return 0


DERAIN_OPTS = [
    Opt("--input", str, None, "rainy image file or directory of images"),
    Opt("--checkpoint", str, None, "de-rainer checkpoint"),
    Opt("--classifier-checkpoint", str, None, "density classifier checkpoint"),
    Opt("--label", str, None, "density override; skips classification", choices=("light", "medium", "heavy")),
    Opt("--out", str, None, "output directory"),
    Opt("--dump-residual", None, False, "also write the estimated rain layer", is_flag=True),
    Opt("--report-density", None, False, "print the classifier's density estimate", is_flag=True),
    CONFIG_OPT,
]


def _load_model_checkpoint(path_str: str | None, kind: str):
    if not path_str:
        raise UntrainedModel(f"no {kind} checkpoint given")
    path = Path(path_str)
    if not path.exists():
        raise UntrainedModel(f"{kind} checkpoint not found: {path}")
    model = model_from_checkpoint(Checkpoint.load(path))
    expected = MultiStreamDerainNet if kind == "derainer" else DensityClassifier
    if not isinstance(model, expected):
        raise UntrainedModel(f"{path} does not hold a {kind} model")
    return model


def cmd_derain(ns) -> int:
    import torch

    r = resolve_options(ns, DERAIN_OPTS, "derain")
    if not r["input"] or not r["out"]:
        raise UsageError("derain requires --input and --out")
    model = _load_model_checkpoint(r["checkpoint"], "derainer")
    override = DensityLabel.from_name(r["label"]) if r["label"] else None
    classifier = None
    needs_label = model.cfg.uses_label and override is None
    if needs_label or r["report_density"]:
        classifier = _load_model_checkpoint(r["classifier_checkpoint"], "classifier")

    in_path = Path(r["input"])
    files = sorted(in_path.glob("*.png")) if in_path.is_dir() else [in_path]
    if not files:
        raise DidmdnError(f"no input images under {in_path}")
    out_dir = Path(r["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in files:
        arr = load_image_u8(f).astype("float32") / 255.0
        y = torch.from_numpy(arr.transpose(2, 0, 1)[None])
        label = override
        if classifier is not None and (needs_label or r["report_density"]):
            predicted = classifier.predict_density(y)
            if override is None:
                label = predicted
            print(f"{f.name}: density={predicted.name.lower()}")
        elif label is not None:
            print(f"{f.name}: density={label.name.lower()} (override)")
        out = model.derain(y, label if model.cfg.uses_label else None)
        refined = (out.refined[0].numpy().transpose(1, 2, 0) * 255.0).round().astype("uint8")
        save_image_u8(refined, out_dir / f.name)
        if r["dump_residual"]:
            residual = out.residual[0].numpy().mean(axis=0)
            residual = (residual.clip(0.0, 1.0) * 255.0).round().astype("uint8")
            save_image_u8(residual, out_dir / f"{f.stem}_residual.png")
    echo_config(r, "derain", out_dir)
    print(f"wrote {len(files)} de-rained image(s) to {out_dir}")
    return 0


EVALUATE_OPTS = [
    Opt("--manifest", str, None, "dataset manifest with clean ground truth"),
    Opt("--outputs", str, None, "directory of restored images to score"),
    Opt("--out", str, None, "report output directory"),
    CONFIG_OPT,
]


def cmd_evaluate(ns) -> int:
    r = resolve_options(ns, EVALUATE_OPTS, "evaluate")
    if not r["manifest"] or not r["outputs"] or not r["out"]:
        raise UsageError("evaluate requires --manifest, --outputs and --out")
    manifest = DatasetManifest.load(Path(r["manifest"]))
    report = evaluate_dataset(manifest, Path(r["outputs"]))
    out_dir = Path(r["out"])
    write_evaluation_report(report, out_dir / "report.csv", out_dir / "report.png")
    echo_config(r, "evaluate", out_dir)
    print(f"n={report.n_images} PSNR: {format_psnr(report.psnr_db)} SSIM: {report.ssim:.4f}")
    return 0


ABLATE_OPTS = [
    Opt("--manifest", str, None, "training dataset manifest"),
    Opt("--test-manifest", str, None, "held-out dataset manifest for scoring"),
    Opt("--out", str, None, "report output directory"),
    SEED_OPT,
    Opt("--seeds", int, 3, "number of seeds (seed, seed+1, ...)"),
    Opt("--epochs", int, 10, "training epochs per configuration"),
    Opt("--max-steps", int, 0, "hard step cap per run; 0 means no cap"),
    Opt("--width", int, 8, "transition layer channel width"),
    Opt("--growth", int, 8, "channels added per dense layer"),
    Opt("--layers", int, 3, "conv layers per dense block"),
    *OPTIM_OPTS,
    CONFIG_OPT,
]


def cmd_ablate(ns) -> int:
    r = resolve_options(ns, ABLATE_OPTS, "ablate")
    if not r["manifest"] or not r["test_manifest"] or not r["out"]:
        raise UsageError("ablate requires --manifest, --test-manifest and --out")
    train_manifest = DatasetManifest.load(Path(r["manifest"]))
    test_manifest = DatasetManifest.load(Path(r["test_manifest"]))
    base_cfg = DerainerConfig(width=r["width"], growth=r["growth"], n_layers=r["layers"])
    seeds = tuple(r["seed"] + i for i in range(r["seeds"]))
    report = run_ablation(
        train_manifest,
        test_manifest,
        seeds=seeds,
        base_model_cfg=base_cfg,
        optim_cfg=_optim_config(r, r["epochs"]),
        max_steps=r["max_steps"] or None,
        progress=lambda name, seed, p, s: print(f"  {name} seed {seed}: {p:.2f} dB / {s:.4f}"),
    )
    out_dir = Path(r["out"])
    write_ablation_report(report.rows, report.metadata, out_dir / "ablation.csv", out_dir / "ablation.png")
    echo_config(r, "ablate", out_dir)
    for row in report.rows:
        print(
            f"{row['config']:<16} {row['psnr_db']:7.2f} dB  SSIM {row['ssim']:.4f}  "
            f"(reference {row['reference_psnr_db']:.2f} / {row['reference_ssim']:.4f})"
        )
    return 0


COMMANDS = {
    "synth": (SYNTH_OPTS, cmd_synth, "synthesize a labeled rain dataset"),
    "train-classifier": (TRAIN_CLASSIFIER_OPTS, cmd_train_classifier, "train the rain-density classifier"),
    "train-derainer": (TRAIN_DERAINER_OPTS, cmd_train_derainer, "train the de-raining network"),
    "derain": (DERAIN_OPTS, cmd_derain, "remove rain from images with a trained model"),
    "evaluate": (EVALUATE_OPTS, cmd_evaluate, "score restored images against clean ground truth"),
    "ablate": (ABLATE_OPTS, cmd_ablate, "train and compare the four model configurations"),
}


def build_parser() -> CliParser:
    parser = CliParser(prog="didmdn", description="density-aware single-image de-raining toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (opts, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_opts(p, opts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _, handler, _ = COMMANDS[ns.command]
    try:
        return handler(ns)
    except UsageError as exc:
        print(f"didmdn {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except DidmdnError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
