"""Command-line entry point.

Subcommands: run (full pipeline), synth, train, fit-density, score, eval,
validate. Every command writes only inside its ``--out`` directory. Exit
codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_echo, load_run_config, validate_config
from .data import (
    DatasetManifest,
    FewShotSplit,
    load_image,
    load_image_folder,
    resolve_path,
    sample_few_shot,
    samples_for_ids,
    synth_dataset,
)
from .density import fit_density, save_density, save_knn_reference, score_images, load_scorer, DensityModel
from .density import knn_score, percentile_normalize, ScoreRecord
from .encoder import embed, load_checkpoint
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .eval import evaluate, write_scores_csv
from .seeding import seed_stream
from .train import train


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _RunManifest:
    """Links every pipeline artifact to its content hash, stage by stage."""

    def __init__(self, out_dir: Path, config: RunConfig):
        self.path = out_dir / "manifest.json"
        self.data = {"seed": config.seed, "config": config_echo(config), "stages": {}}

    def record(self, stage: str, artifacts: dict[str, Path]) -> None:
        self.data["stages"][stage] = {
            "status": "ok",
            "artifacts": {str(p): _sha256(Path(p)) for p in artifacts.values() if Path(p).is_file()},
        }
        self.write()

    def record_error(self, stage: str, error: Exception) -> None:
        self.data["stages"][stage] = {"status": "error", "error": f"{type(error).__name__}: {error}"}
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _prepare_dataset(config: RunConfig, out_dir: Path) -> DatasetManifest:
    if config.dataset.mode == "synth":
        return synth_dataset(config.dataset.synth, out_dir / "dataset", config.dataset.seed)
    return load_image_folder(config.dataset.root)


def _make_split(config: RunConfig, manifest: DatasetManifest, out_dir: Path) -> FewShotSplit:
    split = sample_few_shot(
        manifest,
        config.dataset.k,
        config.dataset.seed,
        (config.dataset.reserve_normal, config.dataset.reserve_abnormal),
    )
    split.save(out_dir / "split.json")
    return split


def _fit_scorer(config: RunConfig, checkpoint_path: Path, split: FewShotSplit, out_dir: Path) -> Path:
    online, _ = load_checkpoint(checkpoint_path)
    samples = samples_for_ids(split.root, split.train_ids, "normal", online.config.input_size)
    pos, _ = config.policies()
    images = [s.image for s in samples]
    ids = [s.sample_id for s in samples]
    density_path = out_dir / "density.bin"
    if config.density.scorer == "gaussian":
        model = fit_density(
            online, images, ids, pos, n_a=config.density.n_a, epsilon=config.density.epsilon, seed=config.seed
        )
        save_density(model, density_path)
    else:
        from .density import _augmented_embeddings

        reference = _augmented_embeddings(online, images, ids, pos, config.density.n_a, config.seed)
        save_knn_reference(reference, config.density.k_nn, density_path)
    return density_path


def run_pipeline(config_path: str | Path, out_dir: str | Path) -> Path:
    """Execute synth/ingest -> split -> train -> fit-density -> evaluate.

    Every stage's artifacts land in the run directory; ``manifest.json``
    records their hashes. On a stage failure, partial artifacts are kept and
    the error is recorded before the exception propagates.
    """
    config = load_run_config(config_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_log = _RunManifest(out_dir, config)

    stage = "dataset"
    try:
        data_manifest = _prepare_dataset(config, out_dir)
        manifest_path = Path(data_manifest.root) / "manifest.json"
        artifacts = {"manifest": manifest_path} if manifest_path.exists() else {}
        manifest_log.record(stage, artifacts)

        stage = "split"
        split = _make_split(config, data_manifest, out_dir)
        manifest_log.record(stage, {"split": out_dir / "split.json"})

        stage = "train"
        fewshot = samples_for_ids(split.root, split.train_ids, "normal", config.encoder.input_size)
        pos, neg = config.policies()
        ckpt = train(fewshot, config.train, config.encoder, pos, neg, out_dir)
        manifest_log.record(
            stage,
            {
                "checkpoint": ckpt,
                "sidecar": ckpt.with_suffix(ckpt.suffix + ".json"),
                "log": out_dir / "train_log.csv",
                "meta": out_dir / "run_meta.json",
            },
        )

        stage = "density"
        density_path = _fit_scorer(config, ckpt, split, out_dir)
        manifest_log.record(stage, {"density": density_path})

        stage = "eval"
        evaluate(
            ckpt,
            density_path,
            split,
            out_dir,
            bins=config.eval.bins,
            write_embeddings=config.eval.export_embeddings,
        )
        manifest_log.record(
            stage,
            {
                "report": out_dir / "report.json",
                "scores": out_dir / "scores.csv",
                "hist_csv": out_dir / "hist.csv",
                "hist_png": out_dir / "hist.png",
                "embeddings": out_dir / "embeddings.csv",
            },
        )
    except Exception as exc:
        manifest_log.record_error(stage, exc)
        raise
    return out_dir


def _cmd_run(args: argparse.Namespace) -> int:
    run_pipeline(args.config, args.out)
    print(f"run complete: {args.out}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    manifest = synth_dataset(config.dataset.synth, Path(args.out) / "dataset", config.dataset.seed)
    print(f"rendered {len(manifest.normals())} normal + {len(manifest.abnormals())} abnormal images in {manifest.root}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    out_dir = Path(args.out)
    if args.split:
        split = FewShotSplit.load(args.split)
    else:
        data_manifest = _prepare_dataset(config, out_dir)
        split = _make_split(config, data_manifest, out_dir)
    fewshot = samples_for_ids(args.data_root or split.root, split.train_ids, "normal", config.encoder.input_size)
    pos, neg = config.policies()
    ckpt = train(fewshot, config.train, config.encoder, pos, neg, out_dir)
    print(f"checkpoint written: {ckpt}")
    return 0


def _cmd_fit_density(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    split = FewShotSplit.load(args.split)
    if args.data_root:
        split.root = args.data_root
    density_path = _fit_scorer(config, Path(args.checkpoint), split, Path(args.out))
    print(f"density model written: {density_path}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    online, _ = load_checkpoint(args.checkpoint)
    scorer = load_scorer(args.model)
    folder = Path(args.images)
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not paths:
        raise DataError(f"no images found in {folder}")
    images = [load_image(p, online.config.input_size) for p in paths]
    ids = [p.name for p in paths]
    if isinstance(scorer, DensityModel):
        records = score_images(scorer, online, images, ids)
    else:
        reference, k_nn = scorer
        matrix = embed(online, torch.stack(images), depth="backbone").vectors.double().numpy()
        records = [ScoreRecord(sample_id=i, raw_score=knn_score(reference, row, k_nn)) for i, row in zip(ids, matrix)]
    for record, pct in zip(records, percentile_normalize([r.raw_score for r in records])):
        record.percentile = float(pct)
    out = write_scores_csv(records, None, args.out)
    print(f"scores written: {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    split = FewShotSplit.load(args.split)
    report = evaluate(args.checkpoint, args.density, split, args.out, data_root=args.data_root)
    print(f"auroc={report.auroc:.5f} over {report.n_normal} normal / {report.n_abnormal} abnormal samples")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    diagnostics = validate_config(args.config)
    for d in diagnostics:
        print(str(d))
    errors = [d for d in diagnostics if d.severity == "error"]
    if errors:
        print(f"{len(errors)} error(s) found")
        return 2
    print("config ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coftad", description="Few-shot anomaly detection via contrastive fine-tuning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline: data -> split -> train -> density -> eval")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("synth", help="render the synthetic benchmark dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fine-tune the encoder on the few-shot normal set")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="existing split.json (default: sample one)")
    p.add_argument("--data-root", default=None, help="override the split's dataset root")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("fit-density", help="fit the score model over augmented few-shot embeddings")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=_cmd_fit_density)

    p = sub.add_parser("score", help="score a folder of images against a fitted model")
    p.add_argument("--model", required=True, help="density model file")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    p.add_argument("--images", required=True, help="folder of images to score")
    p.add_argument("--out", required=True, help="output scores.csv")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="score a test split and write the report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--density", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("validate", help="check a config file and print diagnostics")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
