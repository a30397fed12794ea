"""Run configuration: TOML parsing, defaults, and validation diagnostics.

One top-level ``seed`` drives every random draw in a run through labelled
stream splitting (see ``seeding``); dataset and train sections may override
it explicitly. The ``COFTAD_SEED`` environment variable, when set, replaces
the top-level seed.

Every field has a documented default; ``validate_config`` reports unknown
keys (with a closest-match suggestion), range violations, and missing paths
without mutating any state.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .augment import (
    ColorJitter,
    CorruptionParams,
    CutPasteParams,
    GaussianBlur,
    NegativePolicy,
    PositivePolicy,
    RandomAffine,
    RandomGrayscale,
    ScarParams,
    default_policies,
)
from .data import SynthSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossWeights
from .train import TrainConfig

ENV_SEED = "COFTAD_SEED"


@dataclass
class DatasetSection:
    mode: str = "synth"  # "synth" renders the benchmark; "folder" ingests root/{normal,abnormal}
    root: str | None = None
    k: int = 5
    reserve_normal: int = 100
    reserve_abnormal: int = 100
    family: str = "industrial"
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self) -> None:
        if self.mode not in ("synth", "folder"):
            raise ValueError(f"dataset.mode must be 'synth' or 'folder', got {self.mode!r}")
        if self.k < 1:
            raise ValueError(f"dataset.k must be >= 1, got {self.k}")
        if self.reserve_normal < 1 or self.reserve_abnormal < 1:
            raise ValueError("dataset reserve counts must be >= 1")


@dataclass
class DensitySection:
    n_a: int = 10
    epsilon: float = 1e-3
    scorer: str = "gaussian"
    k_nn: int = 5

    def __post_init__(self) -> None:
        if self.n_a < 1:
            raise ValueError(f"density.n_a must be >= 1, got {self.n_a}")
        if self.epsilon <= 0:
            raise ValueError(f"density.epsilon must be > 0, got {self.epsilon}")
        if self.scorer not in ("gaussian", "knn"):
            raise ValueError(f"density.scorer must be 'gaussian' or 'knn', got {self.scorer!r}")
        if self.k_nn < 1:
            raise ValueError(f"density.k_nn must be >= 1, got {self.k_nn}")


@dataclass
class EvalSection:
    bins: int = 30
    export_embeddings: bool = True

    def __post_init__(self) -> None:
        if self.bins < 1:
            raise ValueError(f"eval.bins must be >= 1, got {self.bins}")


@dataclass
class AugmentSection:
    family: str | None = None  # falls back to dataset.family when unset
    positive: list[dict] = field(default_factory=list)
    negative: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    density: DensitySection = field(default_factory=DensitySection)
    eval: EvalSection = field(default_factory=EvalSection)

    def policies(self) -> tuple[PositivePolicy, NegativePolicy]:
        return build_policies(self.augment, self.dataset.family)


_POSITIVE_KINDS = {
    "affine": RandomAffine,
    "color_jitter": ColorJitter,
    "blur": GaussianBlur,
    "grayscale": RandomGrayscale,
}
_NEGATIVE_KINDS = {
    "cutpaste": CutPasteParams,
    "scar": ScarParams,
    "corruption": CorruptionParams,
}


def _tupled(kwargs: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in kwargs.items()}


def build_policies(section: AugmentSection, dataset_family: str) -> tuple[PositivePolicy, NegativePolicy]:
    """Explicit transform blocks win; otherwise family defaults apply."""
    family = section.family or dataset_family
    pos_default, neg_default = default_policies(family)
    pos = pos_default
    if section.positive:
        transforms = []
        for block in section.positive:
            block = dict(block)
            kind = block.pop("kind", None)
            if kind not in _POSITIVE_KINDS:
                raise ConfigError(f"unknown positive transform kind {kind!r}; known: {sorted(_POSITIVE_KINDS)}")
            transforms.append(_POSITIVE_KINDS[kind](**_tupled(block)))
        pos = PositivePolicy(transforms)
    neg = neg_default
    if section.negative:
        block = dict(section.negative)
        kind = block.pop("kind", None)
        if kind not in _NEGATIVE_KINDS:
            raise ConfigError(f"unknown negative recipe kind {kind!r}; known: {sorted(_NEGATIVE_KINDS)}")
        neg = _NEGATIVE_KINDS[kind](**_tupled(block))
    return pos, neg


@dataclass
class Diagnostic:
    severity: str  # "error" | "warning"
    key: str
    message: str

    def __str__(self) -> str:
        return f"[{self.severity}] {self.key}: {self.message}"


_SCHEMA: dict[str, set[str]] = {
    "": {"seed"},
    "dataset": {"mode", "root", "k", "reserve_normal", "reserve_abnormal", "family", "seed"},
    "dataset.synth": {"n_normal", "n_abnormal", "image_size", "shape_family", "defect_family"},
    "encoder": {
        "backbone_arch",
        "input_size",
        "feature_dim",
        "projector_hidden_dim",
        "projector_out_dim",
        "predictor_hidden_dim",
        "pretrained_checkpoint",
        "init_seed",
    },
    "train": {
        "lr",
        "adam_beta1",
        "adam_beta2",
        "batch_size",
        "steps",
        "ema_beta",
        "lambda_pp",
        "lambda_np",
        "use_np_loss",
        "symmetric_contrastive",
        "seed",
        "checkpoint_every",
    },
    "augment": {"family", "positive", "negative"},
    "density": {"n_a", "epsilon", "scorer", "k_nn"},
    "eval": {"bins", "export_embeddings"},
}


def _unknown_key_diagnostics(raw: dict) -> list[Diagnostic]:
    out: list[Diagnostic] = []

    def visit(prefix: str, table: dict) -> None:
        known = _SCHEMA.get(prefix)
        for key, value in table.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict) and path in _SCHEMA:
                visit(path, value)
                continue
            if prefix == "augment" and key in ("positive", "negative"):
                continue  # free-form transform blocks, validated on build
            if known is not None and key not in known and path not in _SCHEMA:
                candidates = sorted(known | {s.split(".")[-1] for s in _SCHEMA if s.startswith(prefix)})
                close = difflib.get_close_matches(key, candidates, n=1)
                hint = f"; did you mean {close[0]!r}?" if close else ""
                out.append(Diagnostic("error", path, f"unknown key{hint}"))

    known_sections = {s for s in _SCHEMA if s and "." not in s}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in known_sections:
                close = difflib.get_close_matches(key, sorted(known_sections), n=1)
                hint = f"; did you mean {close[0]!r}?" if close else ""
                out.append(Diagnostic("error", key, f"unknown section{hint}"))
            else:
                visit(key, value)
        elif key not in _SCHEMA[""]:
            close = difflib.get_close_matches(key, sorted(_SCHEMA[""]), n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            out.append(Diagnostic("error", key, f"unknown key{hint}"))
    return out


def _parse_toml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _build_config(raw: dict, config_dir: Path) -> RunConfig:
    seed = int(raw.get("seed", 0))
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env_seed!r}") from exc

    ds_raw = dict(raw.get("dataset", {}))
    synth_raw = ds_raw.pop("synth", {})
    ds_raw.setdefault("seed", seed)
    dataset = DatasetSection(synth=SynthSpec(**synth_raw), **ds_raw)
    if dataset.root is not None and not Path(dataset.root).is_absolute():
        dataset.root = str((config_dir / dataset.root).resolve())

    enc_raw = dict(raw.get("encoder", {}))
    if enc_raw.get("pretrained_checkpoint") and not Path(enc_raw["pretrained_checkpoint"]).is_absolute():
        enc_raw["pretrained_checkpoint"] = str((config_dir / enc_raw["pretrained_checkpoint"]).resolve())
    encoder = EncoderConfig(**enc_raw)

    tr_raw = dict(raw.get("train", {}))
    weights = LossWeights(
        lambda_pp=tr_raw.pop("lambda_pp", 0.8),
        lambda_np=tr_raw.pop("lambda_np", 0.6),
    )
    tr_raw.setdefault("seed", seed)
    train = TrainConfig(weights=weights, **tr_raw)

    aug_raw = dict(raw.get("augment", {}))
    augment_section = AugmentSection(
        family=aug_raw.get("family"),
        positive=list(aug_raw.get("positive", [])),
        negative=dict(aug_raw.get("negative", {})),
    )
    density = DensitySection(**raw.get("density", {}))
    eval_section = EvalSection(**raw.get("eval", {}))
    return RunConfig(
        seed=seed,
        dataset=dataset,
        encoder=encoder,
        train=train,
        augment=augment_section,
        density=density,
        eval=eval_section,
    )


def validate_config(path: str | Path) -> list[Diagnostic]:
    """Collect diagnostics for a config file without touching any state."""
    raw = _parse_toml(path)
    diagnostics = _unknown_key_diagnostics(raw)
    config = None
    try:
        config = _build_config(raw, Path(path).resolve().parent)
    except (ValueError, TypeError, ConfigError) as exc:
        diagnostics.append(Diagnostic("error", "config", str(exc)))
    if config is not None:
        try:
            config.policies()
        except (ValueError, TypeError, ConfigError) as exc:
            diagnostics.append(Diagnostic("error", "augment", str(exc)))
        if config.dataset.mode == "folder":
            if config.dataset.root is None:
                diagnostics.append(Diagnostic("error", "dataset.root", "required when dataset.mode is 'folder'"))
            elif not Path(config.dataset.root).is_dir():
                diagnostics.append(Diagnostic("error", "dataset.root", f"not a directory: {config.dataset.root}"))
        elif config.dataset.root is not None:
            diagnostics.append(Diagnostic("warning", "dataset.root", "ignored in synth mode (data renders under --out)"))
        ckpt = config.encoder.pretrained_checkpoint
        if ckpt is not None and not Path(ckpt).exists():
            diagnostics.append(Diagnostic("error", "encoder.pretrained_checkpoint", f"file not found: {ckpt}"))
    return diagnostics


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate; raise ConfigError on any error-level diagnostic."""
    diagnostics = [d for d in validate_config(path) if d.severity == "error"]
    if diagnostics:
        raise ConfigError("invalid config:\n" + "\n".join(str(d) for d in diagnostics))
    return _build_config(_parse_toml(path), Path(path).resolve().parent)


def config_echo(config: RunConfig) -> dict:
    return asdict(config)
