"""Online and target encoder networks.

The online network is backbone f + projector g + predictor q and receives
gradients; the target network is an exponential-moving-average copy of
backbone + projector and never does. Embeddings can be read out at three
depths: pooled backbone features, projected, or (online only) predicted.

Two backbone architectures are supported:

* ``resnet18`` -- the standard residual CNN with 512-d pooled output.
  Parameter names follow the torchvision convention (``conv1.weight``,
  ``bn1.*``, ``layer{1..4}.{0,1}.*``), so off-the-shelf pretrained state
  dicts load directly; classifier heads (``fc.*``) in such files are
  ignored.
* ``tiny`` -- a three-block stride-2 CNN used as a fast test fixture and
  for the synthetic benchmark.

Checkpoints are a named-parameter container (torch ``.pt``) plus a JSON
sidecar recording architecture, dimensions, seed, and a config hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import Tensor, nn

from .errors import CheckpointError, CheckpointMismatchError
from .seeding import torch_seed

EMBED_DEPTHS = ("backbone", "projected", "predicted")

BACKBONE_ARCHS = ("resnet18", "tiny")


@dataclass
class EncoderConfig:
    backbone_arch: str = "resnet18"
    input_size: int = 224
    feature_dim: int = 512
    projector_hidden_dim: int = 512
    projector_out_dim: int = 128
    predictor_hidden_dim: int = 512
    pretrained_checkpoint: str | None = None
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone_arch not in BACKBONE_ARCHS:
            raise ValueError(f"unknown backbone_arch {self.backbone_arch!r}; expected one of {BACKBONE_ARCHS}")
        if self.backbone_arch == "resnet18" and self.feature_dim != 512:
            raise ValueError("resnet18 backbone has a 512-d pooled output; set feature_dim=512")
        for name in ("input_size", "feature_dim", "projector_hidden_dim", "projector_out_dim", "predictor_hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


class TinyBackbone(nn.Module):
    """Three stride-2 conv blocks + global average pooling.

    Small enough for a hand-rolled forward-pass oracle, expressive enough
    for the synthetic benchmark. The last block has no ReLU: pooled features
    must span negative values, otherwise cosine terms are confined to [0, 1]
    and the negative-pair objective can only be minimized by collapsing
    embeddings onto the zero boundary.
    """

    def __init__(self, feature_dim: int = 64, width: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.width = width
        self.block1 = self._block(3, width)
        self.block2 = self._block(width, 2 * width)
        self.block3 = self._block(2 * width, feature_dim, relu=False)
        self.pool = nn.AdaptiveAvgPool2d(1)

    @staticmethod
    def _block(in_ch: int, out_ch: int, relu: bool = True) -> nn.Sequential:
        layers = [
            nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
        ]
        if relu:
            layers.append(nn.ReLU(inplace=True))
        return nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        h = self.block3(self.block2(self.block1(x)))
        return self.pool(h).flatten(1)


def _resnet18_backbone() -> nn.Module:
    import torchvision.models

    net = torchvision.models.resnet18(weights=None)
    net.fc = nn.Identity()
    return net


def build_backbone(config: EncoderConfig) -> nn.Module:
    if config.backbone_arch == "resnet18":
        return _resnet18_backbone()
    return TinyBackbone(feature_dim=config.feature_dim)


def _mlp_head(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim),
        nn.BatchNorm1d(hidden_dim),
        nn.ReLU(inplace=True),
        nn.Linear(hidden_dim, out_dim),
    )


class OnlineNetwork(nn.Module):
    """Gradient-trained encoder: backbone + projector + predictor."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config)
        self.projector = _mlp_head(config.feature_dim, config.projector_hidden_dim, config.projector_out_dim)
        self.predictor = _mlp_head(config.projector_out_dim, config.predictor_hidden_dim, config.projector_out_dim)

    def backbone_features(self, images: Tensor) -> Tensor:
        return self.backbone(images)

    def project(self, feats: Tensor) -> Tensor:
        return self.projector(feats)

    def predict(self, proj: Tensor) -> Tensor:
        return self.predictor(proj)

    def set_finetune_mode(self) -> None:
        """Train mode with backbone normalization frozen to inference stats.

        Batch statistics from a handful of oversampled images are unreliable,
        so backbone norm layers keep their running statistics while the heads
        train normally.
        """
        self.train()
        self.backbone.eval()


class TargetNetwork(nn.Module):
    """EMA copy of backbone + projector; never receives gradients."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config)
        self.projector = _mlp_head(config.feature_dim, config.projector_hidden_dim, config.projector_out_dim)
        for p in self.parameters():
            p.requires_grad_(False)

    def backbone_features(self, images: Tensor) -> Tensor:
        return self.backbone(images)

    def project(self, feats: Tensor) -> Tensor:
        return self.projector(feats)


@dataclass
class EmbeddingSet:
    """Row-aligned embeddings with their extraction depth and source ids."""

    vectors: Tensor
    depth: str
    source_ids: list[str] = field(default_factory=list)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _strip_head_keys(state: dict) -> dict:
    """Drop classifier keys so plain torchvision/ImageNet dicts load."""
    return {k: v for k, v in state.items() if not k.startswith("fc.")}


def load_pretrained(config: EncoderConfig) -> OnlineNetwork:
    """Build the online network, optionally loading backbone weights.

    The checkpoint covers the backbone only; projector and predictor are
    always freshly initialized under ``config.init_seed``. Backbone weights
    from the file are loaded bit-for-bit.
    """
    with torch_seed(config.init_seed):
        online = OnlineNetwork(config)
    if config.pretrained_checkpoint is None:
        return online

    path = Path(config.pretrained_checkpoint)
    if not path.exists():
        raise CheckpointError(f"pretrained checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"failed to read checkpoint {path}: {exc}") from exc
    if isinstance(state, dict) and "backbone" in state and all(
        isinstance(v, dict) for k, v in state.items() if k in ("backbone", "projector", "predictor")
    ):
        state = state["backbone"]
    state = _strip_head_keys(dict(state))

    own = online.backbone.state_dict()
    offending = sorted(set(state) ^ set(own))
    offending += sorted(k for k in set(state) & set(own) if tuple(state[k].shape) != tuple(own[k].shape))
    if offending:
        raise CheckpointMismatchError(
            f"checkpoint {path} incompatible with backbone {config.backbone_arch!r}: "
            + ", ".join(offending),
            offending,
        )
    online.backbone.load_state_dict(state)
    return online


def init_target(online: OnlineNetwork) -> TargetNetwork:
    """Bootstrap the target network as an exact copy of backbone + projector."""
    target = TargetNetwork(online.config)
    target.backbone = copy.deepcopy(online.backbone)
    target.projector = copy.deepcopy(online.projector)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


def ema_update(target: TargetNetwork, online: OnlineNetwork, beta: float) -> TargetNetwork:
    """In-place ``p_target <- beta * p_target + (1 - beta) * p_online``.

    Applies to parameters and floating-point buffers of backbone and
    projector; integer buffers (batch counters) are left alone.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    pairs = [
        (target.backbone, online.backbone),
        (target.projector, online.projector),
    ]
    with torch.no_grad():
        for tgt_mod, on_mod in pairs:
            on_params = dict(on_mod.named_parameters())
            for name, p_t in tgt_mod.named_parameters():
                p_t.mul_(beta).add_(on_params[name], alpha=1.0 - beta)
            on_buffers = dict(on_mod.named_buffers())
            for name, b_t in tgt_mod.named_buffers():
                if b_t.is_floating_point():
                    b_t.mul_(beta).add_(on_buffers[name], alpha=1.0 - beta)
    return target


def embed(
    net: OnlineNetwork | TargetNetwork,
    images: Tensor,
    depth: str = "backbone",
    source_ids: list[str] | None = None,
    batch_size: int = 128,
) -> EmbeddingSet:
    """Extract embeddings at the requested depth in evaluation mode.

    Pure function of (parameters, input): no parameter mutation, row order
    preserved. ``depth="predicted"`` is only valid for the online network.
    """
    if depth not in EMBED_DEPTHS:
        raise ValueError(f"unknown depth {depth!r}; expected one of {EMBED_DEPTHS}")
    if depth == "predicted" and not isinstance(net, OnlineNetwork):
        raise ValueError("depth='predicted' requires an online network; the target has no predictor")
    was_training = net.training
    net.eval()
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                batch = images[start : start + batch_size]
                feats = net.backbone_features(batch)
                if depth != "backbone":
                    feats = net.project(feats)
                if depth == "predicted":
                    feats = net.predict(feats)
                chunks.append(feats)
    finally:
        net.train(was_training)
    vectors = torch.cat(chunks, dim=0) if chunks else torch.empty(0, 0)
    ids = source_ids if source_ids is not None else [str(i) for i in range(images.shape[0])]
    return EmbeddingSet(vectors=vectors, depth=depth, source_ids=list(ids))


def save_checkpoint(
    path: str | Path,
    online: OnlineNetwork,
    seed: int,
    extra_meta: dict | None = None,
) -> Path:
    """Write the named-parameter container plus its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "backbone": online.backbone.state_dict(),
        "projector": online.projector.state_dict(),
        "predictor": online.predictor.state_dict(),
    }
    torch.save(payload, path)
    cfg = online.config
    sidecar = {
        "arch": cfg.backbone_arch,
        "dims": {
            "input_size": cfg.input_size,
            "feature_dim": cfg.feature_dim,
            "projector_hidden_dim": cfg.projector_hidden_dim,
            "projector_out_dim": cfg.projector_out_dim,
            "predictor_hidden_dim": cfg.predictor_hidden_dim,
        },
        "seed": seed,
        "config_hash": cfg.hash(),
        "encoder_config": asdict(cfg),
    }
    if extra_meta:
        sidecar.update(extra_meta)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[OnlineNetwork, dict]:
    """Rebuild an online network from a checkpoint and its sidecar."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    config = EncoderConfig(**meta["encoder_config"])
    online = OnlineNetwork(config)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    try:
        online.backbone.load_state_dict(payload["backbone"])
        online.projector.load_state_dict(payload["projector"])
        online.predictor.load_state_dict(payload["predictor"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointMismatchError(f"checkpoint {path} does not match its sidecar config: {exc}", []) from exc
    return online, meta
