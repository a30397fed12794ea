"""Fine-tuning loop: batch assembly, three-term loss, Adam step, EMA update.

Each step draws one oversampled batch from the few-shot normal set, runs the
online network on the positive views (and negatives), the target network on
the opposite views and the originals, combines the three loss terms, applies
one Adam step to the online parameters only, then moves the target toward
the online weights by exponential moving average.

Training is deterministic under a fixed seed in single-process execution;
logs and metadata contain no timestamps so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import NegativePolicy, PositivePolicy, TrainingBatch, make_training_batch
from .encoder import EncoderConfig, OnlineNetwork, TargetNetwork, ema_update, init_target, load_pretrained, save_checkpoint
from .errors import DataError, NumericalError
from .losses import (
    LossBreakdown,
    LossWeights,
    contrastive_loss,
    cross_instance_pp_loss,
    make_breakdown,
    negative_pair_loss,
)
from .seeding import seed_stream


@dataclass
class TrainConfig:
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    batch_size: int = 64
    steps: int = 1000
    ema_beta: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    use_np_loss: bool = True
    symmetric_contrastive: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (head batch norm needs at least two rows)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ValueError(f"ema_beta must lie in [0, 1], got {self.ema_beta}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class TrainState:
    """Mutable loop state; exactly one actor may mutate it."""

    online: OnlineNetwork
    target: TargetNetwork
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    history: list[LossBreakdown] = field(default_factory=list)


def init_train_state(enc_cfg: EncoderConfig, cfg: TrainConfig) -> TrainState:
    """Build online/target networks and the optimizer for a fresh run."""
    online = load_pretrained(enc_cfg)
    target = init_target(online)
    optimizer = torch.optim.Adam(
        online.parameters(),
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=1e-8,
    )
    return TrainState(
        online=online,
        target=target,
        optimizer=optimizer,
        rng=seed_stream(cfg.seed, "train-batches"),
    )


def training_step(state: TrainState, batch: TrainingBatch, cfg: TrainConfig) -> LossBreakdown:
    """Run one optimization step; mutates state and returns the loss values.

    The contrastive term compares predictor outputs for one view against
    target projections of the other (averaged over the view swap when
    ``symmetric_contrastive``); the cross-instance term pairs online
    backbone features of view 1 with target features of view 2 under the
    batch pairing; the negative term (when enabled) compares target
    features of the originals with online features of the negatives.
    """
    online, target = state.online, state.target
    online.set_finetune_mode()
    target.eval()
    b = batch.view1.shape[0]

    if cfg.symmetric_contrastive:
        views = torch.cat([batch.view1, batch.view2])
        on_feats = online.backbone_features(views)
        on_pred = online.predict(online.project(on_feats))
        with torch.no_grad():
            tg_feats = target.backbone_features(views)
            tg_proj = target.project(tg_feats)
        l_con = 0.5 * (
            contrastive_loss(on_pred[:b], tg_proj[b:]) + contrastive_loss(on_pred[b:], tg_proj[:b])
        )
        on_feat_v1, tg_feat_v2 = on_feats[:b], tg_feats[b:]
    else:
        on_feat_v1 = online.backbone_features(batch.view1)
        on_pred = online.predict(online.project(on_feat_v1))
        with torch.no_grad():
            tg_feat_v2 = target.backbone_features(batch.view2)
            tg_proj_v2 = target.project(tg_feat_v2)
        l_con = contrastive_loss(on_pred, tg_proj_v2)

    l_pp = cross_instance_pp_loss(on_feat_v1, tg_feat_v2, batch.pairing)

    if cfg.use_np_loss:
        with torch.no_grad():
            tg_orig = target.backbone_features(batch.originals)
        on_neg = online.backbone_features(batch.negatives)
        l_np = negative_pair_loss(tg_orig, on_neg)
    else:
        l_np = torch.zeros((), dtype=l_con.dtype)

    loss = l_con + cfg.weights.lambda_pp * l_pp + cfg.weights.lambda_np * l_np
    values = make_breakdown(float(l_con.detach()), float(l_pp.detach()), float(l_np.detach()), cfg.weights)
    if not np.isfinite(values.l_total):
        raise NumericalError(
            f"non-finite loss at step {state.step}: "
            f"l_con={values.l_con}, l_pp={values.l_pp}, l_np={values.l_np}, l_total={values.l_total}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(target, online, cfg.ema_beta)
    state.step += 1
    state.history.append(values)
    return values


def write_train_log(history: Sequence[LossBreakdown], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_con", "l_pp", "l_np", "l_total"])
        for i, row in enumerate(history):
            writer.writerow([i, repr(row.l_con), repr(row.l_pp), repr(row.l_np), repr(row.l_total)])
    return path


def _policy_meta(policy) -> dict:
    if isinstance(policy, PositivePolicy):
        return {"transforms": [{"kind": type(t).__name__, **asdict(t)} for t in policy.transforms]}
    return {"kind": type(policy).__name__, **asdict(policy)}


def train(
    fewshot: Sequence,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    pos: PositivePolicy,
    neg: NegativePolicy,
    out_dir: str | Path,
) -> Path:
    """Fine-tune on the few-shot normal set and write run artifacts.

    Accepts loaded samples (``.image``/``.label`` attributes) or raw image
    tensors. Writes ``checkpoint.pt`` (+ JSON sidecar), ``train_log.csv``,
    and ``run_meta.json`` into ``out_dir``; returns the checkpoint path.
    """
    if len(fewshot) == 0:
        raise DataError("training requires at least one normal sample")
    images = []
    for sample in fewshot:
        if hasattr(sample, "image"):
            if getattr(sample, "label", "normal") != "normal":
                raise DataError("few-shot training set must contain only normal samples")
            images.append(sample.image)
        else:
            images.append(sample)

    state = init_train_state(enc_cfg, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(cfg.steps):
        batch = make_training_batch(images, cfg.batch_size, pos, neg, state.rng)
        training_step(state, batch, cfg)
        if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < cfg.steps:
            save_checkpoint(out_dir / f"checkpoint_step_{step + 1:06d}.pt", state.online, cfg.seed)

    ckpt_path = save_checkpoint(out_dir / "checkpoint.pt", state.online, cfg.seed, {"steps": cfg.steps})
    write_train_log(state.history, out_dir / "train_log.csv")
    meta = {
        "seed": cfg.seed,
        "train_config": asdict(cfg),
        "encoder_config": asdict(enc_cfg),
        "positive_policy": _policy_meta(pos),
        "negative_policy": _policy_meta(neg),
        "checkpoint_sha256": hashlib.sha256(ckpt_path.read_bytes()).hexdigest(),
        "n_fewshot": len(images),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return ckpt_path
