"""Composing and restoring training state from the checkpoint container.

A train checkpoint bundles the live parameters, their moving average,
both optimizer moments, the step counters, the generator state, and any
fitted transformation data (autoencoder basis, estimated gammas).  The
loader refuses files whose embedded identity hash disagrees with the
requesting config and reports the differing lines.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .config import HASHED_SECTIONS, ExperimentConfig
from .denoiser import Denoiser
from .tensorio import CheckpointError, read_checkpoint, write_checkpoint
from .trainer import TrainState
from .transforms import LinearAutoencoder


def _diff_texts(ours: str, theirs: str) -> str:
    ours_map = dict(line.split(" = ", 1) for line in ours.strip().splitlines())
    theirs_map = dict(line.split(" = ", 1) for line in theirs.strip().splitlines())
    lines = []
    for key in sorted(set(ours_map) | set(theirs_map)):
        a, b = ours_map.get(key, "<absent>"), theirs_map.get(key, "<absent>")
        if a != b:
            lines.append(f"  {key}: checkpoint={b} config={a}")
    return "\n".join(lines)


def save_train_checkpoint(
    path: Path,
    cfg: ExperimentConfig,
    state: TrainState,
    ae: LinearAutoencoder | None = None,
    gammas: tuple[float, ...] = (),
):
    tensors: dict[str, torch.Tensor] = {}
    for name, p in state.model.named_parameters():
        tensors[f"model.{name}"] = p
        tensors[f"ema.{name}"] = state.ema[name]
        tensors[f"opt.m.{name}"] = state.m[name]
        tensors[f"opt.v.{name}"] = state.v[name]
    tensors["meta.step"] = torch.tensor(float(state.step))
    tensors["meta.skipped"] = torch.tensor(float(state.skipped))
    tensors["rng.state"] = state.rng.get_state().to(torch.float32)
    if gammas:
        tensors["meta.gammas"] = torch.tensor([float(g) for g in gammas])
    if ae is not None:
        tensors["ae.mean"] = ae.mean
        tensors["ae.basis"] = ae.basis
        tensors["ae.latent_shape"] = torch.tensor([float(v) for v in ae.latent_shape])
        tensors["ae.image_shape"] = torch.tensor([float(v) for v in ae.image_shape])
    write_checkpoint(path, cfg.identity_hash(), cfg.canonical_text(HASHED_SECTIONS), tensors)


def check_compatible(path: Path, cfg: ExperimentConfig, stored_hash: str, stored_text: str):
    if stored_hash != cfg.identity_hash():
        diff = _diff_texts(cfg.canonical_text(HASHED_SECTIONS), stored_text)
        raise CheckpointError(
            f"{path}: checkpoint was written under a different config:\n{diff}"
        )


def load_ae_and_gammas(
    tensors: dict[str, torch.Tensor],
) -> tuple[LinearAutoencoder | None, tuple[float, ...] | None]:
    ae = None
    if "ae.basis" in tensors:
        ae = LinearAutoencoder(
            mean=tensors["ae.mean"],
            basis=tensors["ae.basis"],
            image_shape=tuple(int(v) for v in tensors["ae.image_shape"]),
            latent_shape=tuple(int(v) for v in tensors["ae.latent_shape"]),
        )
    gammas = None
    if "meta.gammas" in tensors:
        gammas = tuple(float(v) for v in tensors["meta.gammas"])
    return ae, gammas


def load_train_checkpoint(path: Path, cfg: ExperimentConfig, model: Denoiser) -> tuple[
    TrainState, LinearAutoencoder | None, tuple[float, ...] | None
]:
    """Restore a TrainState onto ``model`` (shapes must already match)."""
    stored_hash, stored_text, tensors = read_checkpoint(path)
    check_compatible(path, cfg, stored_hash, stored_text)
    state = TrainState.create(
        model,
        seed=cfg.get("trainer", "seed"),
        lr=cfg.get("trainer", "lr"),
        weight_decay=cfg.get("trainer", "weight_decay"),
        ema_decay=cfg.get("trainer", "ema_decay"),
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            for prefix, target in (("model.", None), ("ema.", state.ema), ("opt.m.", state.m), ("opt.v.", state.v)):
                key = prefix + name
                if key not in tensors:
                    raise CheckpointError(f"{path}: missing tensor {key}")
                if tensors[key].shape != p.shape:
                    raise CheckpointError(
                        f"{path}: {key} has shape {tuple(tensors[key].shape)}, "
                        f"model wants {tuple(p.shape)}"
                    )
                if target is None:
                    p.copy_(tensors[key])
                else:
                    target[name] = tensors[key].clone()
    state.step = int(tensors["meta.step"])
    state.skipped = int(tensors["meta.skipped"])
    state.rng.set_state(tensors["rng.state"].to(torch.uint8))
    ae, gammas = load_ae_and_gammas(tensors)
    return state, ae, gammas


def load_model_weights(
    path: Path, cfg: ExperimentConfig, model: Denoiser, use_ema: bool
) -> tuple[LinearAutoencoder | None, tuple[float, ...] | None]:
    """Load just the (EMA or live) weights for sampling."""
    stored_hash, stored_text, tensors = read_checkpoint(path)
    check_compatible(path, cfg, stored_hash, stored_text)
    prefix = "ema." if use_ema else "model."
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = prefix + name
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if tensors[key].shape != p.shape:
                raise CheckpointError(
                    f"{path}: {key} has shape {tuple(tensors[key].shape)}, "
                    f"model wants {tuple(p.shape)}"
                )
            p.copy_(tensors[key])
    return load_ae_and_gammas(tensors)
