"""Experiment configuration: parsing, validation, hashing, object building.

Config files are flat ``key = value`` lines under ``[section]`` headers.
Every key is declared in the schema below with a type and default;
unknown sections or keys are rejected outright.  The identity hash
covers the sections that define an experiment (transform, schedule,
boundary, corpus, trainer) and is embedded in every checkpoint, sample
sidecar, and report; pure inference knobs (sampler, cond) and output
paths stay out of it so a trained model can be sampled with different
settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .corpus import build_corpus
from .schedules import (
    NoiseSchedule,
    RescaleMode,
    StageKind,
    StageSchedule,
    build_noise_schedule,
    build_stage_schedule,
)
from .transforms import (
    LinearAutoencoder,
    TransformKind,
    TransformStack,
    estimate_gamma,
    fit_linear_autoencoder,
    make_blur_g_stack,
    make_blur_u_stack,
    make_downsample_stack,
)


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


# section -> key -> (parser, default, allowed values or None)
SCHEMA = {
    "transform": {
        "kind": (str, "ds", {"ds", "blur_u", "blur_g", "linear_ae"}),
        "stages": (int, 2, None),
        "size": (int, 32, None),
        "channels": (int, 3, None),
        "latent_channels": (int, 4, None),
        "latent_size": (int, 8, None),
        "gamma": (str, "default", None),
    },
    "schedule": {
        "stage_kind": (str, "cosine", {"linear", "cosine"}),
        "rescale": (str, "vp", {"none", "sp", "vp"}),
    },
    "boundary": {
        "mode": (str, "drop", {"drop", "average"}),
    },
    "trainer": {
        "steps": (int, 5000, None),
        "batch_size": (int, 16, None),
        "lr": (float, 1e-3, None),
        "weight_decay": (float, 1e-4, None),
        "ema_decay": (float, 0.9999, None),
        "seed": (int, 0, None),
        "checkpoint_every": (int, 1000, None),
        "log_every": (int, 1, None),
    },
    "sampler": {
        "eta": (float, 1.0, None),
        "dt": (float, 0.004, None),
        "seed": (int, 0, None),
        "use_ema": (_bool, True, None),
    },
    "cond": {
        "stage": (int, 1, None),
        "step_size": (float, 0.1, None),
        "init_steps": (int, 20, None),
    },
    "corpus": {
        "source": (str, "blobs,n=2048,size=32", None),
        "seed": (int, 0, None),
    },
    "output": {
        "dir": (str, "runs/default", None),
    },
    "verify": {
        "scale": (float, 1.0, None),
    },
}

HASHED_SECTIONS = ("transform", "schedule", "boundary", "corpus", "trainer")


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def canonical_text(self, sections=None) -> str:
        lines = []
        for section in sorted(sections or SCHEMA):
            for key in sorted(SCHEMA[section]):
                lines.append(f"{section}.{key} = {self.values[section][key]}")
        return "\n".join(lines) + "\n"

    def identity_hash(self) -> str:
        return hashlib.sha256(self.canonical_text(HASHED_SECTIONS).encode()).hexdigest()


def _defaults() -> dict:
    return {
        section: {key: spec[1] for key, spec in keys.items()}
        for section, keys in SCHEMA.items()
    }


def _assign(values: dict, section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parser, _, allowed = SCHEMA[section][key]
    try:
        value = parser(raw)
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None
    if allowed is not None and value not in allowed:
        raise ConfigError(f"{section}.{key}: {value!r} not one of {sorted(allowed)}")
    values[section][key] = value


def parse_config(text: str, overrides: list[str] = ()) -> ExperimentConfig:
    """Parse config text plus ``section.key=value`` override strings."""
    values = _defaults()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown config section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, raw = line.partition("=")
        _assign(values, section, key.strip(), raw.strip())
    for ov in overrides:
        dotted, _, raw = ov.partition("=")
        if not _ or "." not in dotted:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        section, _, key = dotted.strip().partition(".")
        _assign(values, section, key.strip(), raw.strip())
    cfg = ExperimentConfig(values=values)
    validate_config(cfg)
    return cfg


def load_config(path: Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, overrides)


def validate_config(cfg: ExperimentConfig):
    kind = cfg.get("transform", "kind")
    K = cfg.get("transform", "stages")
    size = cfg.get("transform", "size")
    if K < 0:
        raise ConfigError("transform.stages must be non-negative")
    if kind in ("ds", "blur_u") and size % (1 << K):
        raise ConfigError(f"size {size} does not survive {K} factor-2 reductions")
    if kind == "linear_ae":
        if K != 1:
            raise ConfigError("linear_ae stacks have exactly one boundary (stages = 1)")
        m = cfg.get("transform", "latent_channels") * cfg.get("transform", "latent_size") ** 2
        m0 = cfg.get("transform", "channels") * size * size
        if m > m0:
            raise ConfigError("latent must not be larger than the image")
    gamma = cfg.get("transform", "gamma")
    if gamma not in ("default", "auto"):
        try:
            parts = [float(v) for v in gamma.split(",")]
        except ValueError:
            raise ConfigError(f"transform.gamma: cannot parse {gamma!r}") from None
        if len(parts) != K or any(g <= 0 for g in parts):
            raise ConfigError(f"transform.gamma needs {K} positive values")


def stage0_shape(cfg: ExperimentConfig) -> tuple[int, int, int]:
    return (cfg.get("transform", "channels"), cfg.get("transform", "size"), cfg.get("transform", "size"))


def build_stage_sched(cfg: ExperimentConfig) -> StageSchedule:
    return build_stage_schedule(
        cfg.get("transform", "stages"), StageKind(cfg.get("schedule", "stage_kind"))
    )


def resolve_gammas(cfg: ExperimentConfig, stack: TransformStack, corpus: torch.Tensor | None):
    """Gamma values per the config: fixed, unit, or estimated from data."""
    gamma = cfg.get("transform", "gamma")
    K = stack.K
    if K == 0:
        return ()
    if gamma == "default":
        gamma = "auto" if stack.kind is TransformKind.LINEAR_AE else ",".join(["1"] * K)
    if gamma == "auto":
        if corpus is None:
            raise ConfigError("gamma=auto needs a corpus to estimate from")
        return tuple(estimate_gamma(stack, corpus, k) for k in range(1, K + 1))
    return tuple(float(v) for v in gamma.split(","))


def build_stack(
    cfg: ExperimentConfig,
    corpus: torch.Tensor | None = None,
    ae: LinearAutoencoder | None = None,
    gammas: tuple[float, ...] | None = None,
) -> TransformStack:
    """Build the configured transformation stack.

    ``linear_ae`` needs either a fitted autoencoder (from a checkpoint)
    or a corpus to fit one; estimated gammas may likewise be supplied
    from a checkpoint instead of recomputed.
    """
    kind = TransformKind(cfg.get("transform", "kind"))
    shape = stage0_shape(cfg)
    K = cfg.get("transform", "stages")
    if kind is TransformKind.DS:
        stack = make_downsample_stack(shape, K)
    elif kind is TransformKind.BLUR_U:
        stack = make_blur_u_stack(shape, K)
    elif kind is TransformKind.BLUR_G:
        stack = make_blur_g_stack(shape, build_stage_sched(cfg))
    else:
        if ae is None:
            if corpus is None:
                raise ConfigError("linear_ae needs a corpus (or checkpoint) to fit from")
            latent = (
                cfg.get("transform", "latent_channels"),
                cfg.get("transform", "latent_size"),
                cfg.get("transform", "latent_size"),
            )
            ae = fit_linear_autoencoder(corpus, latent)
        stack = TransformStack(kind, (ae.image_shape, ae.latent_shape), gammas=(1.0,), ae=ae)
    if gammas is None:
        gammas = resolve_gammas(cfg, stack, corpus)
    return TransformStack(
        kind=stack.kind,
        shapes=stack.shapes,
        gammas=tuple(gammas),
        blur_sigmas=stack.blur_sigmas,
        ae=stack.ae,
    )


def build_noise_sched(cfg: ExperimentConfig, stack: TransformStack) -> NoiseSchedule:
    ss = build_stage_sched(cfg)
    return build_noise_schedule(
        ss, stack.flat_sizes, stack.gammas, RescaleMode(cfg.get("schedule", "rescale"))
    )


def build_train_corpus(cfg: ExperimentConfig) -> torch.Tensor:
    return build_corpus(
        cfg.get("corpus", "source"),
        cfg.get("corpus", "seed"),
        cfg.get("transform", "size"),
        cfg.get("transform", "channels"),
    )
