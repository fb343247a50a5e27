"""Command-line surface: train, sample, condgen, verify, estimate-gamma.

Exit codes: 0 on success, 1 when an invariant check fails, 2 on usage or
configuration errors.  Every emitted artifact embeds the experiment's
identity hash; loaders refuse mismatches.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import verify as verify_mod
from .checkpoint import (
    load_model_weights,
    load_train_checkpoint,
    save_train_checkpoint,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    build_noise_sched,
    build_stack,
    build_train_corpus,
    load_config,
)
from .corpus import load_image
from .denoiser import Denoiser
from .diffusion import BoundaryMode
from .plotting import loss_figure, schedule_figure
from .sampler import CondSpec, SamplerConfig, conditional_generate, generate
from .tensorio import CheckpointError, read_tensor, write_json, write_png, write_tensor, contact_sheet
from .trainer import TrainState, fit
from .transforms import estimate_gamma


def _sampler_config(cfg: ExperimentConfig, cond: CondSpec | None = None) -> SamplerConfig:
    return SamplerConfig(
        eta=cfg.get("sampler", "eta"),
        dt=cfg.get("sampler", "dt"),
        seed=cfg.get("sampler", "seed"),
        boundary_mode=BoundaryMode(cfg.get("boundary", "mode")),
        cond=cond,
    )


def cmd_train(cfg: ExperimentConfig, resume: Path | None) -> int:
    out = Path(cfg.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)
    corpus = build_train_corpus(cfg)
    stack = build_stack(cfg, corpus=corpus)
    ns = build_noise_sched(cfg, stack)
    torch.manual_seed(cfg.get("trainer", "seed"))
    model = Denoiser(stack.shapes)
    if resume is not None:
        state, _, _ = load_train_checkpoint(resume, cfg, model)
        print(f"resumed from {resume} at step {state.step}")
    else:
        state = TrainState.create(
            model,
            seed=cfg.get("trainer", "seed"),
            lr=cfg.get("trainer", "lr"),
            weight_decay=cfg.get("trainer", "weight_decay"),
            ema_decay=cfg.get("trainer", "ema_decay"),
        )

    def on_checkpoint(st: TrainState):
        save_train_checkpoint(
            out / "checkpoint.fdmc", cfg, st, ae=stack.ae, gammas=stack.gammas
        )
        if st.step < cfg.get("trainer", "steps"):
            save_train_checkpoint(
                out / f"checkpoint_{st.step:06d}.fdmc", cfg, st,
                ae=stack.ae, gammas=stack.gammas,
            )

    history = fit(
        state,
        corpus,
        stack,
        ns,
        steps=cfg.get("trainer", "steps"),
        batch_size=cfg.get("trainer", "batch_size"),
        log_path=out / "train_log.csv",
        on_checkpoint=on_checkpoint,
        checkpoint_every=cfg.get("trainer", "checkpoint_every"),
        log_every=cfg.get("trainer", "log_every"),
    )
    loss_figure(out / "train_log.csv", out / "loss_curve.png")
    if history:
        print(f"trained to step {state.step}; last loss {history[-1][1]:.5f}")
    print(f"checkpoint: {out / 'checkpoint.fdmc'}")
    return 0


def _load_for_sampling(cfg: ExperimentConfig, ckpt: Path):
    # the checkpoint may carry fitted transform data the config cannot rebuild
    from .tensorio import read_checkpoint
    from .checkpoint import check_compatible, load_ae_and_gammas

    stored_hash, stored_text, tensors = read_checkpoint(ckpt)
    check_compatible(ckpt, cfg, stored_hash, stored_text)
    ae, gammas = load_ae_and_gammas(tensors)
    stack = build_stack(cfg, corpus=None, ae=ae, gammas=gammas)
    ns = build_noise_sched(cfg, stack)
    model = Denoiser(stack.shapes)
    load_model_weights(ckpt, cfg, model, use_ema=cfg.get("sampler", "use_ema"))
    model.eval()
    return stack, ns, model


def _write_outputs(cfg: ExperimentConfig, out: Path, batch: torch.Tensor, extra: dict):
    meta = {
        "config_hash": cfg.identity_hash(),
        "eta": cfg.get("sampler", "eta"),
        "dt": cfg.get("sampler", "dt"),
        "seed": cfg.get("sampler", "seed"),
        "ema": cfg.get("sampler", "use_ema"),
        **extra,
    }
    for i in range(batch.shape[0]):
        stem = out / f"sample_{i:04d}"
        write_png(stem.with_suffix(".png"), batch[i])
        write_tensor(stem.with_suffix(".fdmt"), batch[i])
        write_json(stem.with_suffix(".json"), {**meta, "index": i})
    if batch.shape[0] >= 2:
        contact_sheet(out / "contact_sheet.png", batch)


def cmd_sample(cfg: ExperimentConfig, ckpt: Path, n: int) -> int:
    out = Path(cfg.get("output", "dir")) / "samples"
    stack, ns, model = _load_for_sampling(cfg, ckpt)
    x = generate(model, stack, ns, _sampler_config(cfg), n=n)
    _write_outputs(cfg, out, x, {"checkpoint": str(ckpt), "mode": "unconditional"})
    print(f"wrote {n} samples to {out}")
    return 0


def _load_condition(path: Path, stack, stage: int) -> torch.Tensor:
    shape = stack.shapes[stage]
    if path.suffix.lower() == ".fdmt":
        x = read_tensor(path)
    else:
        x = load_image(path, shape[-1])
    if tuple(x.shape[-3:]) != shape:
        raise ConfigError(
            f"condition {path} has shape {tuple(x.shape[-3:])}, stage {stage} "
            f"wants {shape}"
        )
    return x


def cmd_condgen(cfg: ExperimentConfig, ckpt: Path, condition: Path, n: int) -> int:
    out = Path(cfg.get("output", "dir")) / "condgen"
    stack, ns, model = _load_for_sampling(cfg, ckpt)
    stage = cfg.get("cond", "stage")
    x_c = _load_condition(condition, stack, stage)
    if n > 1:
        x_c = x_c[None].expand(n, *x_c.shape).clone()
    cond = CondSpec(
        x_c=x_c,
        stage=stage,
        step_size=cfg.get("cond", "step_size"),
        init_steps=cfg.get("cond", "init_steps"),
    )
    x = conditional_generate(model, stack, ns, _sampler_config(cfg, cond))
    if x.dim() == 3:
        x = x[None]
    _write_outputs(
        cfg, out, x, {"checkpoint": str(ckpt), "mode": "conditional", "stage": stage,
                      "condition": str(condition)},
    )
    print(f"wrote {x.shape[0]} conditional samples to {out}")
    return 0


def cmd_verify(cfg: ExperimentConfig) -> int:
    out = Path(cfg.get("output", "dir")) / "verify"
    out.mkdir(parents=True, exist_ok=True)
    corpus = None
    if cfg.get("transform", "kind") == "linear_ae" or cfg.get("transform", "gamma") == "auto":
        corpus = build_train_corpus(cfg)
    stack = build_stack(cfg, corpus=corpus)
    ns = build_noise_sched(cfg, stack)
    csv_text = verify_mod.schedule_csv(ns)
    print(csv_text, end="")
    (out / "schedule.csv").write_text(csv_text)
    schedule_figure(ns, out / "schedule_curves.png")
    rows = verify_mod.run_all(ts=stack, ns=ns, scale=cfg.get("verify", "scale"))
    write_json(out / "report.json", {"config_hash": cfg.identity_hash(), "checks": rows})
    failures = 0
    for row in rows:
        status = "PASS" if row["passed"] else "FAIL"
        failures += not row["passed"]
        print(
            f"{status} {row['name']}: measured {row['measured']:.4g} "
            f"(threshold {row['threshold']:.4g}) {row['detail']}"
        )
    print(f"report: {out / 'report.json'}")
    return 1 if failures else 0


def cmd_estimate_gamma(cfg: ExperimentConfig, save: Path | None) -> int:
    corpus = build_train_corpus(cfg)
    stack = build_stack(cfg, corpus=corpus)
    print("boundary,gamma")
    for k in range(1, stack.K + 1):
        print(f"{k},{estimate_gamma(stack, corpus, k):.6f}")
    if save is not None:
        from .tensorio import write_checkpoint

        tensors = {"meta.gammas": torch.tensor([float(g) for g in stack.gammas])}
        if stack.ae is not None:
            tensors.update(
                {
                    "ae.mean": stack.ae.mean,
                    "ae.basis": stack.ae.basis,
                    "ae.latent_shape": torch.tensor([float(v) for v in stack.ae.latent_shape]),
                    "ae.image_shape": torch.tensor([float(v) for v in stack.ae.image_shape]),
                }
            )
        write_checkpoint(save, cfg.identity_hash(), cfg.canonical_text(), tensors)
        print(f"saved transform data to {save}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagediff", description="multi-stage transformed diffusion"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", type=Path, default=None, help="config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config key",
        )

    p = sub.add_parser("train", help="train a denoiser")
    common(p)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    p = sub.add_parser("sample", help="generate unconditional samples")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("-n", type=int, default=1, help="number of samples")

    p = sub.add_parser("condgen", help="generate conditioned on a stage-k tensor")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--condition", type=Path, required=True, help=".fdmt or image file")
    p.add_argument("-n", type=int, default=1)

    p = sub.add_parser("verify", help="run the invariant suite")
    common(p)

    p = sub.add_parser("estimate-gamma", help="print per-boundary signal-power ratios")
    common(p)
    p.add_argument("--save", type=Path, default=None, help="persist transform data")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "sample":
            return cmd_sample(cfg, args.checkpoint, args.n)
        if args.command == "condgen":
            return cmd_condgen(cfg, args.checkpoint, args.condition, args.n)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "estimate-gamma":
            return cmd_estimate_gamma(cfg, args.save)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
