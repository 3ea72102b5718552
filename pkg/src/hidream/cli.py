"""Command-line entry point: ``hidream <command> [options]``."""

from __future__ import annotations

import os
import sys

# BLAS thread caps must be in place before numpy loads
_threads = os.environ.get("HIDREAM_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import config as config_mod  # noqa: E402
from .adapter import dump_pyramid  # noqa: E402
from .config import ConfigError, RunConfig  # noqa: E402
from .diffusion import (  # noqa: E402
    HiDreamModel, IntegrityError, InvariantViolation, TrainingAborted, build_model, load_checkpoint, read_meta,
    save_checkpoint, train_stage,
)
from .experiments import AXES, make_data, run_variants, sample_records, stage_lr  # noqa: E402
from .guidance import dump_modulation_maps  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .synth import SynthLayout, read_dataset, read_ppm, synth_dataset, write_dataset, write_ppm  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

EXIT_USAGE = 2
EXIT_AUDIT = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _onoff(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _resolve(args, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _config_from_args(args, base: RunConfig | None = None) -> RunConfig:
    """Preset or file first, then flags (flags win)."""
    if base is None:
        if getattr(args, "config", None):
            base = config_mod.load(_resolve(args, args.config))
        else:
            base = config_mod.preset(getattr(args, "preset", None) or "default")
    guid = {}
    if getattr(args, "lambda_max", None) is not None:
        guid["lambda_max"] = args.lambda_max
    if getattr(args, "rho", None) is not None:
        guid["rho"] = args.rho
    if getattr(args, "eta", None) is not None:
        guid["eta"] = args.eta
    if getattr(args, "sparsity", None) is not None:
        guid["sparsity"] = args.sparsity
    model = {}
    if getattr(args, "mhla", None) is not None:
        model["mhla"] = args.mhla
    sample = {}
    if getattr(args, "seed", None) is not None and args.command in ("sample", "inspect", "eval", "sweep"):
        sample["seed"] = args.seed
    if getattr(args, "steps", None) is not None and args.command in ("sample", "inspect", "eval", "sweep"):
        sample["steps"] = args.steps
    train = {}
    if args.command == "train":
        if args.seed is not None:
            train["seed"] = args.seed
        if args.batch is not None:
            train["batch"] = args.batch
    sections = {k: v for k, v in (("guidance", guid), ("model", model), ("sample", sample), ("train", train)) if v}
    return base.replace(**sections) if sections else base


def _echo_config(directory: Path, cfg: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    (directory / "config_hash.txt").write_text(cfg.hash() + "\n")


def _load_model(args, ckpt: Path, records, overrides: bool = True) -> tuple[HiDreamModel, RunConfig, dict]:
    meta = read_meta(ckpt)
    cfg = config_mod.from_dict(meta["config"])
    if overrides:
        cfg = _config_from_args(args, cfg)
    model = build_model(cfg, records)
    load_checkpoint(ckpt, model)
    return model, cfg, meta


def _strengths(args, cfg: RunConfig):
    return tuple(cfg.guidance.lambda_max)


def _dir_digest(directory: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _resolve(args, args.out)
    layout = SynthLayout(image_size=args.image_size)
    recs = synth_dataset(args.seed, args.n, layout)
    write_dataset(recs, out, seed=args.seed, layout=layout)
    print(f"wrote {len(recs)} records to {out} (digest {_dir_digest(out)[:16]})")
    return 0


def cmd_train(args) -> int:
    out = _resolve(args, args.out)
    data = read_dataset(_resolve(args, args.data))
    init = _resolve(args, args.init)
    if args.stage == "b" and init is None:
        raise UsageError("--stage b requires --init <stage-a checkpoint>")
    if init is not None:
        meta = read_meta(init)
        cfg = _config_from_args(args, config_mod.from_dict(meta["config"]))
    else:
        cfg = _config_from_args(args)
    if cfg.data.image_size != data[0].stimulus.shape[-1]:
        raise UsageError(f"dataset images are {data[0].stimulus.shape[-1]} px but the config expects "
                         f"{cfg.data.image_size}; pick a matching --preset or --config")
    model = build_model(cfg, data)
    if init is not None:
        load_checkpoint(init, model)
    stages = [args.stage]
    if args.stage == "a" and init is None:
        stages = ["pretrain", "a"]  # no backbone given: fit one first
    _echo_config(out, cfg)
    opt = None
    start = 0
    if args.resume and (out / "meta.json").exists():
        meta = read_meta(out)
        if meta.get("stage") != args.stage:
            raise UsageError(f"cannot resume: {out} holds a stage-{meta.get('stage')} checkpoint")
        load_checkpoint(out, model)
        start = int(meta["step"])
        stages = [args.stage]
    for st in stages:
        steps = args.steps if args.steps is not None else {
            "pretrain": cfg.train.pretrain_steps, "a": cfg.train.steps_a, "b": cfg.train.steps_b}[st]
        lr = stage_lr(cfg, st)
        if args.lr is not None:
            lr = {k: args.lr for k in lr}
        remaining = max(steps - start, 0) if st == args.stage else steps
        if args.resume and start and st == args.stage:
            from .nn import AdamW
            opt = AdamW([])
            load_checkpoint(out, model, opt)
        opt, _ = train_stage(model, data, st, remaining, lr, cfg, out, start_step=start if st == args.stage else 0,
                             optimizer=opt, log_path=out / f"log_{st}.csv")
        save_checkpoint(out, model, {"stage": st, "step": (start if st == args.stage else 0) + remaining,
                                     "seed": cfg.train.seed}, opt)
        opt = None
    print(f"checkpoint written to {out}")
    return 0


def _testset(args):
    return read_dataset(_resolve(args, args.testset))


def cmd_sample(args) -> int:
    ckpt, out = _resolve(args, args.checkpoint), _resolve(args, args.out)
    test = _testset(args)
    if args.n is not None:
        test = test[: args.n]
    model, cfg, _ = _load_model(args, ckpt, test)
    gate = 0.0 if args.mhla_gate == 0 else args.mhla_gate
    imgs = sample_records(model, test, cfg, _strengths(args, cfg), mhla_gate=gate)
    _echo_config(out, cfg)
    for i, img in enumerate(imgs):
        write_ppm(out / f"sample_{i:05d}.ppm", img)
    print(f"wrote {len(imgs)} samples to {out}")
    return 0


def cmd_inspect(args) -> int:
    ckpt, out = _resolve(args, args.checkpoint), _resolve(args, args.out)
    test = _testset(args)
    recs = [test[i] for i in args.records]
    model, cfg, _ = _load_model(args, ckpt, test)
    _echo_config(out, cfg)
    with no_grad():
        pyr = model.adapter(Tensor(np.stack([r.amplitudes for r in recs]), dtype=model.dtype), model.space)
    dump_pyramid(pyr, out / "pyramid", getattr(model.adapter, "groups_of_roi", None))
    trace = []
    sample_records(model, recs, cfg, _strengths(args, cfg), trace=trace)
    path = dump_modulation_maps(trace, out / "modulation")
    print(f"pyramid and modulation dumps written under {out} ({path.name})")
    return 0


def _eval_images(args, cfg, test, model) -> np.ndarray:
    if args.samples:
        d = _resolve(args, args.samples)
        return np.stack([read_ppm(d / f"sample_{i:05d}.ppm") for i in range(len(test))])
    return sample_records(model, test, cfg, _strengths(args, cfg))


def cmd_eval(args) -> int:
    ckpt = _resolve(args, args.checkpoint)
    test = _testset(args)
    model, cfg, meta = _load_model(args, ckpt, test)
    imgs = _eval_images(args, cfg, test, model)
    truths = np.stack([r.stimulus for r in test])
    rep = evaluate(imgs, truths, seed=cfg.eval.seed, k=cfg.eval.k, config={"config_hash": cfg.hash()})
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write(out, args.variant)
    _echo_config(out.parent, cfg)
    print(rep.summary_csv(args.variant), end="")
    return _audit(rep)


def _audit(rep) -> int:
    s = rep.summary()
    ok = (0.0 <= s["two_way"][0] <= 1.0 and -1.0 <= s["pixcorr"][0] <= 1.0 and -1.0 <= s["ssim"][0] <= 1.0)
    if not ok:
        print("invariant audit failed: metric outside its range", file=sys.stderr)
        return EXIT_AUDIT
    return 0


def cmd_ablate(args) -> int:
    if args.list:
        print(" ".join(AXES[args.axis]))
        return 0
    cfg = _config_from_args(args)
    out = _resolve(args, args.out)
    variants = AXES[args.axis]
    _echo_config(out, cfg)
    res = run_variants(cfg, variants, args.seeds, out, progress=print)
    for seed in args.seeds:
        from .metrics import ablation_report
        reports = {v: res.runs[(seed, v)].report for v in variants}
        ref = "full" if "full" in reports else variants[0]
        table = ablation_report(reports, reference=ref)
        (out / f"ablation_seed{seed}.csv").write_text(table.to_csv())
        (out / f"ablation_seed{seed}.txt").write_text(table.to_text() + "\n")
        print(f"\nseed {seed}\n{table.to_text()}")
    return 0


def cmd_sweep(args) -> int:
    ckpt, out = _resolve(args, args.checkpoint), _resolve(args, args.out)
    test = _testset(args)
    model, cfg, _ = _load_model(args, ckpt, test)
    truths = np.stack([r.stimulus for r in test])
    base_l, base_r = tuple(cfg.guidance.lambda_max), tuple(cfg.guidance.rho)
    grid_l = [base_l] if not args.lambda_grid else [tuple(_floats(g)) for g in args.lambda_grid.split(";")]
    grid_r = [base_r] if not args.rho_grid else [tuple(_floats(g)) for g in args.rho_grid.split(";")]
    grid_e = [cfg.guidance.eta] if not args.eta_grid else _floats(args.eta_grid)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, cfg)
    lines = ["lambda_max,rho,eta,pixcorr,ssim,two_way"]
    for lm in grid_l:
        for rh in grid_r:
            for eta in grid_e:
                c = cfg.replace(guidance={"lambda_max": list(lm), "rho": list(rh), "eta": eta})
                model.params = type(model.params)(tuple(reversed(lm)), tuple(reversed(rh)), model.params.T, eta)
                imgs = sample_records(model, test, c, tuple(lm))
                s = evaluate(imgs, truths, seed=c.eval.seed, k=c.eval.k).summary()
                lines.append(f"\"{','.join(map(str, lm))}\",\"{','.join(map(str, rh))}\",{eta},"
                             f"{s['pixcorr'][0]!r},{s['ssim'][0]!r},{s['two_way'][0]!r}")
                print(lines[-1])
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _guidance_flags(p) -> None:
    p.add_argument("--lambda-max", type=_floats, help="per-depth strengths, shallow to deep (v,v,v,v)")
    p.add_argument("--rho", type=_floats, help="schedule exponents, shallow to deep")
    p.add_argument("--eta", type=float, help="soft energy budget")
    p.add_argument("--mhla", type=_onoff, help="cross-attention path on|off")
    p.add_argument("--sparsity", help="off | l1:<weight>")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hidream", description="ROI-conditioned toy diffusion pipeline")
    p.add_argument("--workdir", default=".", help="base directory for every relative path")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ROI dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--image-size", type=int, default=64)

    t = sub.add_parser("train", help="pretrain the backbone or run stage a / b")
    t.add_argument("--stage", required=True, choices=("pretrain", "a", "b"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint to start from (required for stage b)")
    t.add_argument("--config")
    t.add_argument("--preset", choices=config_mod.PRESETS)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float, help="override every learning rate of the stage")
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    _guidance_flags(t)

    for name, hlp in (("sample", "DDIM-sample reconstructions"), ("inspect", "dump pyramid and modulation maps"),
                      ("eval", "score reconstructions"), ("sweep", "grid over lambda / rho / eta")):
        c = sub.add_parser(name, help=hlp)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--testset", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--seed", type=int)
        c.add_argument("--steps", type=int, help="DDIM steps")
        _guidance_flags(c)
        if name == "sample":
            c.add_argument("--n", type=int)
            c.add_argument("--mhla-gate", type=float, help="fix every MHLA gate to this value")
        if name == "inspect":
            c.add_argument("--records", type=_ints, default=[0])
        if name == "eval":
            c.add_argument("--samples", help="directory of sample_XXXXX.ppm files to score instead of sampling")
            c.add_argument("--variant", default="run")
        if name == "sweep":
            c.add_argument("--lambda-grid", help="';'-separated strength tuples")
            c.add_argument("--rho-grid", help="';'-separated exponent tuples")
            c.add_argument("--eta-grid", help="comma-separated budgets")

    a = sub.add_parser("ablate", help="train and score an ablation grid")
    a.add_argument("--axis", required=True, choices=tuple(AXES))
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=_ints, default=[0])
    a.add_argument("--config")
    a.add_argument("--preset", choices=config_mod.PRESETS, default="desk")
    a.add_argument("--list", action="store_true", help="print the variants of the axis and exit")
    _guidance_flags(a)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample, "inspect": cmd_inspect,
            "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"hidream {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, InvariantViolation) as e:
        print(f"hidream {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_AUDIT
    except (TrainingAborted, OSError) as e:
        print(f"hidream {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
