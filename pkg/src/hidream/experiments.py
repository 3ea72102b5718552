"""Ablation variants and the train -> sample -> evaluate loop shared by the CLI and tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffusion import HiDreamModel, build_model, ddim_sample, train_stage
from .metrics import MetricReport, ablation_report, evaluate
from .synth import GROUPS, SynthLayout, synth_dataset

ALL = tuple(GROUPS)

VARIANTS = {
    "full": {"adapter": "hierarchical", "keep": ALL, "mhla": True},
    "eml": {"adapter": "hierarchical", "keep": ALL, "mhla": True},
    "em": {"adapter": "hierarchical", "keep": ("early", "mid"), "mhla": True},
    "ml": {"adapter": "hierarchical", "keep": ("mid", "late"), "mhla": True},
    "el": {"adapter": "hierarchical", "keep": ("early", "late"), "mhla": True},
    "no-adapter": {"adapter": "flat", "keep": ALL, "mhla": False},
    "adapter-no-mhla": {"adapter": "hierarchical", "keep": ALL, "mhla": False},
}
# drop-one-group names
VARIANTS["no-late"] = VARIANTS["em"]
VARIANTS["no-early"] = VARIANTS["ml"]
VARIANTS["no-mid"] = VARIANTS["el"]

AXES = {
    "groups": ("eml", "em", "ml", "el"),
    "modules": ("no-adapter", "adapter-no-mhla", "full"),
    "all": ("full", "em", "el", "ml", "no-adapter", "adapter-no-mhla"),
}


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[variant]
    return cfg.replace(model={"adapter": v["adapter"], "keep": list(v["keep"]), "mhla": v["mhla"]})


def make_data(cfg: RunConfig):
    layout = SynthLayout(image_size=cfg.data.image_size)
    train = synth_dataset(cfg.data.seed, cfg.data.n_train, layout)
    test = synth_dataset(cfg.data.test_seed, cfg.data.n_test, layout)
    return train, test


def stage_lr(cfg: RunConfig, stage: str) -> dict:
    tc = cfg.train
    return {"unet": tc.pretrain_lr if stage == "pretrain" else tc.lr_unet, "adapter": tc.lr_adapter}


def sample_records(model: HiDreamModel, records, cfg: RunConfig, strengths=None, mhla_gate=None, trace=None,
                   batch: int = 64) -> np.ndarray:
    amps = np.stack([r.amplitudes for r in records])
    out = []
    for i in range(0, len(records), batch):
        ids = list(range(i, min(i + batch, len(records))))
        out.append(ddim_sample(model, amps[ids], cfg.sample.steps, strengths, cfg.sample.seed,
                               mhla_gate=mhla_gate, record_ids=ids, trace=trace))
    return np.concatenate(out)


@dataclass
class VariantRun:
    variant: str
    seed: int
    report: MetricReport
    logs: dict
    seconds: float
    images: np.ndarray | None = None


@dataclass
class AblationResult:
    runs: dict = field(default_factory=dict)  # (seed, variant) -> VariantRun

    def summary(self, seed: int, metric: str) -> dict:
        return {v: r.report.summary()[metric][0] for (s, v), r in self.runs.items() if s == seed}


def run_variants(cfg: RunConfig, variants, seeds, out: Path | None = None, progress=None,
                 keep_images: bool = False) -> AblationResult:
    """Pretrain one backbone per seed, then train, sample and score every variant from it."""
    result = AblationResult()
    train, test = make_data(cfg)
    truths = np.stack([r.stimulus for r in test])
    for seed in seeds:
        base = cfg.replace(train={"seed": int(seed)}, model={"init_seed": int(seed)})
        t0 = time.time()
        backbone = build_model(base, train)
        train_stage(backbone, train, "pretrain", base.train.pretrain_steps, stage_lr(base, "pretrain"), base)
        state = {n: t.data.copy() for n, t in backbone.backbone_parameters()}
        pre_s = time.time() - t0
        if progress:
            progress(f"seed {seed}: pretrained backbone in {pre_s:.0f}s")
        for v in variants:
            t1 = time.time()
            vcfg = variant_config(base, v)
            model = build_model(vcfg, train)
            for n, t in model.backbone_parameters():
                t.data = state[n].copy()
            logs = {}
            for st, steps in (("a", vcfg.train.steps_a), ("b", vcfg.train.steps_b)):
                d = out / f"seed{seed}" / v if out else None
                _, logs[st] = train_stage(model, train, st, steps, stage_lr(vcfg, st), vcfg,
                                          log_path=(d / f"log_{st}.csv") if d else None)
            imgs = sample_records(model, test, vcfg)
            rep = evaluate(imgs, truths, seed=vcfg.eval.seed, k=vcfg.eval.k,
                           config={"variant": v, "config_hash": vcfg.hash()})
            run = VariantRun(v, seed, rep, logs, time.time() - t1, imgs if keep_images else None)
            result.runs[(seed, v)] = run
            if out:
                d = out / f"seed{seed}" / v
                d.mkdir(parents=True, exist_ok=True)
                rep.write(d / "report.csv", v)
            if progress:
                s = rep.summary()
                progress(f"seed {seed} {v}: pixcorr {s['pixcorr'][0]:.4f} ssim {s['ssim'][0]:.4f} "
                         f"two_way {s['two_way'][0]:.4f} ({run.seconds:.0f}s)")
    return result


def ablation_table(result: AblationResult, seed: int, variants, reference: str = "full"):
    reports = {v: result.runs[(seed, v)].report for v in variants}
    return ablation_report(reports, reference=reference if reference in reports else None)
