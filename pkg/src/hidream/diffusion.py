"""Toy latent diffusion: noise schedule, a small U-Net with per-scale injection
points, the conditioned model, two-stage training, checkpoints and DDIM sampling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .adapter import FlatConditioner, RoiAdapter, ScaleSpace, adapter_regularizers, build_scale_space
from .config import RunConfig
from .guidance import (
    HintBranch, MhlaBlock, ScheduleParams, TraceEntry, budget_factor, film_fuse, lambda_schedule,
    make_hint, mhla_attend, parse_sparsity, roi_latents, sparsify_hint,
)
from .synth import GROUPS, SubjectRecord
from .tensor import (
    ContractError, Graph, NumericError, Tensor, abs_, add, avg_pool2, backward, concat, conv2d_1x1,
    conv2d_3x3, hdt, layer_norm_channels, linear, mean, mul, nearest_upsample2, no_grad, reshape, silu, sub,
)


class InvariantViolation(RuntimeError):
    """A frozen parameter moved or a bounded quantity left its range."""


class IntegrityError(RuntimeError):
    """A checkpoint file is missing or does not match its recorded digest."""


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ContractError("T must be >= 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T)
        # index 0 is the clean signal; t = 1..T are the noisy steps
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def abar(self, t) -> np.ndarray:
        return self.alpha_bar[np.asarray(t)]


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one step per sample."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ContractError(f"diffusion step must lie in [1, {sched.T}], got {t.min()}..{t.max()}")
    ab = sched.abar(t).reshape(t.shape + (1,) * (x0.ndim - t.ndim)).astype(x0.dtype)
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps


# ---------------------------------------------------------------------------
# fixed latent lift
# ---------------------------------------------------------------------------

LIFT = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.299, 0.587, 0.114]])
LIFT_PINV = np.linalg.pinv(LIFT)


def encode(images: np.ndarray) -> np.ndarray:
    """(N, 3, H, W) in [0, 1] -> (N, 4, H, W) latents in [-1, 1]."""
    return 2.0 * np.einsum("kc,nchw->nkhw", LIFT, images) - 1.0


def decode(latents: np.ndarray) -> np.ndarray:
    return np.clip(np.einsum("ck,nkhw->nchw", LIFT_PINV, (latents + 1.0) / 2.0), 0.0, 1.0)


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None] / 10.0
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class Block(nn.Module):
    """x + conv(silu(LN(conv(silu(LN x)) + time)))."""

    def __init__(self, rng, c_in: int, c_out: int, temb: int, dtype: str):
        super().__init__()
        self.w1 = nn.conv_weight(rng, c_out, c_in, 3, dtype)
        self.b1 = nn.zeros((c_out,), dtype)
        self.wt = nn.normal(rng, (c_out, temb), math.sqrt(1.0 / temb), dtype)
        self.bt = nn.zeros((c_out,), dtype)
        self.w2 = nn.conv_weight(rng, c_out, c_out, 3, dtype)
        self.b2 = nn.zeros((c_out,), dtype)
        if c_in != c_out:
            self.ws = nn.conv_weight(rng, c_out, c_in, 1, dtype)
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ContractError(f"block expects {self.c_in} channels, got {x.shape[1]}")
        h = conv2d_3x3(silu(layer_norm_channels(x)), self.w1, self.b1)
        tproj = linear(temb, self.wt, self.bt)
        h = add(h, reshape(tproj, tproj.shape + (1, 1)))
        h = conv2d_3x3(silu(layer_norm_channels(h)), self.w2, self.b2)
        skip = conv2d_1x1(x, self.ws) if self.c_in != self.c_out else x
        return add(skip, h)


class UNet(nn.Module):
    """Encoder/decoder over resolutions ``scales`` (ascending); widths listed shallow -> deep."""

    LATENT = 4

    def __init__(self, rng, scales, widths, temb_dim: int, dtype: str = "f32"):
        super().__init__()
        self.scales = tuple(scales)
        self.levels = tuple(sorted(self.scales, reverse=True))  # shallow first
        self.widths = tuple(widths)
        L = len(self.levels)
        self.temb_dim = temb_dim
        self.t_w1 = nn.normal(rng, (temb_dim, temb_dim), math.sqrt(1.0 / temb_dim), dtype)
        self.t_b1 = nn.zeros((temb_dim,), dtype)
        self.t_w2 = nn.normal(rng, (temb_dim, temb_dim), math.sqrt(1.0 / temb_dim), dtype)
        self.t_b2 = nn.zeros((temb_dim,), dtype)
        self.stem_w = nn.conv_weight(rng, widths[0], self.LATENT, 3, dtype)
        self.stem_b = nn.zeros((widths[0],), dtype)
        self.enc = nn.ModuleList()
        for i in range(L):
            c_in = widths[max(i - 1, 0)]
            self.enc.append(Block(rng, c_in, widths[i], temb_dim, dtype))
        self.mid = Block(rng, widths[-1], widths[-1], temb_dim, dtype)
        self.dec = nn.ModuleList()
        for i in range(L):
            c_up = widths[i + 1] if i + 1 < L else widths[-1]
            self.dec.append(Block(rng, c_up + widths[i], widths[i], temb_dim, dtype))
        self.out_w = nn.conv_weight(rng, self.LATENT, widths[0], 3, dtype, zero=True)
        self.out_b = nn.zeros((self.LATENT,), dtype)
        self.dtype = dtype

    def level_of(self, s: int) -> int:
        return self.levels.index(s)

    def wired_block_names(self, scales) -> list[str]:
        out = []
        for s in scales:
            i = self.level_of(s)
            out += [f"enc.{i}.", f"dec.{i}."]
        return out

    def __call__(self, x: Tensor, t, inject=None) -> Tensor:
        """``inject(level, h)`` is called on every encoder block output."""
        temb = Tensor(timestep_embedding(t, self.temb_dim), dtype=self.dtype)
        temb = linear(silu(linear(temb, self.t_w1, self.t_b1)), self.t_w2, self.t_b2)
        h = conv2d_3x3(x, self.stem_w, self.stem_b)
        skips = []
        L = len(self.levels)
        for i in range(L):
            if i > 0:
                h = avg_pool2(h)
            h = self.enc[i](h, temb)
            if inject is not None:
                h = inject(i, h)
            skips.append(h)
        h = self.mid(h, temb)
        for i in reversed(range(L)):
            h = self.dec[i](concat([h, skips[i]], axis=1), temb)
            if i > 0:
                h = nearest_upsample2(h)
        return conv2d_3x3(silu(layer_norm_channels(h)), self.out_w, self.out_b)


# ---------------------------------------------------------------------------
# conditioned model
# ---------------------------------------------------------------------------

@dataclass
class Conditioning:
    """Everything that depends only on ROI evidence, computed once per batch."""
    pyramid: object
    heads: dict  # scale -> (A, gamma, beta)
    energy: dict  # scale -> Tensor, (N,) per-sample or () batch mean of |A_s|
    latents: dict  # scale -> (tokens, token ids)
    hints: dict = field(default_factory=dict)


class HiDreamModel(nn.Module):
    def __init__(self, cfg: RunConfig, space: ScaleSpace, dtype: str = "f32"):
        super().__init__()
        m = cfg.model
        rng = np.random.default_rng(np.random.SeedSequence([m.init_seed, 17]))
        self.cfg = cfg
        self.scales = tuple(m.scales)
        shallow_first = tuple(sorted(self.scales, reverse=True))
        self.d = {s: m.channels[shallow_first.index(s)] for s in self.scales}
        self.width = {s: m.widths[shallow_first.index(s)] for s in self.scales}
        self.space = space
        self.dtype = dtype
        self.unet = UNet(rng, self.scales, m.widths, m.temb_dim, dtype)
        ch = [self.d[s] for s in self.scales]
        if m.adapter == "flat":
            self.adapter = FlatConditioner(self.scales, ch, rng, dtype)
        else:
            self.adapter = RoiAdapter(space.groups, self.scales, ch, rng, dtype, keep=m.keep)
        self.hints = nn.ModuleList([
            HintBranch(rng, self.d[s], self.width[s], m.hint_hidden or None, dtype) for s in self.scales])
        self.mhla_on = bool(m.mhla)
        if self.mhla_on:
            self.mhla = nn.ModuleList([
                MhlaBlock(rng, self.width[s], self.d[s], 16 * len(GROUPS), m.mhla_heads, m.mhla_width, dtype)
                for s in self.scales])
        self.film_first = m.film_first
        self.sched = NoiseSchedule(m.T)
        g = cfg.guidance
        self.params = ScheduleParams(tuple(reversed(g.lambda_max)), tuple(reversed(g.rho)), m.T, g.eta)
        self.sparsity = parse_sparsity(g.sparsity)

    # parameter groups ----------------------------------------------------
    def guidance_modules(self) -> list[tuple[str, nn.Module]]:
        mods = [("adapter.", self.adapter), ("hints.", self.hints)]
        if self.mhla_on:
            mods.append(("mhla.", self.mhla))
        return mods

    def guidance_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p + k, t) for p, mod in self.guidance_modules() for k, t in mod.named_parameters()]

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return [("unet." + k, t) for k, t in self.unet.named_parameters()]

    def wired_parameters(self) -> list[tuple[str, Tensor]]:
        names = self.unet.wired_block_names(self.scales)
        return [(n, t) for n, t in self.backbone_parameters() if any(n[5:].startswith(w) for w in names)]

    # forward ------------------------------------------------------------
    def condition(self, amplitudes: Tensor, per_sample_energy: bool = False) -> Conditioning:
        pyr = self.adapter(amplitudes, self.space)
        heads, energy, latents, hints = {}, {}, {}, {}
        for si, s in enumerate(self.scales):
            hint = make_hint(pyr.xi[s], self.hints[si])
            hints[s] = hint
            a, gamma, beta = self.hints[si].heads(hint)
            heads[s] = (a, gamma, beta)
            energy[s] = mean(abs_(a), axis=(1, 2, 3)) if per_sample_energy else mean(abs_(a))
            if self.mhla_on:
                latents[s] = roi_latents(pyr.group, s, self.adapter.keep)
        return Conditioning(pyr, heads, energy, latents, hints)

    def strengths(self, cond: Conditioning, lam: dict, n: int):
        """Budget-rescaled per-sample strengths {scale: (N,) Tensor} and B / eta."""
        lam_arr = {s: np.broadcast_to(np.asarray(lam[s], dtype=np.float64), (n,)) for s in self.scales}
        e = [cond.energy[s] for s in self.scales]
        factor, b = budget_factor([lam_arr[s] for s in self.scales], e, self.params.eta)
        out = {s: mul(Tensor(lam_arr[s], dtype=self.dtype), factor) for s in self.scales}
        return out, b.data / self.params.eta

    def precondition(self, x_t: Tensor, t):
        """Skip term and output gain so that eps = skip + gain * unet(x_t).

        The skip is the best affine guess of eps from x_t alone, for latents with the
        configured mean and std; the gain is the std of what that guess leaves over.
        """
        m = self.cfg.model
        ab = self.sched.abar(np.broadcast_to(np.asarray(t), (x_t.shape[0],))).reshape(-1, 1, 1, 1)
        var = ab * m.latent_std ** 2 + (1.0 - ab)
        skip = np.sqrt(1.0 - ab) / var * (x_t.data - np.sqrt(ab) * m.latent_mean)
        gain = np.sqrt(ab * m.latent_std ** 2 / var)
        return Tensor(skip, dtype=self.dtype), Tensor(gain, dtype=self.dtype)

    def eps(self, x_t: Tensor, t, cond: Conditioning | None = None, lam: dict | None = None,
            mhla_gate: float | None = None, record: dict | None = None) -> Tensor:
        """Noise prediction; ``cond is None`` runs the bare backbone."""
        skip, gain = self.precondition(x_t, t)
        return add(skip, mul(gain, self._eps_net(x_t, t, cond, lam, mhla_gate, record)))

    def _eps_net(self, x_t, t, cond, lam, mhla_gate, record) -> Tensor:
        if cond is None:
            return self.unet(x_t, t)
        n = x_t.shape[0]
        eff, util = self.strengths(cond, lam, n)
        if record is not None:
            record["strength"] = {s: v.data.copy() for s, v in eff.items()}
            record["util"] = util
        levels = self.unet.levels

        def inject(i, h):
            s = levels[i]
            si = self.scales.index(s)

            def film(h):
                if not np.any(eff[s].data):
                    return h
                a, gamma, beta = cond.heads[s]
                return film_fuse(h, eff[s], a, gamma, beta)

            def attend(h):
                if not self.mhla_on or cond.latents[s][0] is None:
                    return h
                blk = self.mhla[si]
                prev = blk.fixed_gate
                if mhla_gate is not None:
                    blk.fixed_gate = mhla_gate
                try:
                    toks, ids = cond.latents[s]
                    return mhla_attend(h, toks, blk, ids)
                finally:
                    blk.fixed_gate = prev

            return attend(film(h)) if self.film_first else film(attend(h))

        return self.unet(x_t, t, inject)


def build_model(cfg: RunConfig, records: list[SubjectRecord], dtype: str = "f32") -> HiDreamModel:
    space = build_scale_space(records[0].rois, cfg.model.scales, cfg.model.sigma0, cfg.model.bandpass)
    return HiDreamModel(cfg, space, dtype)


def batch_arrays(records: list[SubjectRecord], dtype=np.float32):
    x0 = encode(np.stack([r.stimulus for r in records]).astype(np.float64)).astype(dtype)
    amps = np.stack([r.amplitudes for r in records]).astype(dtype)
    return x0, amps


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossTerms:
    total: Tensor
    l_dm: float
    reg: dict
    util: float


def dm_loss(model: HiDreamModel, x0: np.ndarray, amps: np.ndarray, t, eps: np.ndarray, lam: dict | None,
            reg_weights: dict | None = None, eps_fn=None) -> LossTerms:
    """Mean squared noise-prediction error plus adapter and sparsity regularizers.

    ``lam`` maps scale -> strength (scalar or per-sample); ``None`` trains the
    bare backbone. ``eps_fn(x_t, t)`` replaces the network prediction.
    """
    x_t = Tensor(forward_diffuse(x0, t, eps, model.sched), dtype=model.dtype)
    cond = None
    if lam is not None:
        cond = model.condition(Tensor(amps, dtype=model.dtype))
    rec = {}
    pred = eps_fn(x_t, t) if eps_fn is not None else model.eps(x_t, t, cond, lam, record=rec)
    diff = sub(pred, Tensor(eps, dtype=model.dtype))
    l_dm = mean(mul(diff, diff))
    total = l_dm
    reg = {}
    if cond is not None and reg_weights:
        if isinstance(model.adapter, RoiAdapter):
            r_tot, terms = adapter_regularizers(cond.pyramid, model.adapter.gates, model.adapter.groups_of_roi,
                                                reg_weights)
            total = add(total, r_tot)
            reg.update({k: float(v.item()) for k, v in terms.items()})
        mode, weight = model.sparsity
        if mode != "off" and weight:
            sp = None
            for s in model.scales:
                p = sparsify_hint(cond.pyramid.xi[s], mode)
                sp = p if sp is None else add(sp, p)
            total = add(total, sp * weight)
            reg["sparsity"] = float(sp.item())
    util = float(np.mean(rec["util"])) if "util" in rec else 0.0
    return LossTerms(total, float(l_dm.item()), reg, util)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def params_hash(named) -> str:
    h = hashlib.sha256()
    for name, t in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def save_checkpoint(directory, model: HiDreamModel, meta: dict, optimizer: nn.AdamW | None = None) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    files = {}
    named = model.backbone_parameters() + model.guidance_parameters()
    for name, t in named:
        rel = f"params/{name}.hdt"
        hdt.save(d / rel, t.data)
        files[rel] = _digest(d / rel)
    if optimizer is not None:
        (d / "optim").mkdir(exist_ok=True)
        for name, arr in optimizer.state_dict().items():
            rel = f"optim/{name}.hdt"
            hdt.save(d / rel, np.asarray(arr))
            files[rel] = _digest(d / rel)
    meta = dict(meta)
    meta["files"] = files
    meta["config"] = model.cfg.to_dict()
    meta["config_hash"] = model.cfg.hash()
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise IntegrityError(f"checkpoint metadata missing: {path}") from None
    except json.JSONDecodeError as e:
        raise IntegrityError(f"checkpoint metadata corrupt: {path} ({e})") from None


def load_checkpoint(directory, model: HiDreamModel, optimizer: nn.AdamW | None = None) -> dict:
    """Verify every file digest, then load parameters (and optimizer state if given)."""
    d = Path(directory)
    meta = read_meta(d)
    for rel, digest in meta["files"].items():
        p = d / rel
        if not p.exists():
            raise IntegrityError(f"checkpoint tensor missing: {p}")
        if _digest(p) != digest:
            raise IntegrityError(f"checkpoint tensor corrupt (digest mismatch): {p}")
    named = dict(model.backbone_parameters() + model.guidance_parameters())
    for name, t in named.items():
        rel = f"params/{name}.hdt"
        if rel not in meta["files"]:
            raise IntegrityError(f"checkpoint has no tensor for parameter {name}")
        arr = hdt.load(d / rel)
        if arr.shape != t.shape:
            raise IntegrityError(f"{d / rel}: shape {arr.shape} != {t.shape}")
        t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
    if optimizer is not None:
        state = {rel[6:-4]: hdt.load(d / rel) for rel in meta["files"] if rel.startswith("optim/")}
        if state:
            optimizer.load_state_dict(state)
    return meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LOG_FIELDS = ["stage", "step", "loss", "l_dm", "reg_alpha", "reg_w", "reg_tv", "sparsity", "budget_util"]


class CsvLog:
    def __init__(self, path: Path | None, append: bool = False):
        self.path = path
        self.rows: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not (append and path.exists()):
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(LOG_FIELDS)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(k, "")) for k in LOG_FIELDS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _dump_diagnostic(directory: Path | None, model: HiDreamModel, stage: str, step: int, err: Exception) -> None:
    if directory is None:
        return
    d = directory / "diagnostic"
    d.mkdir(parents=True, exist_ok=True)
    bad = [n for n, t in model.backbone_parameters() + model.guidance_parameters() if not np.all(np.isfinite(t.data))]
    (d / "report.json").write_text(json.dumps(
        {"stage": stage, "step": step, "error": str(err), "nonfinite_params": bad}, indent=1))
    for n, t in model.guidance_parameters():
        hdt.save(d / f"{n}.hdt", t.data)


@dataclass
class StageResult:
    log: list
    step: int
    directory: Path | None = None


def _check_bounds(model: HiDreamModel) -> None:
    ad = model.adapter
    if isinstance(ad, RoiAdapter):
        with no_grad():
            a = ad.alpha().data
            w = ad.gates.w().data
        if np.any(a < 0) or np.any(w < 0) or np.any(w > 1):
            raise InvariantViolation("adapter weights left their bounds (alpha >= 0, 0 <= w <= 1)")
    if model.mhla_on:
        for blk in model.mhla:
            g = blk.gate().data
            if not 0 <= g <= 1:
                raise InvariantViolation(f"MHLA gate {g} outside [0, 1]")


def train_stage(model: HiDreamModel, records: list[SubjectRecord], stage: str, steps: int, lr: dict,
                cfg: RunConfig, out: Path | None = None, start_step: int = 0, optimizer: nn.AdamW | None = None,
                log_path: Path | None = None):
    """Run ``steps`` optimizer steps of one stage ('pretrain', 'a' or 'b')."""
    tc = cfg.train
    if stage == "pretrain":
        trainable = model.backbone_parameters()
        frozen = model.guidance_parameters()
        groups = [{"params": trainable, "lr": lr["unet"]}]
    elif stage == "a":
        trainable = model.guidance_parameters()
        frozen = model.backbone_parameters()
        groups = [{"params": trainable, "lr": lr["adapter"]}]
    elif stage == "b":
        wired = model.wired_parameters()
        wired_ids = {id(t) for _, t in wired}
        frozen = [(n, t) for n, t in model.backbone_parameters() if id(t) not in wired_ids]
        trainable = model.guidance_parameters() + wired
        groups = [{"params": model.guidance_parameters(), "lr": lr["adapter"]},
                  {"params": wired, "lr": lr["unet"]}]
    else:
        raise ValueError(f"unknown stage {stage!r}")
    # gate and alpha pre-activations are not decayed
    for g in groups:
        decay = [(n, t) for n, t in g["params"] if not (n.endswith("alpha_raw") or n.endswith(".u")
                                                       or n.endswith("gate_logit"))]
        g["params"] = decay
        g["weight_decay"] = tc.weight_decay
    nodecay = [(n, t) for n, t in trainable if n.endswith("alpha_raw") or n.endswith(".u") or n.endswith("gate_logit")]
    if nodecay:
        groups.append({"params": nodecay, "lr": lr["adapter"], "weight_decay": 0.0})
    for _, t in trainable:
        t.requires_grad = True
    for _, t in frozen:
        t.requires_grad = False
    opt = optimizer or nn.AdamW(groups, betas=tuple(tc.betas))
    if optimizer is not None:
        opt.groups = nn.AdamW(groups, betas=tuple(tc.betas)).groups
    frozen_hash = params_hash(frozen)
    log = CsvLog(log_path, append=start_step > 0)
    reg_w = {"alpha": tc.reg_alpha, "w": tc.reg_w, "tv": tc.reg_tv}
    scale_index = {s: i for i, s in enumerate(model.scales)}
    x_all, a_all = batch_arrays(records, np.float32 if model.dtype == "f32" else np.float64)
    n = len(records)
    for step in range(start_step + 1, start_step + steps + 1):
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 101, "pab".index(stage[0]), step]))
        idx = rng.choice(n, size=min(tc.batch, n), replace=False) if tc.batch < n else np.arange(n)
        t = rng.integers(1, model.sched.T + 1, size=len(idx))
        eps = rng.standard_normal(x_all[idx].shape).astype(x_all.dtype)
        if stage == "pretrain":
            lam = None
        elif stage == "a":
            ramp = min(1.0, step / tc.ramp) if tc.ramp > 0 else 1.0
            lam = {s: model.params.lambda_max[scale_index[s]] * ramp for s in model.scales}
        else:
            lam = {s: lambda_schedule(scale_index[s], t, model.params) for s in model.scales}
        try:
            with Graph():
                terms = dm_loss(model, x_all[idx], a_all[idx], t, eps, lam, reg_w)
                opt.zero_grad()
                backward(terms.total)
                opt.step()
        except NumericError as e:
            _dump_diagnostic(out, model, stage, step, e)
            raise TrainingAborted(f"non-finite value at {stage} step {step}: {e}") from e
        if params_hash(frozen) != frozen_hash:
            raise InvariantViolation(f"frozen parameters changed during {stage} step {step}")
        _check_bounds(model)
        if step % tc.log_every == 0 or step == start_step + steps:
            log.write({"stage": stage, "step": step, "loss": float(terms.total.item()), "l_dm": terms.l_dm,
                       "reg_alpha": terms.reg.get("alpha", 0.0), "reg_w": terms.reg.get("w", 0.0),
                       "reg_tv": terms.reg.get("tv", 0.0), "sparsity": terms.reg.get("sparsity", 0.0),
                       "budget_util": terms.util})
    return opt, log.rows


def train_pipeline(cfg: RunConfig, records, out: Path | None = None, stages=("pretrain", "a", "b"),
                   lr_override: float | None = None, model: HiDreamModel | None = None):
    """Convenience driver: run the requested stages in order on one model."""
    model = model or build_model(cfg, records)
    tc = cfg.train
    logs = {}
    for st in stages:
        steps = {"pretrain": tc.pretrain_steps, "a": tc.steps_a, "b": tc.steps_b}[st]
        lr = {"unet": tc.pretrain_lr if st == "pretrain" else tc.lr_unet, "adapter": tc.lr_adapter}
        if lr_override is not None:
            lr = {k: lr_override for k in lr}
        _, logs[st] = train_stage(model, records, st, steps, lr, cfg, out,
                                  log_path=(out / f"log_{st}.csv") if out else None)
    return model, logs


# ---------------------------------------------------------------------------
# DDIM sampling
# ---------------------------------------------------------------------------

def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ContractError("DDIM needs at least one step")
    if steps > T:
        raise ContractError(f"cannot take {steps} DDIM steps over {T} diffusion steps")
    stride = T // steps
    return [stride * k for k in range(steps, 0, -1)]


def initial_noise(n: int, shape, seed: int, record_ids=None) -> np.ndarray:
    ids = range(n) if record_ids is None else record_ids
    return np.stack([np.random.default_rng(np.random.SeedSequence([seed, 7, int(i)])).standard_normal(shape)
                     for i in ids])


def ddim_sample(model: HiDreamModel, amplitudes: np.ndarray | None, steps: int = 50, strengths=None, seed: int = 0,
                mhla_gate: float | None = None, record_ids=None, trace: list | None = None, eps_fn=None,
                x_T: np.ndarray | None = None, return_latent: bool = False):
    """Deterministic DDIM sampling (eta = 0) from per-record seeded noise.

    ``strengths`` are the fixed per-depth maxima (shallow -> deep); the cosine
    schedule scales them at each step. ``amplitudes is None`` samples the bare
    backbone. ``eps_fn(x_t, t)`` replaces the network prediction.
    """
    ts = ddim_timesteps(model.sched.T, steps)
    size = model.scales[-1]
    if amplitudes is not None:
        amplitudes = np.asarray(amplitudes)
        n = amplitudes.shape[0]
    else:
        n = len(record_ids) if record_ids is not None else 1
    if x_T is None:
        x_T = initial_noise(n, (UNet.LATENT, size, size), seed, record_ids)
    npdt = np.float32 if model.dtype == "f32" else np.float64
    x = np.asarray(x_T, dtype=npdt)
    params = model.params
    if strengths is not None:
        strengths = tuple(float(v) for v in strengths)
        if len(strengths) != len(model.scales):
            raise ContractError(f"need {len(model.scales)} strengths, got {len(strengths)}")
        params = ScheduleParams(tuple(reversed(strengths)), params.rho, params.T, params.eta)
    with no_grad():
        cond = None
        if amplitudes is not None:
            cond = model.condition(Tensor(amplitudes, dtype=model.dtype), per_sample_energy=True)
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            lam = {s: lambda_schedule(i, t, params) for i, s in enumerate(model.scales)}
            tt = np.full(n, t)
            if eps_fn is not None:
                e = np.asarray(eps_fn(x, t), dtype=npdt)
            else:
                rec = {}
                e = model.eps(Tensor(x), tt, cond, lam, mhla_gate=mhla_gate, record=rec if trace is not None else None).data
                if trace is not None and cond is not None:
                    _record_trace(trace, model, cond, rec, k, t)
            ab, ab_prev = model.sched.alpha_bar[t], model.sched.alpha_bar[t_prev]
            # keep the clean estimate inside the latent range, then re-derive the noise it implies
            x0 = np.clip((x - np.sqrt(1 - ab) * e) / np.sqrt(ab), -1.0, 1.0)
            e = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
            x = (np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * e).astype(npdt)
    if return_latent:
        return x
    return decode(x.astype(np.float64))


def _record_trace(trace: list, model: HiDreamModel, cond: Conditioning, rec: dict, k: int, t: int) -> None:
    pyr = cond.pyramid
    for si, s in enumerate(model.scales):
        lam = rec["strength"][s]
        gamma = cond.heads[s][1].data
        norms = {}
        if pyr.alpha is not None:
            for gi, g in enumerate(GROUPS):
                if (g, s) in pyr.group:
                    contrib = lam[:, None, None, None] * pyr.alpha.data[gi, si] * pyr.group[(g, s)].data
                    norms[g] = np.abs(contrib).sum(axis=(1, 2, 3))
        trace.append(TraceEntry(step=k, t=t, scale=s, lam=lam.copy(), gamma=gamma.copy(), group_norms=norms))
