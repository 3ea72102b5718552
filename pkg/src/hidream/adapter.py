"""ROI adapter: scale-space ROI maps, per-scale gates, per-group mixers and the
nonnegative group aggregation that yields one condition map per scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .synth import GROUPS, DegenerateRoiError, RoiSpec
from .tensor import (
    Tensor, abs_, add, avg_pool2, clip, concat, conv2d_1x1, div, gaussian_blur, getitem, hdt, laplacian, log,
    mean, mul, no_grad, reshape, sigmoid, silu, softplus, sub, sum_,
)


class WiringError(ValueError):
    """Channel or extent mismatch between pyramid pieces."""


class AdapterConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scale space
# ---------------------------------------------------------------------------

@dataclass
class ScaleSpace:
    scales: tuple
    maps: dict  # scale -> array (R, s, s)
    bandpass: bool
    roi_ids: tuple
    groups: tuple
    masks: np.ndarray | None = None  # (R, H, W) binary masks at full extent

    def group_index(self) -> dict[str, list[int]]:
        return {g: [i for i, gg in enumerate(self.groups) if gg == g] for g in GROUPS}


def _downsample(x: Tensor, s: int) -> Tensor:
    while x.shape[-1] > s:
        x = avg_pool2(x)
    return x


def build_scale_space(rois: list[RoiSpec], scales, sigma0: float = 1.0, bandpass: bool = False,
                      clip_maps: bool = True) -> ScaleSpace:
    """Blur each ROI mask with sigma0 * (s_max / s), downsample to s x s and clip to [0, 1].

    With ``bandpass`` the interior scales use blur(sigma) - blur(2 sigma) instead.
    """
    scales = tuple(int(s) for s in scales)
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise AdapterConfigError(f"scales must be strictly increasing, got {scales}")
    masks = []
    for r in rois:
        m = np.asarray(r.mask, dtype=np.float64)
        if not m.any():
            raise DegenerateRoiError(f"ROI {r.id}: empty mask")
        masks.append(m)
    masks = np.stack(masks)
    extent = masks.shape[-1]
    for s in scales:
        k = extent // s
        if extent % s or k & (k - 1) or masks.shape[-2] != extent:
            raise AdapterConfigError(f"mask extent {masks.shape[-2:]} cannot be pooled to {s}x{s}")
    smax = scales[-1]
    interior = set(scales[1:-1])
    out = {}
    with no_grad():
        x = Tensor(masks[None])
        for s in scales:
            sigma = sigma0 * smax / s
            y = laplacian(x, sigma) if (bandpass and s in interior) else gaussian_blur(x, sigma)
            y = _downsample(y, s)
            if clip_maps:
                y = clip(y, 0.0, 1.0)
            out[s] = y.data[0]
    return ScaleSpace(scales, out, bandpass, tuple(r.id for r in rois), tuple(r.group for r in rois), masks)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def depth_prior(scales, temperature: float = 1.0) -> np.ndarray:
    """(3, S) prior over groups at each scale; the largest scale is the shallowest depth."""
    n = len(scales)
    order = sorted(scales, reverse=True)
    depth_s = np.array([order.index(s) for s in scales], dtype=float)
    depth_g = np.array([0.0, (n - 1) / 2.0, n - 1.0])
    logits = -np.abs(depth_g[:, None] - depth_s[None, :]) / temperature
    p = np.exp(logits - logits.max(axis=0))
    return p / p.sum(axis=0)


class GateBank(nn.Module):
    """Gates w[r, s] = sigmoid(u[r, s]) plus the group-by-scale prior."""

    def __init__(self, n_rois: int, scales, dtype="f32", init: float = 0.5):
        super().__init__()
        logit = np.log(init / (1 - init))
        self.u = nn.full((n_rois, len(scales)), logit, dtype)
        self.prior = depth_prior(scales)

    def w(self) -> Tensor:
        return sigmoid(self.u)


class Mixer(nn.Module):
    """1x1 conv -> silu -> 1x1 conv."""

    def __init__(self, rng, c_in: int, c_out: int, dtype="f32"):
        super().__init__()
        self.w1 = nn.conv_weight(rng, c_out, c_in, 1, dtype)
        self.b1 = nn.zeros((c_out,), dtype)
        self.w2 = nn.conv_weight(rng, c_out, c_out, 1, dtype)
        self.b2 = nn.zeros((c_out,), dtype)
        self.c_in = c_in
        self.c_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise WiringError(f"mixer expects {self.c_in} channels, got {x.shape[1]}")
        return conv2d_1x1(silu(conv2d_1x1(x, self.w1, self.b1)), self.w2, self.b2)


def alpha_init_logit(value: float = 1.0 / 3.0) -> float:
    """Pre-activation v with softplus(v) == value."""
    return float(np.log(np.expm1(value)))


@dataclass
class CorticalPyramid:
    xi: dict  # scale -> Tensor (N, d_s, s, s)
    group: dict = field(default_factory=dict)  # (group, scale) -> Tensor
    alpha: Tensor | None = None  # (3, S), ablation mask applied
    w: Tensor | None = None  # (R, S)
    scales: tuple = ()


def aggregate(stacks: dict, mixers: dict, alpha: Tensor, scales, groups=GROUPS) -> CorticalPyramid:
    """Mix each group stack and sum groups with nonnegative weights alpha[g, s]."""
    xi, per_group = {}, {}
    for si, s in enumerate(scales):
        total = None
        for gi, g in enumerate(GROUPS):
            if g not in groups or (g, s) not in stacks:
                continue
            m = mixers[(g, s)]
            c = stacks[(g, s)]
            if c.shape[1] != m.c_in:
                raise WiringError(f"group {g} at scale {s}: stack has {c.shape[1]} channels, mixer expects {m.c_in}")
            xg = m(c)
            per_group[(g, s)] = xg
            term = mul(getitem(alpha, (gi, si)), xg)
            total = term if total is None else add(total, term)
        xi[s] = total
    return CorticalPyramid(xi=xi, group=per_group, alpha=alpha, scales=tuple(scales))


class RoiAdapter(nn.Module):
    """Hierarchical adapter: ROI evidence -> per-scale condition maps."""

    kind = "hierarchical"

    def __init__(self, scale_space_groups, scales, channels, rng, dtype="f32", keep=GROUPS):
        super().__init__()
        self.scales = tuple(scales)
        self.channels = dict(zip(self.scales, channels))
        self.groups_of_roi = tuple(scale_space_groups)
        self.index = {g: [i for i, gg in enumerate(self.groups_of_roi) if gg == g] for g in GROUPS}
        for g in GROUPS:
            if not self.index[g]:
                raise AdapterConfigError(f"group {g} has no ROIs")
        self.gates = GateBank(len(self.groups_of_roi), self.scales, dtype)
        self.alpha_raw = nn.full((len(GROUPS), len(self.scales)), alpha_init_logit(), dtype)
        self.mixers = nn.ModuleList()
        self._mixer_keys = []
        for g in GROUPS:
            for s in self.scales:
                self.mixers.append(Mixer(rng, len(self.index[g]), self.channels[s], dtype))
                self._mixer_keys.append((g, s))
        self.dtype = dtype
        self.forward_count = 0
        self.set_keep(keep)

    def set_keep(self, keep) -> None:
        keep = tuple(g for g in GROUPS if g in set(keep))
        if not keep:
            raise AdapterConfigError("ablation keep-set must be non-empty")
        self.keep = keep
        self.alpha_mask = np.array([[1.0 if g in keep else 0.0] for g in GROUPS]) * np.ones((1, len(self.scales)))

    def mixer_map(self) -> dict:
        return dict(zip(self._mixer_keys, self.mixers))

    def alpha(self) -> Tensor:
        return mul(softplus(self.alpha_raw), Tensor(self.alpha_mask, dtype=self.dtype))

    def stacks(self, amplitudes: Tensor, space: ScaleSpace, w: Tensor) -> dict:
        """C[g, s] = w[r, s] * a_r * m~[r, s] stacked over the ROIs of group g."""
        n = amplitudes.shape[0]
        out = {}
        for si, s in enumerate(self.scales):
            maps = space.maps[s]
            for g in self.keep:
                idx = self.index[g]
                aw = mul(getitem(amplitudes, (slice(None), idx)), reshape(getitem(w, (idx, si)), (1, len(idx))))
                m = Tensor(maps[idx][None], dtype=self.dtype)
                out[(g, s)] = mul(reshape(aw, (n, len(idx), 1, 1)), m)
        return out

    def __call__(self, amplitudes: Tensor, space: ScaleSpace) -> CorticalPyramid:
        if tuple(space.groups) != self.groups_of_roi:
            raise WiringError("scale space ROI groups do not match the adapter")
        self.forward_count += 1
        w = self.gates.w()
        pyr = aggregate(self.stacks(amplitudes, space, w), self.mixer_map(), self.alpha(), self.scales, self.keep)
        pyr.w = w
        return pyr


class FlatConditioner(nn.Module):
    """Non-hierarchical conditioning: sum_r a_r m_r pooled to every scale, 1x1-lifted to d_s channels."""

    kind = "flat"

    def __init__(self, scales, channels, rng, dtype="f32"):
        super().__init__()
        self.scales = tuple(scales)
        self.channels = dict(zip(self.scales, channels))
        self.lift = nn.ModuleList([Mixer(rng, 1, c, dtype) for c in channels])
        self.dtype = dtype
        self.forward_count = 0
        self.keep = ()

    def __call__(self, amplitudes: Tensor, space: ScaleSpace) -> CorticalPyramid:
        self.forward_count += 1
        n, r = amplitudes.shape
        xi = {}
        m = Tensor(space.masks[None], dtype=self.dtype)
        flat = sum_(mul(reshape(amplitudes, (n, r, 1, 1)), m), axis=1, keepdims=True)
        for si, s in enumerate(self.scales):
            xi[s] = self.lift[si](_downsample(flat, s))
        return CorticalPyramid(xi=xi, scales=self.scales)


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def total_variation(x: Tensor) -> Tensor:
    """Mean absolute forward difference along each spatial axis, summed."""
    dy = sub(getitem(x, (Ellipsis, slice(1, None), slice(None))), getitem(x, (Ellipsis, slice(None, -1), slice(None))))
    dx = sub(getitem(x, (Ellipsis, slice(None), slice(1, None))), getitem(x, (Ellipsis, slice(None), slice(None, -1))))
    return add(mean(abs_(dy)), mean(abs_(dx)))


def gate_group_mass(w: Tensor, groups_of_roi) -> Tensor:
    """(3, S) share of total gate mass held by each group at each scale."""
    rows = []
    for g in GROUPS:
        idx = [i for i, gg in enumerate(groups_of_roi) if gg == g]
        rows.append(reshape(sum_(getitem(w, (idx, slice(None))), axis=0), (1, w.shape[1])))
    mass = concat(rows, axis=0)
    return div(mass, sum_(mass, axis=0, keepdims=True))


def kl_to_prior(w: Tensor, groups_of_roi, prior: np.ndarray) -> Tensor:
    prior = np.asarray(prior, dtype=np.float64)
    if not np.allclose(prior.sum(axis=0), 1.0, atol=1e-9) or np.any(prior <= 0):
        raise AdapterConfigError("gate prior columns must be positive and sum to 1")
    q = gate_group_mass(w, groups_of_roi)
    p = Tensor(prior, dtype=w.dtype)
    return sum_(mul(q, sub(log(q), log(p))))


def adapter_regularizers(pyramid: CorticalPyramid, gates: GateBank, groups_of_roi, weights: dict,
                         prior: np.ndarray | None = None):
    """Weighted L2(alpha) + KL(gate mass || prior) + TV(Xi_s). Returns (total, terms)."""
    la, lw, ltv = (float(weights.get(k, 0.0)) for k in ("alpha", "w", "tv"))
    prior = gates.prior if prior is None else prior
    alpha = pyramid.alpha
    terms = {
        "alpha": sum_(mul(alpha, alpha)),
        "w": kl_to_prior(pyramid.w if pyramid.w is not None else gates.w(), groups_of_roi, prior),
    }
    tv = None
    for s in pyramid.scales:
        t = total_variation(pyramid.xi[s])
        tv = t if tv is None else add(tv, t)
    terms["tv"] = tv
    total = add(add(terms["alpha"] * la, terms["w"] * lw), terms["tv"] * ltv)
    return total, terms


# ---------------------------------------------------------------------------
# inspection dump
# ---------------------------------------------------------------------------

def dump_pyramid(pyramid: CorticalPyramid, directory, groups_of_roi=None) -> list[Path]:
    """One HDT1 file per Xi_s (and per group map) plus a JSON of alpha and gate summaries."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for s in pyramid.scales:
        p = d / f"xi_s{s}.hdt"
        hdt.save(p, pyramid.xi[s].data)
        files.append(p)
    for (g, s), t in pyramid.group.items():
        p = d / f"xi_{g}_s{s}.hdt"
        hdt.save(p, t.data)
        files.append(p)
    summary = {"scales": list(pyramid.scales)}
    if pyramid.alpha is not None:
        summary["alpha"] = {g: dict(zip(map(str, pyramid.scales), pyramid.alpha.data[gi].tolist()))
                            for gi, g in enumerate(GROUPS)}
    if pyramid.w is not None and groups_of_roi is not None:
        w = pyramid.w.data
        summary["gate_mean"] = {
            g: dict(zip(map(str, pyramid.scales), w[[i for i, gg in enumerate(groups_of_roi) if gg == g]].mean(0).tolist()))
            for g in GROUPS}
    (d / "pyramid.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    files.append(d / "pyramid.json")
    return files
