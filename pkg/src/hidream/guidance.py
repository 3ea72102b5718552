"""Depth-matched guidance: hint stacks, residual+FiLM injection, the soft energy
budget, the cosine strength schedule, hint sparsity and gated multi-head
cross-attention from ROI latents into U-Net features.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .tensor import (
    Tensor, abs_, add, avg_pool2, concat, conv2d_1x1, conv2d_3x3, div, getitem, hdt, layer_norm_channels,
    linear, matmul, mean, mul, reshape, scalar_mul, sigmoid, silu, softmax, sqrt, sub, sum_, tanh, transpose,
)


class GuidanceConfigError(ValueError):
    pass


class WiringError(ValueError):
    pass


HINT_EPS = 1e-6
GAMMA_BOUND = 0.5


# ---------------------------------------------------------------------------
# schedule and budget (plain numbers)
# ---------------------------------------------------------------------------

@dataclass
class ScheduleParams:
    lambda_max: tuple  # per scale, same order as ``scales``
    rho: tuple
    T: int = 1000
    eta: float = 1.0

    def __post_init__(self):
        self.lambda_max = tuple(float(v) for v in self.lambda_max)
        self.rho = tuple(float(v) for v in self.rho)
        if len(self.lambda_max) != len(self.rho):
            raise GuidanceConfigError("lambda_max and rho must have one entry per scale")
        if any(not 0.0 <= v <= 1.0 for v in self.lambda_max):
            raise GuidanceConfigError(f"lambda_max must lie in [0, 1]: {self.lambda_max}")
        if any(v <= 0 for v in self.rho):
            raise GuidanceConfigError(f"rho must be positive: {self.rho}")
        if self.T < 1:
            raise GuidanceConfigError("T must be >= 1")
        if self.eta <= 0:
            raise GuidanceConfigError("eta must be positive")


def lambda_schedule(s: int, t, params: ScheduleParams):
    """lambda_max[s] * (0.5 * (1 + cos(pi * clip(t / T, 0, 1)))) ** rho[s]; ``s`` is a scale index."""
    u = np.clip(np.asarray(t, dtype=np.float64) / params.T, 0.0, 1.0)
    base = 0.5 * (1.0 + np.cos(np.pi * u))
    base = np.maximum(base, 0.0)  # cos(pi) rounds to -1 + tiny
    return params.lambda_max[s] * base ** params.rho[s]


def budget_rescale(strengths, energies, eta: float):
    """Scale all strengths by eta / B when B = sum_s strength_s * energy_s exceeds eta.

    Arrays may carry a trailing batch axis (S, N); the rescale is then per column.
    """
    if eta <= 0:
        raise GuidanceConfigError("eta must be positive")
    lam = np.asarray(strengths, dtype=np.float64)
    e = np.asarray(energies, dtype=np.float64)
    if np.any(e < 0):
        raise GuidanceConfigError("energies must be non-negative")
    b = np.sum(lam * e, axis=0)
    factor = np.where(b > eta, eta / np.where(b > 0, b, 1.0), 1.0)
    return lam * factor


def budget_factor(lams: list, energies: list, eta: float) -> Tensor:
    """Differentiable per-sample rescale factor min(1, eta / B) (shape (N,))."""
    b = None
    for lam, e in zip(lams, energies):
        term = mul(Tensor(lam, dtype=e.dtype), e)
        b = term if b is None else add(b, term)
    active = (b.data > eta).astype(b.data.dtype)
    denom = add(mul(b, Tensor(active)), Tensor(eta * (1 - active)))
    return div(Tensor(np.full(b.shape, eta), dtype=b.dtype), denom), b


# ---------------------------------------------------------------------------
# hint branch
# ---------------------------------------------------------------------------

def standardize(x: Tensor) -> Tensor:
    """Per-sample zero mean / unit std over all of (C, H, W); divides by std + 1e-6."""
    mu = mean(x, axis=(1, 2, 3), keepdims=True)
    xc = sub(x, mu)
    std = sqrt(mean(mul(xc, xc), axis=(1, 2, 3), keepdims=True))
    return div(xc, add(std, HINT_EPS))


class HintBranch(nn.Module):
    """G (3x3 conv, silu, 3x3 conv, silu, 1x1 proj) plus the A / gamma / beta 1x1 heads."""

    def __init__(self, rng, d_in: int, c_block: int, hidden: int | None = None, dtype="f32"):
        super().__init__()
        hidden = hidden or max(8, c_block // 2)
        self.g1 = nn.conv_weight(rng, hidden, d_in, 3, dtype)
        self.g1b = nn.zeros((hidden,), dtype)
        self.g2 = nn.conv_weight(rng, hidden, hidden, 3, dtype)
        self.g2b = nn.zeros((hidden,), dtype)
        self.gp = nn.conv_weight(rng, c_block, hidden, 1, dtype)
        self.gpb = nn.zeros((c_block,), dtype)
        # zero-initialised heads: guidance starts as a no-op
        self.a_w = nn.conv_weight(rng, c_block, c_block, 1, dtype, zero=True)
        self.a_b = nn.zeros((c_block,), dtype)
        self.gamma_w = nn.conv_weight(rng, c_block, c_block, 1, dtype, zero=True)
        self.gamma_b = nn.zeros((c_block,), dtype)
        self.beta_w = nn.conv_weight(rng, c_block, c_block, 1, dtype, zero=True)
        self.beta_b = nn.zeros((c_block,), dtype)
        self.d_in = d_in
        self.c_block = c_block

    def stack(self, xi_map: Tensor) -> Tensor:
        if xi_map.shape[1] != self.d_in:
            raise WiringError(f"hint branch expects {self.d_in} channels, got {xi_map.shape[1]}")
        h = silu(conv2d_3x3(xi_map, self.g1, self.g1b))
        h = silu(conv2d_3x3(h, self.g2, self.g2b))
        return conv2d_1x1(h, self.gp, self.gpb)

    def heads(self, hint: Tensor):
        a = conv2d_1x1(hint, self.a_w, self.a_b)
        gamma = scalar_mul(tanh(conv2d_1x1(hint, self.gamma_w, self.gamma_b)), GAMMA_BOUND)
        beta = conv2d_1x1(hint, self.beta_w, self.beta_b)
        return a, gamma, beta


def make_hint(xi_map: Tensor, branch: HintBranch) -> Tensor:
    return standardize(branch.stack(xi_map))


def _lam_tensor(lam, n: int, dtype: str) -> Tensor:
    arr = np.broadcast_to(np.asarray(getattr(lam, "data", lam), dtype=np.float64), (n,))
    return Tensor(arr.reshape(n, 1, 1, 1), dtype=dtype)


def film_fuse(h: Tensor, lam, a: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """h + lam * (a + gamma * h + beta); lam is a scalar, an (N,) array, or an (N,) Tensor."""
    for name, t in (("A", a), ("gamma", gamma), ("beta", beta)):
        if t.shape[1:] != h.shape[1:] or t.shape[0] not in (1, h.shape[0]):
            raise WiringError(f"{name} head output {t.shape} does not match activation {h.shape}")
    n = h.shape[0]
    if isinstance(lam, Tensor):
        if lam.data.size != n:
            raise WiringError(f"strength has {lam.data.size} entries for batch {n}")
        if not np.any(lam.data):
            return h
        lam_t = reshape(lam, (n, 1, 1, 1))
    else:
        if not np.any(np.asarray(lam)):
            return h
        lam_t = _lam_tensor(lam, n, h.dtype)
    inner = add(add(a, mul(gamma, h)), beta)
    return add(h, mul(lam_t, inner))


def film_inject(h: Tensor, hint: Tensor, lam, branch: HintBranch) -> Tensor:
    if not np.any(np.asarray(getattr(lam, "data", lam))):
        return h
    a, gamma, beta = branch.heads(hint)
    return film_fuse(h, lam, a, gamma, beta)


def sparsify_hint(xi_map: Tensor, mode: str = "off") -> Tensor:
    """mean |Xi_s| when ``mode == 'l1'``, else 0."""
    if mode == "off":
        return Tensor(np.zeros(()), dtype=xi_map.dtype)
    if mode != "l1":
        raise GuidanceConfigError(f"unknown sparsity mode {mode!r}")
    return mean(abs_(xi_map))


def parse_sparsity(spec: str) -> tuple[str, float]:
    """'off' or 'l1:<weight>'."""
    if spec == "off":
        return "off", 0.0
    if spec.startswith("l1:"):
        return "l1", float(spec[3:])
    raise GuidanceConfigError(f"bad sparsity spec {spec!r}")


# ---------------------------------------------------------------------------
# gated multi-head cross-attention
# ---------------------------------------------------------------------------

def pool_tokens(x: Tensor, side: int = 4) -> Tensor:
    """(N, d, s, s) -> (N, side*side, d) by repeated 2x2 average pooling."""
    while x.shape[-1] > side:
        x = avg_pool2(x)
    n, d, h, w = x.shape
    return transpose(reshape(x, (n, d, h * w)), (0, 2, 1))


class MhlaBlock(nn.Module):
    """out = h + g * MHA(Q = tokens(LN(h)), K = V = ROI latents) for one wired depth."""

    def __init__(self, rng, c_block: int, d_latent: int, n_tokens: int, heads: int = 2, width: int = 32,
                 dtype="f32", gate_init: float = 0.5):
        super().__init__()
        if width % heads:
            raise GuidanceConfigError(f"{heads} heads do not divide attention width {width}")
        self.heads = heads
        self.width = width
        self.wq = nn.normal(rng, (width, c_block), np.sqrt(1.0 / c_block), dtype)
        self.wk = nn.normal(rng, (width, d_latent), np.sqrt(1.0 / d_latent), dtype)
        self.wv = nn.normal(rng, (width, d_latent), np.sqrt(1.0 / d_latent), dtype)
        self.tok_emb = nn.normal(rng, (n_tokens, width), 0.1, dtype)
        self.wo = nn.zeros((c_block, width), dtype)
        self.bo = nn.zeros((c_block,), dtype)
        self.gate_logit = nn.full((), float(np.log(gate_init / (1 - gate_init))), dtype)
        self.fixed_gate: float | None = None
        self.c_block = c_block
        self.d_latent = d_latent

    def gate(self) -> Tensor:
        if self.fixed_gate is not None:
            return Tensor(np.asarray(self.fixed_gate), dtype=self.wq.dtype)
        return sigmoid(self.gate_logit)

    def attention(self, h: Tensor, latents: Tensor, token_ids=None, return_weights: bool = False):
        n, c, hh, ww = h.shape
        if c != self.c_block:
            raise WiringError(f"MHLA expects {self.c_block} channels, got {c}")
        if latents.shape[-1] != self.d_latent:
            raise WiringError(f"latent dim {latents.shape[-1]} != {self.d_latent}")
        nh, dh = self.heads, self.width // self.heads
        q_tok = transpose(reshape(layer_norm_channels(h), (n, c, hh * ww)), (0, 2, 1))
        q = linear(q_tok, self.wq)
        emb = self.tok_emb if token_ids is None else getitem(self.tok_emb, token_ids)
        k = add(linear(latents, self.wk), emb)
        v = add(linear(latents, self.wv), emb)
        L = latents.shape[1]
        q = transpose(reshape(q, (n, hh * ww, nh, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (n, L, nh, dh)), (0, 2, 3, 1))
        v = transpose(reshape(v, (n, L, nh, dh)), (0, 2, 1, 3))
        att = softmax(scalar_mul(matmul(q, k), 1.0 / np.sqrt(dh)), axis=-1)
        o = transpose(matmul(att, v), (0, 2, 1, 3))
        o = linear(reshape(o, (n, hh * ww, self.width)), self.wo, self.bo)
        o = reshape(transpose(o, (0, 2, 1)), (n, c, hh, ww))
        return (o, att) if return_weights else o


def mhla_attend(h: Tensor, latents: Tensor, block: MhlaBlock, token_ids=None) -> Tensor:
    g = block.gate()
    if not np.any(g.data):
        return h
    return add(h, mul(g, block.attention(h, latents, token_ids)))


def roi_latents(group_maps: dict, scale: int, groups, side: int = 4):
    """Token sequence (N, 16 * |groups|, d_s) and token-embedding rows for the kept groups."""
    from .synth import GROUPS
    toks, ids = [], []
    for gi, g in enumerate(GROUPS):
        if g not in groups or (g, scale) not in group_maps:
            continue
        t = pool_tokens(group_maps[(g, scale)], side)
        toks.append(t)
        ids.extend(range(gi * side * side, gi * side * side + t.shape[1]))
    if not toks:
        return None, None
    return concat(toks, axis=1), ids


# ---------------------------------------------------------------------------
# modulation logging
# ---------------------------------------------------------------------------

@dataclass
class TraceEntry:
    step: int
    t: int
    scale: int
    lam: np.ndarray  # (N,) effective strength
    gamma: np.ndarray  # (N, C, s, s)
    group_norms: dict  # group -> (N,) L1 norm of lam * alpha_g * Xi_g


def dump_modulation_maps(trace: list, directory) -> Path:
    """Write one HDT1 gamma map per (scale, step) and one CSV row per (step, scale, record)."""
    from .synth import GROUPS
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {d}: {e}") from e
    path = d / "contributions.csv"
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "t", "scale", "record", "lambda"] + [f"norm_{g}" for g in GROUPS] + ["gamma_file"])
            for e in trace:
                fname = f"gamma_s{e.scale}_step{e.step:03d}.hdt"
                hdt.save(d / fname, e.gamma)
                for i in range(len(e.lam)):
                    norms = [repr(float(e.group_norms[g][i])) if g in e.group_norms else "0.0" for g in GROUPS]
                    wr.writerow([e.step, e.t, e.scale, i, repr(float(e.lam[i]))] + norms + [fname])
    except OSError as e:
        raise OSError(f"cannot write modulation dump under {d}: {e}") from e
    return path
