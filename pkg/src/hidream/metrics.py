"""Reconstruction metrics: PixCorr, windowed SSIM, two-way identification with a
fixed hand-built embedder, per-trial reports and ablation tables.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import diff


class ProtocolError(ValueError):
    pass


class MetricConfigError(ValueError):
    pass


class AblationMismatch(ValueError):
    pass


# columns that need pretrained feature networks; reported, never approximated
OUT_OF_SCOPE = ("AlexNet(2)", "AlexNet(5)", "Inception", "CLIP", "EffNet-B", "SwAV")
OUT_OF_SCOPE_MARK = "n/a:out-of-scope"

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img


def pixcorr(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation over all pixels. Returns (value, defined); undefined reads as 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricConfigError(f"pixcorr: extents differ {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        return 0.0, False
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0)), True


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles (and channels, if any)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricConfigError(f"ssim: extents differ {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h < window or w < window:
        raise MetricConfigError(f"ssim: extent {(h, w)} smaller than window {window}")
    if h % window or w % window:
        raise MetricConfigError(f"ssim: window {window} does not divide extent {(h, w)}")
    lead = a.shape[:-2]
    shp = lead + (h // window, window, w // window, window)
    ta, tb = a.reshape(shp), b.reshape(shp)
    ax = (-3, -1)
    mu_a, mu_b = ta.mean(axis=ax), tb.mean(axis=ax)
    ca = ta - np.expand_dims(mu_a, ax)
    cb = tb - np.expand_dims(mu_b, ax)
    va, vb = (ca * ca).mean(axis=ax), (cb * cb).mean(axis=ax)
    cov = (ca * cb).mean(axis=ax)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


class ToyEmbedder:
    """96-d descriptor: centred 8x8 pooled luminance plus 8-bin orientation
    histograms for each image quadrant; each half is normalized, then the whole.
    """

    id = "toy-lum8x8-orient4x8-v1"

    def __init__(self, grid: int = 8, bins: int = 8):
        self.grid = grid
        self.bins = bins
        self.dim = grid * grid + 4 * bins

    def _pool(self, g: np.ndarray) -> np.ndarray:
        rows = np.array_split(np.arange(g.shape[0]), self.grid)
        cols = np.array_split(np.arange(g.shape[1]), self.grid)
        return np.array([[g[np.ix_(r, c)].mean() for c in cols] for r in rows]).ravel()

    def embed_one(self, img: np.ndarray) -> tuple[np.ndarray, bool]:
        g = _gray(img)
        if np.ptp(g) == 0:
            return np.zeros(self.dim), False
        lum = self._pool(g)
        lum = lum - lum.mean()
        gy, gx = np.gradient(g)
        mag = np.hypot(gx, gy)
        theta = np.mod(np.arctan2(gy, gx), np.pi)
        idx = np.minimum((theta / np.pi * self.bins).astype(int), self.bins - 1)
        h, w = g.shape
        hists = []
        for rs in (slice(0, h // 2), slice(h // 2, h)):
            for cs in (slice(0, w // 2), slice(w // 2, w)):
                hists.append(np.bincount(idx[rs, cs].ravel(), weights=mag[rs, cs].ravel(), minlength=self.bins))
        ori = np.concatenate(hists)
        parts = []
        for p in (lum, ori):
            n = np.linalg.norm(p)
            parts.append(p / n if n > 0 else p)
        v = np.concatenate(parts)
        n = np.linalg.norm(v)
        if n == 0:
            return v, False
        return v / n, True

    def __call__(self, images) -> np.ndarray:
        return np.stack([self.embed_one(im)[0] for im in images])


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


@dataclass
class TwoWayResult:
    accuracy: float
    trials: list  # (item, distractor, score in {0, 0.5, 1})


def two_way_identification(recons, truths, embedder=None, seed: int = 0, k: int = 10,
                           exhaustive: bool = False, embeddings=None) -> TwoWayResult:
    """Forced choice: reconstruction i is scored against its truth and one distractor per trial.

    Distractors are drawn without replacement when k < number of alternatives,
    with replacement otherwise; ``exhaustive`` compares against every alternative.
    Ties score 0.5.
    """
    if embeddings is not None:
        recons, truths = embeddings
    n = len(truths)
    if n < 2 or len(recons) != n:
        raise ProtocolError(f"two-way identification needs >= 2 paired items, got {len(recons)}/{n}")
    if embeddings is None:
        embedder = embedder or ToyEmbedder()
        er, et = embedder(recons), embedder(truths)
    else:
        er, et = embeddings
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    trials = []
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        if exhaustive:
            picks = others
        elif k <= len(others):
            picks = rng.choice(others, size=k, replace=False)
        else:
            picks = rng.choice(others, size=k, replace=True)
        s_true = _cos(er[i], et[i])
        for j in picks:
            s_alt = _cos(er[i], et[j])
            score = 1.0 if s_true > s_alt else (0.5 if s_true == s_alt else 0.0)
            trials.append((i, int(j), score))
    acc = float(np.mean([t[2] for t in trials]))
    return TwoWayResult(acc, trials)


def binomial_ci(p: float, n: int, z: float = 1.96) -> tuple[float, float]:
    half = z * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (record, metric, value, comparison)
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {}
        for metric in dict.fromkeys(r[1] for r in self.rows):
            vals = np.array([r[2] for r in self.rows if r[1] == metric], dtype=np.float64)
            out[metric] = (float(vals.mean()), float(vals.std()), int(len(vals)))
        return out

    def summary_csv(self, variant: str = "run") -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["variant", "metric", "n", "mean", "std"])
        for metric, (m, s, n) in self.summary().items():
            wr.writerow([variant, metric, n, repr(m), repr(s)])
        for name in OUT_OF_SCOPE:
            wr.writerow([variant, name, 0, OUT_OF_SCOPE_MARK, OUT_OF_SCOPE_MARK])
        return buf.getvalue()

    def trials_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["record", "metric", "value", "comparison"])
        for rec, metric, val, comp in self.rows:
            wr.writerow([rec, metric, repr(float(val)), "" if comp is None else comp])
        return buf.getvalue()

    def write(self, path, variant: str = "run") -> None:
        from pathlib import Path
        path = Path(path)
        path.write_text(self.summary_csv(variant))
        path.with_name(path.stem + "_trials.csv").write_text(self.trials_csv())


def evaluate(recons, truths, record_ids=None, seed: int = 0, k: int = 10, embedder=None,
             config: dict | None = None) -> MetricReport:
    embedder = embedder or ToyEmbedder()
    ids = list(record_ids) if record_ids is not None else list(range(len(truths)))
    rows = []
    for rid, r, t in zip(ids, recons, truths):
        pc, ok = pixcorr(r, t)
        if not ok:
            warnings.warn(f"record {rid}: PixCorr undefined for a constant image; scored 0", stacklevel=2)
            rows.append((rid, "pixcorr_undefined", 1.0, None))
        rows.append((rid, "pixcorr", pc, None))
        rows.append((rid, "ssim", ssim(r, t), None))
    tw = two_way_identification(recons, truths, embedder, seed=seed, k=k)
    for i, j, score in tw.trials:
        rows.append((ids[i], "two_way", score, ids[j]))
    cfg = dict(config or {})
    cfg.update({"seed": seed, "k": k, "embedder": embedder.id})
    return MetricReport(rows, cfg)


# ---------------------------------------------------------------------------
# ablation tables
# ---------------------------------------------------------------------------

ABLATION_KEYS = ("model.adapter", "model.keep", "model.mhla")


def check_ablation_configs(configs: dict) -> None:
    """Refuse variants whose configs differ outside the ablation axes."""
    names = list(configs)
    ref = configs[names[0]]
    for name in names[1:]:
        d = [line for line in diff(ref, configs[name]) if not line.startswith(ABLATION_KEYS)]
        if d:
            raise AblationMismatch(f"variant {name!r} differs from {names[0]!r} beyond the ablation axis:\n  "
                                   + "\n  ".join(d))


@dataclass
class AblationTable:
    variants: list
    metrics: list
    means: dict  # (variant, metric) -> mean
    reference: str

    def deltas(self) -> dict:
        return {(v, m): self.means[(v, m)] - self.means[(self.reference, m)] for v in self.variants for m in self.metrics}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["variant"] + self.metrics + [f"delta_{m}" for m in self.metrics] + list(OUT_OF_SCOPE))
        dl = self.deltas()
        for v in self.variants:
            wr.writerow([v] + [repr(self.means[(v, m)]) for m in self.metrics]
                        + [repr(dl[(v, m)]) for m in self.metrics] + [OUT_OF_SCOPE_MARK] * len(OUT_OF_SCOPE))
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["variant"] + self.metrics + [f"d_{m}" for m in self.metrics]
        dl = self.deltas()
        body = [[v] + [f"{self.means[(v, m)]:.4f}" for m in self.metrics]
                + [f"{dl[(v, m)]:+.4f}" for m in self.metrics] for v in self.variants]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [head] + body]
        lines.append(f"(deltas relative to {self.reference}; {', '.join(OUT_OF_SCOPE)}: {OUT_OF_SCOPE_MARK})")
        return "\n".join(lines)


def ablation_report(reports: dict, configs: dict | None = None, reference: str | None = None) -> AblationTable:
    """``reports`` maps variant -> MetricReport; configs (variant -> RunConfig) are checked first."""
    if configs:
        check_ablation_configs(configs)
    variants = list(reports)
    reference = reference or variants[0]
    metrics = [m for m in ("pixcorr", "ssim", "two_way") if all(m in r.summary() for r in reports.values())]
    means = {(v, m): reports[v].summary()[m][0] for v in variants for m in metrics}
    return AblationTable(variants, metrics, means, reference)


def read_summary_csv(text: str) -> dict:
    """metric -> mean from a summary CSV (out-of-scope rows skipped)."""
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row["mean"] != OUT_OF_SCOPE_MARK:
            out[row["metric"]] = float(row["mean"])
    return out

