"""ROI data model and a paired synthetic (stimulus, ROI evidence) generator.

Each record renders one shape (disk / square / triangle / cross) at a random
position, size, aspect and hue, then derives evidence for three ROI groups:

* early: 3x3 retinotopic tiles, amplitude = luminance edge energy in the tile;
* mid: four quadrant "contour pools" carrying position-free statistics
  (aspect, curvature proxy, size, figure/ground contrast);
* late: one ROI per category with a large central receptive field and a
  one-hot-leaning amplitude.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import hdt

GROUPS = ("early", "mid", "late")
CATEGORIES = ("disk", "square", "triangle", "cross")
BACKGROUND = 0.08


class DegenerateRoiError(ValueError):
    """An ROI mask has no voxels/pixels."""


class SynthConfigError(ValueError):
    pass


@dataclass
class RoiSpec:
    id: str
    group: str
    mask: np.ndarray
    amplitude: float

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"ROI {self.id}: unknown group {self.group!r}")
        m = np.asarray(self.mask)
        if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
            raise ValueError(f"ROI {self.id}: mask must be a binary 2D map")
        if not m.any():
            raise DegenerateRoiError(f"ROI {self.id}: empty mask")
        self.mask = m.astype(np.float64)
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"ROI {self.id}: amplitude {self.amplitude} outside [0, 1]")
        self.amplitude = float(self.amplitude)


@dataclass
class SubjectRecord:
    rois: list
    stimulus: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.stimulus, dtype=np.float64)
        if s.ndim != 3 or s.shape[0] != 3:
            raise ValueError(f"stimulus must be 3 x H x W, got {s.shape}")
        if s.min() < 0 or s.max() > 1:
            raise ValueError("stimulus values must lie in [0, 1]")
        self.stimulus = s

    def group_indices(self) -> dict[str, list[int]]:
        out = {g: [] for g in GROUPS}
        for i, r in enumerate(self.rois):
            out[r.group].append(i)
        return out

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([r.amplitude for r in self.rois])

    def masks(self) -> np.ndarray:
        return np.stack([r.mask for r in self.rois])


@dataclass
class VolumeStub:
    betas: np.ndarray  # T x H x W x D
    roi_voxel_masks: dict

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 4:
            raise ValueError("betas must be T x H x W x D")
        for rid, m in self.roi_voxel_masks.items():
            if np.shape(m) != self.betas.shape[1:]:
                raise ValueError(f"ROI {rid}: voxel mask {np.shape(m)} != volume {self.betas.shape[1:]}")


def summarize_all(vol: VolumeStub, trs) -> dict[str, float]:
    """Min-max normalized mean beta per ROI over the selected TRs."""
    trs = np.asarray(list(trs), dtype=int)
    if trs.size == 0:
        raise ValueError("trs must be non-empty")
    if trs.min() < 0 or trs.max() >= vol.betas.shape[0]:
        raise IndexError(f"TR index out of range [0, {vol.betas.shape[0]})")
    sel = vol.betas[trs].mean(axis=0)
    raw = {}
    for rid, m in vol.roi_voxel_masks.items():
        m = np.asarray(m, dtype=bool)
        if not m.any():
            raise DegenerateRoiError(f"ROI {rid}: empty voxel mask")
        raw[rid] = float(sel[m].mean())
    lo, hi = min(raw.values()), max(raw.values())
    if hi - lo <= 0:
        return {k: 0.0 for k in raw}
    return {k: (v - lo) / (hi - lo) for k, v in raw.items()}


def summarize_volume(vol: VolumeStub, roi: str, trs) -> float:
    return summarize_all(vol, trs)[roi]


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class SynthLayout:
    image_size: int = 64
    early_grid: int = 3
    n_mid: int = 4
    categories: tuple = CATEGORIES
    radius: tuple = (0.125, 0.2)  # fraction of image size
    aspect: tuple = (0.75, 1.33)
    center_margin: float = 0.25  # centers drawn from [margin, 1 - margin]
    late_radius: float = 0.4
    amp_noise: float = 0.02
    saturation: float = 0.75
    value: float = 0.95

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % 4:
            raise SynthConfigError("image_size must be a multiple of 4 and >= 8")
        if self.n_mid != 4:
            raise SynthConfigError("the mid group uses exactly four quadrant pools")
        self.categories = tuple(self.categories)
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise SynthConfigError(f"unknown categories {sorted(unknown)}")
        self.radius = tuple(self.radius)
        self.aspect = tuple(self.aspect)


def _tile_bounds(n: int, k: int) -> list[tuple[int, int]]:
    edges = np.cumsum([0] + [len(a) for a in np.array_split(np.arange(n), k)])
    return [(int(edges[i]), int(edges[i + 1])) for i in range(k)]


def layout_masks(layout: SynthLayout) -> list[tuple[str, str, np.ndarray]]:
    """(roi id, group, mask) for every ROI of the layout, early first."""
    n = layout.image_size
    out = []
    tiles = _tile_bounds(n, layout.early_grid)
    for i, (y0, y1) in enumerate(tiles):
        for j, (x0, x1) in enumerate(tiles):
            m = np.zeros((n, n))
            m[y0:y1, x0:x1] = 1
            out.append((f"e{i * layout.early_grid + j}", "early", m))
    h = n // 2
    for q in range(4):
        m = np.zeros((n, n))
        y0, x0 = (q // 2) * h, (q % 2) * h
        m[y0:y0 + h, x0:x0 + h] = 1
        out.append((f"m{q}", "mid", m))
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    c = n / 2
    central = (((yy - c) ** 2 + (xx - c) ** 2) <= (layout.late_radius * n) ** 2).astype(float)
    for k, cat in enumerate(layout.categories):
        out.append((f"l{k}", "late", central.copy()))
    return out


def shape_coverage(category: str, n: int, cx: float, cy: float, r: float, aspect: float, ss: int = 4) -> np.ndarray:
    """Anti-aliased coverage map of a shape (supersampled ``ss`` x ``ss``)."""
    g = (np.arange(n * ss) + 0.5) / ss
    yy, xx = np.meshgrid(g, g, indexing="ij")
    u = (xx - cx) / (r * aspect)
    v = (yy - cy) / (r / aspect)
    if category == "disk":
        inside = u * u + v * v <= 1.0
    elif category == "square":
        inside = np.maximum(np.abs(u), np.abs(v)) <= 0.85
    elif category == "triangle":
        inside = (v <= 0.75) & (v >= -1.0 + 1.75 * np.abs(u))
    elif category == "cross":
        inside = ((np.abs(u) <= 0.36) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.36) & (np.abs(u) <= 1.0))
    else:
        raise SynthConfigError(f"unknown category {category!r}")
    return inside.reshape(n, ss, n, ss).mean(axis=(1, 3))


def render(category, n, cx, cy, r, aspect, hue, saturation=0.75, value=0.95) -> np.ndarray:
    cov = shape_coverage(category, n, cx, cy, r, aspect)
    rgb = np.array(colorsys.hsv_to_rgb(hue, saturation, value))
    img = BACKGROUND + cov[None] * (rgb[:, None, None] - BACKGROUND)
    return np.clip(img, 0.0, 1.0)


def luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def edge_energy(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude of luminance (central differences)."""
    gy, gx = np.gradient(luminance(img))
    return np.hypot(gx, gy)


def tile_energies(img: np.ndarray, grid: int) -> np.ndarray:
    e = edge_energy(img)
    tiles = _tile_bounds(img.shape[1], grid)
    return np.array([e[y0:y1, x0:x1].sum() for (y0, y1) in tiles for (x0, x1) in tiles])


def oblique_fraction(img: np.ndarray) -> float:
    """Share of edge energy whose orientation is far (> 22.5 deg) from both image axes."""
    gy, gx = np.gradient(luminance(img))
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi / 2)
    oblique = np.abs(theta - np.pi / 4) < np.pi / 8
    tot = mag.sum()
    return float((mag * oblique).sum() / tot) if tot > 0 else 0.0


def _evidence(img, params, layout: SynthLayout, rng) -> np.ndarray:
    n = layout.image_size
    te = tile_energies(img, layout.early_grid)
    early = te / te.max() if te.max() > 0 else np.zeros_like(te)
    r_lo, r_hi = layout.radius[0] * n, layout.radius[1] * n
    a_lo, a_hi = layout.aspect
    mid = np.array([
        (np.log(params["aspect"]) - np.log(a_lo)) / (np.log(a_hi) - np.log(a_lo)),
        oblique_fraction(img),
        (params["r"] - r_lo) / (r_hi - r_lo),
        params["contrast"] / (layout.value - BACKGROUND),
    ])
    late = np.full(len(layout.categories), 0.15)
    late[params["label"]] += 0.6
    amps = np.concatenate([early, mid, late])
    noise = rng.normal(0.0, layout.amp_noise, size=amps.shape)
    noise[len(early) + 1] *= 4.0  # curvature proxy is the noisiest contour cue
    noise[len(early) + len(mid):] *= 2.0
    return np.clip(amps + noise, 0.0, 1.0)


def _record(seed: int, index: int, layout: SynthLayout, masks) -> SubjectRecord:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    n = layout.image_size
    label = int(rng.integers(len(layout.categories)))
    r = rng.uniform(*layout.radius) * n
    aspect = float(np.exp(rng.uniform(np.log(layout.aspect[0]), np.log(layout.aspect[1]))))
    lo, hi = layout.center_margin * n, (1 - layout.center_margin) * n
    cx, cy = rng.uniform(lo, hi, size=2)
    hue = float(rng.uniform())
    cat = layout.categories[label]
    img = render(cat, n, cx, cy, r, aspect, hue, layout.saturation, layout.value)
    rgb = np.array(colorsys.hsv_to_rgb(hue, layout.saturation, layout.value))
    contrast = abs(float(luminance(rgb[:, None, None])[0, 0]) - BACKGROUND)
    params = dict(label=label, category=cat, cx=float(cx), cy=float(cy), r=float(r), aspect=aspect,
                  hue=hue, contrast=contrast)
    amps = _evidence(img, params, layout, rng)
    rois = [RoiSpec(rid, g, m, float(a)) for (rid, g, m), a in zip(masks, amps)]
    return SubjectRecord(rois=rois, stimulus=img, label=label, meta=params)


def synth_dataset(seed: int, n: int, layout: SynthLayout | None = None, start: int = 0) -> list[SubjectRecord]:
    """Deterministic list of ``n`` synthetic records; record i uses seed mixed with ``start + i``."""
    if n <= 0:
        raise SynthConfigError(f"n must be >= 1, got {n}")
    layout = layout or SynthLayout()
    masks = layout_masks(layout)
    return [_record(seed, start + i, layout, masks) for i in range(n)]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, maxval 255, from a 3 x H x W image in [0, 1]."""
    q = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    try:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes())
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not a P6/255 image")
    w, h = int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def export_subject(rec: SubjectRecord, directory) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {d}: {e}") from e
    rois = []
    for i, r in enumerate(rec.rois):
        fname = f"mask_{r.id}.hdt"
        hdt.save(d / fname, r.mask.astype(np.float32))
        rois.append({"id": r.id, "group": r.group, "index": i, "mask_file": fname})
    hdt.save(d / "amplitudes.hdt", rec.amplitudes)
    write_ppm(d / "stimulus.ppm", rec.stimulus)
    counts = {g: sum(1 for r in rec.rois if r.group == g) for g in GROUPS}
    manifest = {
        "label": rec.label,
        "rois": rois,
        "group_counts": counts,
        "amplitudes_file": "amplitudes.hdt",
        "stimulus_file": "stimulus.ppm",
        "stimulus_exact_file": "stimulus.hdt",
        "meta": rec.meta,
    }
    hdt.save(d / "stimulus.hdt", rec.stimulus)
    _write_json(d / "manifest.json", manifest)


def import_subject(directory) -> SubjectRecord:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    amps = hdt.load(d / man["amplitudes_file"])
    rois = [RoiSpec(r["id"], r["group"], hdt.load(d / r["mask_file"]).astype(np.float64), float(amps[r["index"]]))
            for r in man["rois"]]
    exact = d / man.get("stimulus_exact_file", "")
    stim = hdt.load(exact) if exact.is_file() else read_ppm(d / man["stimulus_file"])
    return SubjectRecord(rois=rois, stimulus=stim, label=int(man["label"]), meta=man.get("meta", {}))


def write_dataset(records, out, seed: int | None = None, layout: SynthLayout | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, rec in enumerate(records):
        name = f"rec_{i:05d}"
        export_subject(rec, out / name)
        names.append(name)
    man = {"n": len(records), "records": names, "seed": seed,
           "layout": asdict(layout) if layout is not None else None}
    _write_json(out / "manifest.json", man)
    return out


def read_dataset(directory) -> list[SubjectRecord]:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    return [import_subject(d / name) for name in man["records"]]


def _write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
