import numpy as np
import pytest

from hidream.synth import (
    CATEGORIES, GROUPS, DegenerateRoiError, RoiSpec, SubjectRecord, SynthConfigError, SynthLayout, VolumeStub,
    export_subject, import_subject, read_dataset, read_ppm, render, summarize_all, summarize_volume,
    synth_dataset, tile_energies, write_dataset, write_ppm,
)


@pytest.fixture(scope="module")
def records512():
    return synth_dataset(11, 512)


def linear_probe_accuracy(x, y, n_train):
    """One-vs-rest least-squares probe with a bias column; accuracy on the held-out tail."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    classes = np.unique(y)
    onehot = (y[:, None] == classes[None]).astype(float)
    coef, *_ = np.linalg.lstsq(xb[:n_train], onehot[:n_train], rcond=None)
    pred = classes[np.argmax(xb[n_train:] @ coef, axis=1)]
    return float(np.mean(pred == y[n_train:]))


def position_class(rec, n=64, grid=3):
    cx, cy = rec.meta["cx"], rec.meta["cy"]
    return int(min(cy * grid // n, grid - 1) * grid + min(cx * grid // n, grid - 1))


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

def test_roi_spec_validation():
    m = np.zeros((4, 4))
    with pytest.raises(DegenerateRoiError):
        RoiSpec("x", "early", m, 0.5)
    m[0, 0] = 1
    with pytest.raises(ValueError):
        RoiSpec("x", "early", m, 1.5)
    with pytest.raises(ValueError):
        RoiSpec("x", "upper", m, 0.5)
    with pytest.raises(ValueError):
        RoiSpec("x", "early", m * 0.5, 0.5)


def test_stimulus_range_checked():
    with pytest.raises(ValueError):
        SubjectRecord(rois=[], stimulus=np.full((3, 4, 4), 1.2), label=0)


def test_summarize_volume_examples():
    betas = np.zeros((2, 2, 2, 3))
    betas[:, 0, 0, 0] = 2.0
    betas[:, 1, 0, 0] = 4.0
    betas[:, 0, 1, 0] = 3.0
    masks = {k: np.zeros((2, 2, 3), bool) for k in "abc"}
    masks["a"][0, 0, 0] = masks["b"][1, 0, 0] = masks["c"][0, 1, 0] = True
    vol = VolumeStub(betas, masks)
    assert summarize_all(vol, [0, 1]) == {"a": 0.0, "b": 1.0, "c": 0.5}
    const = VolumeStub(np.full((2, 2, 2, 3), 7.0), masks)
    assert summarize_all(const, [0]) == {"a": 0.0, "b": 0.0, "c": 0.0}


def test_summarize_volume_matches_scalar_oracle(rng):
    betas = rng.standard_normal((6, 3, 4, 2))
    masks = {f"r{i}": rng.random((3, 4, 2)) < 0.4 for i in range(5)}
    for m in masks.values():
        m[0, 0, 0] = True
    vol = VolumeStub(betas, masks)
    trs = [1, 3, 4]
    raw = {}
    for k, m in masks.items():
        total, count = 0.0, 0
        for t in trs:
            for idx in zip(*np.nonzero(m)):
                total += betas[(t,) + idx]
                count += 1
        raw[k] = total / count
    lo, hi = min(raw.values()), max(raw.values())
    for k in masks:
        assert summarize_volume(vol, k, trs) == pytest.approx((raw[k] - lo) / (hi - lo), abs=1e-12)


def test_summarize_volume_errors():
    masks = {"a": np.zeros((1, 1, 1), bool)}
    vol = VolumeStub(np.ones((2, 1, 1, 1)), masks)
    with pytest.raises(DegenerateRoiError):
        summarize_all(vol, [0])
    with pytest.raises(IndexError):
        summarize_all(VolumeStub(np.ones((2, 1, 1, 1)), {"a": np.ones((1, 1, 1), bool)}), [5])
    with pytest.raises(ValueError):
        summarize_all(vol, [])


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_generator_is_deterministic():
    a, b = synth_dataset(3, 2), synth_dataset(3, 2)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.stimulus, rb.stimulus)
        np.testing.assert_array_equal(ra.amplitudes, rb.amplitudes)
        assert ra.meta == rb.meta


def test_records_are_independent_of_batch_position():
    tail = synth_dataset(3, 1, start=4)[0]
    np.testing.assert_array_equal(tail.stimulus, synth_dataset(3, 5)[4].stimulus)


def test_n_must_be_positive():
    with pytest.raises(SynthConfigError):
        synth_dataset(0, 0)


def test_default_layout_and_partition(records512):
    rec = records512[0]
    counts = {g: len(ix) for g, ix in rec.group_indices().items()}
    assert counts == {"early": 9, "mid": 4, "late": 4}
    assert sum(counts.values()) == len(rec.rois)
    assert rec.stimulus.shape == (3, 64, 64)
    assert all(r.group in GROUPS for r in rec.rois)


def test_centered_disk_peaks_in_center_tile():
    img = render("disk", 64, 32.0, 32.0, 10.0, 1.0, 0.3)
    te = tile_energies(img, 3)
    assert int(np.argmax(te)) == 4
    rec_like = [r for r in synth_dataset(0, 200) if r.meta["category"] == "disk"
                and abs(r.meta["cx"] - 32) < 3 and abs(r.meta["cy"] - 32) < 3]
    for r in rec_like:
        assert int(np.argmax(r.amplitudes[:9])) == 4


def test_late_amplitude_leans_to_category(records512):
    for rec in records512[:64]:
        late = rec.amplitudes[[i for i, r in enumerate(rec.rois) if r.group == "late"]]
        assert int(np.argmax(late)) == rec.label


def test_late_group_identifies_category(records512):
    x = np.stack([r.amplitudes[13:] for r in records512])
    y = np.array([r.label for r in records512])
    assert linear_probe_accuracy(x, y, 384) > 0.95


def test_position_needs_early_group(records512):
    amps = np.stack([r.amplitudes for r in records512])
    y = np.array([position_class(r) for r in records512])
    chance = max(np.mean(y[384:] == c) for c in np.unique(y))
    with_early = linear_probe_accuracy(amps, y, 384)
    without = linear_probe_accuracy(np.hstack([np.zeros((512, 9)), amps[:, 9:]]), y, 384)
    assert with_early > chance + 0.2
    assert abs(without - chance) <= 0.05


def test_layout_rejects_bad_sizes():
    with pytest.raises(SynthConfigError):
        SynthLayout(image_size=30)
    with pytest.raises(SynthConfigError):
        SynthLayout(categories=("blob",))


def test_amplitudes_in_unit_interval(records512):
    a = np.stack([r.amplitudes for r in records512])
    assert a.min() >= 0 and a.max() <= 1


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def test_export_import_roundtrip(tmp_path):
    rec = synth_dataset(5, 1, SynthLayout(image_size=32))[0]
    export_subject(rec, tmp_path / "r")
    back = import_subject(tmp_path / "r")
    assert [(r.id, r.group) for r in back.rois] == [(r.id, r.group) for r in rec.rois]
    np.testing.assert_array_equal(back.amplitudes, rec.amplitudes)
    np.testing.assert_array_equal(back.masks(), rec.masks())
    np.testing.assert_array_equal(back.stimulus, rec.stimulus)
    assert back.label == rec.label


def test_manifest_group_counts(tmp_path):
    import json
    rec = synth_dataset(5, 1, SynthLayout(image_size=32))[0]
    export_subject(rec, tmp_path / "r")
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["group_counts"] == {g: len(ix) for g, ix in rec.group_indices().items()}


def test_ppm_quantization(tmp_path, rng):
    img = rng.random((3, 5, 7))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_dataset_roundtrip(tmp_path):
    recs = synth_dataset(2, 3, SynthLayout(image_size=16))
    write_dataset(recs, tmp_path / "d", seed=2)
    back = read_dataset(tmp_path / "d")
    assert len(back) == 3
    np.testing.assert_array_equal(back[2].stimulus, recs[2].stimulus)


def test_export_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rec = synth_dataset(5, 1, SynthLayout(image_size=16))[0]
    with pytest.raises(OSError, match="file"):
        export_subject(rec, blocker / "sub")


def test_categories_cover_default_set():
    assert CATEGORIES == ("disk", "square", "triangle", "cross")
