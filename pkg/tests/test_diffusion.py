import json

import numpy as np
import pytest

from hidream.config import preset
from hidream.diffusion import (
    IntegrityError, InvariantViolation, NoiseSchedule, build_model, ddim_sample, ddim_timesteps, decode, dm_loss,
    encode, forward_diffuse, initial_noise, load_checkpoint, params_hash, save_checkpoint, train_stage,
)
from hidream.synth import SynthLayout, synth_dataset
from hidream.tensor import ContractError, Tensor, grad_check, no_grad


@pytest.fixture(scope="module")
def micro():
    cfg = preset("micro")
    recs = synth_dataset(0, 4, SynthLayout(image_size=8))
    return cfg, recs


def _randomize(params, seed=3, scale=0.3):
    r = np.random.default_rng(seed)
    for _, p in params:
        p.data[...] = r.standard_normal(p.shape) * scale


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

def test_schedule_invariants():
    s = NoiseSchedule(1000)
    assert s.betas[0] == 1e-4 and s.betas[-1] == 2e-2
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0) and np.all(s.alpha_bar > 0)
    np.testing.assert_allclose(s.alpha_bar[1:], np.cumprod(1 - np.linspace(1e-4, 2e-2, 1000)), rtol=1e-14)
    # independently recomputed
    assert s.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar[1000] == pytest.approx(4.0358e-05, rel=1e-3)


def test_forward_diffuse_examples(rng):
    s = NoiseSchedule(1000)
    x0 = rng.standard_normal((2, 4, 3, 3))
    eps = rng.standard_normal((2, 4, 3, 3))
    t = np.array([1, 700])
    out = forward_diffuse(x0, t, eps, s)
    for i, ti in enumerate(t):
        ab = np.prod(1 - np.linspace(1e-4, 2e-2, 1000)[:ti])
        np.testing.assert_allclose(out[i], np.sqrt(ab) * x0[i] + np.sqrt(1 - ab) * eps[i], rtol=1e-12)


@pytest.mark.parametrize("t", [0, 1001, -3])
def test_forward_diffuse_rejects_out_of_range(t):
    with pytest.raises(ContractError):
        forward_diffuse(np.zeros((1, 4, 2, 2)), np.array([t]), np.zeros((1, 4, 2, 2)), NoiseSchedule(1000))


def test_lift_roundtrip(rng):
    img = rng.random((3, 3, 5, 5))
    np.testing.assert_allclose(decode(encode(img)), img, atol=1e-12)
    assert encode(np.zeros((1, 3, 2, 2))).min() == -1.0


def test_ddim_grid():
    assert ddim_timesteps(1000, 50)[:3] == [1000, 980, 960] and ddim_timesteps(1000, 50)[-1] == 20
    with pytest.raises(ContractError):
        ddim_timesteps(1000, 0)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_oracle_noise_gives_zero_loss(micro, rng):
    cfg, recs = micro
    m = build_model(cfg, recs)
    eps = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    terms = dm_loss(m, np.zeros_like(eps), np.zeros((2, len(recs[0].rois)), np.float32), np.array([3, 9]), eps,
                    None, eps_fn=lambda x, t: Tensor(eps))
    assert terms.l_dm == 0.0


def test_zero_prediction_gives_unit_loss():
    cfg = preset("desk")
    recs = synth_dataset(0, 4, SynthLayout(image_size=32))
    m = build_model(cfg, recs)
    eps = np.random.default_rng(0).standard_normal((4, 4, 32, 32)).astype(np.float32)  # 16384 elements
    x0 = encode(np.stack([r.stimulus for r in recs])).astype(np.float32)
    zero = lambda x_t, t: Tensor(np.zeros(x_t.shape, np.float32))
    terms = dm_loss(m, x0, None, np.array([10, 200, 500, 999]), eps, None, eps_fn=zero)
    assert abs(terms.l_dm - 1.0) < 0.05


def test_untrained_backbone_predicts_the_affine_guess():
    # zero output conv: eps is the best affine guess from x_t, which beats predicting 0
    cfg = preset("desk")
    recs = synth_dataset(0, 16, SynthLayout(image_size=32))
    m = build_model(cfg, recs)
    x0 = encode(np.stack([r.stimulus for r in recs])).astype(np.float32)
    eps = np.random.default_rng(1).standard_normal(x0.shape).astype(np.float32)
    for t in (50, 500, 950):
        x_t = forward_diffuse(x0, t, eps, m.sched)
        ab = m.sched.abar(t)
        mu, sd = cfg.model.latent_mean, cfg.model.latent_std
        want = np.sqrt(1 - ab) * (x_t - np.sqrt(ab) * mu) / (ab * sd ** 2 + 1 - ab)
        with no_grad():
            got = m.eps(Tensor(x_t), np.full(16, t)).data
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
        assert np.mean((got - eps) ** 2) < 1.0


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_single_step_inversion_recovers_x0(micro, rng):
    cfg, recs = micro
    m = build_model(cfg, recs, dtype="f64")
    x0 = rng.uniform(-1, 1, (2, 4, 8, 8))
    eps = rng.standard_normal(x0.shape)
    T = m.sched.T
    x_T = forward_diffuse(x0, np.array([T, T]), eps, m.sched)
    out = ddim_sample(m, None, steps=1, record_ids=[0, 1], eps_fn=lambda x, t: eps, x_T=x_T, return_latent=True)
    np.testing.assert_allclose(out, x0, atol=1e-10)


def test_noise_is_per_record():
    a = initial_noise(3, (4, 2, 2), seed=5, record_ids=[0, 1, 2])
    b = initial_noise(1, (4, 2, 2), seed=5, record_ids=[2])
    np.testing.assert_array_equal(a[2], b[0])


def _trained_micro(cfg, recs):
    m = build_model(cfg, recs)
    train_stage(m, recs, "pretrain", 2, {"unet": 1e-2, "adapter": 1e-2}, cfg)
    train_stage(m, recs, "a", 2, {"unet": 0.0, "adapter": 1e-2}, cfg)
    # heads start at zero; give them weight so guidance actually moves samples
    _randomize([(n, t) for n, t in m.guidance_parameters() if "_w" in n or n.endswith("wo")], scale=0.2)
    return m


def test_sampling_is_deterministic_and_adapter_runs_once(micro):
    cfg, recs = micro
    m = _trained_micro(cfg, recs)
    amps = np.stack([r.amplitudes for r in recs])
    before = m.adapter.forward_count
    a = ddim_sample(m, amps, steps=4, record_ids=range(4))
    assert m.adapter.forward_count == before + 1
    b = ddim_sample(m, amps, steps=4, record_ids=range(4))
    assert a.tobytes() == b.tobytes()


def test_zero_guidance_ignores_evidence(micro):
    cfg, recs = micro
    m = _trained_micro(cfg, recs)
    amps = np.stack([r.amplitudes for r in recs])
    zero = (0.0,) * len(m.scales)
    a = ddim_sample(m, amps, steps=3, strengths=zero, mhla_gate=0.0, record_ids=range(4))
    b = ddim_sample(m, amps[::-1].copy(), steps=3, strengths=zero, mhla_gate=0.0, record_ids=range(4))
    bare = ddim_sample(m, None, steps=3, record_ids=range(4))
    assert a.tobytes() == b.tobytes() == bare.tobytes()
    guided = ddim_sample(m, amps, steps=3, record_ids=range(4))
    assert guided.tobytes() != bare.tobytes()


def test_strength_count_checked(micro):
    cfg, recs = micro
    m = build_model(cfg, recs)
    with pytest.raises(ContractError):
        ddim_sample(m, np.stack([r.amplitudes for r in recs]), steps=2, strengths=(0.1,))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_and_corruption(micro, tmp_path):
    cfg, recs = micro
    m = _trained_micro(cfg, recs)
    save_checkpoint(tmp_path / "ck", m, {"stage": "a"})
    m2 = build_model(cfg, recs)
    meta = load_checkpoint(tmp_path / "ck", m2)
    assert meta["stage"] == "a" and meta["config_hash"] == cfg.hash()
    named = m.backbone_parameters() + m.guidance_parameters()
    assert params_hash(named) == params_hash(m2.backbone_parameters() + m2.guidance_parameters())
    victim = sorted((tmp_path / "ck" / "params").iterdir())[3]
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match=victim.name):
        load_checkpoint(tmp_path / "ck", m2)


def test_missing_meta(tmp_path, micro):
    cfg, recs = micro
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path, build_model(cfg, recs))


# ---------------------------------------------------------------------------
# freeze audits
# ---------------------------------------------------------------------------

def test_stage_a_freezes_backbone(micro):
    cfg, recs = micro
    m = build_model(cfg, recs)
    train_stage(m, recs, "pretrain", 2, {"unet": 1e-2, "adapter": 0}, cfg)
    bb = params_hash(m.backbone_parameters())
    g = params_hash(m.guidance_parameters())
    train_stage(m, recs, "a", 3, {"unet": 1e-2, "adapter": 1e-2}, cfg)
    assert params_hash(m.backbone_parameters()) == bb
    assert params_hash(m.guidance_parameters()) != g


def test_stage_b_moves_only_wired_blocks(micro):
    cfg, recs = micro
    m = _trained_micro(cfg, recs)
    wired = {n for n, _ in m.wired_parameters()}
    unwired = [(n, t) for n, t in m.backbone_parameters() if n not in wired]
    assert wired and unwired
    before = {n: t.data.copy() for n, t in m.backbone_parameters()}
    train_stage(m, recs, "b", 3, {"unet": 1e-2, "adapter": 1e-2}, cfg)
    for n, t in unwired:
        assert t.data.tobytes() == before[n].tobytes(), n
    assert any(t.data.tobytes() != before[n].tobytes() for n, t in m.wired_parameters())


def test_zero_learning_rate_is_bitwise_noop(micro):
    cfg, recs = micro
    m = _trained_micro(cfg, recs)
    h = params_hash(m.backbone_parameters() + m.guidance_parameters())
    train_stage(m, recs, "b", 2, {"unet": 0.0, "adapter": 0.0}, cfg.replace(train={"weight_decay": 0.0}))
    assert params_hash(m.backbone_parameters() + m.guidance_parameters()) == h


def test_frozen_drift_is_detected(micro, monkeypatch):
    import hidream.diffusion as D
    cfg, recs = micro
    m = build_model(cfg, recs)
    calls = iter(range(10 ** 6))
    real = D.params_hash
    monkeypatch.setattr(D, "params_hash", lambda named: real(named) + str(next(calls)))
    with pytest.raises(InvariantViolation):
        train_stage(m, recs, "a", 1, {"unet": 0, "adapter": 1e-3}, cfg)


def test_training_is_deterministic(micro):
    cfg, recs = micro
    hashes = []
    for _ in range(2):
        m = build_model(cfg, recs)
        _, rows = train_stage(m, recs, "pretrain", 2, {"unet": 1e-2, "adapter": 0}, cfg)
        _, rows_a = train_stage(m, recs, "a", 2, {"unet": 0, "adapter": 1e-2}, cfg)
        hashes.append((params_hash(m.backbone_parameters() + m.guidance_parameters()),
                       json.dumps(rows + rows_a)))
    assert hashes[0] == hashes[1]


# ---------------------------------------------------------------------------
# end-to-end gradients (f64, micro shapes)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("film_first", [True, False])
def test_end_to_end_gradients(micro, film_first):
    cfg, recs = micro
    cfg = cfg.replace(model={"film_first": film_first})
    m = build_model(cfg, recs, dtype="f64")
    _randomize(m.backbone_parameters() + m.guidance_parameters(), scale=0.4)
    for _, t in m.adapter.gates.named_parameters():
        t.data[...] = np.random.default_rng(1).standard_normal(t.shape)
    r = np.random.default_rng(2)
    x0 = r.uniform(-1, 1, (2, 4, 8, 8))
    amps = np.stack([rr.amplitudes for rr in recs[:2]])
    eps = r.standard_normal(x0.shape)
    t = np.array([4, 15])
    lam = {s: v for s, v in zip(m.scales, (0.5, 0.6, 0.8))}
    reg = {"alpha": 1e-1, "w": 1e-1, "tv": 1e-1}

    def f():
        return dm_loss(m, x0, amps, t, eps, lam, reg).total

    named = m.guidance_parameters() + m.wired_parameters()
    for _, p in named:
        p.requires_grad = True
    rep = grad_check(f, [p for _, p in named], names=[n for n, _ in named], tol=1e-4, max_coords=6)
    assert rep.ok, str(rep)
