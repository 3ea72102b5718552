import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hidream.guidance import (
    GuidanceConfigError, HintBranch, MhlaBlock, ScheduleParams, TraceEntry, WiringError, budget_factor,
    budget_rescale, dump_modulation_maps, film_fuse, film_inject, lambda_schedule, make_hint, mhla_attend,
    parse_sparsity, pool_tokens, sparsify_hint, standardize,
)
from hidream.tensor import Graph, Tensor, backward, grad_check, hdt, layer_norm_channels, no_grad

from oracles import attention_loop


def _branch(rng, d_in=3, c=4, hidden=3, randomize=True):
    b = HintBranch(rng, d_in, c, hidden, dtype="f64")
    if randomize:
        for _, p in b.named_parameters():
            p.data[...] = rng.standard_normal(p.shape) * 0.5
    return b


# ---------------------------------------------------------------------------
# hints
# ---------------------------------------------------------------------------

def test_constant_input_with_zero_projection_gives_zero_hint(rng):
    b = _branch(rng, randomize=False)
    b.gp.data[:] = 0
    xi = make_hint(Tensor(np.full((2, 3, 4, 4), 0.3)), b)
    assert not np.any(xi.data)


def test_standardize_moments_and_oracle(rng):
    x = rng.standard_normal((3, 4, 5, 5)) * 2.5 + 1.0
    y = standardize(Tensor(x)).data
    for i in range(3):
        assert abs(y[i].mean()) < 1e-5 and abs(y[i].std() - 1) < 1e-3
        mu, sd = x[i].mean(), x[i].std()
        np.testing.assert_allclose(y[i], (x[i] - mu) / (sd + 1e-6), atol=1e-12)


def test_hint_channel_count_matches_block(rng):
    b = _branch(rng, d_in=3, c=6)
    assert make_hint(Tensor(rng.random((1, 3, 4, 4))), b).shape == (1, 6, 4, 4)
    with pytest.raises(WiringError):
        make_hint(Tensor(rng.random((1, 2, 4, 4))), b)


def test_heads_start_as_no_op(rng):
    b = _branch(rng, randomize=False)
    hint = make_hint(Tensor(rng.random((2, 3, 4, 4))), b)
    h = Tensor(rng.standard_normal((2, 4, 4, 4)))
    np.testing.assert_array_equal(film_inject(h, hint, 0.7, b).data, h.data)


def test_gamma_is_bounded(rng):
    b = _branch(rng)
    b.gamma_w.data *= 100
    _, gamma, _ = b.heads(Tensor(rng.standard_normal((2, 4, 4, 4)) * 10))
    assert np.abs(gamma.data).max() <= 0.5


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def test_film_scalar_example():
    one = lambda v: Tensor(np.full((1, 1, 1, 1), v))
    out = film_fuse(one(1.0), 0.5, one(0.2), one(0.1), one(0.3))
    assert out.data.item() == pytest.approx(1.3, abs=1e-15)


def test_film_zero_strength_is_bitwise_identity(rng):
    b = _branch(rng)
    h = Tensor(rng.standard_normal((2, 4, 4, 4)))
    hint = Tensor(rng.standard_normal((2, 4, 4, 4)))
    assert film_inject(h, hint, 0.0, b) is h
    assert film_inject(h, hint, np.zeros(2), b) is h


def test_film_matches_three_term_oracle(rng):
    h, a, g, be = (rng.standard_normal((2, 3, 4, 4)) for _ in range(4))
    lam = np.array([0.3, 0.9])
    out = film_fuse(Tensor(h), lam, Tensor(a), Tensor(g), Tensor(be)).data
    ref = h + lam[:, None, None, None] * (a + g * h + be)
    np.testing.assert_array_equal(out, ref)


def test_film_shape_mismatch(rng):
    h = Tensor(rng.standard_normal((2, 3, 4, 4)))
    bad = Tensor(rng.standard_normal((2, 3, 2, 2)))
    with pytest.raises(WiringError):
        film_fuse(h, 0.5, bad, h, h)


# ---------------------------------------------------------------------------
# budget
# ---------------------------------------------------------------------------

def test_budget_halves_at_twice_eta():
    lam = np.array([0.8, 0.6, 0.5, 0.5])
    e = np.array([1.0, 1.0, 1.0, 1.0])
    eta = (lam * e).sum() / 2
    np.testing.assert_allclose(budget_rescale(lam, e, eta), lam / 2, rtol=1e-15)


def test_budget_identity_under_eta():
    lam = np.array([0.8, 0.6])
    np.testing.assert_array_equal(budget_rescale(lam, [0.1, 0.1], 1.0), lam)


def test_budget_errors():
    with pytest.raises(GuidanceConfigError):
        budget_rescale([0.5], [1.0], 0.0)
    with pytest.raises(GuidanceConfigError):
        budget_rescale([0.5], [-1.0], 1.0)


@given(seed=st.integers(0, 10 ** 6), eta=st.floats(1e-3, 10.0))
def test_budget_bound_and_ratios(seed, eta):
    r = np.random.default_rng(seed)
    lam = np.concatenate([[0.8, 0.6, 0.5, 0.5], r.uniform(0.01, 1.0, 1)])
    e = r.exponential(2.0, size=5)
    out = budget_rescale(lam, e, eta)
    assert (out * e).sum() <= eta * (1 + 1e-6)
    np.testing.assert_allclose(out / out[0], lam / lam[0], rtol=1e-6)


def test_differentiable_budget_matches_numpy(rng):
    lam = [np.full(3, v) for v in (0.8, 0.6, 0.5)]
    e = [Tensor(rng.uniform(1, 3, size=3)) for _ in range(3)]
    factor, b = budget_factor(lam, e, eta=1.0)
    ref = budget_rescale(np.stack(lam), np.stack([t.data for t in e]), 1.0)
    np.testing.assert_allclose(np.stack(lam) * factor.data, ref, rtol=1e-12)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_closed_forms():
    p = ScheduleParams((0.8, 0.6), (1.0, 2.0), T=1000)
    assert lambda_schedule(0, 0, p) == 0.8
    assert lambda_schedule(1, 1000, p) == 0.0
    assert abs(lambda_schedule(1, 500, p) - 0.6 * 0.25) < 1e-12
    assert lambda_schedule(0, -5, p) == 0.8 and lambda_schedule(0, 4000, p) == 0.0


@given(rho=st.floats(0.05, 8.0), lmax=st.floats(0.0, 1.0), T=st.integers(1, 2000))
def test_schedule_monotone(rho, lmax, T):
    p = ScheduleParams((lmax,), (rho,), T=T)
    v = lambda_schedule(0, np.linspace(0, T, 1000), p)
    assert np.all(np.diff(v) <= 0)


def test_schedule_param_validation():
    with pytest.raises(GuidanceConfigError):
        ScheduleParams((1.2,), (1.0,))
    with pytest.raises(GuidanceConfigError):
        ScheduleParams((0.5,), (0.0,))
    with pytest.raises(GuidanceConfigError):
        ScheduleParams((0.5,), (1.0,), eta=0)


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------

def test_sparsity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert sparsify_hint(Tensor(x), "off").item() == 0.0
    assert sparsify_hint(Tensor(np.zeros_like(x)), "l1").item() == 0.0
    assert sparsify_hint(Tensor(x), "l1").item() == pytest.approx(np.abs(x).mean(), rel=1e-14)
    assert parse_sparsity("l1:0.25") == ("l1", 0.25)
    with pytest.raises(GuidanceConfigError):
        parse_sparsity("l2:1")


# ---------------------------------------------------------------------------
# cross-attention
# ---------------------------------------------------------------------------

def _block(rng, c=4, d=3, tokens=4, heads=2, width=4):
    blk = MhlaBlock(rng, c, d, tokens, heads, width, dtype="f64")
    for _, p in blk.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    return blk


def test_mhla_zero_gate_is_identity(rng):
    blk = _block(rng)
    blk.fixed_gate = 0.0
    h = Tensor(rng.standard_normal((2, 4, 2, 2)))
    assert mhla_attend(h, Tensor(rng.standard_normal((2, 4, 3))), blk) is h


def test_mhla_single_token_returns_its_value(rng):
    blk = _block(rng, tokens=1)
    h = Tensor(rng.standard_normal((1, 4, 2, 2)))
    lat = rng.standard_normal((1, 1, 3))
    o = blk.attention(h, Tensor(lat)).data
    v = lat[0] @ blk.wv.data.T + blk.tok_emb.data
    expected = v @ blk.wo.data.T + blk.bo.data
    for i in range(2):
        for j in range(2):
            np.testing.assert_allclose(o[0, :, i, j], expected[0], atol=1e-12)


def test_mhla_matches_loop_oracle(rng):
    blk = _block(rng)
    h = rng.standard_normal((2, 4, 2, 3))
    lat = rng.standard_normal((2, 4, 3))
    out = mhla_attend(Tensor(h), Tensor(lat), blk).data
    g = 1 / (1 + np.exp(-blk.gate_logit.data))
    with no_grad():
        ln = layer_norm_channels(Tensor(h)).data
    for n in range(2):
        q_tok = ln[n].reshape(4, 6).T
        att = attention_loop(q_tok, lat[n], blk.wq.data, blk.wk.data, blk.wv.data, blk.wo.data, blk.bo.data,
                             blk.tok_emb.data, heads=2)
        ref = h[n] + g * att.T.reshape(4, 2, 3)
        np.testing.assert_allclose(out[n], ref, atol=1e-6)


def test_attention_rows_sum_to_one(rng):
    blk = _block(rng)
    _, att = blk.attention(Tensor(rng.standard_normal((2, 4, 2, 2)) * 5), Tensor(rng.standard_normal((2, 4, 3))),
                           return_weights=True)
    np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-6)


def test_heads_must_divide_width(rng):
    with pytest.raises(GuidanceConfigError):
        MhlaBlock(rng, 4, 3, 4, heads=3, width=4)


def test_gate_in_unit_interval(rng):
    blk = _block(rng)
    blk.gate_logit.data[...] = 1e3
    assert 0 <= blk.gate().item() <= 1


def test_pool_tokens_shape(rng):
    assert pool_tokens(Tensor(rng.random((2, 3, 16, 16)))).shape == (2, 16, 3)
    assert pool_tokens(Tensor(rng.random((2, 3, 2, 2)))).shape == (2, 4, 3)


# ---------------------------------------------------------------------------
# gradients through every guidance path
# ---------------------------------------------------------------------------

def test_guidance_gradients(rng):
    b = _branch(rng)
    blk = _block(rng)
    xi = Tensor(rng.standard_normal((2, 3, 4, 4)))
    h = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True, dtype="f64")
    lat = Tensor(rng.standard_normal((2, 4, 3)))
    probe = Tensor(rng.standard_normal((2, 4, 4, 4)))

    def f():
        hint = make_hint(xi, b)
        out = film_inject(h, hint, np.array([0.4, 0.9]), b)
        out = mhla_attend(out, lat, blk)
        return (out * probe).sum() + sparsify_hint(hint, "l1")

    names, params = zip(*(list(b.named_parameters()) + [("mhla." + n, p) for n, p in blk.named_parameters()]))
    rep = grad_check(f, list(params) + [h], names=list(names) + ["h"], tol=1e-4)
    assert rep.ok, str(rep)


# ---------------------------------------------------------------------------
# modulation dumps
# ---------------------------------------------------------------------------

def _trace(steps, scales, n=1, lam=0.5):
    out = []
    for k in range(steps):
        for s in scales:
            out.append(TraceEntry(step=k, t=1000 - 20 * k, scale=s, lam=np.full(n, lam),
                                  gamma=np.full((n, 2, s, s), 0.1 * k),
                                  group_norms={"early": np.full(n, lam * 2.0), "late": np.full(n, lam)}))
    return out


def test_dump_counts(tmp_path):
    path = dump_modulation_maps(_trace(50, (8, 16, 32, 64)), tmp_path)
    assert len(list(tmp_path.glob("gamma_*.hdt"))) == 200
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 200
    np.testing.assert_array_equal(hdt.load(tmp_path / rows[7]["gamma_file"]), np.full((1, 2, 64, 64), 0.1))


def test_dump_zero_strength_norms(tmp_path):
    path = dump_modulation_maps(_trace(2, (4,), n=3, lam=0.0), tmp_path)
    with open(path) as fh:
        for row in csv.DictReader(fh):
            assert float(row["norm_early"]) == 0.0 and float(row["norm_mid"]) == 0.0


def test_dump_io_error_surfaces(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(OSError, match="f"):
        dump_modulation_maps(_trace(1, (4,)), blocker / "x")
