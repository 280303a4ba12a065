import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from attnshare.errors import ConfigurationError, ShapeError, ValidationError
from attnshare.position import RopeParams, rope_rotate_positions
from attnshare.sharing import (
    QkvBundle,
    SharingConfig,
    adain,
    format_layer_spec,
    layer_policy,
    make_positions,
    naive_share,
    parse_layer_spec,
    scale_ref_keys,
    selective_share,
    share_keys_positions,
    shared_mm_attention,
)
from attnshare.tensor import Pcg32, channel_stats
from conftest import bundle_rows, random_bundle


def test_adain_hand_example():
    np.testing.assert_allclose(adain([[0.0], [2.0]], [[10.0], [12.0]]), [[10.0], [12.0]], atol=1e-6)


def test_adain_identity_and_stats(rng):
    for _ in range(20):
        x = rng.normal_matrix(9, 5)
        y = rng.normal_matrix(7, 5) * 3 + 1
        np.testing.assert_allclose(adain(x, x), x, atol=1e-5)
        out = adain(x, y)
        for got, want in zip(channel_stats(out), channel_stats(y)):
            np.testing.assert_allclose(got, want, atol=1e-5)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(np.zeros((3, 2)), np.zeros((3, 4)))


def test_naive_shapes(rng):
    tar, ref = random_bundle(rng, 2, 4, 8), random_bundle(rng, 2, 4, 8)
    qf, kf, vf = naive_share(tar, ref)
    assert qf.shape == (6, 8) and kf.shape == (12, 8) and vf.shape == (12, 8)
    np.testing.assert_array_equal(vf[6:], ref.v)
    np.testing.assert_array_equal(kf[6:], ref.k)


def test_naive_with_self_reference(rng):
    tar = random_bundle(rng, 3, 5, 4)
    qf, kf, _ = naive_share(tar, tar)
    np.testing.assert_allclose(kf[:8], tar.k, atol=1e-5)
    np.testing.assert_allclose(qf, tar.q, atol=1e-5)


def test_selective_shapes_and_contents(rng):
    tar, ref = random_bundle(rng, 2, 4, 8), random_bundle(rng, 2, 4, 8)
    qf, kf, vf = selective_share(tar, ref, 1.0)
    assert qf.shape == (6, 8) and kf.shape == (10, 8) and vf.shape == (10, 8)
    np.testing.assert_array_equal(kf[-4:], ref.k_img)
    np.testing.assert_array_equal(qf[:2], tar.q_txt)
    np.testing.assert_array_equal(kf[:2], tar.k_txt)
    np.testing.assert_array_equal(vf, np.concatenate([tar.v_txt, tar.v_img, ref.v_img]))
    np.testing.assert_allclose(qf[2:], adain(tar.q_img, ref.q_img))


def test_selective_rejects_bad_lambda(rng):
    tar = random_bundle(rng, 1, 2, 2)
    for lam in (0.0, -1.0, float("nan")):
        with pytest.raises(ValidationError):
            selective_share(tar, tar, lam)


def test_mismatched_bundles(rng):
    with pytest.raises(ShapeError):
        selective_share(random_bundle(rng, 2, 4, 8), random_bundle(rng, 2, 3, 8), 1.0)
    with pytest.raises(ShapeError):
        naive_share(random_bundle(rng, 2, 4, 8), random_bundle(rng, 1, 4, 8))


def test_bundle_validates_shapes():
    with pytest.raises(ShapeError):
        QkvBundle(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((3, 4)),
                  np.zeros((5, 4)), np.zeros((5, 4)), np.zeros((5, 4)))


def test_bundle_stacked_roundtrip(rng):
    b = random_bundle(rng, 3, 4, 6)
    back = QkvBundle.from_stacked(b.stacked(), 3)
    for role in QkvBundle.ROLES:
        np.testing.assert_array_equal(getattr(back, role), getattr(b, role))


def _poisoned(ref: QkvBundle) -> QkvBundle:
    nan = np.full_like(ref.k_txt, np.nan)
    return QkvBundle(ref.q_txt, nan, nan.copy(), ref.q_img, ref.k_img, ref.v_img)


def test_text_isolation_sentinels(rng):
    tar, ref = random_bundle(rng, 3, 4, 8), random_bundle(rng, 3, 4, 8)
    poisoned = _poisoned(ref)
    for arr in selective_share(tar, poisoned, 1.1):
        assert np.all(np.isfinite(arr))
    _, kf, vf = naive_share(tar, poisoned)
    assert np.isnan(kf).any() and np.isnan(vf).any()


def test_scale_ref_keys(rng):
    k = rng.normal_matrix(4, 8)
    np.testing.assert_array_equal(scale_ref_keys(k, 1.0), k)
    np.testing.assert_allclose(scale_ref_keys(k, 1.1), k * np.float32(1.1), rtol=1e-6)
    with pytest.raises(ValidationError):
        scale_ref_keys(k, 0.0)


def test_default_lambda():
    assert SharingConfig().lam == 1.1


def test_layer_policy():
    cfg = SharingConfig(layers=parse_layer_spec("19..57"))
    assert layer_policy(19, cfg) == "shared"
    assert layer_policy(56, cfg) == "shared"
    assert layer_policy(18, cfg) == "vanilla"
    assert layer_policy(57, cfg) == "vanilla"
    assert all(layer_policy(l, SharingConfig(layers=frozenset())) == "vanilla" for l in range(60))
    assert layer_policy(20, cfg.with_(mode="vanilla")) == "vanilla"


def test_layer_spec_parsing():
    assert parse_layer_spec("19..57") == frozenset(range(19, 57))
    assert parse_layer_spec("0,3,5..7") == frozenset({0, 3, 5, 6})
    assert parse_layer_spec("") == frozenset()
    assert format_layer_spec(range(19, 57)) == "19..57"
    assert format_layer_spec({0, 3, 5, 6}) == "0,3,5..7"
    for bad in ("a..b", "5..2", "-1", "x"):
        with pytest.raises(ValidationError):
            parse_layer_spec(bad)


def test_config_validation():
    with pytest.raises(ValidationError):
        SharingConfig(lam=0)
    with pytest.raises(ValidationError):
        SharingConfig(mode="full")
    with pytest.raises(ValidationError):
        SharingConfig(shift="diagonal")
    with pytest.raises(ConfigurationError):
        SharingConfig(layers={8}).check_layers(8)


def test_vanilla_equals_plain_attention(rng):
    tar, ref = random_bundle(rng, 2, 6, 4), random_bundle(rng, 2, 6, 4)
    pos = make_positions((2, 3), 2)
    plain = shared_mm_attention(tar, None, SharingConfig(mode="vanilla"), pos)
    with_ref = shared_mm_attention(tar, ref, SharingConfig(mode="vanilla"), pos)
    np.testing.assert_array_equal(plain, with_ref)
    ref_out, _ = oracles.shared_attention(bundle_rows(tar), None, "vanilla", 1.0, (2, 3), "identity")
    np.testing.assert_allclose(plain, ref_out, atol=1e-5)


def test_small_integer_case_matches_oracle():
    tar = QkvBundle([[1, 0]], [[0, 1]], [[1, 2]], [[2, -1], [0, 1]], [[1, 1], [-1, 2]], [[3, 0], [0, 3]])
    ref = QkvBundle([[0, 1]], [[1, 0]], [[2, 2]], [[1, 2], [2, 0]], [[0, 1], [1, 1]], [[1, -1], [-2, 1]])
    for mode in ("naive", "selective"):
        for shift in ("identity", "shifted"):
            cfg = SharingConfig(mode=mode, lam=1.1, shift=shift)
            out, w = shared_mm_attention(tar, ref, cfg, make_positions((1, 2), 1, cfg), return_weights=True)
            want, want_w = oracles.shared_attention(bundle_rows(tar), bundle_rows(ref), mode, 1.1, (1, 2), shift)
            assert out.shape == (3, 2)
            np.testing.assert_allclose(out, want, atol=1e-5)
            np.testing.assert_allclose(w[0], want_w, atol=1e-6)
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_multihead_equals_per_head_single(rng):
    tar, ref = random_bundle(rng, 2, 4, 8), random_bundle(rng, 2, 4, 8)
    cfg = SharingConfig(mode="selective", lam=1.05)
    pos = make_positions((2, 2), 2, cfg)
    out = shared_mm_attention(tar, ref, cfg, pos, heads=2)
    for h in range(2):
        cols = slice(4 * h, 4 * h + 4)
        sub = lambda b: QkvBundle(*(getattr(b, r)[:, cols] for r in QkvBundle.ROLES))
        np.testing.assert_allclose(out[:, cols], shared_mm_attention(sub(tar), sub(ref), cfg, pos), atol=1e-6)


def test_shared_requires_reference(rng):
    tar = random_bundle(rng, 1, 2, 2)
    with pytest.raises(ConfigurationError):
        shared_mm_attention(tar, None, SharingConfig(), make_positions((1, 2), 1))


def test_positions_must_cover_rows(rng):
    tar = random_bundle(rng, 2, 4, 4)
    with pytest.raises(ShapeError):
        shared_mm_attention(tar, tar, SharingConfig(), make_positions((2, 3), 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.sampled_from([2, 4, 6, 8]), st.integers(0, 2**32 - 1))
def test_shape_contracts_sweep(m, n, d, seed):
    rng = Pcg32(seed)
    tar, ref = random_bundle(rng, m, n, d), random_bundle(rng, m, n, d)
    qf, kf, vf = naive_share(tar, ref)
    assert qf.shape == (m + n, d) and kf.shape == vf.shape == (2 * (m + n), d)
    qf, kf, vf = selective_share(tar, ref, 1.1)
    assert qf.shape == (m + n, d) and kf.shape == vf.shape == (m + 2 * n, d)


def _ref_logits(tar, ref, lam, grid):
    cfg = SharingConfig(mode="selective", lam=lam)
    qf, kf, _, q_pos, k_pos = share_keys_positions(tar, ref, cfg, make_positions(grid, tar.text_len, cfg))
    rope = RopeParams(head_dim=tar.width)
    m_n = tar.text_len + tar.image_len
    q = rope_rotate_positions(qf, q_pos, rope).astype(np.float64)
    k = rope_rotate_positions(kf[m_n:], k_pos[m_n:], rope).astype(np.float64)
    return q @ k.T


def test_logits_scale_linearly_with_lambda(rng):
    tar, ref = random_bundle(rng, 2, 6, 8), random_bundle(rng, 2, 6, 8)
    base = _ref_logits(tar, ref, 1.0, (2, 3))
    for lam in (0.9, 0.95, 1.0, 1.05, 1.1, 1.15):
        np.testing.assert_allclose(_ref_logits(tar, ref, lam, (2, 3)), lam * base, rtol=1e-5, atol=1e-5)


def test_reference_mass_monotone_for_positive_logits():
    r = np.random.default_rng(5)
    pos = lambda *s: r.uniform(0.2, 1.0, size=s).astype(np.float32)
    tar = QkvBundle(pos(1, 4), pos(1, 4), pos(1, 4), pos(1, 4), pos(1, 4), pos(1, 4))
    ref = QkvBundle(pos(1, 4), pos(1, 4), pos(1, 4), pos(1, 4), pos(1, 4), pos(1, 4))
    assert np.all(_ref_logits(tar, ref, 1.0, (1, 1)) > 0)
    masses = []
    for lam in (0.9, 0.95, 1.0, 1.05, 1.1, 1.15):
        cfg = SharingConfig(mode="selective", lam=lam, shift="identity")
        _, w = shared_mm_attention(tar, ref, cfg, make_positions((1, 1), 1, cfg), return_weights=True)
        masses.append(float(w[0, :, -1].sum()))
    assert all(b > a for a, b in zip(masses, masses[1:]))
