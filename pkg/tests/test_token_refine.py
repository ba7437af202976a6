"""Token selection, masked attention and re-attention tests."""

import math

import numpy as np
import pytest

from tokenloc import numerics as nm
from tokenloc.backbone import ModelConfig, init_params, mhsa
from tokenloc.errors import ContractError, DegenerateInputError, DimensionError
from tokenloc.token_refine import (
    TokenSelection,
    adaptive_select,
    importance_weights,
    masked_mhsa,
    preliminary_attention,
    reattention,
    refine_classify,
    selection_matrix,
    spatial_map,
)

TINY = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=2,
                   num_heads=2, num_classes=3)


def selection_oracle(m, u):
    """Exhaustive-prefix reference: minimal top-value prefix reaching mass
    u, expanded to all ties at the threshold."""
    order = sorted(range(len(m)), key=lambda i: (-float(m[i]), i))
    total = 0.0
    for i in order:
        total += float(m[i])
    target = u * total
    running = 0.0
    for i in order:
        running += float(m[i])
        if running >= target:
            tau = float(m[i])
            break
    else:
        tau = float(m[order[-1]])
    return tau, {i for i in range(len(m)) if float(m[i]) >= tau}


# --- preliminary attention ------------------------------------------------

def test_preliminary_attention_uniform():
    n = 4
    uniform = np.full((n + 1, n + 1), 1.0 / (n + 1), np.float32)
    m = preliminary_attention([[uniform]])
    assert np.allclose(m, np.full(n, 1.0 / (n + 1)), atol=1e-7)


def test_preliminary_attention_additive_over_blocks():
    rng = np.random.default_rng(0)
    a = nm.softmax(rng.standard_normal((5, 5)).astype(np.float32))
    one = preliminary_attention([[a]])
    two = preliminary_attention([[a], [a]])
    assert np.allclose(two, 2.0 * one.astype(np.float64), atol=1e-6)


def test_preliminary_attention_matches_hand_composition():
    rng = np.random.default_rng(1)
    stack = [[nm.softmax(rng.standard_normal((5, 5)).astype(np.float32)) for _ in range(2)]
             for _ in range(2)]
    m = preliminary_attention(stack)
    expected = np.zeros(4)
    for heads in stack:
        mean = (heads[0].astype(np.float64) + heads[1].astype(np.float64)) / 2.0
        expected += mean[0, 1:]
    assert np.allclose(m, expected, atol=1e-6)


def test_preliminary_attention_empty_stack_rejected():
    with pytest.raises(ContractError):
        preliminary_attention([])


# --- adaptive selection -----------------------------------------------------

def test_adaptive_select_prefix_sum_trace():
    tau, mask = adaptive_select(np.array([0.5, 0.3, 0.2], np.float32), 0.7)
    assert tau == pytest.approx(0.3)
    assert np.array_equal(mask, [1, 1, 0])


def test_adaptive_select_full_mass_selects_all_positive():
    tau, mask = adaptive_select(np.array([0.5, 0.0, 0.3, 0.2, 0.0], np.float32), 1.0)
    assert np.array_equal(mask, [1, 0, 1, 1, 0])


def test_adaptive_select_small_mass_selects_argmax_and_ties():
    tau, mask = adaptive_select(np.array([0.4, 0.1, 0.4, 0.05], np.float32), 0.1)
    assert tau == pytest.approx(0.4)
    assert np.array_equal(mask, [1, 0, 1, 0])


def test_adaptive_select_zero_mass_rejected():
    with pytest.raises(DegenerateInputError):
        adaptive_select(np.zeros(4, np.float32), 0.5)
    with pytest.raises(ContractError):
        adaptive_select(np.array([0.5, 0.5], np.float32), 0.0)


def test_adaptive_select_monotone_nesting():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = rng.random(12).astype(np.float32)
        masses = sorted(rng.uniform(0.05, 1.0, size=4))
        previous = None
        for u in masses:
            _, mask = adaptive_select(m, float(u))
            selected = set(np.flatnonzero(mask))
            if previous is not None:
                assert previous <= selected
            previous = selected


def test_adaptive_select_scale_invariance():
    rng = np.random.default_rng(3)
    for _ in range(25):
        m = rng.random(10).astype(np.float32)
        u = float(rng.uniform(0.1, 1.0))
        tau, mask = adaptive_select(m, u)
        for c in (0.25, 4.0, 1000.0):
            tau_c, mask_c = adaptive_select((m * np.float32(c)).astype(np.float32), u)
            assert np.array_equal(mask, mask_c)


def test_adaptive_select_selected_mass_bracket():
    rng = np.random.default_rng(4)
    for _ in range(100):
        m = rng.random(int(rng.integers(2, 16))).astype(np.float32)
        u = float(rng.uniform(0.05, 1.0))
        tau, mask = adaptive_select(m, u)
        total = float(m.astype(np.float64).sum())
        selected = float(m.astype(np.float64)[mask > 0].sum())
        assert selected / total >= u - 1e-9
        # dropping the smallest selected value (no ties at tau) undershoots u
        values = m[mask > 0]
        if np.count_nonzero(values == values.min()) == 1 and mask.sum() > 1:
            reduced = selected - float(values.min())
            assert reduced / total < u


def test_adaptive_select_matches_brute_force_oracle():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(1, 13))
        m = (rng.random(n) * rng.choice([0.1, 1.0, 10.0])).astype(np.float32)
        if m.sum() == 0:
            continue
        u = float(rng.uniform(0.02, 1.0))
        tau, mask = adaptive_select(m, u)
        tau_o, selected_o = selection_oracle(m, u)
        assert set(np.flatnonzero(mask)) == selected_o
        assert tau == pytest.approx(tau_o, abs=0)


# --- selection matrix -------------------------------------------------------

def test_selection_matrix_all_ones():
    assert np.array_equal(selection_matrix(np.ones(3, np.float32)), np.ones((3, 3)))


def test_selection_matrix_all_zeros_is_identity():
    assert np.array_equal(selection_matrix(np.zeros(3, np.float32)), np.eye(3))


def test_selection_matrix_row_expansion():
    got = selection_matrix(np.array([1, 0, 1], np.float32))
    assert np.array_equal(got, np.array([[1, 0, 1], [1, 1, 1], [1, 0, 1]], np.float32))


# --- masked attention -------------------------------------------------------

def test_masked_mhsa_all_ones_equals_plain():
    rng = np.random.default_rng(6)
    params = init_params(TINY, 7)
    z_p = rng.standard_normal((4, 8)).astype(np.float32)
    ones = np.ones((4, 4), np.float32)
    masked_out, masked_attn = masked_mhsa(z_p, ones, params, "refine.mask_block", 2)
    plain_out, plain_attn = mhsa(z_p, params, "refine.mask_block", 2)
    assert np.allclose(masked_out, plain_out, atol=1e-6)
    for a, b in zip(masked_attn, plain_attn):
        assert np.allclose(np.asarray(a), np.asarray(b), atol=1e-6)


def test_masked_mhsa_mask_contract():
    rng = np.random.default_rng(7)
    params = init_params(TINY, 8)
    z_p = rng.standard_normal((4, 8)).astype(np.float32)
    matrix = selection_matrix(np.array([1, 0, 0, 1], np.float32))
    _, attn = masked_mhsa(z_p, matrix, params, "refine.mask_block", 2)
    for a in attn:
        a = np.asarray(a)
        assert np.all(a[matrix == 0] == 0.0)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-5)


def test_masked_mhsa_matches_composition_oracle():
    rng = np.random.default_rng(8)
    d, n = 4, 3
    params = {}
    for name in ("q", "k", "v", "out"):
        params[f"mb.attn.{name}.weight"] = rng.standard_normal((d, d)).astype(np.float32)
        params[f"mb.attn.{name}.bias"] = rng.standard_normal(d).astype(np.float32)
    z_p = rng.standard_normal((n, d)).astype(np.float32)
    matrix = selection_matrix(np.array([1, 0, 1], np.float32))

    out, attn = masked_mhsa(z_p, matrix, params, "mb", 1)

    z64 = z_p.astype(np.float64)
    q = z64 @ params["mb.attn.q.weight"] + params["mb.attn.q.bias"]
    k = z64 @ params["mb.attn.k.weight"] + params["mb.attn.k.bias"]
    v = z64 @ params["mb.attn.v.weight"] + params["mb.attn.v.bias"]
    scores = q @ k.T / math.sqrt(d)
    expected_attn = np.zeros((n, n))
    for i in range(n):
        keep = matrix[i] > 0
        e = np.exp(scores[i][keep] - scores[i][keep].max())
        expected_attn[i][keep] = e / e.sum()
    expected = expected_attn @ v @ params["mb.attn.out.weight"] + params["mb.attn.out.bias"]
    assert np.allclose(np.asarray(attn[0]), expected_attn, atol=1e-5)
    assert np.allclose(out, expected, atol=1e-5)


# --- importance weights -----------------------------------------------------

def _selection_for(mask):
    mask = np.asarray(mask, np.float32)
    return TokenSelection(priorities=mask.copy(), threshold=1.0, mask=mask,
                          matrix=selection_matrix(mask))


def test_importance_weights_single_token():
    rng = np.random.default_rng(9)
    params = init_params(TINY, 10)
    z_p = rng.standard_normal((4, 8)).astype(np.float32)
    lam = importance_weights(z_p, _selection_for([0, 0, 1, 0]), params, 2)
    assert np.array_equal(nm.value_of(lam), [0, 0, 1, 0])


def test_importance_weights_support_and_sum():
    rng = np.random.default_rng(10)
    for trial in range(10):
        params = init_params(TINY, 20 + trial)
        z_p = rng.standard_normal((4, 8)).astype(np.float32)
        mask = (rng.random(4) < 0.5).astype(np.float32)
        if mask.sum() == 0:
            mask[0] = 1.0
        lam = nm.value_of(importance_weights(z_p, _selection_for(mask), params, 2))
        assert abs(float(lam.sum()) - 1.0) < 1e-6
        assert np.all(lam * (1.0 - mask) == 0.0)
        assert np.all(lam >= 0.0)


def test_importance_weights_matches_step_oracle():
    rng = np.random.default_rng(11)
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=4, num_blocks=2,
                      num_heads=1, num_classes=2, mlp_ratio=2)
    params = init_params(cfg, 12)
    z_p = rng.standard_normal((4, 4)).astype(np.float32)
    mask = np.array([1, 1, 0, 1], np.float32)
    lam = nm.value_of(importance_weights(z_p, _selection_for(mask), params, 1))

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-6) * g + b

    def getp(name):
        return params[f"refine.mask_block.{name}"].astype(np.float64)

    matrix = selection_matrix(mask)
    z64 = z_p.astype(np.float64)
    h = ln(z64, getp("ln1.gamma"), getp("ln1.beta"))
    q = h @ getp("attn.q.weight") + getp("attn.q.bias")
    k = h @ getp("attn.k.weight") + getp("attn.k.bias")
    v = h @ getp("attn.v.weight") + getp("attn.v.bias")
    scores = q @ k.T / 2.0
    attn = np.zeros((4, 4))
    for i in range(4):
        keep = matrix[i] > 0
        e = np.exp(scores[i][keep] - scores[i][keep].max())
        attn[i][keep] = e / e.sum()
    z1 = z64 + attn @ v @ getp("attn.out.weight") + getp("attn.out.bias")
    hidden = ln(z1, getp("ln2.gamma"), getp("ln2.beta")) @ getp("mlp.fc1.weight") + getp("mlp.fc1.bias")
    from scipy.special import erf
    hidden = hidden * 0.5 * (1.0 + erf(hidden / math.sqrt(2.0)))
    z2 = z1 + hidden @ getp("mlp.fc2.weight") + getp("mlp.fc2.bias")
    raw = (z2 @ params["refine.score.weight"].astype(np.float64)
           + params["refine.score.bias"].astype(np.float64)).ravel()
    keep = mask > 0
    e = np.exp(raw[keep] - raw[keep].max())
    expected = np.zeros(4)
    expected[keep] = e / e.sum()
    assert np.allclose(lam, expected, atol=1e-5)


# --- re-attention -----------------------------------------------------------

def test_reattention_hand_example():
    m = np.array([0.5, 0.3, 0.2], np.float32)
    b = np.array([1, 1, 0], np.float32)
    lam = np.array([0.9, 0.1, 0.0], np.float32)
    refined = reattention(m, b, lam)
    assert np.allclose(refined, [0.72, 0.08, 0.2], atol=1e-6)


def test_reattention_all_zero_mask_passthrough():
    m = np.array([0.4, 0.1], np.float32)
    refined = reattention(m, np.zeros(2, np.float32), np.zeros(2, np.float32))
    assert np.array_equal(refined, m)


def test_reattention_zero_weights_rejected():
    with pytest.raises(ContractError):
        reattention(np.array([0.4, 0.6], np.float32), np.array([1, 0], np.float32),
                    np.zeros(2, np.float32))


def test_reattention_conserves_mass():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n = int(rng.integers(1, 20))
        m = rng.random(n).astype(np.float32)
        b = (rng.random(n) < 0.5).astype(np.float32)
        lam = np.zeros(n, np.float32)
        if b.sum() > 0:
            raw = rng.random(n) * b
            lam = (raw / raw.sum()).astype(np.float32)
        refined = reattention(m, b, lam)
        assert abs(float(refined.astype(np.float64).sum())
                   - float(m.astype(np.float64).sum())) < 1e-5


# --- map shaping and classification ----------------------------------------

def test_spatial_map_reshape():
    assert np.array_equal(spatial_map(np.array([1, 2, 3, 4], np.float32)),
                          np.array([[1, 2], [3, 4]], np.float32))


def test_spatial_map_roundtrip():
    rng = np.random.default_rng(13)
    v = rng.random(16).astype(np.float32)
    assert np.array_equal(spatial_map(v).ravel(), v)


def test_spatial_map_dimensions():
    assert spatial_map(np.zeros(196, np.float32)).shape == (14, 14)
    with pytest.raises(DimensionError):
        spatial_map(np.zeros(5, np.float32))


def test_refine_classify_probability_contract():
    rng = np.random.default_rng(14)
    params = init_params(TINY, 15)
    z_cls = rng.standard_normal((1, 8)).astype(np.float32)
    z_p = rng.standard_normal((4, 8)).astype(np.float32)
    lam = np.array([0.25, 0.25, 0.25, 0.25], np.float32)
    p = nm.value_of(refine_classify(z_cls, z_p, lam, params, TINY))
    assert p.shape == (3,)
    assert np.all(p > 0)
    assert abs(float(p.sum()) - 1.0) < 1e-6


def test_one_hot_weights_fuse_to_single_token():
    rng = np.random.default_rng(15)
    z_p = rng.standard_normal((4, 8)).astype(np.float32)
    lam = np.array([0, 0, 1, 0], np.float32)
    fusion = nm.matmul(lam.reshape(1, 4), z_p)
    assert np.array_equal(fusion[0], z_p[2])


def test_refine_classify_matches_composition_oracle():
    rng = np.random.default_rng(16)
    params = init_params(TINY, 17)
    z_cls = rng.standard_normal((1, 8)).astype(np.float32)
    z_p = rng.standard_normal((4, 8)).astype(np.float32)
    lam = np.array([0.5, 0.1, 0.3, 0.1], np.float32)
    p = nm.value_of(refine_classify(z_cls, z_p, lam, params, TINY))

    from tokenloc.backbone import block_forward
    fusion = nm.matmul(lam.reshape(1, 4), z_p)
    seq = np.vstack([z_cls, fusion])
    out, _ = block_forward(seq, params, "refine.final_block", TINY.num_heads)
    logits = (out[0].astype(np.float64) @ params["refine.head.weight"].astype(np.float64)
              + params["refine.head.bias"].astype(np.float64))
    e = np.exp(logits - logits.max())
    assert np.allclose(p, e / e.sum(), atol=1e-5)
