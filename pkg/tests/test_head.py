import struct

import numpy as np
import pytest

from emis.autodiff import Tape
from emis.errors import BadMagic, ConfigError, NearZeroNorm, ShapeMismatch, TruncatedFile
from emis.head import (
    BLOCK_NAMES,
    Flavor,
    HeadDims,
    block_shapes,
    copy_params,
    encode_queries,
    gradients_of,
    head_mac_count,
    head_param_count,
    init_params,
    lift_params,
    load_checkpoint,
    pairwise_scores,
    params_to_vector,
    prepare_gallery,
    save_checkpoint,
    score,
    scores_from_state,
    vector_to_params,
)

from conftest import oracle_from_params, unit_rows

FLAVORS = list(Flavor)


# -- complexity accounting ------------------------------------------------------

def test_param_count_at_default_dims():
    assert head_param_count(init_params(HeadDims(512, 512, 512))) == 1_313_281


def test_param_count_closed_form():
    for h_t, h_i, h_hidden in [(1, 1, 1), (8, 6, 4), (17, 3, 29)]:
        dims = HeadDims(h_t, h_i, h_hidden)
        attn = h_t * h_hidden + h_hidden + h_hidden * h_i + h_i
        proj = h_t * h_i + h_i
        assert head_param_count(init_params(dims)) == 2 * attn + proj + 1


def test_mac_count_values():
    assert head_mac_count(HeadDims(512, 512, 512)) == 1_313_792
    assert head_mac_count(HeadDims(1, 1, 1)) == 11


def test_mac_count_formula():
    for h_t, h_i, h_hidden in [(8, 6, 4), (64, 64, 64)]:
        dims = HeadDims(h_t, h_i, h_hidden)
        expected = 2 * (h_t * h_hidden + h_hidden * h_i) + h_t * h_i + 6 * h_i
        assert head_mac_count(dims) == expected


# -- initialization --------------------------------------------------------------

def test_init_glorot_bounds_and_zeros():
    dims = HeadDims(32, 24, 16)
    params = init_params(dims, seed=3)
    for branch in (params.attn_is, params.attn_em):
        lim1 = np.sqrt(6.0 / (dims.h_t + dims.h_hidden))
        lim2 = np.sqrt(6.0 / (dims.h_hidden + dims.h_i))
        assert np.all(np.abs(branch.w1) <= lim1)
        assert np.all(np.abs(branch.w2) <= lim2)
        assert np.all(branch.b1 == 0.0) and np.all(branch.b2 == 0.0)
    assert np.all(np.abs(params.proj_w) <= np.sqrt(6.0 / (dims.h_t + dims.h_i)))
    assert np.all(params.proj_b == 0.0)
    assert float(params.gamma) == 10.0


def test_init_deterministic_by_seed():
    a = params_to_vector(init_params(HeadDims(8, 8, 8), seed=9))
    b = params_to_vector(init_params(HeadDims(8, 8, 8), seed=9))
    c = params_to_vector(init_params(HeadDims(8, 8, 8), seed=10))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dims_must_be_positive():
    with pytest.raises(ShapeMismatch):
        HeadDims(0, 4, 4)


# -- flavor naming ---------------------------------------------------------------

def test_flavor_order_is_fixed():
    assert [f.value for f in Flavor] == [
        "image_only", "text_only", "late_fusion", "is_only", "em_only", "artemis"]


def test_flavor_parse():
    assert Flavor.parse("artemis") is Flavor.ARTEMIS
    with pytest.raises(ConfigError):
        Flavor.parse("both_modules")


# -- scalar scores against the pure-python oracle ---------------------------------

def test_scalar_scores_match_oracle():
    dims = HeadDims(10, 8, 6)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        params = init_params(dims, seed=seed + 100)
        r = unit_rows(rng, 1, dims.h_i)[0]
        m = unit_rows(rng, 1, dims.h_t)[0]
        t = unit_rows(rng, 1, dims.h_i)[0]
        oracle = oracle_from_params(params)
        for flavor in (Flavor.IS_ONLY, Flavor.EM_ONLY, Flavor.ARTEMIS):
            got = score(r, m, t, params, flavor)
            want = oracle.score(flavor.value, r.tolist(), m.tolist(), t.tolist())
            assert got == pytest.approx(want, abs=1e-12)


def test_scalar_parameter_free_scores_match_oracle():
    dims = HeadDims(8, 8, 8)
    rng = np.random.default_rng(0)
    params = init_params(dims, seed=1)
    r, m, t = (unit_rows(rng, 1, 8)[0] for _ in range(3))
    oracle = oracle_from_params(params)
    for flavor in (Flavor.IMAGE_ONLY, Flavor.TEXT_ONLY, Flavor.LATE_FUSION):
        got = score(r, m, t, params, flavor)
        want = oracle.score(flavor.value, r.tolist(), m.tolist(), t.tolist())
        assert got == pytest.approx(want, abs=1e-12)


def test_scalar_artemis_is_exact_sum_of_parts():
    dims = HeadDims(12, 12, 5)
    rng = np.random.default_rng(7)
    params = init_params(dims, seed=7)
    r, m, t = (unit_rows(rng, 1, 12)[0] for _ in range(3))
    em = score(r, m, t, params, Flavor.EM_ONLY)
    is_ = score(r, m, t, params, Flavor.IS_ONLY)
    assert score(r, m, t, params, Flavor.ARTEMIS) == em + is_


# -- batched scores ---------------------------------------------------------------

def _toy_batch(dims: HeadDims, n_q: int, n_t: int, seed: int):
    rng = np.random.default_rng(seed)
    return (unit_rows(rng, n_q, dims.h_i), unit_rows(rng, n_q, dims.h_t),
            unit_rows(rng, n_t, dims.h_i))


@pytest.mark.parametrize("flavor", FLAVORS, ids=[f.value for f in FLAVORS])
def test_pairwise_matches_scalar_loop(flavor):
    dims = HeadDims(9, 9, 5)
    params = init_params(dims, seed=4)
    r_rows, m_rows, t_rows = _toy_batch(dims, 6, 11, seed=4)
    got = pairwise_scores(r_rows, m_rows, t_rows, params, flavor)
    assert got.shape == (6, 11)
    for i in range(6):
        for j in range(11):
            want = score(r_rows[i], m_rows[i], t_rows[j], params, flavor)
            assert got[i, j] == pytest.approx(want, abs=1e-10)


def test_pairwise_artemis_is_bitwise_sum_of_parts():
    dims = HeadDims(16, 16, 8)
    params = init_params(dims, seed=2)
    r_rows, m_rows, t_rows = _toy_batch(dims, 5, 7, seed=2)
    em = pairwise_scores(r_rows, m_rows, t_rows, params, Flavor.EM_ONLY)
    is_ = pairwise_scores(r_rows, m_rows, t_rows, params, Flavor.IS_ONLY)
    art = pairwise_scores(r_rows, m_rows, t_rows, params, Flavor.ARTEMIS)
    assert np.array_equal(art, em + is_)


def test_phase_split_equals_fused_call():
    dims = HeadDims(8, 8, 8)
    params = init_params(dims, seed=5)
    r_rows, m_rows, t_rows = _toy_batch(dims, 4, 9, seed=5)
    state = encode_queries(r_rows, m_rows, params, Flavor.ARTEMIS)
    gallery = prepare_gallery(t_rows, dims, Flavor.ARTEMIS)
    fused = pairwise_scores(r_rows, m_rows, t_rows, params, Flavor.ARTEMIS)
    assert np.array_equal(scores_from_state(state, gallery), fused)
    part = scores_from_state(state.slice_rows(1, 3), gallery)
    assert np.array_equal(part, fused[1:3])


def test_pairwise_accepts_tape_vars():
    dims = HeadDims(8, 8, 8)
    params = init_params(dims, seed=6)
    r_rows, m_rows, t_rows = _toy_batch(dims, 3, 4, seed=6)
    plain = pairwise_scores(r_rows, m_rows, t_rows, params, Flavor.ARTEMIS)
    tape = Tape()
    lifted = lift_params(params, tape)
    var = pairwise_scores(r_rows, m_rows, t_rows, lifted, Flavor.ARTEMIS)
    assert np.array_equal(var.value, plain)
    tape.backward(var.sum())
    grads = gradients_of(lifted, tape)
    assert np.all(np.isfinite(params_to_vector(grads)))


def test_width_guards():
    dims = HeadDims(6, 8, 4)
    params = init_params(dims, seed=0)
    rng = np.random.default_rng(0)
    r = unit_rows(rng, 2, 8)
    m = unit_rows(rng, 2, 6)
    t = unit_rows(rng, 3, 8)
    with pytest.raises(ShapeMismatch):
        pairwise_scores(r, m, t, params, Flavor.TEXT_ONLY)   # h_t != h_i
    with pytest.raises(ShapeMismatch):
        pairwise_scores(r, m, t, params, Flavor.LATE_FUSION)
    with pytest.raises(ShapeMismatch):
        pairwise_scores(r[:1], m, t, params, Flavor.ARTEMIS)  # count mismatch
    with pytest.raises(ShapeMismatch):
        pairwise_scores(r[:, :5], m, t, params, Flavor.ARTEMIS)  # bad width


def test_zero_rows_raise_near_zero_norm():
    dims = HeadDims(5, 5, 5)
    params = init_params(dims, seed=0)
    rng = np.random.default_rng(1)
    r = unit_rows(rng, 2, 5)
    m = unit_rows(rng, 2, 5)
    t = unit_rows(rng, 3, 5)
    with pytest.raises(NearZeroNorm):
        pairwise_scores(np.zeros_like(r), m, t, params, Flavor.IMAGE_ONLY)
    with pytest.raises(NearZeroNorm):
        pairwise_scores(np.zeros_like(r), m, t, params, Flavor.IS_ONLY)
    bad_t = t.copy()
    bad_t[1] = 0.0
    with pytest.raises(NearZeroNorm):
        prepare_gallery(bad_t, dims, Flavor.IMAGE_ONLY)


# -- flattening -------------------------------------------------------------------

def test_param_vector_round_trip():
    dims = HeadDims(7, 5, 3)
    params = init_params(dims, seed=11)
    vec = params_to_vector(params)
    assert vec.shape == (head_param_count(params),)
    back = vector_to_params(vec, dims)
    assert np.array_equal(params_to_vector(back), vec)
    assert float(back.gamma) == float(params.gamma)


def test_vector_to_params_rejects_wrong_size():
    with pytest.raises(ShapeMismatch):
        vector_to_params(np.zeros(10), HeadDims(7, 5, 3))


def test_copy_params_is_independent():
    params = init_params(HeadDims(4, 4, 4), seed=0)
    clone = copy_params(params)
    clone.attn_is.w1[0, 0] += 1.0
    assert params.attn_is.w1[0, 0] != clone.attn_is.w1[0, 0]


# -- checkpoint format --------------------------------------------------------------

GOLDEN_CHECKPOINT_HEX = (
    "414850310100000001000000010000000100000001000000000000000000f0bf"
    "01000000000000000000e8bf01000000000000000000e0bf0100000000000000"
    "0000d0bf01000000000000000000000001000000000000000000d03f01000000"
    "000000000000e03f01000000000000000000e83f01000000000000000000f03f"
    "01000000000000000000f43f01000000000000000000f83f"
)


def _unit_dims_params():
    vec = np.arange(11, dtype=np.float64) / 4.0 - 1.0
    return vector_to_params(vec, HeadDims(1, 1, 1))


def test_checkpoint_golden_bytes(tmp_path):
    path = tmp_path / "head.ahp"
    save_checkpoint(_unit_dims_params(), path)
    raw = path.read_bytes()
    assert raw == bytes.fromhex(GOLDEN_CHECKPOINT_HEX)
    # Spell the layout out once: magic, version, three dims, then one
    # u32 count + f64 payload per block in BLOCK_NAMES order.
    expected = b"AHP1" + struct.pack("<IIII", 1, 1, 1, 1)
    for v in np.arange(11, dtype=np.float64) / 4.0 - 1.0:
        expected += struct.pack("<I", 1) + struct.pack("<d", v)
    assert raw == expected


def test_checkpoint_round_trip_bit_identical(tmp_path):
    dims = HeadDims(19, 13, 7)
    params = init_params(dims, seed=21)
    path = tmp_path / "head.ahp"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.dims == dims
    assert np.array_equal(params_to_vector(loaded), params_to_vector(params))
    save_checkpoint(loaded, tmp_path / "again.ahp")
    assert (tmp_path / "again.ahp").read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "head.ahp"
    save_checkpoint(_unit_dims_params(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "head.ahp"
    save_checkpoint(_unit_dims_params(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        load_checkpoint(path)


def test_checkpoint_truncation_and_trailing(tmp_path):
    path = tmp_path / "head.ahp"
    save_checkpoint(_unit_dims_params(), path)
    raw = path.read_bytes()
    short = tmp_path / "short.ahp"
    short.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFile):
        load_checkpoint(short)
    longer = tmp_path / "long.ahp"
    longer.write_bytes(raw + b"\x00")
    with pytest.raises(TruncatedFile):
        load_checkpoint(longer)


def test_block_shapes_cover_all_names():
    shapes = block_shapes(HeadDims(3, 4, 5))
    assert set(shapes) == set(BLOCK_NAMES)
    assert shapes["attn_is.w1"] == (3, 5)
    assert shapes["attn_is.w2"] == (5, 4)
    assert shapes["proj.w"] == (3, 4)
    assert shapes["gamma"] == ()
