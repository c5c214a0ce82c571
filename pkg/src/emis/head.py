"""The scoring head: text-gated attention over image dimensions.

Two attention branches (same architecture, independent weights) read
the modifier embedding and output a probability vector over the image
feature dimensions. The implicit-similarity score compares reference
and candidate under that reweighting; the explicit-matching score
compares a linear projection of the modifier against the reweighted
candidate. The full model adds the two.

``pairwise_scores`` is the single source of truth for the formulas: it
accepts either plain float64 arrays (fast evaluation path) or tape
``Var`` parameters (training path), so the trained and the evaluated
function are literally the same code. It composes three phases (query
encoding, gallery preparation, scoring) that the latency benchmark
times individually.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, value_of
from .errors import BadMagic, ConfigError, NearZeroNorm, ShapeMismatch, TruncatedFile
from .numerics import NORM_EPS, as_vec64, mlp2, softmax, weighted_cosine

Array = np.ndarray

GAMMA_INIT = 10.0
GAMMA_MIN = 1e-3


class Flavor(Enum):
    """Model variants, in the fixed ablation-table order."""

    IMAGE_ONLY = "image_only"
    TEXT_ONLY = "text_only"
    LATE_FUSION = "late_fusion"
    IS_ONLY = "is_only"
    EM_ONLY = "em_only"
    ARTEMIS = "artemis"

    @classmethod
    def parse(cls, name: str) -> "Flavor":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ConfigError(f"unknown flavor {name!r}; expected one of {valid}") from None


@dataclass(frozen=True)
class HeadDims:
    """Embedding widths: text, image, attention hidden layer."""

    h_t: int = 512
    h_i: int = 512
    h_hidden: int = 512

    def __post_init__(self) -> None:
        if min(self.h_t, self.h_i, self.h_hidden) < 1:
            raise ShapeMismatch(f"dims must be positive, got {self}")


@dataclass
class AttentionParams:
    """Two-layer MLP weights for one attention branch."""

    w1: object  # (h_t, h_hidden)
    b1: object  # (h_hidden,)
    w2: object  # (h_hidden, h_i)
    b2: object  # (h_i,)


@dataclass
class HeadParams:
    """All trainable state: two attention branches, projection, temperature."""

    attn_is: AttentionParams
    attn_em: AttentionParams
    proj_w: object  # (h_t, h_i)
    proj_b: object  # (h_i,)
    gamma: object   # scalar, kept > 0 by the optimizer
    dims: HeadDims


# Fixed block order used by checkpoints, flattening, and the optimizer.
BLOCK_NAMES = (
    "attn_is.w1", "attn_is.b1", "attn_is.w2", "attn_is.b2",
    "attn_em.w1", "attn_em.b1", "attn_em.w2", "attn_em.b2",
    "proj.w", "proj.b", "gamma",
)


def block_shapes(dims: HeadDims) -> dict[str, tuple[int, ...]]:
    attn = {
        "w1": (dims.h_t, dims.h_hidden), "b1": (dims.h_hidden,),
        "w2": (dims.h_hidden, dims.h_i), "b2": (dims.h_i,),
    }
    shapes: dict[str, tuple[int, ...]] = {}
    for branch in ("attn_is", "attn_em"):
        for part, shape in attn.items():
            shapes[f"{branch}.{part}"] = shape
    shapes["proj.w"] = (dims.h_t, dims.h_i)
    shapes["proj.b"] = (dims.h_i,)
    shapes["gamma"] = ()
    return shapes


def param_blocks(params: HeadParams) -> list[tuple[str, object]]:
    """(name, payload) pairs in the fixed serialization order."""
    return [
        ("attn_is.w1", params.attn_is.w1), ("attn_is.b1", params.attn_is.b1),
        ("attn_is.w2", params.attn_is.w2), ("attn_is.b2", params.attn_is.b2),
        ("attn_em.w1", params.attn_em.w1), ("attn_em.b1", params.attn_em.b1),
        ("attn_em.w2", params.attn_em.w2), ("attn_em.b2", params.attn_em.b2),
        ("proj.w", params.proj_w), ("proj.b", params.proj_b),
        ("gamma", params.gamma),
    ]


def params_from_blocks(blocks: dict[str, object], dims: HeadDims) -> HeadParams:
    return HeadParams(
        attn_is=AttentionParams(blocks["attn_is.w1"], blocks["attn_is.b1"],
                                blocks["attn_is.w2"], blocks["attn_is.b2"]),
        attn_em=AttentionParams(blocks["attn_em.w1"], blocks["attn_em.b1"],
                                blocks["attn_em.w2"], blocks["attn_em.b2"]),
        proj_w=blocks["proj.w"], proj_b=blocks["proj.b"],
        gamma=blocks["gamma"], dims=dims,
    )


def init_params(dims: HeadDims = HeadDims(), seed: int = 0) -> HeadParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, gamma 10."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in: int, fan_out: int) -> Array:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def branch() -> AttentionParams:
        return AttentionParams(
            w1=glorot(dims.h_t, dims.h_hidden),
            b1=np.zeros(dims.h_hidden),
            w2=glorot(dims.h_hidden, dims.h_i),
            b2=np.zeros(dims.h_i),
        )

    return HeadParams(
        attn_is=branch(),
        attn_em=branch(),
        proj_w=glorot(dims.h_t, dims.h_i),
        proj_b=np.zeros(dims.h_i),
        gamma=np.float64(GAMMA_INIT),
        dims=dims,
    )


def head_param_count(params: HeadParams) -> int:
    """Exact number of trainable scalars, temperature included."""
    return sum(int(np.asarray(value_of(v)).size) for _, v in param_blocks(params))


def head_mac_count(dims: HeadDims) -> int:
    """Multiply-accumulates for one forward pass on one triplet.

    Two attention MLPs, one projection, plus 6*h_i elementwise/dot/norm
    work for the reweightings and the two cosines.
    """
    attn = dims.h_t * dims.h_hidden + dims.h_hidden * dims.h_i
    return 2 * attn + dims.h_t * dims.h_i + 6 * dims.h_i


# -- single-vector forward (plain arrays) -------------------------------------

def attention(m, which: Literal["is", "em"], params: HeadParams) -> Array:
    """Probability vector over image dimensions, conditioned on the modifier."""
    branch = params.attn_is if which == "is" else params.attn_em
    m = as_vec64(m, "modifier")
    if m.shape[0] != params.dims.h_t:
        raise ShapeMismatch(f"modifier length {m.shape[0]} vs h_t {params.dims.h_t}")
    return softmax(mlp2(m, value_of(branch.w1), value_of(branch.b1),
                        value_of(branch.w2), value_of(branch.b2)))


def project(m, params: HeadParams) -> Array:
    """Linear map of the modifier into image space."""
    m = as_vec64(m, "modifier")
    if m.shape[0] != params.dims.h_t:
        raise ShapeMismatch(f"modifier length {m.shape[0]} vs h_t {params.dims.h_t}")
    return m @ value_of(params.proj_w) + value_of(params.proj_b)


def score_is(r, m, t, params: HeadParams) -> float:
    """Cosine of reference and candidate under modifier-derived attention."""
    return weighted_cosine(attention(m, "is", params), r, t)


def score_em(m, t, params: HeadParams) -> float:
    """Cosine of the projected modifier and the reweighted candidate."""
    a = attention(m, "em", params)
    p = project(m, params)
    t = as_vec64(t, "candidate")
    if t.shape[0] != params.dims.h_i:
        raise ShapeMismatch(f"candidate length {t.shape[0]} vs h_i {params.dims.h_i}")
    return _cosine(p, a * t)


def _cosine(x: Array, y: Array) -> float:
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx <= NORM_EPS or ny <= NORM_EPS:
        raise NearZeroNorm(f"norms too small for cosine: {nx!r}, {ny!r}")
    return float(x @ y) / (nx * ny)


def score(r, m, t, params: HeadParams, flavor: Flavor) -> float:
    """Per-triplet compatibility under the given model variant."""
    if flavor is Flavor.ARTEMIS:
        return score_em(m, t, params) + score_is(r, m, t, params)
    if flavor is Flavor.IS_ONLY:
        return score_is(r, m, t, params)
    if flavor is Flavor.EM_ONLY:
        return score_em(m, t, params)
    r = as_vec64(r, "reference")
    m = as_vec64(m, "modifier")
    t = as_vec64(t, "candidate")
    if flavor is Flavor.IMAGE_ONLY:
        _require_same_length(r, t, "reference", "candidate")
        return _cosine(r, t)
    if flavor is Flavor.TEXT_ONLY:
        _require_same_length(m, t, "modifier", "candidate")
        return _cosine(m, t)
    if flavor is Flavor.LATE_FUSION:
        _require_same_length(r, m, "reference", "modifier")
        _require_same_length(r, t, "reference", "candidate")
        return _cosine(r + m, t)
    raise ShapeMismatch(f"unhandled flavor {flavor}")


def _require_same_length(a: Array, b: Array, name_a: str, name_b: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name_a} length {a.shape[0]} vs {name_b} length {b.shape[0]}; "
                            "this flavor needs equal widths")


# -- batched pairwise scores (generic over Var / ndarray) ----------------------

def attention_rows(m_rows: Array, branch: AttentionParams):
    """Attention vectors for a block of modifiers; rows sum to 1."""
    hidden = ad.relu(m_rows @ branch.w1 + branch.b1)
    return ad.softmax_rows(hidden @ branch.w2 + branch.b2)


@dataclass
class QueryState:
    """Per-query vectors computed once and reused across all candidates.

    For the attention flavors the cosine denominator splits into a
    query-only factor (folded into ``x_is`` / ``y_em``) and a bilinear
    factor sqrt(a^2 . t^2) evaluated at scoring time from the squared
    attention rows.
    """

    flavor: Flavor
    n_queries: int
    plain: object | None = None   # normalized query rows, param-free flavors
    x_is: object | None = None    # (a_is * a_is * r) / ||a_is * r||
    sq_is: object | None = None   # a_is ** 2
    y_em: object | None = None    # (T(m) * a_em) / ||T(m)||
    sq_em: object | None = None   # a_em ** 2

    def slice_rows(self, start: int, stop: int) -> "QueryState":
        """View of queries [start, stop); plain-array states only."""
        def cut(v):
            return None if v is None else v[start:stop]
        return QueryState(flavor=self.flavor, n_queries=max(stop - start, 0),
                          plain=cut(self.plain), x_is=cut(self.x_is),
                          sq_is=cut(self.sq_is), y_em=cut(self.y_em),
                          sq_em=cut(self.sq_em))


@dataclass
class GalleryState:
    """Candidate-side arrays: normalized rows, squares for attention flavors."""

    tn: Array
    tn_sq: Array | None = None


def encode_queries(r_rows, m_rows, params: HeadParams, flavor: Flavor) -> QueryState:
    """Query-side phase: attention vectors, projection, query norms.

    Inputs are plain float64 row blocks; parameters may be tape Vars,
    in which case the state participates in backprop.
    """
    r_rows = np.asarray(r_rows, dtype=np.float64)
    m_rows = np.asarray(m_rows, dtype=np.float64)
    if r_rows.ndim != 2 or m_rows.ndim != 2:
        raise ShapeMismatch("encode_queries expects 2-D row blocks")
    if r_rows.shape[0] != m_rows.shape[0]:
        raise ShapeMismatch(f"query count mismatch: {r_rows.shape[0]} refs vs "
                            f"{m_rows.shape[0]} modifiers")
    dims = params.dims
    if r_rows.shape[1] != dims.h_i:
        raise ShapeMismatch(f"reference width {r_rows.shape[1]} vs h_i {dims.h_i}")
    if m_rows.shape[1] != dims.h_t:
        raise ShapeMismatch(f"modifier width {m_rows.shape[1]} vs h_t {dims.h_t}")
    n = r_rows.shape[0]

    if flavor is Flavor.IMAGE_ONLY:
        return QueryState(flavor, n, plain=_normalize_rows(r_rows))
    if flavor is Flavor.TEXT_ONLY:
        if dims.h_t != dims.h_i:
            raise ShapeMismatch("text_only needs h_t == h_i (raw modifier/candidate cosine)")
        return QueryState(flavor, n, plain=_normalize_rows(m_rows))
    if flavor is Flavor.LATE_FUSION:
        if dims.h_t != dims.h_i:
            raise ShapeMismatch("late_fusion needs h_t == h_i (sums reference and modifier)")
        return QueryState(flavor, n, plain=_normalize_rows(r_rows + m_rows))
    if flavor not in (Flavor.IS_ONLY, Flavor.EM_ONLY, Flavor.ARTEMIS):
        raise ShapeMismatch(f"unhandled flavor {flavor}")

    state = QueryState(flavor, n)
    if flavor in (Flavor.IS_ONLY, Flavor.ARTEMIS):
        a = attention_rows(m_rows, params.attn_is)
        ar = a * r_rows
        query_norm = ad.sqrt(ad.sum_rows(ad.square(ar)))   # (Q,1)  ||a*r||
        _guard_norms(query_norm, "attention-weighted reference")
        state.x_is = (a * ar) / query_norm
        state.sq_is = ad.square(a)
    if flavor in (Flavor.EM_ONLY, Flavor.ARTEMIS):
        a = attention_rows(m_rows, params.attn_em)
        p = m_rows @ params.proj_w + params.proj_b
        query_norm = ad.sqrt(ad.sum_rows(ad.square(p)))    # (Q,1)  ||T(m)||
        _guard_norms(query_norm, "projected modifier")
        state.y_em = (p * a) / query_norm
        state.sq_em = ad.square(a)
    return state


def prepare_gallery(t_rows, dims: HeadDims, flavor: Flavor) -> GalleryState:
    """Candidate-side phase: normalize once; squares for attention flavors."""
    t_rows = np.asarray(t_rows, dtype=np.float64)
    if t_rows.ndim != 2:
        raise ShapeMismatch("prepare_gallery expects a 2-D row block")
    if t_rows.shape[1] != dims.h_i:
        raise ShapeMismatch(f"candidate width {t_rows.shape[1]} vs h_i {dims.h_i}")
    tn = _normalize_rows(t_rows)
    if flavor in (Flavor.IS_ONLY, Flavor.EM_ONLY, Flavor.ARTEMIS):
        return GalleryState(tn=tn, tn_sq=tn * tn)
    return GalleryState(tn=tn)


def scores_from_state(queries: QueryState, gallery: GalleryState):
    """Scoring phase: one gated product per active branch."""
    tn = gallery.tn
    if queries.plain is not None:
        return queries.plain @ tn.T

    if gallery.tn_sq is None:
        raise ShapeMismatch(f"gallery state lacks squares needed by {queries.flavor}")
    tn_sq = gallery.tn_sq

    def gated(x, sq):
        pair_norm = ad.sqrt(sq @ tn_sq.T)   # (Q,G)  ||a*t|| on unit t rows
        _guard_norms(pair_norm, "attention-weighted candidate")
        return (x @ tn.T) / pair_norm

    if queries.flavor is Flavor.IS_ONLY:
        return gated(queries.x_is, queries.sq_is)
    if queries.flavor is Flavor.EM_ONLY:
        return gated(queries.y_em, queries.sq_em)
    return gated(queries.y_em, queries.sq_em) + gated(queries.x_is, queries.sq_is)


def pairwise_scores(r_rows: Array, m_rows: Array, t_rows: Array,
                    params: HeadParams, flavor: Flavor):
    """Scores for every (query, candidate) pair: queries x candidates.

    Query-side quantities (attention vectors, projection, query norms)
    are computed once per query and reused across all candidates.
    Inputs are plain float64 arrays; parameters may be tape Vars, in
    which case the result participates in backprop.
    """
    state = encode_queries(r_rows, m_rows, params, flavor)
    gallery = prepare_gallery(t_rows, params.dims, flavor)
    return scores_from_state(state, gallery)


def _guard_norms(norms, what: str) -> None:
    smallest = float(value_of(norms).min())
    if smallest <= NORM_EPS:
        raise NearZeroNorm(f"{what} has norm {smallest!r}")


def _normalize_rows(x: Array) -> Array:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    smallest = float(norms.min())
    if smallest <= NORM_EPS:
        raise NearZeroNorm(f"cannot normalize row with norm {smallest!r}")
    return x / norms


# -- flattening (gradient checks, optimizer-independent utilities) -------------

def params_to_vector(params: HeadParams) -> Array:
    parts = [np.asarray(value_of(v), dtype=np.float64).ravel()
             for _, v in param_blocks(params)]
    return np.concatenate(parts)


def vector_to_params(vec, dims: HeadDims) -> HeadParams:
    """Rebuild HeadParams from a flat vector (ndarray or tape Var).

    With a Var input every block is a differentiable slice, so a single
    flat leaf can drive a full-model finite-difference check.
    """
    shapes = block_shapes(dims)
    is_var = isinstance(vec, Var)
    if not is_var:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise ShapeMismatch(f"expected a flat vector, got shape {vec.shape}")
    total = sum(int(np.prod(s)) if s else 1 for s in shapes.values())
    size = vec.value.size if is_var else vec.size
    if size != total:
        raise ShapeMismatch(f"vector has {size} entries, parameters need {total}")
    blocks: dict[str, object] = {}
    offset = 0
    for name in BLOCK_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape)) if shape else 1
        piece = vec.slice_1d(offset, offset + count) if is_var else vec[offset:offset + count]
        blocks[name] = piece.reshape(shape)
        offset += count
    return params_from_blocks(blocks, dims)


def lift_params(params: HeadParams, tape: Tape) -> HeadParams:
    """Copy parameters onto a tape as leaves (one per block)."""
    blocks = {name: tape.leaf(value_of(v)) for name, v in param_blocks(params)}
    return params_from_blocks(blocks, params.dims)


def gradients_of(lifted: HeadParams, tape: Tape) -> HeadParams:
    """Gradients for every block of a lifted parameter set (zeros if unused)."""
    blocks = {name: tape.gradient(v) for name, v in param_blocks(lifted)}
    return params_from_blocks(blocks, lifted.dims)


def copy_params(params: HeadParams) -> HeadParams:
    blocks = {name: np.array(value_of(v), dtype=np.float64, copy=True)
              for name, v in param_blocks(params)}
    blocks["gamma"] = np.float64(blocks["gamma"])
    return params_from_blocks(blocks, params.dims)


# -- checkpoint file format ----------------------------------------------------

CHECKPOINT_MAGIC = b"AHP1"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: HeadParams, path) -> None:
    """Binary container: magic, version, dims, length-prefixed f64 blocks."""
    dims = params.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, dims.h_t, dims.h_i, dims.h_hidden))
        for _, payload in param_blocks(params):
            arr = np.ascontiguousarray(value_of(payload), dtype="<f8")
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> HeadParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is shorter than any header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, got {raw[:4]!r}")
    version, h_t, h_i, h_hidden = struct.unpack_from("<IIII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise BadMagic(f"{path}: unsupported checkpoint version {version}")
    dims = HeadDims(h_t, h_i, h_hidden)
    shapes = block_shapes(dims)
    blocks: dict[str, object] = {}
    offset = 20
    for name in BLOCK_NAMES:
        if offset + 4 > len(raw):
            raise TruncatedFile(f"{path}: missing length prefix for block {name}")
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = shapes[name]
        expected = int(np.prod(shape)) if shape else 1
        if count != expected:
            raise TruncatedFile(f"{path}: block {name} has {count} values, expected {expected}")
        end = offset + 8 * count
        if end > len(raw):
            raise TruncatedFile(f"{path}: block {name} payload is truncated")
        values = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64)
        blocks[name] = np.float64(values[0]) if shape == () else values.reshape(shape)
        offset = end
    if offset != len(raw):
        raise TruncatedFile(f"{path}: {len(raw) - offset} trailing bytes after last block")
    return params_from_blocks(blocks, dims)
