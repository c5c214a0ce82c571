"""Ranking engine and retrieval metrics.

Candidates are ordered by descending score with ascending-id
tie-breaks, so results are deterministic. The streaming evaluator
computes ranks by exact counting (strictly-greater plus tied-with-
lower-id), which is equivalent to the sort-based ``rank_targets`` and
cheap enough to run after every training epoch. Reports round to two
decimals (half-up) only at emission; internal math keeps full
precision.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (ConfigError, EmptyInput, MissingCell, MissingSubset,
                     ShapeMismatch, UnknownId)
from .head import Flavor, HeadParams, pairwise_scores

Array = np.ndarray

DEFAULT_BLOCK_SIZE = 256


@dataclass(frozen=True)
class QuerySpec:
    """One composed query: reference id, modifier id, ground truth."""

    ref_id: str
    mod_id: str
    ground_truth: tuple[str, ...]
    subset_members: tuple[str, ...] | None = None
    exclude_ref: bool = False

    def __post_init__(self) -> None:
        if not self.ground_truth:
            raise ShapeMismatch("query needs at least one ground-truth id")
        if self.subset_members is not None:
            if not set(self.ground_truth) & set(self.subset_members):
                raise MissingSubset(
                    f"query ({self.ref_id}, {self.mod_id}): subset contains no ground truth")


@dataclass
class RankResult:
    """Sorted candidate ids for one query plus the best ground-truth rank."""

    ordering: list[str]
    rank: int


def queries_from_triplets(triplets, split: str, exclude_ref: bool = False) -> list[QuerySpec]:
    """Build single-target queries for a split, attaching stored subsets."""
    out: list[QuerySpec] = []
    for index, rec in triplets.split_with_indices(split):
        members = triplets.subsets.get(index)
        out.append(QuerySpec(ref_id=rec.ref, mod_id=rec.mod,
                             ground_truth=(rec.tgt,),
                             subset_members=tuple(members) if members else None,
                             exclude_ref=exclude_ref))
    return out


def _id_rank_of(gallery_ids: Sequence[str]) -> Array:
    """Position of each gallery id in ascending-id order (tie-break key)."""
    order = sorted(range(len(gallery_ids)), key=gallery_ids.__getitem__)
    rank = np.empty(len(gallery_ids), dtype=np.int64)
    for position, idx in enumerate(order):
        rank[idx] = position
    return rank


def _blocks(n: int, block_size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + block_size, n)) for lo in range(0, n, block_size)]


def _map_blocks(fn: Callable, spans: list[tuple[int, int]], workers: int) -> list:
    """Apply fn to each (lo, hi) span, optionally on a thread pool.

    Results come back in span order and each span is computed the same
    way regardless of worker count, so output does not depend on the
    parallelism degree.
    """
    if workers <= 1 or len(spans) <= 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda span: fn(*span), spans))


def score_matrix(queries: Sequence[QuerySpec], corpus, params: HeadParams,
                 flavor: Flavor, block_size: int = DEFAULT_BLOCK_SIZE,
                 workers: int = 1) -> Array:
    """Full queries x gallery score matrix (gallery = target bank order)."""
    if not queries:
        raise EmptyInput("no queries")
    r_rows = corpus.refs.rows64([q.ref_id for q in queries])
    m_rows = corpus.mods.rows64([q.mod_id for q in queries])
    gallery = corpus.targets.matrix64()
    out = np.empty((len(queries), gallery.shape[0]), dtype=np.float64)

    def fill(lo: int, hi: int) -> None:
        out[lo:hi] = pairwise_scores(r_rows[lo:hi], m_rows[lo:hi], gallery, params, flavor)

    _map_blocks(fill, _blocks(len(queries), block_size), workers)
    return out


def rank_targets(row, query: QuerySpec, gallery_ids: Sequence[str]) -> RankResult:
    """Sort one score row (descending, ascending-id ties) and locate the truth."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] != len(gallery_ids):
        raise ShapeMismatch(f"row length {row.shape} vs gallery size {len(gallery_ids)}")
    index = {gid: i for i, gid in enumerate(gallery_ids)}
    keep = np.ones(len(gallery_ids), dtype=bool)
    if query.exclude_ref and query.ref_id in index:
        keep[index[query.ref_id]] = False
    id_rank = _id_rank_of(gallery_ids)
    cols = np.flatnonzero(keep)
    order = cols[np.lexsort((id_rank[cols], -row[cols]))]
    position = {int(c): p + 1 for p, c in enumerate(order)}
    gt_positions = [position[index[g]] for g in query.ground_truth
                    if g in index and keep[index[g]]]
    if not gt_positions:
        raise UnknownId(f"no ground truth of ({query.ref_id}, {query.mod_id}) in gallery")
    return RankResult(ordering=[gallery_ids[c] for c in order], rank=min(gt_positions))


def _counting_ranks(block: Array, gt_cols: list[list[int]], id_rank: Array,
                    keep: Array | None = None) -> Array:
    """Rank of the best ground-truth item per row, by exact counting.

    rank(g) = 1 + #{j kept: s_j > s_g} + #{j kept: s_j == s_g, id_rank_j < id_rank_g}.
    Equivalent to the position under rank_targets' sort.
    """
    n_rows, _ = block.shape
    ranks = np.empty(n_rows, dtype=np.int64)
    for i in range(n_rows):
        row = block[i]
        mask = keep[i] if keep is not None else None
        best = None
        for col in gt_cols[i]:
            greater = (row > row[col])
            tied = (row == row[col]) & (id_rank < id_rank[col])
            if mask is not None:
                greater &= mask
                tied &= mask
            rank = 1 + int(greater.sum()) + int(tied.sum())
            best = rank if best is None else min(best, rank)
        ranks[i] = best
    return ranks


def recall_at_k(ranks, k: int) -> float:
    """Percentage of ranks <= k."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EmptyInput("recall over zero queries")
    if k < 1:
        raise ConfigError("k must be >= 1")
    return 100.0 * float((ranks <= k).sum()) / ranks.size


def recall_subset_at_k(queries: Sequence[QuerySpec], matrix, k: int,
                       gallery_ids: Sequence[str]) -> float:
    """Recall@k with each query ranked only among its candidate subset."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not queries:
        raise EmptyInput("no queries")
    index = {gid: i for i, gid in enumerate(gallery_ids)}
    id_rank = _id_rank_of(gallery_ids)
    ranks = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        if q.subset_members is None:
            raise MissingSubset(f"query ({q.ref_id}, {q.mod_id}) has no subset")
        keep = np.zeros(len(gallery_ids), dtype=bool)
        for member in q.subset_members:
            if member not in index:
                raise UnknownId(f"subset member {member!r} not in gallery")
            keep[index[member]] = True
        if q.exclude_ref and q.ref_id in index:
            keep[index[q.ref_id]] = False
        gt_cols = [index[g] for g in q.ground_truth if g in index and keep[index[g]]]
        if not gt_cols:
            raise MissingSubset(f"query ({q.ref_id}, {q.mod_id}): ground truth excluded "
                                "from its own subset")
        ranks[i] = _counting_ranks(matrix[i:i + 1], [gt_cols], id_rank, keep[None, :])[0]
    return recall_at_k(ranks, k)


def median_rank(ranks) -> float:
    """Middle rank; mean of the two central values for even counts."""
    ranks = np.sort(np.asarray(ranks, dtype=np.float64))
    if ranks.size == 0:
        raise EmptyInput("median of zero ranks")
    mid = ranks.size // 2
    if ranks.size % 2 == 1:
        return float(ranks[mid])
    return float((ranks[mid - 1] + ranks[mid]) / 2.0)


# -- reports -------------------------------------------------------------------

def round_half_up(x: float, decimals: int = 2) -> float:
    """Round for emission: half-up at `decimals`, full precision upstream."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricReport:
    """Named metric values plus an optional convention aggregate."""

    label: str
    metrics: dict[str, float]
    n_queries: int | None = None
    aggregate: float | None = None
    convention: str | None = None

    def rounded(self) -> dict[str, object]:
        body: dict[str, object] = {"label": self.label}
        if self.convention is not None:
            body["convention"] = self.convention
        if self.n_queries is not None:
            body["n_queries"] = self.n_queries
        body["metrics"] = {k: round_half_up(v) for k, v in sorted(self.metrics.items())}
        if self.aggregate is not None:
            body["aggregate"] = round_half_up(self.aggregate)
        return body

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.rounded(), sort_keys=True, indent=indent)

    def to_text(self) -> str:
        body = self.rounded()
        lines = [f"== {self.label} =="]
        if self.n_queries is not None:
            lines.append(f"{'queries':<18} {self.n_queries}")
        for key, value in body["metrics"].items():
            lines.append(f"{key:<18} {value:>8.2f}")
        if self.aggregate is not None:
            lines.append(f"{'aggregate':<18} {round_half_up(self.aggregate):>8.2f}")
        return "\n".join(lines)


def evaluate(queries: Sequence[QuerySpec], corpus, params: HeadParams, flavor: Flavor,
             recall_ks: Sequence[int] = (1, 5, 10, 50),
             subset_ks: Sequence[int] = (1, 2, 3),
             block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1,
             dump_path=None, dump_top_k: int = 10) -> MetricReport:
    """Streamed evaluation: block scoring, counting ranks, metrics.

    Subset recalls are included when every query carries a subset.
    ``dump_path`` writes one JSONL line per query with its top-k ids
    and scores (exact sort order).
    """
    if not queries:
        raise EmptyInput("no queries")
    gallery_ids = corpus.targets.ids
    index = {gid: i for i, gid in enumerate(gallery_ids)}
    id_rank = _id_rank_of(gallery_ids)
    gallery = corpus.targets.matrix64()
    r_rows = corpus.refs.rows64([q.ref_id for q in queries])
    m_rows = corpus.mods.rows64([q.mod_id for q in queries])

    with_subsets = all(q.subset_members is not None for q in queries)

    def eval_block(lo: int, hi: int):
        block = pairwise_scores(r_rows[lo:hi], m_rows[lo:hi], gallery, params, flavor)
        chunk = queries[lo:hi]
        keep = None
        if any(q.exclude_ref for q in chunk):
            keep = np.ones((hi - lo, len(gallery_ids)), dtype=bool)
            for i, q in enumerate(chunk):
                if q.exclude_ref and q.ref_id in index:
                    keep[i, index[q.ref_id]] = False
        gt_cols = []
        for q in chunk:
            cols = [index[g] for g in q.ground_truth if g in index]
            if not cols:
                raise UnknownId(f"no ground truth of ({q.ref_id}, {q.mod_id}) in gallery")
            gt_cols.append(cols)
        block_ranks = _counting_ranks(block, gt_cols, id_rank, keep)
        block_subset = None
        if with_subsets:
            block_subset = np.empty(hi - lo, dtype=np.int64)
            for i, q in enumerate(chunk):
                mask = np.zeros(len(gallery_ids), dtype=bool)
                for member in q.subset_members:
                    if member not in index:
                        raise UnknownId(f"subset member {member!r} not in gallery")
                    mask[index[member]] = True
                if q.exclude_ref and q.ref_id in index:
                    mask[index[q.ref_id]] = False
                cols = [c for c in gt_cols[i] if mask[c]]
                if not cols:
                    raise MissingSubset(f"query ({q.ref_id}, {q.mod_id}): ground truth "
                                        "excluded from its own subset")
                block_subset[i] = _counting_ranks(block[i:i + 1], [cols],
                                                  id_rank, mask[None, :])[0]
        block_dump: list[str] = []
        if dump_path is not None:
            for i, q in enumerate(chunk):
                row = block[i]
                cols = np.arange(len(gallery_ids))
                if keep is not None:
                    cols = cols[keep[i]]
                order = cols[np.lexsort((id_rank[cols], -row[cols]))][:dump_top_k]
                block_dump.append(json.dumps({
                    "query": lo + i, "ref": q.ref_id, "mod": q.mod_id,
                    "rank": int(block_ranks[i]),
                    "top": [{"id": gallery_ids[c], "score": float(row[c])} for c in order],
                }, sort_keys=True))
        return block_ranks, block_subset, block_dump

    spans = _blocks(len(queries), block_size)
    pieces = _map_blocks(eval_block, spans, workers)
    ranks = np.concatenate([p[0] for p in pieces])
    subset_ranks = np.concatenate([p[1] for p in pieces]) if with_subsets else None
    dump_lines = [line for p in pieces for line in p[2]]

    metrics: dict[str, float] = {}
    for k in recall_ks:
        metrics[f"r_at_{k}"] = recall_at_k(ranks, k)
    metrics["median_rank"] = median_rank(ranks)
    if with_subsets:
        for k in subset_ks:
            metrics[f"r_subset_at_{k}"] = recall_at_k(subset_ranks, k)
    if all(f"r_at_{k}" in metrics for k in (1, 10, 50)):
        metrics["mean_recall"] = (metrics["r_at_1"] + metrics["r_at_10"]
                                  + metrics["r_at_50"]) / 3.0
    if with_subsets and "r_at_5" in metrics:
        metrics["combined"] = (metrics["r_at_5"] + metrics["r_subset_at_1"]) / 2.0

    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(dump_lines) + ("\n" if dump_lines else ""))
    return MetricReport(label=flavor.value, metrics=metrics, n_queries=len(queries))


# -- dataset-convention aggregates ----------------------------------------------

FASHIONIQ_CATEGORIES = ("dress", "shirt", "toptee")


def aggregate_suite(table: Mapping, convention: str) -> MetricReport:
    """Combine metric cells per dataset convention.

    fashioniq: mean of r_at_10 and r_at_50 over the three categories;
    shoes: mean of r_at_1, r_at_10, r_at_50; cirr: mean of r_at_5 and
    r_subset_at_1.
    """
    if convention == "fashioniq":
        cells: list[float] = []
        flat: dict[str, float] = {}
        for category in FASHIONIQ_CATEGORIES:
            if category not in table:
                raise MissingCell(f"fashioniq aggregate needs category {category!r}")
            for key in ("r_at_10", "r_at_50"):
                if key not in table[category]:
                    raise MissingCell(f"fashioniq aggregate needs {key!r} for {category!r}")
                value = float(table[category][key])
                cells.append(value)
                flat[f"{category}.{key}"] = value
        return MetricReport(label="fashioniq challenge metric", metrics=flat,
                            aggregate=float(np.mean(cells)), convention="fashioniq")
    if convention == "shoes":
        needed = ("r_at_1", "r_at_10", "r_at_50")
        _require_cells(table, needed, "shoes")
        values = {k: float(table[k]) for k in needed}
        return MetricReport(label="shoes average", metrics=values,
                            aggregate=float(np.mean(list(values.values()))),
                            convention="shoes")
    if convention == "cirr":
        needed = ("r_at_5", "r_subset_at_1")
        _require_cells(table, needed, "cirr")
        values = {k: float(table[k]) for k in needed}
        return MetricReport(label="cirr combined", metrics=values,
                            aggregate=float(np.mean(list(values.values()))),
                            convention="cirr")
    raise ConfigError(f"unknown convention {convention!r}; "
                      "expected fashioniq, shoes, or cirr")


def _require_cells(table: Mapping, keys: Iterable[str], convention: str) -> None:
    for key in keys:
        if key not in table:
            raise MissingCell(f"{convention} aggregate needs cell {key!r}")
