"""Query-specific prompt ranking.

Candidates are scored by a small permutation-invariant network over the
fused (query, prompt input, prompt output) cloud and trained list-wise
against pseudo-labels: oracle performances min-max normalized per task and
oriented so that 1 is always best. Rank weighting follows reciprocal
competition ranks, so confusing the top of the list costs more than
confusing the tail.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff, geometry
from .autodiff import Node, ParamStore, Tape
from .errors import FormatError
from .tasks import TaskPair, PromptBank, decode_part_labels

LABEL_CACHE_MAGIC = b"MICASLC1"

# Raw performance orientation: mean IOU rewards higher values, Chamfer
# divergence rewards lower ones.
HIGHER_IS_BETTER = {"reconstruction": False, "denoising": False, "registration": False, "partseg": True}

SEGMENT_QUERY, SEGMENT_PROMPT_IN, SEGMENT_PROMPT_OUT = 0, 1, 2


@dataclass
class FusedCloud:
    """Query and prompt clouds stacked with per-point segment tags."""

    points: np.ndarray  # (3S, 3)
    segments: np.ndarray  # (3S,) in {0, 1, 2}

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.segments = np.asarray(self.segments, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("fused points must have shape (3S, 3)")
        if self.segments.shape != (self.points.shape[0],):
            raise ValueError("segment tags must align with fused points")
        if self.points.shape[0] % 3 != 0:
            raise ValueError("fused cloud must stack three equal-size clouds")


def fuse(query_in_pts, prompt: TaskPair) -> FusedCloud:
    """Stack query, prompt input, and prompt output in that fixed order."""
    q = geometry.as_points(query_in_pts)
    p_in, p_out = prompt.input.points, prompt.target.points
    if not len(q) == len(p_in) == len(p_out):
        raise ValueError("fusion requires equal point counts in all three clouds")
    points = np.vstack([q, p_in, p_out])
    segments = np.repeat([SEGMENT_QUERY, SEGMENT_PROMPT_IN, SEGMENT_PROMPT_OUT], len(q))
    return FusedCloud(points, segments)


@dataclass
class RankerConfig:
    width: int = 64
    k_candidates: int = 8

    def __post_init__(self):
        if self.width < 1 or self.k_candidates < 1:
            raise ValueError("width and k_candidates must be positive")


def init_ranker_params(cfg: RankerConfig, rng) -> ParamStore:
    store = ParamStore()
    w = cfg.width
    autodiff.init_affine(store, "score.l0", 3, w, rng)
    store.add("score.tags", rng.normal(0.0, 0.1, size=(3, w)))
    autodiff.init_affine(store, "score.l1", w, w, rng)
    autodiff.init_affine(store, "score.h0", w, w, rng)
    autodiff.init_affine(store, "score.h1", w, 1, rng)
    return store


def predict_score(tape: Tape, store: ParamStore, cfg: RankerConfig, fused: FusedCloud) -> Node:
    """Scalar affinity of one prompt for one query.

    Points pass through a shared per-point stack with an additive learned
    embedding per segment tag, a row max-pool collapses them, and a small
    head maps the pooled descriptor to one score. Permuting points within
    a segment cannot change the result. All-zero parameters score 0.
    """
    x = tape.const(fused.points)
    h = autodiff.affine(tape, store, "score.l0", x)
    h = tape.add(h, tape.gather_rows(tape.param(store, "score.tags"), fused.segments))
    h = tape.relu(h)
    h = tape.relu(autodiff.affine(tape, store, "score.l1", h))
    pooled = tape.reshape(tape.maxpool_rows(h), (1, cfg.width))
    head = tape.relu(autodiff.affine(tape, store, "score.h0", pooled))
    return tape.reshape(autodiff.affine(tape, store, "score.h1", head), ())


def competition_ranks(labels) -> np.ndarray:
    """Descending competition ranks: best label gets 1, ties share the min."""
    lab = np.asarray(labels, dtype=np.float64)
    if lab.ndim != 1 or len(lab) < 1:
        raise ValueError("labels must be a non-empty vector")
    return 1 + (lab[None, :] > lab[:, None]).sum(axis=1).astype(np.int64)


def rank_weight_matrix(labels) -> np.ndarray:
    """Coefficients c[i, j] = max(0, 1/rank_i - 1/rank_j)."""
    inv = 1.0 / competition_ranks(labels)
    return np.maximum(0.0, inv[:, None] - inv[None, :])


def listwise_rank_loss(tape: Tape, score_nodes, labels) -> Node:
    """Sum of c[i, j] * log(1 + exp(score_j - score_i)) over ordered pairs.

    Built from tape primitives, so it is differentiable end to end; the
    coefficients depend only on the labels and carry no gradient. Adding a
    constant to every score leaves the loss unchanged.
    """
    scores = list(score_nodes)
    if len(scores) < 2:
        raise ValueError("ranking needs at least 2 candidates")
    coeff = rank_weight_matrix(labels)
    if coeff.shape != (len(scores), len(scores)):
        raise ValueError("labels must match the candidate count")
    s = tape.stack_scalars(scores)
    rows = tape.tile_rows(s, len(scores))  # entry (i, j) = score_j
    diffs = tape.add(rows, tape.scale(tape.transpose(rows), -1.0))
    return tape.weighted_sum(tape.softplus(diffs), coeff)


def raw_performance(task: str, predicted_pts, query: TaskPair) -> float:
    """Task-native quality of a predicted cloud against the ground truth."""
    if task == "partseg":
        if query.target.labels is None:
            raise ValueError("partseg query carries no part labels")
        num_parts = int(query.target.labels.max()) + 1
        decoded = decode_part_labels(predicted_pts, num_parts)
        return geometry.miou(decoded, query.target.labels, num_parts)
    return geometry.chamfer_distance(predicted_pts, query.target.points)


class TaskNormalizer:
    """Per-task min-max bounds frozen once from the training split."""

    def __init__(self, bounds: dict[str, tuple[float, float]] | None = None):
        self.bounds = dict(bounds or {})

    def fit(self, task: str, raw_values) -> None:
        values = np.asarray(raw_values, dtype=np.float64)
        if values.ndim != 1 or len(values) < 1:
            raise ValueError("need at least one raw value to fit bounds")
        lo, hi = float(values.min()), float(values.max())
        if hi - lo <= 1e-12:  # degenerate split: park every label at 0.5
            lo, hi = lo - 0.5, lo + 0.5
        self.bounds[task] = (lo, hi)

    def to_label(self, task: str, raw: float) -> float:
        if task not in self.bounds:
            raise ValueError(f"no normalization bounds for task {task!r}")
        lo, hi = self.bounds[task]
        normalized = geometry.minmax_normalize(raw, lo, hi)
        return normalized if HIGHER_IS_BETTER[task] else 1.0 - normalized

    def to_dict(self) -> dict:
        return {
            task: {"lo": lo, "hi": hi, "higher_is_better": HIGHER_IS_BETTER[task]}
            for task, (lo, hi) in sorted(self.bounds.items())
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskNormalizer":
        return cls({task: (entry["lo"], entry["hi"]) for task, entry in data.items()})


def pseudo_label(model, query: TaskPair, prompt: TaskPair, normalizer: TaskNormalizer, rng) -> float:
    """Oracle-backed supervision in [0, 1], 1 meaning the best prompt."""
    predicted = model.predict_cloud(query.input.points, query.target.points, prompt, rng)
    return normalizer.to_label(query.task, raw_performance(query.task, predicted, query))


@dataclass
class CandidateSet:
    """K prompts drawn for one query, with optional labels and scores."""

    prompts: list[TaskPair]
    indices: np.ndarray  # positions in the bank's per-task list
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None


def build_candidate_pool(bank: PromptBank, task: str, k: int, rng, exclude: int | None = None) -> CandidateSet:
    """Draw k distinct same-task prompts uniformly without replacement.

    `exclude` removes one bank position from the draw, so a training query
    never ranks itself.
    """
    pool = bank.for_task(task)
    positions = np.arange(len(pool)) if exclude is None else np.delete(np.arange(len(pool)), exclude)
    if k < 1 or k > len(positions):
        raise ValueError(f"k must be in [1, {len(positions)}], got {k}")
    idx = rng.choice(positions, size=k, replace=False).astype(np.int64)
    return CandidateSet([pool[i] for i in idx], idx)


def score_candidates(store: ParamStore, cfg: RankerConfig, query_in_pts, candidates: CandidateSet) -> np.ndarray:
    scores = np.empty(len(candidates.prompts))
    for i, prompt in enumerate(candidates.prompts):
        tape = Tape()
        scores[i] = float(predict_score(tape, store, cfg, fuse(query_in_pts, prompt)).value)
    return scores


def select_prompt(store: ParamStore, cfg: RankerConfig, query_in_pts, candidates: CandidateSet) -> int:
    """Index of the highest-scoring candidate, lowest index on ties."""
    if not candidates.prompts:
        raise ValueError("candidate set is empty")
    scores = score_candidates(store, cfg, query_in_pts, candidates)
    candidates.scores = scores
    return int(np.argmax(scores))


def save_label_cache(entries: dict[tuple[int, int], float], path) -> None:
    """Persist pseudo-labels keyed by (query id, candidate id)."""
    parts = [LABEL_CACHE_MAGIC, struct.pack("<I", len(entries))]
    for (query_id, candidate_id), label in entries.items():
        parts.append(struct.pack("<QQd", query_id, candidate_id, label))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_label_cache(path) -> dict[tuple[int, int], float]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:8] != LABEL_CACHE_MAGIC:
        raise FormatError("bad label cache magic")
    (count,) = struct.unpack_from("<I", buf, 8)
    if len(buf) != 12 + 24 * count:
        raise FormatError("label cache length does not match its header")
    entries = {}
    for i in range(count):
        query_id, candidate_id, label = struct.unpack_from("<QQd", buf, 12 + 24 * i)
        entries[(query_id, candidate_id)] = label
    return entries


def save_ranker(store: ParamStore, cfg: RankerConfig, normalizer: TaskNormalizer, path) -> None:
    autodiff.save_params(store, path)
    meta = {
        "kind": "ranker",
        "width": cfg.width,
        "k_candidates": cfg.k_candidates,
        "normalizer": normalizer.to_dict(),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ranker(path) -> tuple[ParamStore, RankerConfig, TaskNormalizer]:
    store = autodiff.load_params(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "ranker":
        raise ValueError(f"checkpoint sidecar is not a ranker description: {meta.get('kind')!r}")
    cfg = RankerConfig(width=meta["width"], k_candidates=meta["k_candidates"])
    return store, cfg, TaskNormalizer.from_dict(meta["normalizer"])
