"""Stand-in in-context models that consume sampled centers.

Two implementations of the same contract:

* SurrogateModel, a small differentiable network that reconstructs masked
  patches from their centers, the task feature, and a visible-context
  summary. It provides the training signal for the sampler.
* OracleModel, a non-differentiable reference whose output is the ground
  truth corrupted by noise that grows with how badly the centers cover
  the query and how unrelated the prompt is. It supplies pseudo-labels
  for ranking and the final evaluation scores.

Both expose a `differentiable` flag so callers can't mix them up.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff, geometry
from .autodiff import Node, ParamStore, Tape
from .geometry import PatchSet
from .sampler import SamplerConfig, encode_task, sample_inference

# Noise model of the oracle: sigma scales with center coverage error and
# prompt mismatch, both measured by Chamfer divergence against the query.
ORACLE_SIGMA0 = 0.01
ORACLE_CENTER_GAIN = 5.0
ORACLE_PROMPT_GAIN = 1.0

# Per-axis reach of a predicted patch around its anchor. Clouds live in the
# unit cube, so a bounded span means a patch far from its anchor cannot be
# reconstructed at all; placing anchors well is the only way to a low loss,
# which is exactly the pressure the sampler needs.
OFFSET_SPAN = 0.15


@dataclass
class MaskPattern:
    """Which patch slots were hidden out of a set of `total` patches."""

    indices: np.ndarray  # sorted masked patch indices
    total: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("mask indices must be 1-D")
        if len(idx) and ((idx < 0).any() or (idx >= self.total).any()):
            raise ValueError("mask index out of range")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("mask indices must be unique")
        self.indices = np.sort(idx)

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.total, dtype=bool)
        keep[self.indices] = False
        return np.flatnonzero(keep)


def mask_patches(patches: PatchSet, ratio: float, rng) -> tuple[PatchSet, MaskPattern]:
    """Zero out round(ratio * N) randomly chosen patches.

    Returns a copy with masked rows replaced by the zero placeholder, plus
    the pattern needed to undo the bookkeeping. Centers are left intact.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must be in [0, 1]")
    n = patches.n_patches
    count = int(np.rint(ratio * n))
    idx = np.sort(rng.choice(n, size=count, replace=False)) if count else np.empty(0, np.int64)
    hidden = patches.patches.copy()
    hidden[idx] = 0.0
    masked = PatchSet(patches.centers.copy(), hidden, None)
    return masked, MaskPattern(idx, n)


def visible_context(patches: PatchSet, pattern: MaskPattern) -> np.ndarray:
    """Mean coordinate over all points of the visible patches, or zeros."""
    vis = pattern.visible
    if len(vis) == 0:
        return np.zeros(3)
    return patches.patches[vis].reshape(-1, 3).mean(axis=0)


@dataclass
class SurrogateConfig:
    d1: int = 64  # must match the sampler's task feature width
    m_neighbors: int = 16
    width: int = 64

    def __post_init__(self):
        if min(self.d1, self.m_neighbors, self.width) < 1:
            raise ValueError("architecture sizes must be positive")


def init_surrogate_params(cfg: SurrogateConfig, rng) -> ParamStore:
    store = ParamStore()
    autodiff.init_mlp(store, "sur", [3 + cfg.d1 + 3, cfg.width, cfg.m_neighbors * 3], rng)
    store["sur.1.w"].value *= 0.02  # start patches near their centers, inside the cube
    return store


def surrogate_predict(tape: Tape, store: ParamStore, cfg: SurrogateConfig,
                      task_feature: Node, centers: Node, context) -> list[Node]:
    """Predict one (M, 3) patch node per center row.

    Each patch is its center plus an MLP offset field conditioned on the
    task feature and the visible-context summary, so with all-zero
    parameters every predicted patch collapses onto its center. Offsets
    are tanh-squashed to OFFSET_SPAN per axis: the network can shape a
    local patch but cannot relocate it, so anchor placement stays load
    bearing.
    """
    if task_feature.shape != (cfg.d1,):
        raise ValueError(f"task feature must have width {cfg.d1}")
    k = centers.shape[0]
    ctx = np.asarray(context, dtype=np.float64).reshape(3)
    rows = tape.concat_cols(centers, tape.tile_rows(task_feature, k))
    rows = tape.concat_cols(rows, tape.tile_rows(tape.const(ctx), k))
    offsets = tape.scale(tape.tanh(autodiff.forward_mlp(tape, store, "sur", rows)), OFFSET_SPAN)
    patches = []
    for i in range(k):
        offset = tape.reshape(tape.gather_rows(offsets, [i]), (cfg.m_neighbors, 3))
        anchor = tape.reshape(tape.gather_rows(centers, [i]), (3,))
        patches.append(tape.add_row(offset, anchor))
    return patches


class SurrogateModel:
    """Differentiable patch-level in-context model."""

    differentiable = True

    def __init__(self, store: ParamStore, sampler_cfg: SamplerConfig, cfg: SurrogateConfig):
        if cfg.d1 != sampler_cfg.d1:
            raise ValueError("surrogate and sampler disagree on the task feature width")
        self.store = store
        self.sampler_cfg = sampler_cfg
        self.cfg = cfg

    def predict(self, prompt_in_pts, prompt_out_pts, masked_target: PatchSet,
                pattern: MaskPattern, query_centers) -> np.ndarray:
        """Reconstruct the hidden patches; returns (len(mask), M, 3) values."""
        if pattern.total != masked_target.n_patches:
            raise ValueError("mask pattern does not match the patch set")
        tape = Tape()
        task = encode_task(tape, self.store, prompt_in_pts, prompt_out_pts)
        centers = tape.gather_rows(tape.const(np.asarray(query_centers, dtype=np.float64)),
                                   pattern.indices)
        ctx = visible_context(masked_target, pattern)
        nodes = surrogate_predict(tape, self.store, self.cfg, task, centers, ctx)
        return np.stack([n.value for n in nodes]) if nodes else np.empty((0, self.cfg.m_neighbors, 3))


def save_surrogate(store: ParamStore, cfg: SurrogateConfig, path) -> None:
    autodiff.save_params(store, path)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump({"kind": "surrogate", **asdict(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_surrogate(path) -> tuple[ParamStore, SurrogateConfig]:
    store = autodiff.load_params(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "surrogate":
        raise ValueError(f"checkpoint sidecar is not a surrogate description: {meta.get('kind')!r}")
    meta.pop("kind")
    return store, SurrogateConfig(**meta)


def oracle_sigma(query_in_pts, prompt_in_pts, centers) -> float:
    """Noise scale: grows with poor center coverage and prompt mismatch."""
    coverage = geometry.chamfer_distance(centers, query_in_pts)
    mismatch = geometry.chamfer_distance(prompt_in_pts, query_in_pts)
    return ORACLE_SIGMA0 * (1.0 + ORACLE_CENTER_GAIN * coverage + ORACLE_PROMPT_GAIN * mismatch)


def oracle_predict(query_in_pts, query_target_pts, prompt_in_pts, centers, rng) -> np.ndarray:
    """Ground truth plus iid Gaussian noise at the effective sigma."""
    target = np.asarray(query_target_pts, dtype=np.float64)
    sigma = oracle_sigma(query_in_pts, prompt_in_pts, centers)
    return target + rng.normal(0.0, sigma, size=target.shape)


class OracleModel:
    """Cloud-level reference model; not differentiable by construction.

    centers_fn(query_in_pts, prompt) must return the (N, 3) centers the
    downstream task would run with, e.g. farthest-point picks or a frozen
    sampler's projection.
    """

    differentiable = False

    def __init__(self, centers_fn):
        self.centers_fn = centers_fn

    def predict_cloud(self, query_in_pts, query_target_pts, prompt, rng) -> np.ndarray:
        centers = self.centers_fn(query_in_pts, prompt)
        return oracle_predict(query_in_pts, query_target_pts, prompt.input.points, centers, rng)


def fps_centers_fn(n_centers: int):
    """centers_fn baseline: plain farthest-point picks on the query cloud."""

    def fn(query_in_pts, prompt):
        idx = geometry.fps_select(query_in_pts, n_centers)
        return np.asarray(query_in_pts, dtype=np.float64)[idx]

    return fn


def adaptive_centers_fn(store: ParamStore, cfg: SamplerConfig):
    """centers_fn using a trained sampler at inference settings."""

    def fn(query_in_pts, prompt):
        res = sample_inference(store, cfg, query_in_pts, prompt.input.points, prompt.target.points)
        return res.centers_query.value

    return fn
