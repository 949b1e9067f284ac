"""Task-adaptive point sampling.

A prompt pair is encoded into a task feature, every query point into a
point feature; the two are fused and mapped to an (S, N) positive weight
matrix. Gumbel-softmax over each column turns the weights into a soft
selection of N centers, and the centers are convex combinations of the
input points, so they never leave the input's bounding box. The same
column weights can be pushed through a second cloud to sample it jointly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff
from .autodiff import Node, ParamStore, Tape

WEIGHT_FLOOR = 1e-6


@dataclass
class SamplerConfig:
    d1: int = 64  # task feature width
    d2: int = 64  # point feature width
    n_centers: int = 16
    width: int = 64  # hidden width of the encoder MLPs
    tau_start: float = 1.0
    tau_end: float = 0.1
    alpha: float = 0.5  # coverage weight in the sampling loss

    def __post_init__(self):
        if min(self.d1, self.d2, self.n_centers, self.width) < 1:
            raise ValueError("architecture sizes must be positive")
        if not (self.tau_start >= self.tau_end > 0.0):
            raise ValueError("need tau_start >= tau_end > 0")
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")


SIN_OMEGA = 8.0  # first-layer frequency of the point encoder, radians per unit cube


def init_sampler_params(cfg: SamplerConfig, rng) -> ParamStore:
    store = ParamStore()
    w = cfg.width
    autodiff.init_mlp(store, "task_enc", [3, w, w, cfg.d1], rng)
    autodiff.init_mlp(store, "point_local", [3, w, w], rng)
    # Sine first layer: nearby surface points must land on distinct features,
    # otherwise softmax columns tie between neighbors and can never commit.
    store["point_local.0.w"].value = rng.normal(0.0, SIN_OMEGA, size=(3, w))
    store["point_local.0.b"].value = rng.uniform(-np.pi, np.pi, size=w)
    autodiff.init_affine(store, "point_proj", 2 * w, cfg.d2, rng)
    store.add("select.w", rng.normal(0.0, 0.5, size=(cfg.d1 + cfg.d2, cfg.n_centers)))
    return store


def encode_task(tape: Tape, store: ParamStore, prompt_in_pts, prompt_out_pts) -> Node:
    """Summarize a prompt pair as one width-d1 vector.

    Both clouds pass point-wise through a shared MLP and a row max-pool
    collapses the result, so the feature is invariant to point order.
    """
    pts = np.vstack([np.asarray(prompt_in_pts, dtype=np.float64),
                     np.asarray(prompt_out_pts, dtype=np.float64)])
    h = autodiff.forward_mlp(tape, store, "task_enc", tape.const(pts), final="relu", hidden="tanh")
    return tape.maxpool_rows(h)


def encode_points(tape: Tape, store: ParamStore, pts) -> Node:
    """Per-point features (S, d2) mixing local and global context."""
    x = tape.const(np.asarray(pts, dtype=np.float64))
    h = tape.sin(autodiff.affine(tape, store, "point_local.0", x))
    local = tape.tanh(autodiff.affine(tape, store, "point_local.1", h))
    global_feat = tape.maxpool_rows(local)
    joined = tape.concat_cols(local, tape.tile_rows(global_feat, x.shape[0]))
    return autodiff.affine(tape, store, "point_proj", joined)


def enhance(tape: Tape, task_feature: Node, point_features: Node) -> Node:
    """Prepend the task feature to every point feature row: (S, d1 + d2)."""
    s = point_features.shape[0]
    return tape.concat_cols(tape.tile_rows(task_feature, s), point_features)


def sampling_weights(tape: Tape, store: ParamStore, enhanced: Node) -> Node:
    """Map enhanced features to strictly positive selection weights (S, N).

    softplus plus a 1e-6 floor keeps every weight positive so the log in
    the Gumbel reparameterization is always defined. With all-zero
    parameters every weight equals ln 2 + 1e-6.
    """
    raw = tape.matmul(enhanced, tape.param(store, "select.w"))
    return tape.add_const(tape.softplus(raw), WEIGHT_FLOOR)


def gumbel_noise(rng, shape) -> np.ndarray:
    """Standard Gumbel draws, -log(-log U), with U in the open interval (0, 1)."""
    u = rng.random(shape)
    zero = u == 0.0
    while zero.any():  # rng.random can return exactly 0.0; the log needs (0, 1)
        u[zero] = rng.random(int(zero.sum()))
        zero = u == 0.0
    return -np.log(-np.log(u))


def gumbel_softmax(tape: Tape, weights: Node, noise, tau: float) -> Node:
    """Column-stochastic relaxation softmax((log w + g) / tau) per column."""
    if not tau > 0.0:
        raise ValueError("tau must be positive")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != weights.shape:
        raise ValueError(f"noise shape {noise.shape} must match weights {weights.shape}")
    logits = tape.scale(tape.add_const(tape.log(weights), noise), 1.0 / tau)
    return tape.softmax_cols(logits)


def project_centers(tape: Tape, soft_weights: Node, pts) -> Node:
    """Centers as weight-averaged points: soft^T @ pts, shape (N, 3)."""
    return tape.matmul(tape.transpose(soft_weights), tape.const(np.asarray(pts, dtype=np.float64)))


def tau_for_epoch(epoch: int, total_epochs: int, cfg: SamplerConfig) -> float:
    """Linear anneal from tau_start at epoch 0 to tau_end at the last epoch."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch must be in [0, {total_epochs})")
    if total_epochs == 1:
        return cfg.tau_end
    frac = epoch / (total_epochs - 1)
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


@dataclass
class SampleResult:
    """Everything one sampling pass produces, all on one shared tape."""

    tape: Tape
    task_feature: Node
    soft_query: Node  # (S, N) column-stochastic weights for the query cloud
    soft_prompt: Node
    centers_query: Node  # (N, 3)
    centers_prompt: Node
    tau: float


def sample(store: ParamStore, cfg: SamplerConfig, query_pts, prompt_in_pts, prompt_out_pts,
           tau: float, rng=None, noise=None, tape: Tape | None = None) -> SampleResult:
    """Run the sampler on a query cloud conditioned on one prompt pair.

    rng drives the Gumbel perturbation; passing `noise` (a pair of arrays
    for the query and prompt sides) freezes it instead, and passing
    neither zeroes it, which is the inference mode. All intermediate nodes
    share one tape so a downstream loss can differentiate the whole pass.
    """
    tape = tape if tape is not None else Tape()
    task = encode_task(tape, store, prompt_in_pts, prompt_out_pts)
    outputs = []
    for side, pts in enumerate((query_pts, prompt_in_pts)):
        pts = np.asarray(pts, dtype=np.float64)
        feats = encode_points(tape, store, pts)
        weights = sampling_weights(tape, store, enhance(tape, task, feats))
        if noise is not None:
            g = np.asarray(noise[side], dtype=np.float64)
        elif rng is not None:
            g = gumbel_noise(rng, weights.shape)
        else:
            g = np.zeros(weights.shape)
        soft = gumbel_softmax(tape, weights, g, tau)
        outputs.append((soft, project_centers(tape, soft, pts)))
    (soft_q, centers_q), (soft_p, centers_p) = outputs
    return SampleResult(tape, task, soft_q, soft_p, centers_q, centers_p, tau)


def sample_inference(store: ParamStore, cfg: SamplerConfig, query_pts, prompt_in_pts, prompt_out_pts) -> SampleResult:
    """Deterministic sampling at the final temperature with zero noise."""
    return sample(store, cfg, query_pts, prompt_in_pts, prompt_out_pts, cfg.tau_end, rng=None)


def sampling_loss(tape: Tape, predicted_patches, target_patches, centers: Node, cloud_pts, alpha: float) -> Node:
    """Patch reconstruction error plus alpha times center coverage.

    The first term averages the Chamfer divergence between each predicted
    patch node and its target patch; the second is the Chamfer divergence
    between the centers and the full input cloud.
    """
    predicted = list(predicted_patches)
    targets = np.asarray(target_patches, dtype=np.float64)
    if len(predicted) == 0 or targets.shape[0] != len(predicted):
        raise ValueError("need one target patch per predicted patch")
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    per_patch = [tape.chamfer(p, tape.const(targets[i])) for i, p in enumerate(predicted)]
    recon = tape.mean_all(tape.stack_scalars(per_patch))
    coverage = tape.chamfer(centers, tape.const(np.asarray(cloud_pts, dtype=np.float64)))
    return tape.add(recon, tape.scale(coverage, alpha))


def save_sampler(store: ParamStore, cfg: SamplerConfig, path) -> None:
    """Write the checkpoint plus a JSON sidecar describing the architecture."""
    autodiff.save_params(store, path)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump({"kind": "sampler", **asdict(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sampler(path) -> tuple[ParamStore, SamplerConfig]:
    store = autodiff.load_params(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "sampler":
        raise ValueError(f"checkpoint sidecar is not a sampler description: {meta.get('kind')!r}")
    meta.pop("kind")
    return store, SamplerConfig(**meta)
