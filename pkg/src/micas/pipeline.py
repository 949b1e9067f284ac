"""End-to-end runs: data generation, two-stage training, evaluation.

Training is strictly staged. The sampler (plus its surrogate) trains
first; ranker training refuses to start without the sampler checkpoint,
reads it, and proves on exit that the file bytes never changed. Every
random decision derives from the run seed and stable identifiers, never
from global or wall-clock state, so equal seeds reproduce equal results
regardless of thread count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff, geometry
from .config import RunConfig, config_hash
from .errors import ConfigurationError, TrainingDiverged
from .ranker import (
    CandidateSet,
    RankerConfig,
    TaskNormalizer,
    build_candidate_pool,
    fuse,
    init_ranker_params,
    listwise_rank_loss,
    load_label_cache,
    load_ranker,
    predict_score,
    raw_performance,
    save_label_cache,
    save_ranker,
    select_prompt,
)
from .sampler import (
    SamplerConfig,
    gumbel_noise,
    init_sampler_params,
    load_sampler,
    sample,
    sample_inference,
    sampling_loss,
    save_sampler,
    tau_for_epoch,
)
from .surrogate import (
    OracleModel,
    SurrogateConfig,
    adaptive_centers_fn,
    init_surrogate_params,
    mask_patches,
    oracle_predict,
    save_surrogate,
    surrogate_predict,
    visible_context,
)
from .tasks import TASKS, PromptBank, TaskPair, gen_pair, load_dataset, save_dataset

REPORT_SCHEMA = "micas-report-v1"
VOLATILE_REPORT_KEYS = ("wall_time_seconds", "generated_unix")
SAMPLER_VARIANTS = ("adaptive", "fps")
PROMPT_VARIANTS = ("ranked", "random")
NEAR_HARD_THRESHOLD = 0.9
# One oracle draw is a high-variance sample of a prompt's worth: the noise it
# adds to a 256-point cloud swamps the std differences between candidates.
# Pseudo-labels therefore average this many draws per (query, candidate), a
# Monte-Carlo estimate of expected downstream performance.
LABEL_DRAWS = 16

TRAIN_DATASET = "train.micasds"
TEST_DATASET = "test.micasds"
SAMPLER_CHECKPOINT = "sampler.micasnn"
SURROGATE_CHECKPOINT = "surrogate.micasnn"
RANKER_CHECKPOINT = "ranker.micasnn"
LABEL_CACHE = "labels.micaslc"


def derive_seed(*parts) -> int:
    """Stable u64 from any mix of identifiers; independent of platform."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(d1=cfg.d1, d2=cfg.d2, n_centers=cfg.n_centers, width=cfg.sampler_width,
                         tau_start=cfg.tau_start, tau_end=cfg.tau_end, alpha=cfg.alpha)


def surrogate_config(cfg: RunConfig) -> SurrogateConfig:
    return SurrogateConfig(d1=cfg.d1, m_neighbors=cfg.m_neighbors, width=cfg.surrogate_width)


def ranker_config(cfg: RunConfig) -> RankerConfig:
    return RankerConfig(width=cfg.ranker_width, k_candidates=cfg.k_candidates)


# ---- data ----


def generate_pairs(cfg: RunConfig) -> tuple[list[TaskPair], list[TaskPair]]:
    """Train and test splits covering every (task, level) cell."""
    splits = []
    for split, per_cell in (("train", cfg.train_per_cell), ("test", cfg.test_per_cell)):
        pairs = []
        for task in TASKS:
            for level in range(1, 6):
                for i in range(per_cell):
                    seed = derive_seed(cfg.seed, split, task, level, i)
                    pairs.append(gen_pair(task, level, cfg.s_points, seed))
        splits.append(pairs)
    return splits[0], splits[1]


def write_datasets(cfg: RunConfig, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate_pairs(cfg)
    train_path, test_path = out / TRAIN_DATASET, out / TEST_DATASET
    save_dataset(train, train_path)
    save_dataset(test, test_path)
    return train_path, test_path


# ---- sampler training ----


def item_loss(sampler_store, surrogate_store, s_cfg: SamplerConfig, sur_cfg: SurrogateConfig,
              mask_ratio: float, query: TaskPair, prompt: TaskPair, tau: float,
              noise, mask_rng=None, frozen=None):
    """Build the full per-example training tape and return (result, loss, frozen).

    The forward pass samples centers for the query and prompt inputs,
    projects the query's soft weights through the target cloud to place
    ground-truth patches, hides a mask of them, reconstructs the hidden
    ones with the surrogate, and scores reconstruction plus coverage.

    `frozen` carries (pattern, gt_masked, context) to pin the
    non-differentiable choices; pass the previous return value to rebuild
    a bitwise-identical loss, e.g. for finite-difference probes.
    """
    res = sample(sampler_store, s_cfg, query.input.points, prompt.input.points,
                 prompt.target.points, tau, noise=noise)
    tape = res.tape
    if frozen is None:
        target_centers = res.soft_query.value.T @ query.target.points
        patchset = geometry.knn_patches(query.target.points, target_centers, sur_cfg.m_neighbors)
        masked, pattern = mask_patches(patchset, mask_ratio, mask_rng)
        if len(pattern.indices) == 0:
            raise ConfigurationError("mask ratio leaves no patch hidden; nothing to train on")
        gt_masked = patchset.patches[pattern.indices]
        context = visible_context(masked, pattern)
        frozen = (pattern, gt_masked, context)
    pattern, gt_masked, context = frozen
    masked_centers = tape.gather_rows(res.centers_query, pattern.indices)
    preds = surrogate_predict(tape, surrogate_store, sur_cfg, res.task_feature, masked_centers, context)
    loss = sampling_loss(tape, preds, gt_masked, res.centers_query, query.input.points, s_cfg.alpha)
    return res, loss, frozen


@dataclass
class SamplerTraining:
    sampler_path: Path
    surrogate_path: Path
    history: list


def train_sampler(cfg: RunConfig, train_pairs, out_dir, on_step=None) -> SamplerTraining:
    """Stage one: fit the sampler and surrogate jointly on the train split.

    on_step, when given, is called after every example with a dict of the
    live soft weights, centers, and clouds; it must consume them
    synchronously because buffers are reused.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s_cfg, sur_cfg = sampler_config(cfg), surrogate_config(cfg)
    if int(np.rint(cfg.mask_ratio * cfg.n_centers)) < 1:
        raise ConfigurationError("mask_ratio * n_centers rounds to zero patches")
    sampler_store = init_sampler_params(s_cfg, np.random.default_rng(derive_seed(cfg.seed, "sampler-init")))
    surrogate_store = init_surrogate_params(sur_cfg, np.random.default_rng(derive_seed(cfg.seed, "surrogate-init")))
    bank = PromptBank.from_pairs(train_pairs)
    by_task = {task: [i for i, p in enumerate(train_pairs) if p.task == task] for task in bank.prompts}
    history = []
    for epoch in range(cfg.sampler_epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, "sampler-epoch", epoch))
        tau = tau_for_epoch(epoch, cfg.sampler_epochs, s_cfg)
        order = rng.permutation(len(train_pairs))
        losses = []
        for start in range(0, len(order), cfg.sampler_batch):
            batch = order[start : start + cfg.sampler_batch]
            for item in batch:
                query = train_pairs[item]
                peers = [i for i in by_task[query.task] if i != item] or [item]
                prompt = train_pairs[peers[int(rng.integers(len(peers)))]]
                noise = (gumbel_noise(rng, (query.input.size, cfg.n_centers)),
                         gumbel_noise(rng, (prompt.input.size, cfg.n_centers)))
                res, loss, _ = item_loss(sampler_store, surrogate_store, s_cfg, sur_cfg,
                                         cfg.mask_ratio, query, prompt, tau, noise, mask_rng=rng)
                if not np.isfinite(loss.value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, pair seed {query.seed}")
                losses.append(float(loss.value))
                loss_scale = 1.0 / len(batch)
                res.tape.backward(loss_scale)
                if on_step is not None:
                    on_step({
                        "epoch": epoch,
                        "item": int(item),
                        "tau": tau,
                        "loss": float(loss.value),
                        "soft_query": res.soft_query.value,
                        "soft_prompt": res.soft_prompt.value,
                        "centers_query": res.centers_query.value,
                        "centers_prompt": res.centers_prompt.value,
                        "query_points": query.input.points,
                        "prompt_points": prompt.input.points,
                    })
            lr = autodiff.sgd_cosine_step(sampler_store, epoch, cfg.sampler_epochs,
                                          cfg.sampler_lr0, cfg.sampler_lr_min)
            autodiff.sgd_cosine_step(surrogate_store, epoch, cfg.sampler_epochs,
                                     cfg.sampler_lr0, cfg.sampler_lr_min)
        history.append({"epoch": epoch, "lr": lr, "tau": tau, "mean_loss": float(np.mean(losses))})
    sampler_path, surrogate_path = out / SAMPLER_CHECKPOINT, out / SURROGATE_CHECKPOINT
    save_sampler(sampler_store, s_cfg, sampler_path)
    save_surrogate(surrogate_store, sur_cfg, surrogate_path)
    with open(out / "sampler_train.json", "w", encoding="utf-8") as fh:
        json.dump({"config_sha256": config_hash(cfg), "history": history}, fh, indent=2)
        fh.write("\n")
    return SamplerTraining(sampler_path, surrogate_path, history)


# ---- ranker training ----


def pseudo_label_raw(oracle: OracleModel, query: TaskPair, prompt: TaskPair, rng,
                     draws: int = LABEL_DRAWS) -> float:
    """Mean raw performance of `prompt` on `query` over `draws` oracle calls.

    Centers depend on (query, prompt) but not on the draw, so they are
    computed once; only the oracle noise is redrawn.
    """
    centers = oracle.centers_fn(query.input.points, prompt)
    vals = [raw_performance(query.task,
                            oracle_predict(query.input.points, query.target.points,
                                           prompt.input.points, centers, rng),
                            query) for _ in range(draws)]
    return float(np.mean(vals))


@dataclass
class RankerTraining:
    ranker_path: Path
    labels_path: Path
    history: list
    sampler_sha256: str


def _global_candidate_ids(train_pairs, bank):
    """Map (task, bank position) back to the pair's index in the split."""
    by_task: dict[str, list[int]] = {}
    for i, pair in enumerate(train_pairs):
        by_task.setdefault(pair.task, []).append(i)
    return by_task


def train_ranker(cfg: RunConfig, train_pairs, sampler_path, out_dir) -> RankerTraining:
    """Stage two: fit the scorer against oracle pseudo-labels.

    Requires the stage-one checkpoint; refuses to run without it and
    verifies after training that its bytes are untouched.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampler_path = Path(sampler_path)
    if not sampler_path.exists():
        raise ConfigurationError(
            f"ranker training requires a trained sampler checkpoint at {sampler_path}")
    sha_before = file_sha256(sampler_path)
    sampler_store, s_cfg = load_sampler(sampler_path)
    r_cfg = ranker_config(cfg)
    bank = PromptBank.from_pairs(train_pairs)
    task_globals = _global_candidate_ids(train_pairs, bank)
    oracle = OracleModel(adaptive_centers_fn(sampler_store, s_cfg))

    # Frozen candidate sets, one per query, then oracle raw performances.
    candidates: dict[int, CandidateSet] = {}
    position = {task: {g: k for k, g in enumerate(ids)} for task, ids in task_globals.items()}
    for qid, query in enumerate(train_pairs):
        rng = np.random.default_rng(derive_seed(cfg.seed, "candidates", qid))
        candidates[qid] = build_candidate_pool(bank, query.task, cfg.k_candidates, rng,
                                               exclude=position[query.task][qid])
    labels_path = out / LABEL_CACHE
    raw_cache = load_label_cache(labels_path) if labels_path.exists() else {}
    computed = False
    raws: dict[tuple[int, int], float] = {}
    for qid, query in enumerate(train_pairs):
        for k, prompt in enumerate(candidates[qid].prompts):
            cid = task_globals[query.task][int(candidates[qid].indices[k])]
            key = (qid, cid)
            if key not in raw_cache:
                rng = np.random.default_rng(derive_seed(cfg.seed, "label", qid, cid))
                raw_cache[key] = pseudo_label_raw(oracle, query, prompt, rng)
                computed = True
            raws[key] = raw_cache[key]
    if computed:
        save_label_cache(raw_cache, labels_path)

    normalizer = TaskNormalizer()
    for task in bank.prompts:
        values = [raw for (qid, _), raw in raws.items() if train_pairs[qid].task == task]
        normalizer.fit(task, np.asarray(values))
    labels: dict[int, np.ndarray] = {}
    for qid, query in enumerate(train_pairs):
        row = []
        for k in range(len(candidates[qid].prompts)):
            cid = task_globals[query.task][int(candidates[qid].indices[k])]
            row.append(normalizer.to_label(query.task, raws[(qid, cid)]))
        labels[qid] = np.asarray(row)
        candidates[qid].labels = labels[qid]

    ranker_store = init_ranker_params(r_cfg, np.random.default_rng(derive_seed(cfg.seed, "ranker-init")))
    history = []
    for epoch in range(cfg.ranker_epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, "ranker-epoch", epoch))
        order = rng.permutation(len(train_pairs))
        losses = []
        for start in range(0, len(order), cfg.ranker_batch):
            batch = order[start : start + cfg.ranker_batch]
            for qid in batch:
                query = train_pairs[qid]
                tape = autodiff.Tape()
                scores = [predict_score(tape, ranker_store, r_cfg, fuse(query.input.points, prompt))
                          for prompt in candidates[qid].prompts]
                loss = listwise_rank_loss(tape, scores, labels[qid])
                if not np.isfinite(loss.value):
                    raise TrainingDiverged(f"non-finite rank loss at epoch {epoch}, query {qid}")
                losses.append(float(loss.value))
                tape.backward(1.0 / len(batch))
            autodiff.sgd_cosine_step(ranker_store, epoch, cfg.ranker_epochs,
                                     cfg.ranker_lr0, cfg.ranker_lr_min)
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses))})

    sha_after = file_sha256(sampler_path)
    if sha_after != sha_before:
        raise RuntimeError("sampler checkpoint changed during ranker training; stage contract broken")
    ranker_path = out / RANKER_CHECKPOINT
    save_ranker(ranker_store, r_cfg, normalizer, ranker_path)
    with open(out / "ranker_train.json", "w", encoding="utf-8") as fh:
        json.dump({
            "config_sha256": config_hash(cfg),
            "sampler_sha256": sha_before,
            "sampler_sha256_after": sha_after,
            "history": history,
        }, fh, indent=2)
        fh.write("\n")
    return RankerTraining(ranker_path, labels_path, history, sha_before)


# ---- evaluation ----


def _thread_count(threads: int | None) -> int:
    if threads is not None:
        value = threads
    else:
        raw = os.environ.get("MICAS_THREADS", "1")
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"MICAS_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigurationError("thread count must be >= 1")
    return value


def evaluate(cfg: RunConfig, test_pairs, train_pairs, sampler_art=None, ranker_art=None,
             sampler_variant: str = "adaptive", prompt_variant: str = "ranked",
             threads: int | None = None) -> dict:
    """Score a test split under one (sampling, prompting) ablation cell.

    sampler_art is (store, SamplerConfig) and ranker_art is
    (store, RankerConfig, TaskNormalizer); each may be None when the
    corresponding baseline variant is requested. Results are bitwise
    reproducible for a fixed seed: each query owns an rng seeded by
    run_seed XOR query_id, so the thread count cannot reorder randomness.
    """
    if sampler_variant not in SAMPLER_VARIANTS:
        raise ConfigurationError(f"sampler_variant must be one of {SAMPLER_VARIANTS}")
    if prompt_variant not in PROMPT_VARIANTS:
        raise ConfigurationError(f"prompt_variant must be one of {PROMPT_VARIANTS}")
    if sampler_variant == "adaptive" and sampler_art is None:
        raise ConfigurationError("adaptive sampling requested but no sampler checkpoint given")
    if prompt_variant == "ranked" and ranker_art is None:
        raise ConfigurationError("ranked prompting requested but no ranker checkpoint given")
    bank = PromptBank.from_pairs(train_pairs)
    started = time.time()

    def eval_one(args):
        query_id, query = args
        rng = np.random.default_rng(np.uint64(cfg.seed) ^ np.uint64(query_id))
        cands = build_candidate_pool(bank, query.task, cfg.k_candidates, rng)
        if prompt_variant == "ranked":
            store, r_cfg, _ = ranker_art
            pick = select_prompt(store, r_cfg, query.input.points, cands)
        else:
            pick = int(rng.integers(len(cands.prompts)))
        prompt = cands.prompts[pick]
        soft = None
        if sampler_variant == "adaptive":
            store, s_cfg = sampler_art
            res = sample_inference(store, s_cfg, query.input.points,
                                   prompt.input.points, prompt.target.points)
            centers = res.centers_query.value
            soft = res.soft_query.value
            picked_indices = None
        else:
            picked_indices = geometry.fps_select(query.input.points, cfg.n_centers)
            centers = query.input.points[picked_indices]
        predicted = oracle_predict(query.input.points, query.target.points,
                                   prompt.input.points, centers, rng)
        raw = raw_performance(query.task, predicted, query)
        row = {
            "task": query.task,
            "level": query.level,
            "metric": "miou" if query.task == "partseg" else "cd_x1000",
            "value": raw if query.task == "partseg" else raw * 1000.0,
        }
        if query.task == "denoising" and query.input.noise_mask is not None:
            mask = query.input.noise_mask
            if soft is not None:
                near = soft.max(axis=0) >= NEAR_HARD_THRESHOLD
                rows = soft.argmax(axis=0)[near]
                row["outlier_hits"] = int(mask[rows].sum())
                row["outlier_total"] = int(near.sum())
            else:
                row["outlier_hits"] = int(mask[picked_indices].sum())
                row["outlier_total"] = int(len(picked_indices))
        return row

    jobs = list(enumerate(test_pairs))
    workers = _thread_count(threads)
    if workers == 1:
        rows = [eval_one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(eval_one, jobs))

    cells: dict[str, dict[str, dict]] = {}
    for task in sorted({r["task"] for r in rows}):
        cells[task] = {}
        for level in range(1, 6):
            values = [r["value"] for r in rows if r["task"] == task and r["level"] == level]
            if values:
                cells[task][str(level)] = {
                    "metric": "miou" if task == "partseg" else "cd_x1000",
                    "mean": float(np.mean(values)),
                    "count": len(values),
                    "values": [float(v) for v in values],
                }
    task_means = {
        task: {
            "metric": "miou" if task == "partseg" else "cd_x1000",
            "mean": float(np.mean([v for lvl in levels.values() for v in lvl["values"]])),
        }
        for task, levels in cells.items()
    }
    hits = sum(r.get("outlier_hits", 0) for r in rows)
    total = sum(r.get("outlier_total", 0) for r in rows)
    report = {
        "schema": REPORT_SCHEMA,
        "profile": cfg.profile,
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg),
        "sampler_variant": sampler_variant,
        "prompt_variant": prompt_variant,
        "cells": cells,
        "tasks": task_means,
        "denoising_outlier_centers": {
            "hits": int(hits),
            "total": int(total),
            "rate": (float(hits) / total) if total else None,
        },
        "wall_time_seconds": time.time() - started,
        "generated_unix": time.time(),
    }
    return report


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = out / "report.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "level", "metric", "mean", "count"])
        for task in sorted(report["cells"]):
            for level in sorted(report["cells"][task], key=int):
                cell = report["cells"][task][level]
                writer.writerow([task, level, cell["metric"], f"{cell['mean']:.9g}", cell["count"]])
    return json_path, csv_path


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def report_equal(a, b, tol: float = 1e-12) -> bool:
    """Structural equality of two reports, ignoring wall-clock fields."""

    def walk(x, y):
        if isinstance(x, dict) and isinstance(y, dict):
            keys_x = set(x) - set(VOLATILE_REPORT_KEYS)
            keys_y = set(y) - set(VOLATILE_REPORT_KEYS)
            if keys_x != keys_y:
                return False
            return all(walk(x[k], y[k]) for k in keys_x)
        if isinstance(x, list) and isinstance(y, list):
            return len(x) == len(y) and all(walk(p, q) for p, q in zip(x, y))
        if isinstance(x, (int, float)) and isinstance(y, (int, float)) and not isinstance(x, bool):
            return abs(float(x) - float(y)) <= tol
        return x == y

    return walk(a, b)


# ---- whole runs ----


def full_run(cfg: RunConfig, workdir, sampler_variant: str = "adaptive",
             prompt_variant: str = "ranked", threads: int | None = None) -> dict:
    """gen-data, train-sampler, train-ranker, eval, in one working directory."""
    work = Path(workdir)
    train_path, test_path = write_datasets(cfg, work / "data")
    train_pairs, test_pairs = load_dataset(train_path), load_dataset(test_path)
    trained = train_sampler(cfg, train_pairs, work / "artifacts")
    ranked = train_ranker(cfg, train_pairs, trained.sampler_path, work / "artifacts")
    sampler_art = load_sampler(trained.sampler_path)
    ranker_art = load_ranker(ranked.ranker_path)
    report = evaluate(cfg, test_pairs, train_pairs, sampler_art, ranker_art,
                      sampler_variant, prompt_variant, threads)
    write_report(report, work / "eval")
    return report
