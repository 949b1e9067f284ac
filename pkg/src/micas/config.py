"""Run configuration: profiles, config files, and the settings hash.

Config files are flat "key = value" text, one setting per line, with '#'
comments. Unknown keys are rejected rather than ignored so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

from .errors import ConfigurationError


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    # data geometry
    s_points: int = 256
    n_centers: int = 16
    m_neighbors: int = 16
    # architecture
    d1: int = 64
    d2: int = 64
    sampler_width: int = 64
    surrogate_width: int = 64
    ranker_width: int = 64
    # sampling
    tau_start: float = 1.0
    tau_end: float = 0.1
    alpha: float = 0.5
    mask_ratio: float = 0.6
    # sampler optimization
    sampler_epochs: int = 100
    sampler_batch: int = 8
    sampler_lr0: float = 0.3
    sampler_lr_min: float = 0.015
    # ranker optimization
    ranker_epochs: int = 30
    ranker_batch: int = 4
    ranker_lr0: float = 0.2
    ranker_lr_min: float = 0.01
    k_candidates: int = 8
    # dataset sizes, per (task, level) cell
    train_per_cell: int = 6
    test_per_cell: int = 3

    def __post_init__(self):
        if self.profile not in ("desk", "paper"):
            raise ConfigurationError(f"unknown profile {self.profile!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in u64")
        positives = (
            "s_points", "n_centers", "m_neighbors", "d1", "d2", "sampler_width",
            "surrogate_width", "ranker_width", "sampler_epochs", "sampler_batch",
            "ranker_epochs", "ranker_batch", "k_candidates", "train_per_cell", "test_per_cell",
        )
        for name in positives:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_centers > self.s_points or self.m_neighbors > self.s_points:
            raise ConfigurationError("n_centers and m_neighbors cannot exceed s_points")
        if not (self.tau_start >= self.tau_end > 0.0):
            raise ConfigurationError("need tau_start >= tau_end > 0")
        if self.alpha < 0.0 or not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigurationError("alpha must be >= 0 and mask_ratio in [0, 1]")
        for lr0, lr_min in ((self.sampler_lr0, self.sampler_lr_min), (self.ranker_lr0, self.ranker_lr_min)):
            if not (lr0 >= lr_min > 0.0):
                raise ConfigurationError("learning rates must satisfy lr0 >= lr_min > 0")
        if self.k_candidates > self.train_per_cell * 5:
            raise ConfigurationError("k_candidates exceeds the per-task prompt pool")


def desk_profile(**overrides) -> RunConfig:
    """Small sizes that train and evaluate in minutes on one core."""
    return RunConfig(**{"profile": "desk", **overrides})


def paper_profile(**overrides) -> RunConfig:
    """The published operating point; heavy, intended for real hardware."""
    values = dict(
        profile="paper",
        s_points=1024,
        n_centers=64,
        m_neighbors=32,
        sampler_epochs=60,
        sampler_batch=72,
        sampler_lr0=1e-4,
        sampler_lr_min=1e-6,
        ranker_epochs=30,
        ranker_batch=9,
        ranker_lr0=1e-5,
        ranker_lr_min=1e-6,
        k_candidates=8,
        alpha=0.5,
        mask_ratio=0.6,
        train_per_cell=64,
        test_per_cell=16,
    )
    values.update(overrides)
    return RunConfig(**values)


def profile_config(name: str, **overrides) -> RunConfig:
    if name == "desk":
        return desk_profile(**overrides)
    if name == "paper":
        return paper_profile(**overrides)
    raise ConfigurationError(f"unknown profile {name!r}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat key = value lines on top of a base (default desk) profile."""
    values: dict[str, object] = {}
    field_types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in field_types:
            raise ConfigurationError(f"line {lineno}: unknown setting {key!r}")
        values[key] = value
    if "profile" in values:
        named = str(values.pop("profile"))
        if base is None:
            base = profile_config(named)
        elif base.profile != named:
            raise ConfigurationError(
                f"config file names profile {named!r} but {base.profile!r} was requested")
    merged = asdict(base if base is not None else desk_profile())
    for key, value in values.items():
        current = merged[key]
        try:
            if isinstance(current, bool):
                merged[key] = value in ("1", "true", "True")
            elif isinstance(current, int):
                merged[key] = int(str(value))
            elif isinstance(current, float):
                merged[key] = float(str(value))
            else:
                merged[key] = str(value)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key!r}: {value!r}") from exc
    return RunConfig(**merged)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def config_text(cfg: RunConfig) -> str:
    """Canonical flat rendering, stable across runs for hashing."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()
