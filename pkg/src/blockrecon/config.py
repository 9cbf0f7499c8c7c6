"""Runtime configuration with CLI-flag > config-file > default precedence.

The config file is JSON with nested sections mirroring the dotted key
names (``solver.beta`` lives at ``{"solver": {"beta": ...}}``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import FormatError


@dataclass(frozen=True)
class SolverSettings:
    beta: float = 0.4
    tol_kkt: float = 1e-8
    max_iters: int = 1000


@dataclass(frozen=True)
class BlockSettings:
    scales: tuple[int, ...] = (1, 2, 3)
    probe_scales: tuple[int, ...] | None = None  # None: same as scales
    normalization: str = "none"


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.02
    seed: int | None = None  # None: fall back to the global seed
    margin: float | None = None  # None: 2 * feature channels at train time
    epochs: int = 5
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.1


@dataclass(frozen=True)
class Config:
    solver: SolverSettings = field(default_factory=SolverSettings)
    blocks: BlockSettings = field(default_factory=BlockSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    workers: int = 1
    seed: int = 7

    def __post_init__(self):
        if self.solver.beta < 0:
            raise ValueError("solver.beta must be nonnegative")
        if not self.blocks.scales:
            raise ValueError("blocks.scales must be non-empty")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def probe_scales(self) -> tuple[int, ...]:
        return self.blocks.probe_scales or self.blocks.scales

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    def to_dict(self) -> dict:
        return {
            "solver": {
                "beta": self.solver.beta,
                "tol_kkt": self.solver.tol_kkt,
                "max_iters": self.solver.max_iters,
            },
            "blocks": {
                "scales": list(self.blocks.scales),
                "probe_scales": list(self.blocks.probe_scales) if self.blocks.probe_scales else None,
                "normalization": self.blocks.normalization,
            },
            "train": {
                "lr": self.train.lr,
                "seed": self.train.seed,
                "margin": self.train.margin,
                "epochs": self.train.epochs,
                "pretrain_epochs": self.train.pretrain_epochs,
                "pretrain_lr": self.train.pretrain_lr,
            },
            "workers": self.workers,
            "seed": self.seed,
        }


def _scales_tuple(value) -> tuple[int, ...]:
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v]
    scales = tuple(sorted({int(v) for v in value}))
    if not scales or any(s < 1 for s in scales):
        raise ValueError(f"invalid scale set {value!r}")
    return scales


def load_config(path: str | Path | None = None) -> Config:
    """Build a Config from defaults, updated by an optional JSON file."""
    if path is None:
        return Config()
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise FormatError(f"config file not found: {p}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"{p}: invalid JSON ({exc})")
    if not isinstance(raw, dict):
        raise FormatError(f"{p}: config root must be an object")
    try:
        solver = SolverSettings(**{**SolverSettings().__dict__, **raw.get("solver", {})})
        blocks_raw = dict(raw.get("blocks", {}))
        if "scales" in blocks_raw:
            blocks_raw["scales"] = _scales_tuple(blocks_raw["scales"])
        if blocks_raw.get("probe_scales") is not None:
            blocks_raw["probe_scales"] = _scales_tuple(blocks_raw["probe_scales"])
        blocks = BlockSettings(**{**BlockSettings().__dict__, **blocks_raw})
        train = TrainSettings(**{**TrainSettings().__dict__, **raw.get("train", {})})
        cfg = Config(
            solver=solver,
            blocks=blocks,
            train=train,
            workers=int(raw.get("workers", 1)),
            seed=int(raw.get("seed", 7)),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{p}: {exc}")
    return cfg


def apply_overrides(
    cfg: Config,
    beta: float | None = None,
    scales=None,
    seed: int | None = None,
    workers: int | None = None,
) -> Config:
    """Apply CLI-level overrides (highest precedence)."""
    if beta is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, beta=beta))
    if scales is not None:
        cfg = replace(cfg, blocks=replace(cfg.blocks, scales=_scales_tuple(scales)))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if workers is not None:
        cfg = replace(cfg, workers=workers)
    return cfg
