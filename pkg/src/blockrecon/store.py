"""On-disk gallery store: a manifest plus .fmap files, with a block cache."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .config import Config
from .errors import FormatError
from .evaluation import GalleryItem, ProbeItem
from .feature_maps import (
    BlockSet,
    FeatureMap,
    block_set,
    read_feature_map,
    write_feature_map,
)
from .matching import GalleryEntry

MANIFEST_NAME = "manifest.json"


def _require(cond: bool, msg: str):
    if not cond:
        raise FormatError(msg)


@dataclass
class GalleryStore:
    """A directory holding ``manifest.json`` and the referenced .fmap files."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        self._block_cache: dict[tuple, BlockSet] = {}

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def manifest(self) -> list[dict]:
        _require(self.manifest_path.is_file(), f"no {MANIFEST_NAME} in {self.root}")
        try:
            entries = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{self.manifest_path}: invalid JSON ({exc})")
        _require(isinstance(entries, list), "manifest must be a JSON array")
        for e in entries:
            _require(isinstance(e, dict), "manifest entries must be objects")
            _require(
                isinstance(e.get("person_id"), str) and e["person_id"] != "",
                "manifest entry missing person_id",
            )
            _require(isinstance(e.get("shot"), int), "manifest entry missing integer shot")
            _require(isinstance(e.get("fmap"), str), "manifest entry missing fmap path")
        return entries

    def load_items(self) -> list[GalleryItem]:
        items = []
        for e in self.manifest():
            path = self.root / e["fmap"]
            _require(path.is_file(), f"manifest references missing file {path}")
            items.append(
                GalleryItem(
                    person_id=e["person_id"],
                    shot_index=e["shot"],
                    fmap=read_feature_map(path),
                )
            )
        return items

    def load_entries(self, cfg: Config) -> list[GalleryEntry]:
        """Gallery entries with block sets built per the config (cached)."""
        entries = []
        for e in self.manifest():
            path = self.root / e["fmap"]
            _require(path.is_file(), f"manifest references missing file {path}")
            key = (str(path), cfg.blocks.scales, cfg.blocks.normalization)
            bs = self._block_cache.get(key)
            if bs is None:
                bs = block_set(read_feature_map(path), cfg.blocks.scales, cfg.blocks.normalization)
                self._block_cache[key] = bs
            entries.append(
                GalleryEntry(
                    person_id=e["person_id"],
                    shot_index=e["shot"],
                    blocks=bs,
                    source=str(path),
                )
            )
        return entries


def build_store(root: str | Path, items: Iterable[GalleryItem]) -> GalleryStore:
    """Write fmap files plus manifest under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, item in enumerate(items):
        rel = f"maps/{item.person_id}_s{item.shot_index:02d}_{i:04d}.fmap"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_feature_map(path, item.fmap)
        manifest.append({"person_id": item.person_id, "shot": item.shot_index, "fmap": rel})
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return GalleryStore(root=root)


def write_trial_spec(path: str | Path, probes: Sequence[ProbeItem], probe_dir: str = "probes") -> None:
    """Write probe fmaps and the trial spec JSON next to them."""
    path = Path(path)
    base = path.parent
    entries = []
    for i, p in enumerate(probes):
        rel = f"{probe_dir}/{i:04d}.fmap"
        fp = base / rel
        fp.parent.mkdir(parents=True, exist_ok=True)
        write_feature_map(fp, p.fmap)
        entries.append(
            {"probe_id": p.probe_id, "true_person_id": p.true_person_id, "fmap": rel}
        )
    path.write_text(json.dumps({"probes": entries}, indent=2) + "\n")


def read_trial_spec(path: str | Path) -> list[ProbeItem]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"trial spec not found: {path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})")
    _require(isinstance(raw, dict) and isinstance(raw.get("probes"), list),
             f"{path}: trial spec must carry a 'probes' array")
    probes = []
    for e in raw["probes"]:
        _require(isinstance(e, dict), "probe entries must be objects")
        for key in ("probe_id", "true_person_id", "fmap"):
            _require(isinstance(e.get(key), str), f"probe entry missing {key}")
        fp = path.parent / e["fmap"]
        _require(fp.is_file(), f"trial spec references missing file {fp}")
        probes.append(
            ProbeItem(
                probe_id=e["probe_id"],
                true_person_id=e["true_person_id"],
                fmap=read_feature_map(fp),
            )
        )
    _require(len(probes) > 0, f"{path}: no probes listed")
    return probes
