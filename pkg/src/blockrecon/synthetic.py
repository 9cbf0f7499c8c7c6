"""Seeded synthetic data: identity prototypes, occluded probes, image sets.

Everything here is deterministic given its seed, so benchmarks and the
acceptance suite run with zero external data.  Identities are smooth
random fields (coarse noise bilinearly upsampled) plus a per-identity
channel offset; occlusion is simulated by cropping a window out of the
full map, never by masking pixels, and scale mismatch by 2x average
downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import GalleryItem, ProbeItem
from .feature_maps import FeatureMap, bilinear_resize
from .network import VerificationPair


def _smooth_field(rng: np.random.Generator, width: int, height: int, channels: int,
                  coarse: int = 3, offset_scale: float = 1.0) -> np.ndarray:
    grid = rng.normal(0.0, 1.0, size=(coarse, coarse, channels))
    fine = bilinear_resize(grid, width, height)
    offset = rng.normal(0.0, offset_scale, size=channels)
    return fine + offset[None, None, :]


def _downsample2(data: np.ndarray) -> np.ndarray:
    h, w, c = data.shape
    ho, wo = h // 2, w // 2
    return (
        data[: ho * 2, : wo * 2]
        .reshape(ho, 2, wo, 2, c)
        .mean(axis=(1, 3))
    )


def feature_benchmark(
    n_identities: int = 30,
    shots: int = 3,
    width: int = 8,
    height: int = 8,
    channels: int = 6,
    noise: float = 0.12,
    probe_crop: tuple[int, int] = (5, 6),
    downsample_fraction: float = 0.5,
    probes_per_identity: int = 1,
    seed: int = 7,
) -> tuple[list[GalleryItem], list[ProbeItem]]:
    """Feature-level closed-set benchmark with occluded/downsampled probes.

    Gallery maps are noisy copies of each identity's prototype field.
    Each probe is a cropped view of a fresh noisy copy; a seeded subset
    is additionally 2x average-downsampled to mimic scale mismatch.
    """
    rng = np.random.default_rng(seed)
    gallery: list[GalleryItem] = []
    probes: list[ProbeItem] = []
    for i in range(n_identities):
        pid = f"id{i:03d}"
        proto = _smooth_field(rng, width, height, channels)
        for s in range(shots):
            data = proto + rng.normal(0.0, noise, size=proto.shape)
            gallery.append(
                GalleryItem(
                    person_id=pid,
                    shot_index=s,
                    fmap=FeatureMap(width, height, channels, data, source_id=f"{pid}/shot{s}"),
                )
            )
        for q in range(probes_per_identity):
            data = proto + rng.normal(0.0, noise, size=proto.shape)
            shrink = rng.random() < downsample_fraction
            if shrink:
                cw = ch = 6  # even crop so the 2x pooling stays aligned
            else:
                cw = int(rng.integers(probe_crop[0], probe_crop[1] + 1))
                ch = int(rng.integers(probe_crop[0], probe_crop[1] + 1))
            col = int(rng.integers(0, width - cw + 1))
            row = int(rng.integers(0, height - ch + 1))
            view = data[row : row + ch, col : col + cw]
            if shrink:
                view = _downsample2(view)
            probes.append(
                ProbeItem(
                    probe_id=f"{pid}/probe{q}",
                    true_person_id=pid,
                    fmap=FeatureMap(view.shape[1], view.shape[0], channels, view),
                )
            )
    return gallery, probes


def downsampled_view_benchmark(
    n_identities: int = 8,
    shots: int = 2,
    width: int = 8,
    height: int = 8,
    channels: int = 6,
    noise: float = 0.1,
    seed: int = 17,
) -> tuple[list[GalleryItem], list[ProbeItem]]:
    """Probes are pure 2x downsampled views (no crop): the scale-mismatch case."""
    return feature_benchmark(
        n_identities=n_identities,
        shots=shots,
        width=width,
        height=height,
        channels=channels,
        noise=noise,
        downsample_fraction=1.0,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# image-level data for the trainable extractor

@dataclass
class ImageDataset:
    """Images grouped by identity; identities are smooth random patterns."""

    by_identity: dict[str, list[np.ndarray]]

    def flat(self) -> tuple[list[np.ndarray], list[str]]:
        images, labels = [], []
        for pid in sorted(self.by_identity):
            for img in self.by_identity[pid]:
                images.append(img)
                labels.append(pid)
        return images, labels


def image_dataset(
    n_identities: int = 8,
    shots: int = 6,
    size: int = 16,
    channels: int = 1,
    noise: float = 0.08,
    seed: int = 11,
) -> ImageDataset:
    rng = np.random.default_rng(seed)
    by_id: dict[str, list[np.ndarray]] = {}
    for i in range(n_identities):
        pid = f"id{i:03d}"
        proto = _smooth_field(rng, size, size, channels, coarse=4, offset_scale=0.5)
        by_id[pid] = [
            proto + rng.normal(0.0, noise, size=proto.shape) for _ in range(shots)
        ]
    return ImageDataset(by_identity=by_id)


def verification_pairs(
    dataset: ImageDataset,
    n_pairs: int = 40,
    crop: int = 12,
    seed: int = 13,
) -> list[VerificationPair]:
    """Alternating genuine/impostor pairs; probes are crops, never rescaled."""
    rng = np.random.default_rng(seed)
    ids = sorted(dataset.by_identity)
    pairs: list[VerificationPair] = []
    for n in range(n_pairs):
        genuine = n % 2 == 0
        pid = ids[int(rng.integers(len(ids)))]
        shots = dataset.by_identity[pid]
        probe_full = shots[int(rng.integers(len(shots)))]
        size = probe_full.shape[0]
        c = min(crop, size)
        row = int(rng.integers(0, size - c + 1))
        col = int(rng.integers(0, size - c + 1))
        probe = probe_full[row : row + c, col : col + c]
        if genuine:
            gallery = shots[int(rng.integers(len(shots)))]
            alpha = 1
        else:
            other = ids[int(rng.integers(len(ids) - 1))]
            if other == pid:
                other = ids[(ids.index(other) + 1) % len(ids)]
            gshots = dataset.by_identity[other]
            gallery = gshots[int(rng.integers(len(gshots)))]
            alpha = -1
        pairs.append(VerificationPair(probe=probe, gallery=gallery, alpha=alpha))
    return pairs


def bench_images(
    gallery_size: int = 60,
    probe_count: int = 60,
    size: int = 64,
    probe_size: int = 48,
    channels: int = 3,
    noise: float = 0.05,
    seed: int = 7,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gallery images plus cropped probe views for the timing benchmark."""
    rng = np.random.default_rng(seed)
    gallery = []
    probes = []
    protos = [
        _smooth_field(rng, size, size, channels, coarse=4, offset_scale=0.5)
        for _ in range(gallery_size)
    ]
    for proto in protos:
        gallery.append(proto + rng.normal(0.0, noise, size=proto.shape))
    for i in range(probe_count):
        proto = protos[i % gallery_size]
        full = proto + rng.normal(0.0, noise, size=proto.shape)
        c = min(probe_size, size)
        row = int(rng.integers(0, size - c + 1))
        col = int(rng.integers(0, size - c + 1))
        probes.append(full[row : row + c, col : col + c])
    return gallery, probes


def parse_map_spec(spec: str) -> np.ndarray:
    """Parse a generator spec ``kind:WxHxC[:key=value,...]`` into an array.

    Kinds: ``const`` (key ``value``, default 1.0), ``noise`` (keys
    ``seed``, ``scale``), ``smooth`` (keys ``seed``, ``coarse``).
    """
    parts = spec.split(":")
    if len(parts) < 2:
        raise ValueError(f"malformed synthetic spec {spec!r}")
    kind, dims = parts[0], parts[1]
    try:
        w, h, c = (int(v) for v in dims.lower().split("x"))
    except Exception as exc:
        raise ValueError(f"malformed dimensions in spec {spec!r}") from exc
    if w < 1 or h < 1 or c < 1:
        raise ValueError(f"dimensions must be positive in spec {spec!r}")
    opts: dict[str, float] = {}
    if len(parts) > 2 and parts[2]:
        for kv in parts[2].split(","):
            if "=" not in kv:
                raise ValueError(f"malformed option {kv!r} in spec {spec!r}")
            key, val = kv.split("=", 1)
            opts[key.strip()] = float(val)
    if kind == "const":
        return np.full((h, w, c), opts.get("value", 1.0), dtype=np.float32)
    if kind == "noise":
        rng = np.random.default_rng(int(opts.get("seed", 0)))
        return (opts.get("scale", 1.0) * rng.normal(size=(h, w, c))).astype(np.float32)
    if kind == "smooth":
        rng = np.random.default_rng(int(opts.get("seed", 0)))
        coarse = int(opts.get("coarse", 4))
        return _smooth_field(rng, w, h, c, coarse=coarse).astype(np.float32)
    raise ValueError(f"unknown synthetic kind {kind!r}")
