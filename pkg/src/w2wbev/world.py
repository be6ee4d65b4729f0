"""Seeded synthetic world: paired ground panoramas and aerial rasters.

Each scene is a flat ground plane with a per-scene base color and K
colored cylindrical landmarks at known polar positions (range r meters,
azimuth theta).  The aerial raster is a top-down orthographic view on a
fixed metric grid centered on the scene; the panorama maps azimuth
linearly to columns (column c covers azimuth 2*pi*c/W) with a crude 1/r
projection for landmark height.  Nearer landmarks are drawn last so
occlusion gives the depth head something real to learn.

Azimuth convention: theta = 0 points north (up in the aerial image, column
0 in the panorama) and grows clockwise toward east.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from w2wbev.images import read_ppm, write_ppm

# world geometry (meters)
RANGE_MIN, RANGE_MAX = 8.0, 24.0
FOOTPRINT_MIN, FOOTPRINT_MAX = 2.5, 5.0
AERIAL_HALF_EXTENT = 32.0
SEPARATION_MARGIN = 0.5
# panorama projection: painted height = floor(HEIGHT_SCALE / r) rows
HEIGHT_SCALE = 96.0
SKY_COLOR = np.array([0.70, 0.78, 0.88], dtype=np.float32)

DEFAULT_PANO_SHAPE = (32, 128)
DEFAULT_AERIAL_SIZE = 64


class PackingError(RuntimeError):
    """Landmarks could not be placed without overlap, even after relaxing."""


@dataclass
class Landmark:
    range_m: float
    azimuth: float              # radians in [0, 2*pi)
    footprint: float            # disc radius, meters
    color: np.ndarray           # (3,) float in [0, 1]

    def position(self) -> tuple[float, float]:
        """(east, north) offset in meters."""
        return (self.range_m * np.sin(self.azimuth),
                self.range_m * np.cos(self.azimuth))


@dataclass
class Scene:
    scene_id: int
    seed: int
    landmarks: list[Landmark]
    base_color: np.ndarray


@dataclass
class RenderedPair:
    """A pano/aerial pair sharing one scene identity."""

    pano: np.ndarray            # (H_p, W_p, 3) float32 in [0, 1]
    aerial: np.ndarray          # (H_a, W_a, 3)
    scene_id: int
    roll: int | None = None    # applied column offset, if augmented
    fov: float | None = None   # degrees, if augmented


def generate_scene(seed: int, k: int = 6, scene_id: int = 0) -> Scene:
    """Deterministic scene from a seed; landmark discs never overlap.

    Placement is rejection-sampled; after 1000 failed attempts the
    footprint is progressively relaxed (shrunk) before giving up.
    """
    if k < 3:
        raise ValueError(f"scenes need at least 3 landmarks, got {k}")
    rng = np.random.default_rng(seed)
    base_color = rng.uniform(0.10, 0.90, size=3).astype(np.float32)
    landmarks: list[Landmark] = []
    for _ in range(k):
        placed = False
        for attempt in range(5000):
            r = float(rng.uniform(RANGE_MIN, RANGE_MAX))
            theta = float(rng.uniform(0.0, 2 * np.pi))
            foot = float(rng.uniform(FOOTPRINT_MIN, FOOTPRINT_MAX))
            if attempt >= 1000:          # relax the footprint, keep trying
                foot = max(FOOTPRINT_MIN * 0.5, foot * 0.5)
            color = rng.uniform(0.05, 1.0, size=3).astype(np.float32)
            cand = Landmark(r, theta, foot, color)
            cx, cy = cand.position()
            ok = True
            for other in landmarks:
                ox, oy = other.position()
                min_dist = cand.footprint + other.footprint + SEPARATION_MARGIN
                if (cx - ox) ** 2 + (cy - oy) ** 2 < min_dist ** 2:
                    ok = False
                    break
            if ok:
                landmarks.append(cand)
                placed = True
                break
        if not placed:
            raise PackingError(
                f"could not place landmark {len(landmarks)} of {k} (seed {seed})")
    return Scene(scene_id, seed, landmarks, base_color)


def render_aerial(scene: Scene, size: int = DEFAULT_AERIAL_SIZE) -> np.ndarray:
    """Top-down orthographic raster: base color plus filled landmark discs."""
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = scene.base_color
    mpp = 2 * AERIAL_HALF_EXTENT / size
    cols = (np.arange(size) + 0.5 - size / 2) * mpp       # east coordinate
    rows = (size / 2 - np.arange(size) - 0.5) * mpp       # north coordinate
    east, north = np.meshgrid(cols, rows)
    for lm in sorted(scene.landmarks, key=lambda l: -l.range_m):
        x, y = lm.position()
        mask = (east - x) ** 2 + (north - y) ** 2 <= lm.footprint ** 2
        img[mask] = lm.color
    return img


def render_pano(scene: Scene, shape: tuple[int, int] = DEFAULT_PANO_SHAPE) -> np.ndarray:
    """Equirectangular strip: sky above the horizon, ground color below,
    landmarks painted from the horizon downward with height floor(scale/r)."""
    h, w = shape
    horizon = h // 2
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:horizon] = SKY_COLOR
    img[horizon:] = scene.base_color
    col_azimuth = 2 * np.pi * np.arange(w) / w
    for lm in sorted(scene.landmarks, key=lambda l: -l.range_m):
        half_angle = np.arctan2(lm.footprint, lm.range_m)
        delta = np.abs((col_azimuth - lm.azimuth + np.pi) % (2 * np.pi) - np.pi)
        cols = delta <= half_angle
        height = min(int(HEIGHT_SCALE // lm.range_m), h - horizon)
        if height > 0:
            img[horizon:horizon + height, cols] = lm.color
    return img


def landmark_height_px(range_m: float) -> int:
    """Painted pano height in rows: floor(scale / r)."""
    return int(HEIGHT_SCALE // range_m)


def roll_pano(pano: np.ndarray, offset: int) -> np.ndarray:
    """Circular roll so output column c shows input column (c + offset) mod W."""
    return np.roll(pano, -offset, axis=1)


def crop_fov(pano: np.ndarray, fov_degrees: float) -> np.ndarray:
    """Keep the first round(W * fov / 360) columns."""
    if not 0 < fov_degrees <= 360:
        raise ValueError(f"fov must lie in (0, 360], got {fov_degrees}")
    w = pano.shape[1]
    width = int(round(w * fov_degrees / 360.0))
    return pano[:, :max(width, 1)].copy()


def augment(pano: np.ndarray, fov_degrees: float,
            rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Random circular roll, then FoV crop; fov=360 rolls without cropping."""
    if not 0 < fov_degrees <= 360:
        raise ValueError(f"fov must lie in (0, 360], got {fov_degrees}")
    offset = int(rng.integers(0, pano.shape[1]))
    return crop_fov(roll_pano(pano, offset), fov_degrees), offset


def scene_seed_for(dataset_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the dataset seed."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def make_dataset(out_dir: str, num_scenes: int, fractions: tuple[float, float, float],
                 seed: int, k: int = 6,
                 pano_shape: tuple[int, int] = DEFAULT_PANO_SHAPE,
                 aerial_size: int = DEFAULT_AERIAL_SIZE) -> dict[str, list[int]]:
    """Render ``num_scenes`` scenes into train/val/test directories.

    Splits are disjoint by scene id; everything is deterministic from the
    seed.  Returns {split name: [scene ids]}.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n_train = round(fractions[0] * num_scenes)
    n_val = round(fractions[1] * num_scenes)
    n_test = num_scenes - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"split fractions {fractions} give negative counts")
    bounds = {"train": range(0, n_train),
              "val": range(n_train, n_train + n_val),
              "test": range(n_train + n_val, num_scenes)}
    manifest: dict[str, list[int]] = {}
    for split, ids in bounds.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        manifest[split] = list(ids)
        for sid in ids:
            scene = generate_scene(scene_seed_for(seed, sid), k, scene_id=sid)
            scene_dir = os.path.join(split_dir, f"scene_{sid:05d}")
            os.makedirs(scene_dir, exist_ok=True)
            write_ppm(os.path.join(scene_dir, "pano.ppm"),
                      render_pano(scene, pano_shape))
            write_ppm(os.path.join(scene_dir, "aerial.ppm"),
                      render_aerial(scene, aerial_size))
            _write_meta(os.path.join(scene_dir, "meta.txt"), scene)
    return manifest


def _write_meta(path: str, scene: Scene) -> None:
    lines = [f"id = {scene.scene_id}",
             f"seed = {scene.seed}",
             f"k = {len(scene.landmarks)}",
             "base_color = " + ",".join(f"{v:.6f}" for v in scene.base_color)]
    for i, lm in enumerate(scene.landmarks):
        fields = [f"{lm.range_m:.6f}", f"{lm.azimuth:.6f}", f"{lm.footprint:.6f}",
                  *(f"{v:.6f}" for v in lm.color)]
        lines.append(f"landmark_{i} = " + ",".join(fields))
    lines += ["roll = none", "fov = none"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split(dataset_dir: str, split: str) -> list[RenderedPair]:
    """Load one split's rendered pairs, sorted by scene id."""
    split_dir = os.path.join(dataset_dir, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"dataset split directory not found: {split_dir}")
    pairs = []
    for name in sorted(os.listdir(split_dir)):
        scene_dir = os.path.join(split_dir, name)
        if not name.startswith("scene_") or not os.path.isdir(scene_dir):
            continue
        sid = int(name.split("_", 1)[1])
        pairs.append(RenderedPair(
            pano=read_ppm(os.path.join(scene_dir, "pano.ppm")),
            aerial=read_ppm(os.path.join(scene_dir, "aerial.ppm")),
            scene_id=sid))
    if not pairs:
        raise FileNotFoundError(f"no scenes found under {split_dir}")
    return pairs
