"""
Dataset ingestion, splits, label-budget subsetting, affine augmentation,
and a procedural synthetic dataset for desk-scale verification.

On-disk layout:
    <root>/images/<stem>.png|.pgm
    <root>/labels/<stem>.txt        one "x,y" row per landmark
    <root>/dataset.cfg              YAML descriptor (N, units, spacing rule)
    <root>/splits/{train,val,test}.txt   image stems, one per line

All annotation coordinates are in original-resolution pixels, origin
top-left, x rightward, y downward.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import yaml
from PIL import Image

from landmark_diffusion.heatmaps import LandmarkSet

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SpacingRule:
    rule: str = "none"  # none | fixed_spacing | wrist_pair
    mm_per_px: Optional[float] = None
    wrist_indices: Optional[Tuple[int, int]] = None
    reference_length_mm: float = 50.0

    def validate(self, num_landmarks: int) -> None:
        if self.rule not in ("none", "fixed_spacing", "wrist_pair"):
            raise ValueError(f"unknown spacing rule {self.rule!r}")
        if self.rule == "fixed_spacing" and not self.mm_per_px:
            raise ValueError("fixed_spacing rule requires mm_per_px")
        if self.rule == "wrist_pair":
            if self.wrist_indices is None or len(self.wrist_indices) != 2:
                raise ValueError("wrist_pair rule requires two landmark indices")
            for i in self.wrist_indices:
                if not (0 <= i < num_landmarks):
                    raise ValueError(f"wrist index {i} out of range")


@dataclass
class DatasetEntry:
    stem: str
    image_path: Path
    width: int
    height: int


@dataclass
class DatasetManifest:
    name: str
    num_landmarks: int
    unit_mode: str  # pixels | millimeters
    spacing: SpacingRule
    entries: Dict[str, DatasetEntry]
    splits: Dict[str, List[str]]

    def validate(self) -> None:
        if self.unit_mode not in ("pixels", "millimeters"):
            raise ValueError(f"unknown unit mode {self.unit_mode!r}")
        self.spacing.validate(self.num_landmarks)
        seen: Dict[str, str] = {}
        for split, stems in self.splits.items():
            for stem in stems:
                if stem in seen:
                    raise ValueError(
                        f"stem {stem!r} assigned to both {seen[stem]} and {split}"
                    )
                seen[stem] = split
        missing = set(self.entries) - set(seen)
        if missing:
            raise ValueError(f"entries not covered by any split: {sorted(missing)}")


def _load_gray(path: Path) -> np.ndarray:
    """Decode an image to a single-channel float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)  # luminance average
    return arr


class LandmarkDataset:
    """Validated manifest plus lazy image access at a working resolution."""

    def __init__(self, root: Path | str, working_size: int = 256):
        self.root = Path(root)
        self.working_size = working_size
        self.manifest = _read_manifest(self.root)

    @property
    def num_landmarks(self) -> int:
        return self.manifest.num_landmarks

    def split(self, name: str) -> List[str]:
        return list(self.manifest.splits[name])

    def image(self, stem: str) -> np.ndarray:
        """Original-resolution grayscale image in [0, 1]."""
        return _load_gray(self.manifest.entries[stem].image_path)

    def landmarks(self, stem: str) -> LandmarkSet:
        """Ground truth in original-resolution coordinates."""
        entry = self.manifest.entries[stem]
        points = _read_label_file(
            self.root / "labels" / f"{stem}.txt", self.manifest.num_landmarks
        )
        return LandmarkSet(points=points, image_size=(entry.width, entry.height))

    def working_image(self, stem: str) -> np.ndarray:
        img = self.image(stem)
        s = self.working_size
        return cv2.resize(img, (s, s), interpolation=cv2.INTER_LINEAR)

    def working_sample(self, stem: str) -> Tuple[np.ndarray, LandmarkSet]:
        """(image, landmarks) both at the working resolution."""
        from landmark_diffusion.heatmaps import rescale_landmarks

        entry = self.manifest.entries[stem]
        lms = rescale_landmarks(
            self.landmarks(stem),
            (entry.width, entry.height),
            (self.working_size, self.working_size),
        )
        return self.working_image(stem), lms


def _read_manifest(root: Path) -> DatasetManifest:
    cfg_path = root / "dataset.cfg"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing dataset descriptor: {cfg_path}")
    cfg = yaml.safe_load(cfg_path.read_text())
    spacing_cfg = cfg.get("spacing", {}) or {}
    wrist = spacing_cfg.get("wrist_indices")
    spacing = SpacingRule(
        rule=spacing_cfg.get("rule", "none"),
        mm_per_px=spacing_cfg.get("mm_per_px"),
        wrist_indices=tuple(wrist) if wrist is not None else None,
        reference_length_mm=spacing_cfg.get("reference_length_mm", 50.0),
    )
    num_landmarks = int(cfg["num_landmarks"])

    splits: Dict[str, List[str]] = {}
    for split in SPLIT_NAMES:
        split_path = root / "splits" / f"{split}.txt"
        if not split_path.exists():
            raise FileNotFoundError(f"missing split file: {split_path}")
        splits[split] = [
            line.strip() for line in split_path.read_text().splitlines() if line.strip()
        ]

    entries: Dict[str, DatasetEntry] = {}
    for split, stems in splits.items():
        for stem in stems:
            path = None
            for ext in (".png", ".pgm"):
                candidate = root / "images" / f"{stem}{ext}"
                if candidate.exists():
                    path = candidate
                    break
            if path is None:
                raise FileNotFoundError(
                    f"missing image for stem {stem!r} (split {split}) under {root / 'images'}"
                )
            with Image.open(path) as im:
                width, height = im.size
            entries[stem] = DatasetEntry(stem=stem, image_path=path, width=width, height=height)
            # parse eagerly so malformed labels fail at load time
            _read_label_file(root / "labels" / f"{stem}.txt", num_landmarks)

    manifest = DatasetManifest(
        name=str(cfg.get("name", root.name)),
        num_landmarks=num_landmarks,
        unit_mode=cfg.get("unit_mode", "pixels"),
        spacing=spacing,
        entries=entries,
        splits=splits,
    )
    manifest.validate()
    return manifest


def _read_label_file(path: Path, expected_n: int) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing annotation file: {path}")
    points = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'x,y', got {line!r}")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric coordinate in {line!r}")
    if len(points) != expected_n:
        raise ValueError(
            f"{path}: expected {expected_n} landmarks, found {len(points)}"
        )
    return np.asarray(points, dtype=np.float64)


def load_dataset(root: Path | str, working_size: int = 256) -> LandmarkDataset:
    return LandmarkDataset(root, working_size=working_size)


def subset_labels(stems: Sequence[str], k: int, seed: int) -> List[str]:
    """Seeded sample of k stems without replacement; k == len returns all
    in canonical order. Nesting across k values is not promised."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(stems):
        raise ValueError(f"k={k} exceeds split size {len(stems)}")
    if k == len(stems):
        return list(stems)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(stems), size=k, replace=False)
    return [stems[i] for i in sorted(idx)]


@dataclass
class AugmentationParams:
    rotation_deg: float = 2.0        # sampled in [-r, r]
    scale_delta: float = 0.02        # factor sampled in [1-d, 1+d]
    translate_frac: float = 0.02     # fraction of side, per axis


def sample_affine(
    params: AugmentationParams, size: Tuple[int, int], rng: np.random.Generator
) -> np.ndarray:
    """Random 2x3 affine: rotation about image center, uniform scale,
    translation. Returned matrix maps source (x, y, 1) to target (x, y)."""
    w, h = size
    angle = rng.uniform(-params.rotation_deg, params.rotation_deg)
    scale = 1.0 + rng.uniform(-params.scale_delta, params.scale_delta)
    tx = rng.uniform(-params.translate_frac, params.translate_frac) * w
    ty = rng.uniform(-params.translate_frac, params.translate_frac) * h
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    m = cv2.getRotationMatrix2D(center, angle, scale)
    m[0, 2] += tx
    m[1, 2] += ty
    return m


def apply_affine(
    image: np.ndarray, landmarks: LandmarkSet, matrix: np.ndarray
) -> Tuple[np.ndarray, LandmarkSet]:
    """Apply one affine to pixels (bilinear, border replication) and the
    exact same transform to the landmark coordinates."""
    h, w = image.shape
    warped = cv2.warpAffine(
        image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    ones = np.ones((len(landmarks), 1))
    pts = np.hstack([landmarks.points, ones]) @ matrix.T
    return warped, LandmarkSet(points=pts, image_size=landmarks.image_size, names=landmarks.names)


def augment(
    image: np.ndarray,
    landmarks: LandmarkSet,
    params: AugmentationParams,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, LandmarkSet]:
    h, w = image.shape
    matrix = sample_affine(params, (w, h), rng)
    return apply_affine(image, landmarks, matrix)


@dataclass
class SyntheticDataset:
    """In-memory procedurally generated dataset. Each image is a bright
    "bone" segment with per-landmark blobs of distinct size; landmark
    positions are exact functions of the generative parameters."""

    images: List[np.ndarray]
    landmarks: List[LandmarkSet]
    grid: Tuple[int, int]
    num_landmarks: int

    def __len__(self) -> int:
        return len(self.images)

    def labeled(self) -> List[Tuple[np.ndarray, LandmarkSet]]:
        return list(zip(self.images, self.landmarks))


def _draw_synthetic(
    grid: Tuple[int, int],
    num_landmarks: int,
    rng: np.random.Generator,
    distractors: int = 0,
    noise: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    h, w = grid
    margin = 0.18
    # standardized "view": pose varies but orientation and length stay in a
    # narrow band, the way anatomy does across radiographs of one modality
    base_angle = np.deg2rad(30.0)
    angle = base_angle + rng.uniform(-np.pi / 6.0, np.pi / 6.0)
    length = rng.uniform(0.45, 0.6) * min(h, w)
    direction = np.array([np.cos(angle), np.sin(angle)])
    lo = np.array([margin * w, margin * h])
    hi = np.array([(1 - margin) * w, (1 - margin) * h])
    half = 0.5 * length * direction
    center = rng.uniform(lo + np.abs(half), hi - np.abs(half))
    p0 = center - half
    p1 = center + half
    if num_landmarks == 1:
        points = np.array([(p0 + p1) / 2.0])
    else:
        fracs = np.linspace(0.0, 1.0, num_landmarks)
        points = p0[None, :] + fracs[:, None] * (p1 - p0)[None, :]

    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    img = 0.08 + rng.uniform(0.0, 0.04, size=(h, w))

    # capsule "bone" between the endpoints, brighter toward p0 so the two
    # ends are visually distinguishable
    d = p1 - p0
    length2 = float(d @ d)
    tproj = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / length2
    tclip = np.clip(tproj, 0.0, 1.0)
    cx = p0[0] + tclip * d[0]
    cy = p0[1] + tclip * d[1]
    dist2 = (xs - cx) ** 2 + (ys - cy) ** 2
    line_width = 0.03 * min(h, w) + 1.0
    img += (0.65 - 0.35 * tclip) * np.exp(-dist2 / (2.0 * line_width ** 2))

    # one blob per landmark, size increasing with landmark index
    for i, (x, y) in enumerate(points):
        sigma = 1.2 + 0.6 * i
        img += 0.8 * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma ** 2))

    # optional distractor blobs: same appearance family as the landmark
    # blobs, but placed away from the landmarks so only context (position
    # relative to the bone) separates signal from clutter
    max_sigma = 1.2 + 0.6 * (num_landmarks - 1)
    placed = 0
    for _ in range(40 * distractors):
        if placed == distractors:
            break
        q = rng.uniform([margin * w, margin * h], [(1 - margin) * w, (1 - margin) * h])
        sigma = rng.uniform(1.2, max_sigma)
        if np.linalg.norm(points - q[None, :], axis=1).min() < 4.0 * max_sigma:
            continue
        img += 0.8 * np.exp(-((xs - q[0]) ** 2 + (ys - q[1]) ** 2) / (2.0 * sigma ** 2))
        placed += 1

    if noise > 0.0:
        img += rng.normal(0.0, noise, size=(h, w))

    return np.clip(img, 0.0, 1.0).astype(np.float32), points


def generate_synthetic(
    count: int,
    grid: Tuple[int, int],
    num_landmarks: int,
    seed: int,
    distractors: int = 0,
    noise: float = 0.0,
) -> SyntheticDataset:
    if num_landmarks < 1:
        raise ValueError("num_landmarks must be >= 1")
    h, w = grid
    if h < 8 or w < 8:
        raise ValueError(f"degenerate grid {grid}")
    rng = np.random.default_rng(seed)
    images, landmark_sets = [], []
    for _ in range(count):
        img, points = _draw_synthetic(grid, num_landmarks, rng, distractors, noise)
        images.append(img)
        landmark_sets.append(LandmarkSet(points=points, image_size=(w, h)))
    return SyntheticDataset(
        images=images, landmarks=landmark_sets, grid=grid, num_landmarks=num_landmarks
    )


def write_synthetic_dataset(
    root: Path | str,
    counts: Dict[str, int],
    grid: Tuple[int, int],
    num_landmarks: int,
    seed: int,
    name: str = "synthetic",
    distractors: int = 0,
    noise: float = 0.0,
) -> SyntheticDataset:
    """Generate a synthetic dataset and write it in the on-disk layout."""
    root = Path(root)
    total = sum(counts.get(s, 0) for s in SPLIT_NAMES)
    ds = generate_synthetic(total, grid, num_landmarks, seed, distractors, noise)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)

    idx = 0
    for split in SPLIT_NAMES:
        stems = []
        for _ in range(counts.get(split, 0)):
            stem = f"{split}_{idx:04d}"
            img8 = (ds.images[idx] * 255.0).round().astype(np.uint8)
            Image.fromarray(img8, mode="L").save(root / "images" / f"{stem}.png")
            lines = [f"{x},{y}" for x, y in ds.landmarks[idx].points]
            (root / "labels" / f"{stem}.txt").write_text("\n".join(lines) + "\n")
            stems.append(stem)
            idx += 1
        (root / "splits" / f"{split}.txt").write_text("\n".join(stems) + "\n")

    descriptor = {
        "name": name,
        "num_landmarks": num_landmarks,
        "unit_mode": "pixels",
        "spacing": {"rule": "none"},
    }
    (root / "dataset.cfg").write_text(yaml.safe_dump(descriptor))
    return ds
