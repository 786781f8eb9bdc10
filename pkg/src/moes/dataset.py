"""Synthetic category-structured saliency data.

Every image contains one blob per attribute kind (bright disc, dark
disc, high-frequency textured disc, elongated bar) plus a few mid-gray
distractors; the sample's category decides WHICH kind is salient, so
the optimal saliency rule genuinely conflicts across categories. The
ground-truth density is a Gaussian centered on the salient blob and
fixations are sampled from it.

The category is made recoverable from the image itself through marker
squares drawn near the left and right edges: bit b of the category
index lights the marker pair in vertical band b. Markers are mirrored
pairs, so horizontal flips preserve the category signature (flipping
must not relabel a sample).

Layout on disk: ``<root>/<category>/<id>.img.pgm`` plus
``<id>.density.pfm`` and ``<id>.fix.pgm``, with a ``manifest.json``
echoing the spec, the sample list, the category names and the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import ConfigurationError, FormatError

BACKGROUND = 0.5
BAR_LEVEL = 0.72
TEXTURE_LEVELS = (0.15, 0.85)
MARKER_SIZE = 7
MARKER_GAP = 3
MARKER_INSET = 2  # columns between the image edge and a marker square

BLOB_KINDS = ("bright", "dark", "texture", "bar")
CATEGORY_NAMES = ("brightest", "darkest", "textured", "elongated")


@dataclass(frozen=True)
class DatasetSpec:
    num_categories: int = 4
    samples_per_category: int = 25
    height: int = 48
    width: int = 64
    blob_radius: tuple[float, float] = (3.0, 4.5)
    distractor_count: tuple[int, int] = (1, 3)
    distractor_radius: tuple[float, float] = (1.5, 2.5)
    bright_level: tuple[float, float] = (0.85, 0.95)
    dark_level: tuple[float, float] = (0.05, 0.15)
    fixation_count: int = 20
    density_sigma: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.num_categories <= len(BLOB_KINDS):
            raise ConfigurationError(
                f"num_categories must be in [2, {len(BLOB_KINDS)}], "
                f"got {self.num_categories}"
            )
        if self.samples_per_category < 1:
            raise ConfigurationError("samples_per_category must be >= 1")
        if self.fixation_count < 1:
            raise ConfigurationError("fixation_count must be >= 1")
        for name in ("blob_radius", "distractor_count", "distractor_radius",
                     "bright_level", "dark_level"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigurationError(f"{name} range {lo}..{hi} is empty")
        if self.density_sigma <= 0:
            raise ConfigurationError("density_sigma must be positive")
        lo_r, lo_c, hi_r, hi_c = self.blob_region()
        if hi_r - lo_r < 4 or hi_c - lo_c < 4:
            raise ConfigurationError(
                f"image {self.height}x{self.width} too small to place blobs "
                "clear of the edge markers"
            )

    def blob_region(self) -> tuple[int, int, int, int]:
        """Inclusive-exclusive (row_lo, col_lo, row_hi, col_hi) for blob centers."""
        r_max = self.blob_radius[1]
        margin_row = int(np.ceil(r_max)) + 2
        margin_col = MARKER_INSET + MARKER_SIZE + int(np.ceil(r_max)) + 1
        return margin_row, margin_col, self.height - margin_row, self.width - margin_col

    def to_json_dict(self) -> dict:
        return {
            "num_categories": self.num_categories,
            "samples_per_category": self.samples_per_category,
            "height": self.height,
            "width": self.width,
            "blob_radius": list(self.blob_radius),
            "distractor_count": list(self.distractor_count),
            "distractor_radius": list(self.distractor_radius),
            "bright_level": list(self.bright_level),
            "dark_level": list(self.dark_level),
            "fixation_count": self.fixation_count,
            "density_sigma": self.density_sigma,
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "DatasetSpec":
        doc = dict(doc)
        known = set(DatasetSpec.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown dataset spec keys: {sorted(unknown)}")
        for name in ("blob_radius", "distractor_count", "distractor_radius",
                     "bright_level", "dark_level"):
            if name in doc:
                doc[name] = tuple(doc[name])
        return DatasetSpec(**doc)


@dataclass
class Blob:
    kind: str  # one of BLOB_KINDS or "distractor"
    row: float
    col: float
    radius: float
    level: float = BACKGROUND
    angle: float = 0.0  # bar orientation


@dataclass
class Scene:
    blobs: list[Blob]


@dataclass
class SaliencySample:
    sample_id: str
    category: int
    image: np.ndarray  # (C, H, W) in [0, 1]
    density: np.ndarray  # (1, H, W), nonnegative, max exactly 1
    fixations: np.ndarray  # (1, H, W) binary, >= 1 positive pixel
    attrs: dict = field(default_factory=dict)  # generator-internal ground truth


def _place_centers(rng: np.random.Generator, spec: DatasetSpec, count: int,
                   min_dist: float,
                   taken: list[tuple[float, float]]) -> list[tuple[float, float]]:
    lo_r, lo_c, hi_r, hi_c = spec.blob_region()
    centers: list[tuple[float, float]] = []
    attempts = 0
    while len(centers) < count:
        attempts += 1
        if attempts > 500 * count:
            raise ConfigurationError(
                f"could not place {count} blobs at least {min_dist:.1f} px apart "
                f"inside a {hi_r - lo_r}x{hi_c - lo_c} region; enlarge the image"
            )
        r = rng.uniform(lo_r, hi_r)
        c = rng.uniform(lo_c, hi_c)
        if all(
            (r - rr) ** 2 + (c - cc) ** 2 >= min_dist**2
            for rr, cc in centers + taken
        ):
            centers.append((r, c))
    return centers


def _sample_scene(rng: np.random.Generator, spec: DatasetSpec) -> Scene:
    kinds = BLOB_KINDS[: max(spec.num_categories, 2)]
    n_distract = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    # rule blobs keep generous separation; the smaller distractors only
    # need to stay clear of what is already placed
    rule_dist = 2.0 * spec.blob_radius[1] + 2.0
    distract_dist = spec.blob_radius[1] + spec.distractor_radius[1] + 1.0
    centers = _place_centers(rng, spec, len(kinds), rule_dist, taken=[])
    centers += _place_centers(rng, spec, n_distract, distract_dist, taken=centers)
    blobs = []
    for kind, (row, col) in zip(kinds, centers):
        radius = rng.uniform(*spec.blob_radius)
        if kind == "bright":
            level = rng.uniform(*spec.bright_level)
        elif kind == "dark":
            level = rng.uniform(*spec.dark_level)
        elif kind == "bar":
            level = BAR_LEVEL
        else:
            level = BACKGROUND  # texture draws its own pattern
        blobs.append(Blob(kind, row, col, radius, level, angle=rng.uniform(0, np.pi)))
    for row, col in centers[len(kinds):]:
        radius = rng.uniform(*spec.distractor_radius)
        level = BACKGROUND + rng.choice([-1.0, 1.0]) * rng.uniform(0.10, 0.20)
        blobs.append(Blob("distractor", row, col, radius, level))
    return Scene(blobs=blobs)


def _render_scene(scene: Scene, spec: DatasetSpec, category: int) -> np.ndarray:
    img = np.full((spec.height, spec.width), BACKGROUND)
    rows = np.arange(spec.height)[:, None]
    cols = np.arange(spec.width)[None, :]
    for blob in scene.blobs:
        dy = rows - blob.row
        dx = cols - blob.col
        if blob.kind == "bar":
            axis = dy * np.sin(blob.angle) + dx * np.cos(blob.angle)
            perp = dy * np.cos(blob.angle) - dx * np.sin(blob.angle)
            mask = (np.abs(axis) <= 2.2 * blob.radius) & (np.abs(perp) <= 0.5 * blob.radius)
            img[mask] = blob.level
        elif blob.kind == "texture":
            mask = dy * dy + dx * dx <= blob.radius**2
            checker = (rows + cols) % 2
            img[mask] = np.where(checker, TEXTURE_LEVELS[1], TEXTURE_LEVELS[0])[mask]
        else:
            mask = dy * dy + dx * dx <= blob.radius**2
            img[mask] = blob.level
    _draw_markers(img, spec, category)
    return img[None, :, :]


def _marker_bands(spec: DatasetSpec) -> int:
    return max(1, int(np.ceil(np.log2(spec.num_categories))))


def _draw_markers(img: np.ndarray, spec: DatasetSpec, category: int) -> None:
    # one mirrored pair of squares per set bit; mirrored placement keeps
    # the signature invariant under horizontal flips
    width = spec.width
    left = slice(MARKER_INSET, MARKER_INSET + MARKER_SIZE)
    right = slice(width - MARKER_INSET - MARKER_SIZE, width - MARKER_INSET)
    for bit in range(_marker_bands(spec)):
        if not (category >> bit) & 1:
            continue
        top = MARKER_GAP + bit * (MARKER_SIZE + MARKER_GAP)
        band = slice(top, top + MARKER_SIZE)
        img[band, left] = 1.0
        img[band, right] = 1.0


def _density_for(scene: Scene, spec: DatasetSpec, category: int) -> np.ndarray:
    target_kind = BLOB_KINDS[category]
    blob = next(b for b in scene.blobs if b.kind == target_kind)
    rows = np.arange(spec.height)[:, None]
    cols = np.arange(spec.width)[None, :]
    d2 = (rows - blob.row) ** 2 + (cols - blob.col) ** 2
    density = np.exp(-d2 / (2.0 * spec.density_sigma**2))
    density /= density.max()
    return density[None, :, :]


def _sample_fixations(rng: np.random.Generator, density: np.ndarray,
                      count: int) -> np.ndarray:
    probs = density[0].reshape(-1)
    probs = probs / probs.sum()
    picks = rng.choice(probs.size, size=count, replace=True, p=probs)
    fix = np.zeros_like(probs)
    fix[picks] = 1.0
    return fix.reshape(density.shape)


def generate(spec: DatasetSpec) -> list[SaliencySample]:
    """Deterministically generate the full dataset for a spec."""
    spec.validate()
    samples = []
    for category in range(spec.num_categories):
        for i in range(spec.samples_per_category):
            rng = np.random.default_rng([spec.seed, category, i])
            scene = _sample_scene(rng, spec)
            image = _render_scene(scene, spec, category)
            density = _density_for(scene, spec, category)
            fixations = _sample_fixations(rng, density, spec.fixation_count)
            salient = next(b for b in scene.blobs if b.kind == BLOB_KINDS[category])
            samples.append(
                SaliencySample(
                    sample_id=f"cat{category}_{i:04d}",
                    category=category,
                    image=image,
                    density=density,
                    fixations=fixations,
                    attrs={
                        "marker_bits": category,
                        "salient_kind": salient.kind,
                        "salient_center": (salient.row, salient.col),
                        "blobs": [
                            (b.kind, b.row, b.col, b.radius) for b in scene.blobs
                        ],
                    },
                )
            )
    return samples


def oracle_category(sample: SaliencySample) -> int:
    """Recover the category from the generator's hidden attributes alone."""
    return int(sample.attrs["marker_bits"])


def density_for_category(sample: SaliencySample, spec: DatasetSpec,
                         category: int) -> np.ndarray:
    """Ground-truth density the same scene would have under another category."""
    blobs = [Blob(kind, row, col, radius) for kind, row, col, radius in sample.attrs["blobs"]]
    return _density_for(Scene(blobs=blobs), spec, category)


# ---------------------------------------------------------------------------
# fold splitting
# ---------------------------------------------------------------------------

@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]


def split_folds(dataset: list[SaliencySample], n_folds: int, seed: int) -> list[Fold]:
    """Category-stratified cross-validation folds.

    Each fold's test share of every category differs from the ideal by
    at most one sample; the remainder is split 90/10 into train/val per
    category (validation gets at least one sample so early stopping has
    something to watch). Uneven category sizes spread the remainder
    over the earlier folds.
    """
    if n_folds < 2:
        raise ConfigurationError("n_folds must be >= 2")
    by_category: dict[int, list[int]] = {}
    for idx, sample in enumerate(dataset):
        by_category.setdefault(sample.category, []).append(idx)
    rng = np.random.default_rng([seed, 0xF01D])
    parts_per_category: dict[int, list[list[int]]] = {}
    for category in sorted(by_category):
        indices = np.array(by_category[category])
        if len(indices) < n_folds:
            raise ConfigurationError(
                f"category {category} has {len(indices)} samples, fewer than "
                f"{n_folds} folds"
            )
        shuffled = indices[rng.permutation(len(indices))]
        parts_per_category[category] = [list(map(int, p)) for p in
                                        np.array_split(shuffled, n_folds)]
    folds = []
    for f in range(n_folds):
        train: list[int] = []
        val: list[int] = []
        test: list[int] = []
        for category in sorted(parts_per_category):
            parts = parts_per_category[category]
            test.extend(parts[f])
            rest: list[int] = []
            for g, part in enumerate(parts):
                if g != f:
                    rest.extend(part)
            n_val = max(1, int(round(0.1 * len(rest))))
            val.extend(rest[:n_val])
            train.extend(rest[n_val:])
        folds.append(Fold(train=train, val=val, test=test))
    return folds


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------

def category_name(index: int) -> str:
    return CATEGORY_NAMES[index] if index < len(CATEGORY_NAMES) else f"category{index}"


def save_dataset(root, samples: list[SaliencySample], spec: DatasetSpec) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": spec.to_json_dict(),
        "seed": spec.seed,
        "categories": [category_name(k) for k in range(spec.num_categories)],
        "samples": [
            {"id": s.sample_id, "category": s.category} for s in samples
        ],
    }
    for sample in samples:
        cat_dir = root / category_name(sample.category)
        cat_dir.mkdir(exist_ok=True)
        netpbm.write_image_pgm(cat_dir / f"{sample.sample_id}.img.pgm", sample.image)
        netpbm.write_density_pfm(cat_dir / f"{sample.sample_id}.density.pfm", sample.density)
        netpbm.write_image_pgm(cat_dir / f"{sample.sample_id}.fix.pgm", sample.fixations)
    (root / "manifest.json").write_bytes(
        json.dumps(manifest, sort_keys=True, indent=2).encode("utf-8") + b"\n"
    )


def load_dataset(root) -> tuple[list[SaliencySample], DatasetSpec]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    spec = DatasetSpec.from_json_dict(manifest["spec"])
    samples = []
    for entry in manifest["samples"]:
        cat_dir = root / category_name(entry["category"])
        sid = entry["id"]
        image = netpbm.read_image_pgm(cat_dir / f"{sid}.img.pgm")
        density = netpbm.read_density_pfm(cat_dir / f"{sid}.density.pfm")
        fixations = netpbm.read_image_pgm(cat_dir / f"{sid}.fix.pgm")
        samples.append(
            SaliencySample(
                sample_id=sid,
                category=int(entry["category"]),
                image=image,
                density=density,
                fixations=(fixations > 0.5).astype(np.float64),
            )
        )
    return samples, spec
