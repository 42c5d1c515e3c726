"""ROI derivation from tissue-class rasters and tile manifest extraction.

A segmentation raster assigns each pixel one of six tissue classes.  ROIs
are derived from it at native resolution:

    uro     urothelium pixels
    lp      lamina propria pixels
    urolp   their union
    border  pixels of urolp lying where disk dilations of uro and lp
            (radius = 800 um converted to pixels) overlap
    front   border pixels whose 8-connected tissue section contains
            muscle and which lie within the same 800 um of muscle

Dilation is computed by exact Euclidean distance-transform thresholding
on squared integer distances, so results match the brute-force set
definition {p : exists q in S, |p-q| <= r} exactly.  Tile extraction
walks a non-overlapping grid and keeps tiles whose ROI coverage clears a
threshold; the tri-scale plan emits three co-centered tiles per accepted
grid cell, one per magnification level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

LABELS = {
    "background": 0,
    "urothelium": 1,
    "lamina_propria": 2,
    "muscle": 3,
    "blood": 4,
    "damage": 5,
}
N_LABELS = 6
MAGNIFICATIONS = ("2.5x", "10x", "20x", "40x")
ROI_KINDS = ("uro", "lp", "urolp", "border", "front")
DISTANCE_BUDGET_UM = 800.0

# tiling plans: working magnification, tile size at that level
PLANS = {
    "mono10x": ("10x", 256),
    "mono20x": ("20x", 512),
    "tri": ("10x", 128),
}
TRI_LEVELS = ("2.5x", "10x", "40x")
_MAG_VALUE = {"2.5x": 2.5, "10x": 10.0, "20x": 20.0, "40x": 40.0}

_EIGHT = np.ones((3, 3), dtype=np.int64)


def _coerce_mpp(mpp) -> float:
    if isinstance(mpp, (list, tuple)):
        if len(mpp) != 2 or mpp[0] != mpp[1]:
            raise DataError(f"anisotropic pixel size {mpp} is not supported")
        mpp = mpp[0]
    mpp = float(mpp)
    if not (mpp > 0 and np.isfinite(mpp)):
        raise DataError(f"mpp must be a positive finite number, got {mpp}")
    return mpp


@dataclass
class SegMask:
    """Per-pixel tissue classes with physical calibration."""

    labels: np.ndarray          # (H, W) uint8 in [0, 5]
    mpp: float                  # microns per pixel, isotropic
    magnification: str

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise DataError(f"labels must be a non-empty 2-d raster, got shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= N_LABELS:
            raise DataError(f"labels must lie in [0, {N_LABELS - 1}], got range "
                            f"[{self.labels.min()}, {self.labels.max()}]")
        self.labels = self.labels.astype(np.uint8)
        self.mpp = _coerce_mpp(self.mpp)
        if self.magnification not in MAGNIFICATIONS:
            raise DataError(f"magnification {self.magnification!r} not in {MAGNIFICATIONS}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @classmethod
    def load(cls, png_path: str | Path, sidecar_path: str | Path | None = None) -> "SegMask":
        png_path = Path(png_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else png_path.with_suffix(".json")
        img = Image.open(png_path)
        if img.mode != "L":
            raise DataError(f"{png_path}: expected 8-bit single-channel PNG, got mode {img.mode!r}")
        try:
            meta = json.loads(sidecar_path.read_text())
        except FileNotFoundError:
            raise DataError(f"missing sidecar {sidecar_path} for {png_path}") from None
        for key in ("mpp", "magnification"):
            if key not in meta:
                raise DataError(f"{sidecar_path}: sidecar lacks {key!r}")
        return cls(np.asarray(img), meta["mpp"], meta["magnification"])

    def save(self, png_path: str | Path, sidecar_path: str | Path | None = None) -> None:
        png_path = Path(png_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else png_path.with_suffix(".json")
        Image.fromarray(self.labels, mode="L").save(png_path)
        sidecar_path.write_text(json.dumps(
            {"mpp": self.mpp, "magnification": self.magnification}, sort_keys=True))


@dataclass
class RoiMask:
    """Binary membership raster for one ROI kind."""

    mask: np.ndarray            # (H, W) bool
    kind: str
    mpp: float
    magnification: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise DataError(f"mask must be 2-d, got shape {self.mask.shape}")
        if self.kind not in ROI_KINDS:
            raise ConfigError(f"unknown ROI kind {self.kind!r}; choose from {ROI_KINDS}")
        self.mpp = _coerce_mpp(self.mpp)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def save(self, png_path: str | Path) -> None:
        Image.fromarray(np.where(self.mask, 255, 0).astype(np.uint8), mode="L").save(png_path)

    @classmethod
    def load(cls, png_path: str | Path, kind: str, mpp: float, magnification: str) -> "RoiMask":
        img = Image.open(png_path)
        arr = np.asarray(img)
        if img.mode != "L" or not np.isin(arr, (0, 255)).all():
            raise DataError(f"{png_path}: ROI rasters must be 8-bit PNGs with values 0/255")
        return cls(arr == 255, kind, mpp, magnification)


def microns_to_px(distance_um: float, mpp: float) -> int:
    """Physical distance to a pixel radius at the raster's resolution."""
    if distance_um < 0:
        raise ConfigError(f"distance must be nonnegative, got {distance_um}")
    return int(round(distance_um / _coerce_mpp(mpp)))


def _dilate(member: np.ndarray, radius_px: int) -> np.ndarray:
    """{p : exists q in member with |p - q|_2 <= radius}; exact.

    Uses the Euclidean distance transform's nearest-member indices and
    compares squared integer distances, so there is no floating-point
    boundary drift against the brute-force definition.
    """
    if not member.any() or radius_px < 0:
        return np.zeros_like(member, dtype=bool)
    nearest = ndimage.distance_transform_edt(~member, return_distances=False, return_indices=True)
    rows, cols = np.indices(member.shape)
    d2 = (rows - nearest[0]) ** 2 + (cols - nearest[1]) ** 2
    return d2 <= radius_px * radius_px


def tissue_sections(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected components of non-background pixels."""
    return ndimage.label(labels != 0, structure=_EIGHT)


def derive_roi(seg: SegMask, kind: str, budget_um: float = DISTANCE_BUDGET_UM) -> RoiMask:
    """Compute one ROI kind from a segmentation raster.

    The border zone is the overlap of the urothelium and lamina propria
    dilations (disk radius = budget/mpp px) restricted to actual
    urothelium/lamina pixels.  The invasive front further requires the
    pixel's tissue section to contain muscle and the pixel to lie within
    the same distance budget of muscle.
    """
    if kind not in ROI_KINDS:
        raise ConfigError(f"unknown ROI kind {kind!r}; choose from {ROI_KINDS}")
    if budget_um <= 0:
        raise ConfigError(f"distance budget must be positive, got {budget_um}")
    labels = seg.labels
    uro = labels == LABELS["urothelium"]
    lp = labels == LABELS["lamina_propria"]
    if kind == "uro":
        mask = uro
    elif kind == "lp":
        mask = lp
    elif kind == "urolp":
        mask = uro | lp
    else:
        r = microns_to_px(budget_um, seg.mpp)
        border = _dilate(uro, r) & _dilate(lp, r) & (uro | lp)
        if kind == "border":
            mask = border
        else:  # front
            muscle = labels == LABELS["muscle"]
            sections, _ = tissue_sections(labels)
            with_muscle = np.isin(sections, np.unique(sections[muscle]))
            mask = border & with_muscle & _dilate(muscle, r)
    return RoiMask(mask.copy(), kind, seg.mpp, seg.magnification)


@dataclass
class TileEntry:
    level: str
    x: int
    y: int
    size: int
    coverage: float


@dataclass
class TileManifest:
    plan: str
    threshold: float
    entries: list[TileEntry] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "x", "y", "size", "coverage"])
            writer.writerows((e.level, e.x, e.y, e.size, repr(e.coverage)) for e in self.entries)

    @classmethod
    def from_csv(cls, path: str | Path, plan: str = "mono10x", threshold: float = 0.7) -> "TileManifest":
        import csv

        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["level", "x", "y", "size", "coverage"]:
                raise DataError(f"{path}: unexpected manifest header {header}")
            for row in reader:
                entries.append(TileEntry(row[0], int(row[1]), int(row[2]), int(row[3]), float(row[4])))
        return cls(plan, threshold, entries)


def extract_tiles(roi: RoiMask, plan: str, threshold: float = 0.7) -> TileManifest:
    """Walk a non-overlapping grid over the ROI and keep covered tiles.

    Coverage is the exact fraction of ROI pixels in the tile.  The
    tri-scale plan accepts cells on a 128-px grid at 10x and emits three
    co-centered 128-px tiles at 2.5x/10x/40x, with coordinates in each
    level's own pixel space; cells whose 2.5x tile would poke outside
    the low-magnification raster are skipped entirely.
    """
    if plan not in PLANS:
        raise ConfigError(f"unknown tiling plan {plan!r}; choose from {sorted(PLANS)}")
    if not (0.0 <= threshold <= 1.0):
        raise ConfigError(f"coverage threshold must lie in [0, 1], got {threshold}")
    level, size = PLANS[plan]
    if roi.magnification != level:
        raise ConfigError(f"plan {plan!r} works at {level}, but the ROI raster is at "
                          f"{roi.magnification}")
    height, width = roi.shape
    if size > width or size > height:
        raise DataError(f"tile size {size} exceeds the {width}x{height} raster")
    manifest = TileManifest(plan, threshold)
    area = float(size * size)
    for y in range(0, height - size + 1, size):
        for x in range(0, width - size + 1, size):
            coverage = float(roi.mask[y : y + size, x : x + size].sum()) / area
            if coverage < threshold:
                continue
            if plan == "tri":
                manifest.entries.extend(_tri_entries(x, y, size, width, height, coverage))
            else:
                manifest.entries.append(TileEntry(level, x, y, size, coverage))
    return manifest


def _tri_entries(x: int, y: int, size: int, width: int, height: int,
                 coverage: float) -> list[TileEntry]:
    cx, cy = x + size // 2, y + size // 2
    entries = []
    for lvl in TRI_LEVELS:
        ratio = _MAG_VALUE[lvl] / _MAG_VALUE["10x"]
        lx = int(round(cx * ratio)) - size // 2
        ly = int(round(cy * ratio)) - size // 2
        lw, lh = int(width * ratio), int(height * ratio)
        if lx < 0 or ly < 0 or lx + size > lw or ly + size > lh:
            return []                    # the triple stands or falls together
        entries.append(TileEntry(lvl, lx, ly, size, coverage))
    return entries
