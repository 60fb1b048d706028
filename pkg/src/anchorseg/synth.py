"""Procedural defect imagery: textures, injected defects, similarity retrieval.

Every render is a pure function of (category, seed); every defect injection a
pure function of (image, defect type, seed).  A defect's ground-truth mask is
defined as the exact set of pixels the injection changed, so mask and image
can never drift apart.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 64

DEFECT_TYPES = ("hole", "scratch", "spot", "crack_line", "missing_corner")
SIZE_CLASSES = ("small", "medium", "large")
LOCATION_PHRASES = (
    ("upper left", "upper middle", "upper right"),
    ("middle left", "center", "middle right"),
    ("lower left", "lower middle", "lower right"),
)

# concrete entity names grounding the absolute anchor in general-seg prompts
DEFECT_ENTITY = {
    "hole": "the dark hole",
    "scratch": "the bright scratch",
    "spot": "the bright spot",
    "crack_line": "the dark crack",
    "missing_corner": "the missing corner",
}


class UnknownCategoryError(KeyError):
    pass


class EmptyPoolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Texture families
# ---------------------------------------------------------------------------

def _coords():
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return y.astype(np.float64), x.astype(np.float64)


def _stripes(rng):
    y, x = _coords()
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.06, 0.16)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    return 0.55 + 0.2 * wave + rng.normal(0, 0.01, size=wave.shape)


def _checker(rng):
    y, x = _coords()
    cell = int(rng.choice([8, 16]))
    off_y, off_x = rng.integers(0, cell, size=2)
    tile = ((y + off_y) // cell + (x + off_x) // cell) % 2
    lo, hi = rng.uniform(0.3, 0.45), rng.uniform(0.6, 0.75)
    return lo + (hi - lo) * tile + rng.normal(0, 0.015, size=tile.shape)


def _blobs(rng):
    y, x = _coords()
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(rng.integers(4, 8)):
        cy, cx = rng.uniform(0, IMAGE_SIZE, size=2)
        s = rng.uniform(5, 12)
        img += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
    lo, hi = img.min(), img.max()
    return 0.3 + 0.4 * (img - lo) / (hi - lo + 1e-12)


def _bottle(rng):
    y, x = _coords()
    cy = 32 + rng.uniform(-4, 4)
    cx = 32 + rng.uniform(-4, 4)
    radius = rng.uniform(19, 24)
    r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    body = 0.78 - 0.22 * np.clip(r / radius, 0, 1)
    img = np.where(r <= radius, body, 0.18)
    return img + rng.normal(0, 0.01, size=img.shape)


def _mesh(rng):
    y, x = _coords()
    pitch = int(rng.choice([8, 10, 12]))
    off_y, off_x = rng.integers(0, pitch, size=2)
    lines = (((y + off_y) % pitch) < 2) | (((x + off_x) % pitch) < 2)
    img = np.where(lines, 0.32, 0.66)
    return img + rng.normal(0, 0.012, size=img.shape)


def _speckle(rng):
    noise = rng.uniform(0, 1, size=(IMAGE_SIZE + 4, IMAGE_SIZE + 4))
    k = np.ones((5, 5)) / 25.0
    # small box blur via cumulative sums
    smoothed = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for dy in range(5):
        for dx in range(5):
            smoothed += noise[dy:dy + IMAGE_SIZE, dx:dx + IMAGE_SIZE] * k[dy, dx]
    return 0.35 + 0.35 * smoothed


CATEGORIES: dict[str, callable] = {
    "stripes": _stripes,
    "checker": _checker,
    "blobs": _blobs,
    "bottle": _bottle,
    "mesh": _mesh,
    "speckle": _speckle,
}
_CATEGORY_INDEX = {name: i for i, name in enumerate(CATEGORIES)}


def generate_texture_image(category: str, seed: int) -> np.ndarray:
    if category not in CATEGORIES:
        raise UnknownCategoryError(f"unknown texture category {category!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _CATEGORY_INDEX[category]]))
    img = CATEGORIES[category](rng)
    # global brightness/contrast jitter: luminance statistics overlap across
    # categories, so decision thresholds survive the seen->unseen shift
    contrast = rng.uniform(0.85, 1.15)
    brightness = rng.uniform(-0.08, 0.08)
    return np.clip(0.5 + contrast * (img - 0.5) + brightness, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Defect injection
# ---------------------------------------------------------------------------

@dataclass
class DefectMeta:
    defect_type: str
    size_class: str
    location_phrase: str
    category: str


def location_phrase_of(mask: np.ndarray) -> str:
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    row = min(2, int(cy / (IMAGE_SIZE / 3)))
    col = min(2, int(cx / (IMAGE_SIZE / 3)))
    return LOCATION_PHRASES[row][col]


_SIZE_RADIUS = {"small": (2.0, 3.5), "medium": (4.0, 6.0), "large": (7.0, 10.0)}
_SIZE_LENGTH = {"small": (8, 14), "medium": (18, 28), "large": (34, 48)}
_SIZE_CORNER = {"small": (6, 9), "medium": (10, 14), "large": (16, 22)}


def _disk(img, rng, size_class, factor=None, delta=None):
    r = rng.uniform(*_SIZE_RADIUS[size_class])
    cy = rng.uniform(r + 1, IMAGE_SIZE - r - 1)
    cx = rng.uniform(r + 1, IMAGE_SIZE - r - 1)
    y, x = _coords()
    inside = (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    out = img.copy()
    if factor is not None:
        out[inside] = np.clip(out[inside] * factor, 0, 1)
    if delta is not None:
        out[inside] = np.clip(out[inside] + delta, 0, 1)
    return out


def _polyline(img, rng, size_class, value_shift, width=2):
    # width=2 paints a 3-px swath: wide enough for the 50%-coverage area rule
    # on a 4x4 supervision cell, still line-like at 64x64
    length = rng.integers(*_SIZE_LENGTH[size_class])
    y = rng.uniform(6, IMAGE_SIZE - 6)
    x = rng.uniform(6, IMAGE_SIZE - 6)
    angle = rng.uniform(0, 2 * np.pi)
    out = img.copy()
    for _ in range(length):
        angle += rng.normal(0, 0.25)
        y = np.clip(y + np.sin(angle), 1, IMAGE_SIZE - 2)
        x = np.clip(x + np.cos(angle), 1, IMAGE_SIZE - 2)
        iy, ix = int(round(y)), int(round(x))
        lo_y, hi_y = max(0, iy - width + 1), min(IMAGE_SIZE, iy + width)
        lo_x, hi_x = max(0, ix - width + 1), min(IMAGE_SIZE, ix + width)
        out[lo_y:hi_y, lo_x:hi_x] = np.clip(out[lo_y:hi_y, lo_x:hi_x] + value_shift, 0, 1)
    return out


def _missing_corner(img, rng, size_class):
    side = rng.integers(*_SIZE_CORNER[size_class])
    corner = rng.integers(0, 4)
    y, x = _coords()
    yy = y if corner in (0, 1) else IMAGE_SIZE - 1 - y
    xx = x if corner in (0, 2) else IMAGE_SIZE - 1 - x
    tri = (yy + xx) < side
    out = img.copy()
    out[tri] = 0.04
    return out


def inject_defect(img: np.ndarray, defect_type: str, seed: int,
                  size_class: str | None = None) -> tuple[np.ndarray, np.ndarray, DefectMeta]:
    """Returns (defective image, changed-pixel mask, metadata)."""
    if defect_type not in DEFECT_TYPES:
        raise ValueError(f"unknown defect type {defect_type!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7, DEFECT_TYPES.index(defect_type)]))
    size = size_class or str(rng.choice(SIZE_CLASSES))
    for _attempt in range(8):
        if defect_type == "hole":
            out = _disk(img, rng, size, factor=0.22)
        elif defect_type == "spot":
            out = _disk(img, rng, size, delta=0.4)
        elif defect_type == "scratch":
            out = _polyline(img, rng, size, value_shift=0.45)
        elif defect_type == "crack_line":
            out = _polyline(img, rng, size, value_shift=-0.4)
        else:
            out = _missing_corner(img, rng, size)
        mask = out != img
        if mask.any():
            meta = DefectMeta(defect_type=defect_type, size_class=size,
                              location_phrase=location_phrase_of(mask), category="")
            return out, mask, meta
    raise RuntimeError(f"defect {defect_type} produced no changed pixels")  # unreachable in practice


# ---------------------------------------------------------------------------
# Similarity primitives
# ---------------------------------------------------------------------------

SSIM_WINDOW = 8
SSIM_STRIDE = 4
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _window_sums(img: np.ndarray, win: int, stride: int) -> np.ndarray:
    """Sums over all win x win windows on the stride grid, via integral image."""
    integral = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    integral[1:, 1:] = img.cumsum(0).cumsum(1)
    idx = np.arange(0, img.shape[0] - win + 1, stride)
    a = integral[np.ix_(idx, idx)]
    b = integral[np.ix_(idx, idx + win)]
    c = integral[np.ix_(idx + win, idx)]
    d = integral[np.ix_(idx + win, idx + win)]
    return d - b - c + a


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over 8x8 windows, stride 4, dynamic range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: size mismatch {a.shape} vs {b.shape}")
    n = SSIM_WINDOW * SSIM_WINDOW
    s_a = _window_sums(a, SSIM_WINDOW, SSIM_STRIDE)
    s_b = _window_sums(b, SSIM_WINDOW, SSIM_STRIDE)
    s_aa = _window_sums(a * a, SSIM_WINDOW, SSIM_STRIDE)
    s_bb = _window_sums(b * b, SSIM_WINDOW, SSIM_STRIDE)
    s_ab = _window_sums(a * b, SSIM_WINDOW, SSIM_STRIDE)
    mu_a = s_a / n
    mu_b = s_b / n
    var_a = s_aa / n - mu_a * mu_a
    var_b = s_bb / n - mu_b * mu_b
    cov = s_ab / n - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


BHATT_BINS = 32
_BHATT_FLOOR = 1e-12


def bhattacharyya_hist(p: np.ndarray, q: np.ndarray) -> float:
    """-ln of the Bhattacharyya coefficient between normalized histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    coeff = float(np.sqrt(p * q).sum())
    return -np.log(max(coeff, _BHATT_FLOOR))


def intensity_histogram(img: np.ndarray, bins: int = BHATT_BINS) -> np.ndarray:
    counts, _ = np.histogram(np.asarray(img, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def bhattacharyya(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"bhattacharyya: size mismatch {a.shape} vs {b.shape}")
    return bhattacharyya_hist(intensity_histogram(a), intensity_histogram(b))


def reference_score(query: np.ndarray, candidate: np.ndarray) -> float:
    return ssim(query, candidate) - bhattacharyya(query, candidate)


def select_reference(query: np.ndarray, pool: list[np.ndarray]) -> int:
    """Index of the pool image maximizing ssim - bhattacharyya; ties -> lowest."""
    if not pool:
        raise EmptyPoolError("reference pool is empty")
    best_idx = 0
    best = reference_score(query, pool[0])
    for i, img in enumerate(pool[1:], start=1):
        s = reference_score(query, img)
        if s > best:
            best, best_idx = s, i
    return best_idx


# ---------------------------------------------------------------------------
# PGM / float-map I/O
# ---------------------------------------------------------------------------

def write_pgm(path, arr_u8: np.ndarray) -> None:
    arr = np.asarray(arr_u8)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def u8_to_image(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


def write_f64(path, arr: np.ndarray) -> None:
    """Raw little-endian float64 raster; dims come from the PGM twin."""
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64(path, shape) -> np.ndarray:
    with open(path, "rb") as fh:
        return np.frombuffer(fh.read(), dtype="<f8").reshape(shape).copy()


# ---------------------------------------------------------------------------
# Dataset generation and manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    seen_categories: tuple[str, ...] = ("stripes", "checker", "bottle")
    unseen_category: str = "mesh"
    train_per_category: int = 400
    eval_count: int = 100
    anomaly_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for cat in (*self.seen_categories, self.unseen_category):
            if cat not in CATEGORIES:
                raise UnknownCategoryError(cat)
        if self.unseen_category in self.seen_categories:
            raise ValueError("unseen category must be disjoint from the seen set")


@dataclass
class ManifestRecord:
    sample_id: str
    category: str
    split: str  # "train" | "test"
    image_path: str
    mask_path: str
    is_anomalous: bool
    meta: DefectMeta | None = None


def _build_sample(sample_id, category, split, seed, anomalous, rng):
    img = generate_texture_image(category, seed)
    if anomalous:
        dtype = str(rng.choice(DEFECT_TYPES))
        img, mask, meta = inject_defect(img, dtype, seed)
        meta.category = category
    else:
        mask = np.zeros(img.shape, dtype=bool)
        meta = None
    return img, mask, meta


def generate_dataset(root, cfg: DatasetConfig) -> list[ManifestRecord]:
    """Write images/, masks/, manifest.tsv, defects.tsv under root."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    master = np.random.default_rng(np.random.SeedSequence([cfg.seed, 999]))
    plan = []
    for cat in cfg.seen_categories:
        for i in range(cfg.train_per_category):
            plan.append((cat, "train", i))
    for i in range(cfg.eval_count):
        plan.append((cfg.unseen_category, "test", i))
    for cat, split, i in plan:
        sample_seed = int(master.integers(0, 2 ** 31 - 1))
        # test split alternates normal/anomalous for balanced rejection stats
        anomalous = (i % 2 == 0) if split == "test" else bool(master.uniform() < cfg.anomaly_fraction)
        sample_id = f"{cat}-{split}-{i:04d}"
        img, mask, meta = _build_sample(sample_id, cat, split, sample_seed, anomalous, master)
        image_rel = f"images/{sample_id}.pgm"
        mask_rel = f"masks/{sample_id}.pgm"
        write_pgm(root / image_rel, image_to_u8(img))
        write_pgm(root / mask_rel, mask_to_u8(mask))
        records.append(ManifestRecord(sample_id, cat, split, image_rel, mask_rel,
                                      anomalous, meta))
    write_manifest(root / "manifest.tsv", records)
    with open(root / "defects.tsv", "w", encoding="utf-8") as fh:
        for r in records:
            if r.meta is not None:
                fh.write(f"{r.sample_id}\t{r.meta.defect_type}\t{r.meta.size_class}"
                         f"\t{r.meta.location_phrase}\n")
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.sample_id}\t{r.category}\t{r.split}\t{r.image_path}"
                     f"\t{r.mask_path}\t{int(r.is_anomalous)}\n")


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, cat, split, image_rel, mask_rel, ano = line.split("\t")
            records.append(ManifestRecord(sid, cat, split, image_rel, mask_rel, ano == "1"))
    defects = path.parent / "defects.tsv"
    if defects.exists():
        meta_by_id = {}
        with open(defects, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                sid, dtype, size, loc = line.split("\t")
                meta_by_id[sid] = (dtype, size, loc)
        for r in records:
            if r.sample_id in meta_by_id:
                dtype, size, loc = meta_by_id[r.sample_id]
                r.meta = DefectMeta(dtype, size, loc, r.category)
    return records


def load_image(root, record: ManifestRecord) -> np.ndarray:
    return u8_to_image(read_pgm(Path(root) / record.image_path))


def load_mask(root, record: ManifestRecord) -> np.ndarray:
    return read_pgm(Path(root) / record.mask_path) > 127
