"""Synthetic two-factor image data, style corruptions, IDX file io, Gaussian
mixtures, and out-of-distribution split plans.

The built-in dataset draws one of ten procedural glyphs (content) and passes
it through one of six corruption transforms (style), with per-sample jitter so
content classes are nontrivial but learnable at desk scale.  Style labels ride
along for evaluation only; training code paths never see them.

Styles follow the corruption set {identity, stripe, zigzag, edge, tiny,
bright}; the edge transform is a normalized Sobel magnitude.  A colored
variant tints the grayscale glyph into three channels with one of
{red, green, blue, yellow, cyan, magenta}.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractViolation
from .imaging import write_png
from .rng import Rng

STYLE_NAMES = ("identity", "stripe", "zigzag", "edge", "tiny", "bright")
COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta")
_COLOR_MIX = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "cyan": (0.0, 1.0, 1.0), "magenta": (1.0, 0.0, 1.0),
}
GLYPH_NAMES = ("hbar", "vbar", "cross", "saltire", "ring",
               "disc", "frame", "triangle", "equals", "dots")


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncated payload, wrong kind)."""


# -- glyph rendering -----------------------------------------------------------


def _grid(size: int):
    r = np.arange(size, dtype=np.float64)
    return np.meshgrid(r, r, indexing="ij")


def draw_glyph(glyph_id: int, size: int) -> np.ndarray:
    """Render glyph `glyph_id` on a (size, size) canvas, intensities in {0, 0.9}."""
    if not 0 <= glyph_id < len(GLYPH_NAMES):
        raise ContractViolation(f"glyph id {glyph_id} out of range")
    rr, cc = _grid(size)
    mid = (size - 1) / 2.0
    t = max(1.5, size / 11.0)
    radius = size * 0.32
    mask = np.zeros((size, size), dtype=bool)
    name = GLYPH_NAMES[glyph_id]
    if name == "hbar":
        mask = np.abs(rr - mid) <= t
    elif name == "vbar":
        mask = np.abs(cc - mid) <= t
    elif name == "cross":
        mask = (np.abs(rr - mid) <= t) | (np.abs(cc - mid) <= t)
    elif name == "saltire":
        mask = (np.abs(rr - cc) <= t) | (np.abs(rr + cc - (size - 1)) <= t)
    elif name == "ring":
        dist = np.hypot(rr - mid, cc - mid)
        mask = np.abs(dist - radius) <= t * 0.8
    elif name == "disc":
        mask = np.hypot(rr - mid, cc - mid) <= radius * 0.85
    elif name == "frame":
        margin = size * 0.2
        inside = ((rr >= margin) & (rr <= size - 1 - margin)
                  & (cc >= margin) & (cc <= size - 1 - margin))
        deeper = ((rr >= margin + t) & (rr <= size - 1 - margin - t)
                  & (cc >= margin + t) & (cc <= size - 1 - margin - t))
        mask = inside & ~deeper
    elif name == "triangle":
        top, bottom = size * 0.2, size * 0.8
        half = (rr - top) * 0.6
        mask = (rr >= top) & (rr <= bottom) & (np.abs(cc - mid) <= half)
    elif name == "equals":
        mask = (np.abs(rr - size * 0.35) <= t * 0.9) | (np.abs(rr - size * 0.65) <= t * 0.9)
    elif name == "dots":
        for dr in (size * 0.3, size * 0.7):
            for dc in (size * 0.3, size * 0.7):
                mask |= np.hypot(rr - dr, cc - dc) <= t * 1.4
    return np.where(mask, 0.9, 0.0)


# -- style transforms ----------------------------------------------------------


def _sobel_magnitude(im: np.ndarray) -> np.ndarray:
    p = np.pad(im, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:])
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # peaks at rounding-noise level mean a flat image, not an edge
    return mag / peak if peak > 1e-9 else np.zeros_like(mag)


def stripe_mask(size: int, phase: int = 0) -> np.ndarray:
    """Rows kept by the stripe style: alternating 2-on / 2-off bands."""
    r = (np.arange(size) + phase) // 2 % 2 == 0
    return r


def apply_style(image: np.ndarray, style_id: int, rng: Rng | None = None) -> np.ndarray:
    """Apply one corruption transform; maps [0,1] images to [0,1] images.

    With an rng, the periodic styles draw a phase offset; without one the
    canonical zero-phase pattern is used.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractViolation("apply_style expects a single-channel (H, W) image")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractViolation("pixel values must lie in [0, 1]")
    if not 0 <= style_id < len(STYLE_NAMES):
        raise ContractViolation(f"unknown style id {style_id}")
    name = STYLE_NAMES[style_id]
    size = image.shape[0]
    if name == "identity":
        return image.copy()
    if name == "stripe":
        phase = int(rng.integers(0, 4)) if rng is not None else 0
        out = image.copy()
        out[~stripe_mask(size, phase)] = 0.0
        return out
    if name == "zigzag":
        phase = int(rng.integers(0, 8)) if rng is not None else 0
        rr, cc = _grid(size)
        overlay = ((rr + cc + phase) % 8) < 2
        return np.maximum(image, 0.7 * overlay)
    if name == "edge":
        return _sobel_magnitude(image)
    if name == "tiny":
        h2 = size // 2
        pooled = image[:2 * h2, :2 * h2].reshape(h2, 2, h2, 2).mean(axis=(1, 3))
        out = np.zeros_like(image)
        off = (size - h2) // 2
        out[off:off + h2, off:off + h2] = pooled
        return out
    # bright: affine lift toward 1
    return 0.5 + 0.5 * image


def tint_color(image: np.ndarray, color_id: int) -> np.ndarray:
    """Tint a grayscale (H, W) image into (3, H, W) with a named color."""
    if not 0 <= color_id < len(COLOR_NAMES):
        raise ContractViolation(f"unknown color id {color_id}")
    mix = _COLOR_MIX[COLOR_NAMES[color_id]]
    return np.stack([image * m for m in mix])


# -- labeled image sets --------------------------------------------------------


@dataclass
class LabeledImageSet:
    """Images with content labels and evaluation-only style labels."""
    images: np.ndarray          # (n, C, H, W), values in [0, 1]
    content_labels: np.ndarray  # (n,) int
    style_labels: np.ndarray    # (n,) int
    contingency: np.ndarray = field(default=None)  # (p, m) per-cell counts

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.content_labels = np.asarray(self.content_labels, dtype=np.int64)
        self.style_labels = np.asarray(self.style_labels, dtype=np.int64)
        n = self.images.shape[0]
        if self.images.ndim != 4:
            raise ContractViolation("images must be (n, C, H, W)")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ContractViolation("pixel values must lie in [0, 1]")
        if self.content_labels.shape != (n,) or self.style_labels.shape != (n,):
            raise ContractViolation("label arrays must have length n")
        expected = self._count_cells()
        if self.contingency is None:
            self.contingency = expected
        elif not np.array_equal(np.asarray(self.contingency), expected):
            raise ContractViolation("contingency table disagrees with labels")

    def _count_cells(self) -> np.ndarray:
        p = int(self.content_labels.max()) + 1 if self.content_labels.size else 0
        m = int(self.style_labels.max()) + 1 if self.style_labels.size else 0
        table = np.zeros((p, m), dtype=np.int64)
        np.add.at(table, (self.content_labels, self.style_labels), 1)
        return table

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def n_classes(self) -> int:
        return self.contingency.shape[0]

    @property
    def n_styles(self) -> int:
        return self.contingency.shape[1]

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices)
        return LabeledImageSet(self.images[indices],
                               self.content_labels[indices],
                               self.style_labels[indices])

    def data_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(self.content_labels.astype("<i8").tobytes())
        h.update(self.style_labels.astype("<i8").tobytes())
        return h.hexdigest()


def gen_styled_shapes(p: int = 10, m: int = 6, n_per_cell: int = 50,
                      image_size: int = 28, seed: int = 0,
                      style_kind: str = "transform") -> LabeledImageSet:
    """Balanced synthetic dataset: p glyph classes under m styles.

    ``style_kind="transform"`` applies the grayscale corruption transforms;
    ``"color"`` tints a clean glyph with one of the named colors (3 channels).
    Samples are ordered by (content, style, index) and fully determined by the
    seed: each (content, style) cell draws from its own child stream.
    """
    if not 1 <= p <= len(GLYPH_NAMES):
        raise ContractViolation(f"p must be in [1, {len(GLYPH_NAMES)}]")
    if not 1 <= m <= len(STYLE_NAMES):
        raise ContractViolation(f"m must be in [1, {len(STYLE_NAMES)}]")
    if image_size not in (16, 28):
        raise ContractViolation("image_size must be 16 or 28")
    if style_kind not in ("transform", "color"):
        raise ContractViolation("style_kind must be 'transform' or 'color'")
    root = Rng(seed)
    images, contents, styles = [], [], []
    for c in range(p):
        base = draw_glyph(c, image_size)
        for s in range(m):
            cell_rng = root.child("cell", c, s)
            for _ in range(n_per_cell):
                dr, dc = cell_rng.integers(-1, 2), cell_rng.integers(-1, 2)
                jittered = np.roll(np.roll(base, int(dr), axis=0), int(dc), axis=1)
                if style_kind == "transform":
                    styled = apply_style(jittered, s, cell_rng)
                    styled = np.clip(
                        styled + cell_rng.uniform(styled.shape, 0.0, 0.05), 0.0, 1.0)
                    images.append(styled[None])
                else:
                    noisy = np.clip(
                        jittered + cell_rng.uniform(jittered.shape, 0.0, 0.05), 0.0, 1.0)
                    images.append(tint_color(noisy, s))
                contents.append(c)
                styles.append(s)
    return LabeledImageSet(np.stack(images), np.array(contents), np.array(styles))


# -- IDX binary format ---------------------------------------------------------

_IDX_LABEL_MAGIC = 0x00000801
_IDX_IMAGE_MAGIC = 0x00000803


def write_idx(path, array: np.ndarray) -> None:
    """Write labels (1-d ints) or grayscale images ((n,H,W) or (n,1,H,W))."""
    array = np.asarray(array)
    if array.ndim == 4 and array.shape[1] == 1:
        array = array[:, 0]
    if array.ndim == 1:
        magic, payload = _IDX_LABEL_MAGIC, array.astype(np.uint8)
    elif array.ndim == 3:
        if array.dtype == np.uint8:
            payload = array
        else:
            if array.min() < 0.0 or array.max() > 1.0:
                raise ContractViolation("float images must lie in [0, 1]")
            payload = np.floor(array * 255.0 + 0.5).astype(np.uint8)
        magic = _IDX_IMAGE_MAGIC
    else:
        raise ContractViolation(f"cannot express shape {array.shape} as IDX")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for dim in payload.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(payload.tobytes())


def load_idx(path) -> np.ndarray:
    """Parse an IDX file: int64 labels, or float64 images rescaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError("truncated header at offset 0")
    magic, = struct.unpack(">I", blob[:4])
    if magic == _IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == _IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise IdxFormatError(f"bad magic 0x{magic:08x} at offset 0")
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise IdxFormatError(f"truncated dimension table at offset {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    expected = int(np.prod(dims))
    if len(blob) != header_end + expected:
        raise IdxFormatError(
            f"payload length {len(blob) - header_end} != {expected} at offset {header_end}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=header_end).reshape(dims)
    if magic == _IDX_LABEL_MAGIC:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


# -- Gaussian mixture for the MI simulation -------------------------------------


@dataclass
class GaussianMixtureSpec:
    """Equal-weight isotropic mixture; defaults give three 3-d components."""
    means: tuple = ((-1.0, -1.0, -1.0), (2.0, 2.0, 2.0), (5.0, 5.0, 5.0))
    sigma: float = 1.0
    n: int = 1500
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractViolation("sigma must be positive")
        if self.n < 1:
            raise ContractViolation("n must be positive")


def sample_gaussian_mixture(spec: GaussianMixtureSpec, rng: Rng | None = None):
    """Draw (labels, points): y uniform over components, z | y ~ N(mu_y, sigma^2 I)."""
    means = np.asarray(spec.means, dtype=np.float64)
    if rng is None:
        rng = Rng(spec.seed).child("gmm")
    y = np.asarray(rng.integers(0, means.shape[0], (spec.n,)), dtype=np.int64)
    z = means[y] + spec.sigma * rng.normal((spec.n, means.shape[1]))
    return y, z


# -- OOD split plans -------------------------------------------------------------

_MAX_PLAN_ATTEMPTS = 1000


@dataclass
class SplitPlan:
    """Per-class assignment of styles to train vs test."""
    p: int
    m: int
    k: int
    seed: int
    train_styles: dict  # class -> sorted tuple of style ids

    def test_styles(self, c: int) -> tuple:
        return tuple(s for s in range(self.m) if s not in self.train_styles[c])

    def to_dict(self) -> dict:
        return {"p": self.p, "m": self.m, "k": self.k, "seed": self.seed,
                "train_styles": {str(c): list(v) for c, v in self.train_styles.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(p=d["p"], m=d["m"], k=d["k"], seed=d["seed"],
                   train_styles={int(c): tuple(v) for c, v in d["train_styles"].items()})


def plan_ood_split(p: int, m: int, k: int, seed: int) -> SplitPlan:
    """Draw k train styles per class, without replacement, re-drawing the whole
    plan until every style is trained somewhere (capped at 1000 attempts)."""
    if not 1 <= k <= m - 1:
        raise ContractViolation(f"k must satisfy 1 <= k <= m-1, got k={k}, m={m}")
    root = Rng(seed)
    for attempt in range(_MAX_PLAN_ATTEMPTS):
        rng = root.child("plan", attempt)
        assignment = {c: tuple(sorted(int(s) for s in rng.choice(m, k)))
                      for c in range(p)}
        covered = set()
        for styles in assignment.values():
            covered.update(styles)
        if covered == set(range(m)):
            return SplitPlan(p=p, m=m, k=k, seed=seed, train_styles=assignment)
    raise ContractViolation(
        f"no style-covering split plan found in {_MAX_PLAN_ATTEMPTS} attempts "
        f"(p={p}, m={m}, k={k})")


def split_dataset(ds: LabeledImageSet, plan: SplitPlan):
    """Partition a dataset into (train, test) according to a split plan."""
    train_mask = np.zeros(ds.n, dtype=bool)
    for c, styles in plan.train_styles.items():
        for s in styles:
            train_mask |= (ds.content_labels == c) & (ds.style_labels == s)
    train_idx = np.flatnonzero(train_mask)
    test_idx = np.flatnonzero(~train_mask)
    return ds.subset(train_idx), ds.subset(test_idx)


# -- directory export -------------------------------------------------------------


def export_png_dir(ds: LabeledImageSet, out_dir) -> Path:
    """Write one PNG per sample plus a CSV manifest (filename, content, style)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(ds.n):
        name = f"sample_{i:05d}_c{ds.content_labels[i]}_s{ds.style_labels[i]}.png"
        write_png(out_dir / name, ds.images[i])
        rows.append((name, int(ds.content_labels[i]), int(ds.style_labels[i])))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "content", "style"])
        writer.writerows(rows)
    return manifest
