"""Few-shot task distribution: procedural glyphs, two moons and IDX image files.

Every sampler is a pure function of its spec and a seed (or a
``numpy.random.Generator`` the caller owns).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .idx import load_idx

SOURCES = ("glyphs", "two_moons", "idx_file")
N_REGRESSION = 3  # rotation, shift x, shift y


@dataclass(frozen=True)
class Augmentation:
    rotation_max_deg: float = 0.0
    shift_max_px: float = 0.0
    noise_std: float = 0.0
    per_task_dropout_p: float = 0.0
    per_example_dropout_p: float = 0.0

    def __post_init__(self):
        if not 0 <= self.rotation_max_deg <= 360:
            raise ValueError("rotation_max_deg must lie in [0, 360]")
        if self.shift_max_px < 0 or self.noise_std < 0:
            raise ValueError("shift and noise magnitudes must be non-negative")
        for p in (self.per_task_dropout_p, self.per_example_dropout_p):
            if not 0 <= p < 1:
                raise ValueError("dropout probabilities must lie in [0, 1)")


@dataclass(frozen=True)
class TaskSpec:
    source: str
    n_classes: int
    input_dim: int
    permutation: tuple
    seed: int
    augmentation: Augmentation | None = None
    grid: int | None = None
    noise_std: float = 0.0
    classes: tuple = ()
    path: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        perm = tuple(int(i) for i in self.permutation)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        check_permutation(perm, self.input_dim)
        if self.augmentation is not None and self.grid is None:
            if self.augmentation.rotation_max_deg or self.augmentation.shift_max_px:
                raise ValueError("rotation/shift augmentation needs image-structured data")

    @property
    def n_regression(self) -> int:
        return N_REGRESSION if self.augmentation is not None and self.grid is not None else 0

    @property
    def n_targets(self) -> int:
        return self.n_classes + self.n_regression

    def to_dict(self) -> dict:
        d = asdict(self)
        d["permutation"] = list(self.permutation)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        aug = d.pop("augmentation", None)
        return cls(augmentation=Augmentation(**aug) if aug else None, **d)


@dataclass
class Batch:
    x: np.ndarray
    targets: np.ndarray
    class_ids: np.ndarray
    n_classes: int
    grid: int | None = None
    applied: dict = field(default_factory=dict)

    @property
    def n_regression(self) -> int:
        return self.targets.shape[1] - self.n_classes


def check_permutation(perm, n: int) -> None:
    if len(perm) != n or sorted(perm) != list(range(n)):
        raise ValueError(f"permutation must be a bijection on {n} features")


def permute_inputs(batch: Batch, permutation) -> Batch:
    """Reorder feature columns: new column ``i`` is old column ``permutation[i]``."""
    perm = np.asarray(permutation, dtype=np.intp)
    check_permutation(perm.tolist(), batch.x.shape[1])
    return replace(batch, x=batch.x[:, perm], grid=None)


def compose_permutations(outer, inner) -> np.ndarray:
    """Single permutation equal to applying ``inner`` first, then ``outer``."""
    return np.asarray(inner)[np.asarray(outer)]


def invert_permutation(perm) -> np.ndarray:
    return np.argsort(np.asarray(perm))


def _one_hot(ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(ids), n))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def balanced_classes(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    reps = np.tile(np.arange(n_classes), n // n_classes)
    extra = rng.choice(n_classes, size=n - len(reps), replace=False) if n % n_classes else np.zeros(0, int)
    return rng.permutation(np.concatenate([reps, extra]).astype(np.int64))


# ------------------------------------------------------------------ glyphs


def _draw_points(img: np.ndarray, pts: np.ndarray) -> None:
    s = img.shape[0]
    rc = np.clip(np.rint(pts).astype(int), 0, s - 1)
    img[rc[:, 0], rc[:, 1]] = 1.0


def _stroke(rng: np.random.Generator, s: int) -> np.ndarray:
    n = 6 * s
    t = np.linspace(0.0, 1.0, n)[:, None]
    kind = rng.integers(3)
    margin = 1.0
    rand_pt = lambda: rng.uniform(margin, s - 1 - margin, size=2)
    if kind == 0:  # straight line
        a, b = rand_pt(), rand_pt()
        return a + t * (b - a)
    if kind == 1:  # arc
        c = rng.uniform(s * 0.3, s * 0.7, size=2)
        r = rng.uniform(s * 0.15, s * 0.4)
        a0 = rng.uniform(0, 2 * np.pi)
        span = rng.uniform(np.pi / 2, 2 * np.pi)
        ang = a0 + span * t[:, 0]
        return c + r * np.stack([np.sin(ang), np.cos(ang)], axis=1)
    a, b, c = rand_pt(), rand_pt(), rand_pt()  # corner: two joined segments
    return np.concatenate([a + t * (b - a), b + t * (c - b)])


def glyph_library(grid: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic stroke-composed prototypes ``[size, grid, grid]`` in {0, 1}."""
    if grid < 8:
        raise ValueError("glyph grid must be at least 8")
    rng = np.random.default_rng([seed, grid, size])
    protos: list[np.ndarray] = []
    while len(protos) < size:
        img = np.zeros((grid, grid))
        for _ in range(int(rng.integers(2, 4))):
            _draw_points(img, _stroke(rng, grid))
        if all(np.sum(img != p) >= 3 for p in protos):
            protos.append(img)
    return np.stack(protos)


def rotate_shift(images: np.ndarray, angles_deg: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Nearest-neighbour rotation about the grid centre followed by a shift; zero fill."""
    B, s, _ = images.shape
    c = (s - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    th = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))[:, None, None]
    cos, sin = np.cos(th), np.sin(th)
    dr = rr[None] - c - shifts[:, 1, None, None]
    dc = cc[None] - c - shifts[:, 0, None, None]
    # inverse map of the output grid to source pixels
    src_r = np.rint(cos * dr + sin * dc + c).astype(int)
    src_c = np.rint(-sin * dr + cos * dc + c).astype(int)
    ok = (src_r >= 0) & (src_r < s) & (src_c >= 0) & (src_c < s)
    idx = np.broadcast_to(np.arange(B)[:, None, None], ok.shape)
    out = np.zeros_like(images)
    out[ok] = images[idx[ok], src_r[ok], src_c[ok]]
    return out


def encode_regression(angles_deg, shifts, params: Augmentation) -> np.ndarray:
    angle = np.asarray(angles_deg) / 360.0 * 2.0 - 1.0
    sm = params.shift_max_px
    sx = shifts[:, 0] / sm if sm > 0 else np.zeros(len(angle))
    sy = shifts[:, 1] / sm if sm > 0 else np.zeros(len(angle))
    return np.stack([angle, sx, sy], axis=1)


def decode_regression(block: np.ndarray, params: Augmentation) -> tuple:
    angles = (block[:, 0] + 1.0) / 2.0 * 360.0
    shifts = block[:, 1:3] * params.shift_max_px
    return angles, shifts


def task_dropout_mask(n_pixels: int, p: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return (rng.random(n_pixels) >= p).astype(np.float64)


def augment_images(images: np.ndarray, params: Augmentation, rng: np.random.Generator,
                   task_mask: np.ndarray | None = None) -> tuple:
    """Returns augmented images, the regression block, and the applied parameters."""
    B, s, _ = images.shape
    angles = rng.uniform(0.0, params.rotation_max_deg, size=B)
    shifts = rng.uniform(-params.shift_max_px, params.shift_max_px, size=(B, 2))
    out = images
    if params.rotation_max_deg > 0 or params.shift_max_px > 0:
        out = rotate_shift(images, angles, shifts)
    if params.noise_std > 0:
        out = out + rng.normal(0.0, params.noise_std, size=out.shape)
    if task_mask is not None:
        out = out * task_mask.reshape(1, s, s)
    if params.per_example_dropout_p > 0:
        out = out * (rng.random(out.shape) >= params.per_example_dropout_p)
    reg = encode_regression(angles, shifts, params)
    return out, reg, {"angles_deg": angles, "shifts": shifts}


def augment(batch: Batch, params: Augmentation, seed) -> Batch:
    """Augment a batch; image-structured batches also get the regression block.

    Flat batches (no grid) accept only noise and dropout.
    """
    rng = np.random.default_rng(seed)
    if batch.grid is None:
        if params.rotation_max_deg > 0 or params.shift_max_px > 0:
            raise ValueError("rotation/shift augmentation needs image-structured data")
        x = batch.x
        if params.noise_std > 0:
            x = x + rng.normal(0.0, params.noise_std, size=x.shape)
        if params.per_task_dropout_p > 0:
            x = x * task_dropout_mask(x.shape[1], params.per_task_dropout_p, int(rng.integers(2**31)))
        if params.per_example_dropout_p > 0:
            x = x * (rng.random(x.shape) >= params.per_example_dropout_p)
        return replace(batch, x=x)
    s = batch.grid
    mask = None
    if params.per_task_dropout_p > 0:
        mask = task_dropout_mask(s * s, params.per_task_dropout_p, int(rng.integers(2**31)))
    out, reg, applied = augment_images(batch.x.reshape(-1, s, s), params, rng, mask)
    targets = np.concatenate([batch.targets[:, : batch.n_classes], reg], axis=1)
    return replace(batch, x=out.reshape(len(out), -1), targets=targets, applied=applied)


# --------------------------------------------------------------- two moons


def two_moons(n: int, noise_std: float, seed) -> Batch:
    """Upper unit semicircle at the origin and a mirrored one centred at (1, 0.5)."""
    if n % 2:
        raise ValueError("two_moons needs an even number of points")
    rng = np.random.default_rng(seed)
    return _two_moons(n, noise_std, rng)


def _two_moons(n: int, noise_std: float, rng: np.random.Generator, labels=None) -> Batch:
    if labels is None:
        labels = rng.permutation(np.repeat([0, 1], n // 2))
    t = rng.uniform(0.0, np.pi, size=n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.where(labels[:, None] == 0, upper, lower)
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, size=x.shape)
    return Batch(x, _one_hot(labels, 2), labels.astype(np.int64), 2)


MOON_CENTERS = np.array([[0.0, 0.0], [1.0, 0.5]])


# ------------------------------------------------------------------- tasks


class Task:
    """Concrete sampler for a :class:`TaskSpec`."""

    def __init__(self, spec: TaskSpec, images: np.ndarray | None = None, labels: np.ndarray | None = None):
        self.spec = spec
        self._images = images
        self._labels = labels
        self._mask = None
        if spec.source == "glyphs":
            self._images = glyph_library(spec.grid, seed=0)[list(spec.classes)]
        elif spec.source == "idx_file" and self._images is None:
            raise ValueError("idx_file tasks need loaded images; use idx_task()")
        aug = spec.augmentation
        if aug is not None and aug.per_task_dropout_p > 0:
            self._mask = task_dropout_mask(spec.input_dim, aug.per_task_dropout_p, spec.seed)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        spec = self.spec
        ids = balanced_classes(batch_size, spec.n_classes, rng)
        if spec.source == "two_moons":
            batch = _two_moons(batch_size, spec.noise_std, rng, labels=ids)
        else:
            batch = self._sample_images(ids, rng)
        perm = np.asarray(spec.permutation)
        return replace(batch, x=batch.x[:, perm], grid=None)

    def _sample_images(self, ids: np.ndarray, rng: np.random.Generator) -> Batch:
        spec = self.spec
        s = spec.grid
        if spec.source == "glyphs":
            images = self._images[ids].copy()
        else:
            pools = [np.flatnonzero(self._labels == c) for c in spec.classes]
            images = np.stack([self._images[rng.choice(pools[c])] for c in ids])
        if spec.noise_std > 0:
            images = images + rng.normal(0.0, spec.noise_std, size=images.shape)
        targets = _one_hot(ids, spec.n_classes)
        applied = {}
        if spec.augmentation is not None:
            images, reg, applied = augment_images(images, spec.augmentation, rng, self._mask)
            targets = np.concatenate([targets, reg], axis=1)
        return Batch(images.reshape(len(ids), s * s), targets, ids, spec.n_classes, s, applied)


def glyph_task(n_classes: int, grid: int, seed, augmentation: Augmentation | None = None,
               noise_std: float = 0.0, library_size: int = 64, permute: bool = False) -> Task:
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_classes > library_size:
        raise ValueError(f"n_classes={n_classes} exceeds the prototype library ({library_size})")
    rng = np.random.default_rng(seed)
    classes = rng.choice(library_size, size=n_classes, replace=False)
    dim = grid * grid
    perm = rng.permutation(dim) if permute else np.arange(dim)
    spec = TaskSpec("glyphs", n_classes, dim, tuple(perm), int(np.asarray(seed).sum()), augmentation, grid,
                    noise_std, tuple(sorted(classes.tolist())))
    return Task(spec)


def two_moons_task(noise_std: float, seed, permute: bool = False) -> Task:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(2) if permute else np.arange(2)
    return Task(TaskSpec("two_moons", 2, 2, tuple(perm), int(np.asarray(seed).sum()), None, None, noise_std))


def idx_task(image_path, label_path, n_classes: int, seed, downscale: bool = True,
             augmentation: Augmentation | None = None, noise_std: float = 0.0, permute: bool = True) -> Task:
    images = load_idx(image_path, downscale=downscale)
    labels = load_idx(label_path)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError("idx images must be square")
    if len(images) != len(labels):
        raise ValueError("image and label counts differ")
    rng = np.random.default_rng(seed)
    available = np.unique(labels)
    if n_classes > len(available):
        raise ValueError(f"file has only {len(available)} classes")
    chosen = np.sort(rng.choice(available, size=n_classes, replace=False))
    remap = {int(c): i for i, c in enumerate(chosen)}
    keep = np.isin(labels, chosen)
    images, labels = images[keep], np.array([remap[int(c)] for c in labels[keep]])
    s = images.shape[1]
    perm = rng.permutation(s * s) if permute else np.arange(s * s)
    spec = TaskSpec("idx_file", n_classes, s * s, tuple(perm), int(np.asarray(seed).sum()), augmentation, s,
                    noise_std, tuple(range(n_classes)), str(Path(image_path)))
    return Task(spec, images, labels)


# ------------------------------------------------------------ distribution


@dataclass(frozen=True)
class TaskDistributionConfig:
    sources: tuple = ("glyphs", "two_moons")
    glyph_grid: int = 10
    glyph_classes: tuple = (4, 6, 8, 10)
    glyph_noise: float = 0.1
    moons_noise: float = 0.1
    p_aug: float = 0.5
    rotation_max_deg: float = 360.0
    shift_max_px: float = 2.0
    aug_noise_std: float = 0.1
    per_task_dropout_p: float = 0.1
    per_example_dropout_p: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "glyph_classes", tuple(self.glyph_classes))
        if not self.sources:
            raise ValueError("task distribution needs at least one source")
        for s in self.sources:
            if s not in ("glyphs", "two_moons"):
                raise ValueError(f"source {s!r} cannot be sampled by the meta-training distribution")
        if not 0 <= self.p_aug <= 1:
            raise ValueError("p_aug must lie in [0, 1]")


def sample_task(cfg: TaskDistributionConfig, seed) -> TaskSpec:
    """Uniform over sources, fresh feature permutation, augmentation with probability ``p_aug``.

    Augmentation is only drawn for image sources.
    """
    rng = np.random.default_rng(seed)
    source = cfg.sources[int(rng.integers(len(cfg.sources)))]
    task_seed = int(rng.integers(2**31))
    if source == "two_moons":
        perm = rng.permutation(2)
        return TaskSpec("two_moons", 2, 2, tuple(perm), task_seed, None, None, cfg.moons_noise)
    n_classes = int(cfg.glyph_classes[int(rng.integers(len(cfg.glyph_classes)))])
    classes = np.sort(rng.choice(64, size=n_classes, replace=False))
    dim = cfg.glyph_grid ** 2
    perm = rng.permutation(dim)
    aug = None
    if rng.random() < cfg.p_aug:
        aug = Augmentation(cfg.rotation_max_deg, cfg.shift_max_px, cfg.aug_noise_std,
                           cfg.per_task_dropout_p, cfg.per_example_dropout_p)
    return TaskSpec("glyphs", n_classes, dim, tuple(perm), task_seed, aug, cfg.glyph_grid, cfg.glyph_noise,
                    tuple(classes.tolist()))


def make_task(spec: TaskSpec) -> Task:
    if spec.source == "idx_file":
        raise ValueError("idx_file tasks must be built with idx_task()")
    return Task(spec)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM with min-max scaling to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_glyphs(directory, grid: int, size: int = 64) -> list:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, proto in enumerate(glyph_library(grid, size)):
        p = out / f"glyph_{i:03d}.pgm"
        write_pgm(p, proto)
        paths.append(p)
    return paths
