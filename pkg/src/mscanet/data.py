"""Synthetic crowd scenes, annotation files, and training augmentation.

Scenes are deterministic in their seed: heads are dark disks (radius
shrinking toward the top of the image when perspective > 0) with a light
shoulder ellipse, on a light background.  Clutter adds periodic stripe
and grid patches whose texture mimics dense crowds, which is exactly
what the attention supervision is supposed to suppress.

The annotation text format (shared with every loader here) is one
record per line: ``id width height x1,y1 x2,y2 ...`` with coordinates
printed to three decimals.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import io as mio
from .density import AttentionMask, DensityMap, build_ground_truth
from .errors import ConfigError, GenerationError, InputError, ParseError


@dataclass
class SceneSpec:
    """Recipe for one synthetic scene."""

    seed: int
    width: int = 64
    height: int = 64
    n_heads: int = 10
    cluster_count: int = 3
    perspective: float = 0.3   # 0 = constant head size, 1 = vanishing at top
    clutter_level: float = 0.3

    def __post_init__(self):
        if self.n_heads < 0:
            raise ConfigError(f"n_heads must be >= 0, got {self.n_heads}")
        if self.width % 8 or self.height % 8:
            raise ConfigError(f"scene dims must be divisible by 8, got {self.width}x{self.height}")
        if not 0.0 <= self.perspective <= 1.0:
            raise ConfigError(f"perspective must be in [0,1], got {self.perspective}")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ConfigError(f"clutter_level must be in [0,1], got {self.clutter_level}")
        if self.cluster_count < 1:
            raise ConfigError(f"cluster_count must be >= 1, got {self.cluster_count}")


@dataclass
class AnnotatedScene:
    """Image plus head-point annotations; the image may be lazy-loaded."""

    id: str
    width: int
    height: int
    points: np.ndarray  # (n, 2) float64, columns x, y
    image: np.ndarray | None = None  # HxW or HxWx3, values in [0,1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points):
            x, y = self.points[:, 0], self.points[:, 1]
            if (x < 0).any() or (x >= self.width).any() or (y < 0).any() or (y >= self.height).any():
                raise InputError(f"scene {self.id}: head point outside [0,W)x[0,H)")

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class AugmentConfig:
    crop_size: int = 64
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.crop_size % 8:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0,1], got {self.flip_prob}")


@dataclass
class TrainSample:
    """One scene with its full-resolution density and mask pyramid."""

    scene: AnnotatedScene
    density: DensityMap                 # stride 1
    masks: dict = field(default_factory=dict)  # stride -> AttentionMask


def _head_radius(spec: SceneSpec) -> float:
    return max(2.0, min(spec.width, spec.height) / 24.0)


def _placement_margin(spec: SceneSpec) -> float:
    return max(4.0, min(spec.width, spec.height) / 8.0)


def _draw_disk(img, cx, cy, rx, ry, value):
    h, w = img.shape
    x0, x1 = max(0, int(cx - rx - 1)), min(w, int(cx + rx + 2))
    y0, y1 = max(0, int(cy - ry - 1)), min(h, int(cy + ry + 2))
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1)[:, None]
    xs = np.arange(x0, x1)[None, :]
    mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    img[y0:y1, x0:x1][mask] = value


def _draw_clutter(img, rng, level):
    h, w = img.shape
    n_patches = int(round(level * w * h / 512.0))
    for _ in range(n_patches):
        pw = int(rng.integers(6, max(7, w // 3)))
        ph = int(rng.integers(6, max(7, h // 3)))
        x0 = int(rng.integers(0, max(1, w - pw)))
        y0 = int(rng.integers(0, max(1, h - ph)))
        period = int(rng.integers(2, 5))
        dark = 0.15 + 0.25 * rng.random()
        kind = int(rng.integers(0, 3))
        ys = np.arange(y0, y0 + ph)[:, None]
        xs = np.arange(x0, x0 + pw)[None, :]
        if kind == 0:
            mask = (xs // period) % 2 == 0
        elif kind == 1:
            mask = (ys // period) % 2 == 0
        else:
            mask = ((xs // period) + (ys // period)) % 2 == 0
        patch = img[y0 : y0 + ph, x0 : x0 + pw]
        patch[np.broadcast_to(mask, patch.shape)] = dark


def generate_scene(spec: SceneSpec, scene_id: str | None = None) -> AnnotatedScene:
    """Render one synthetic scene; bit-identical for a given spec."""
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    r_base = _head_radius(spec)
    if spec.n_heads * math.pi * r_base * r_base > 0.9 * w * h:
        raise GenerationError(
            f"{spec.n_heads} heads of radius {r_base:.1f} cannot fit a "
            f"{w}x{h} scene without >90% overlap"
        )

    img = np.full((h, w), 0.82, dtype=np.float64)
    img += 0.04 * (np.arange(h, dtype=np.float64) / max(1, h - 1))[:, None]
    _draw_clutter(img, rng, spec.clutter_level)

    margin = _placement_margin(spec)
    points = np.zeros((spec.n_heads, 2), dtype=np.float64)
    if spec.n_heads:
        centers = np.column_stack(
            [
                rng.uniform(margin, w - 1 - margin, spec.cluster_count),
                rng.uniform(margin, h - 1 - margin, spec.cluster_count),
            ]
        )
        spread = min(w, h) / 6.0
        assign = rng.integers(0, spec.cluster_count, spec.n_heads)
        for i in range(spec.n_heads):
            cx, cy = centers[assign[i]]
            for _ in range(20):
                px = cx + rng.normal(0.0, spread)
                py = cy + rng.normal(0.0, spread)
                if margin <= px <= w - 1 - margin and margin <= py <= h - 1 - margin:
                    break
            else:
                px = rng.uniform(margin, w - 1 - margin)
                py = rng.uniform(margin, h - 1 - margin)
            points[i] = (round(px, 3), round(py, 3))

        # Painter's order: heads lower in the image are closer, draw last.
        order = np.argsort(points[:, 1], kind="stable")
        jitter = rng.random(spec.n_heads)
        for i in order:
            x, y = points[i]
            r = r_base * (1.0 - spec.perspective * (1.0 - y / h))
            r = max(1.0, r)
            _draw_disk(img, x, y + 1.4 * r, 1.7 * r, 1.0 * r, 0.50 + 0.08 * jitter[i])
            _draw_disk(img, x, y, r, r, 0.10 + 0.08 * jitter[i])

    img += rng.normal(0.0, 0.01, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    if scene_id is None:
        scene_id = f"scene_{spec.seed & 0xFFFFFFFF:08x}"
    return AnnotatedScene(id=scene_id, width=w, height=h, points=points, image=img)


# -- annotation text format -------------------------------------------------


def save_annotations(scenes, path):
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in scene.points)
            line = f"{scene.id} {scene.width} {scene.height}"
            fh.write(line + (" " + coords if coords else "") + "\n")


def load_annotations(path):
    """Parse an annotation file; images are not loaded here."""
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ParseError("expected 'id width height x,y ...'", path=path, line=lineno)
            scene_id = parts[0]
            try:
                width, height = int(parts[1]), int(parts[2])
                pts = []
                for tok in parts[3:]:
                    xs, ys = tok.split(",")
                    pts.append((float(xs), float(ys)))
            except ValueError as exc:
                raise ParseError(f"malformed record: {exc}", path=path, line=lineno) from None
            scenes.append(
                AnnotatedScene(
                    id=scene_id,
                    width=width,
                    height=height,
                    points=np.asarray(pts, dtype=np.float64).reshape(-1, 2),
                )
            )
    return scenes


# -- augmentation -----------------------------------------------------------


def augment_rng(seed, epoch, index):
    """Per-sample generator, reproducible from (seed, epoch, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def random_crop(sample: TrainSample, cfg: AugmentConfig, rng) -> TrainSample:
    """Crop image, density and masks in one shared window.

    Windows snap to multiples of 8 so every mask stride lands on integer
    coordinates.  The rng is consumed identically whether or not the
    crop is trivial.
    """
    img = sample.scene.image
    h, w = img.shape[:2]
    cs = cfg.crop_size
    if cs > h or cs > w:
        raise InputError(f"crop {cs} larger than image {w}x{h}")
    x0 = 8 * int(rng.integers(0, (w - cs) // 8 + 1))
    y0 = 8 * int(rng.integers(0, (h - cs) // 8 + 1))

    pts = sample.scene.points
    if len(pts):
        keep = (
            (pts[:, 0] >= x0)
            & (pts[:, 0] < x0 + cs)
            & (pts[:, 1] >= y0)
            & (pts[:, 1] < y0 + cs)
        )
        pts = pts[keep] - np.array([x0, y0], dtype=np.float64)
    scene = AnnotatedScene(
        id=sample.scene.id,
        width=cs,
        height=cs,
        points=pts,
        image=np.ascontiguousarray(img[y0 : y0 + cs, x0 : x0 + cs]),
    )
    density = DensityMap(
        np.ascontiguousarray(sample.density.values[y0 : y0 + cs, x0 : x0 + cs]), stride=1
    )
    masks = {}
    for s, m in sample.masks.items():
        masks[s] = AttentionMask(
            np.ascontiguousarray(m.values[y0 // s : (y0 + cs) // s, x0 // s : (x0 + cs) // s]),
            stride=s,
        )
    return TrainSample(scene=scene, density=density, masks=masks)


def hflip(sample: TrainSample, cfg: AugmentConfig, rng, force: bool | None = None) -> TrainSample:
    """Horizontally flip image, annotations, density and masks together.

    The flip decision consumes one rng draw; ``force`` overrides it for
    tests.  Applying a forced flip twice is an exact involution.
    """
    u = float(rng.random())
    flip = bool(u < cfg.flip_prob) if force is None else bool(force)
    if not flip:
        return sample
    scene = sample.scene
    pts = scene.points.copy()
    if len(pts):
        # snap back to the annotation format's 3-decimal grid; plain IEEE
        # subtraction would drift by an ulp and break the involution
        pts[:, 0] = np.round((scene.width - 1) - pts[:, 0], 3)
    flipped = AnnotatedScene(
        id=scene.id,
        width=scene.width,
        height=scene.height,
        points=pts,
        image=scene.image[:, ::-1].copy(),
    )
    density = DensityMap(sample.density.values[:, ::-1].copy(), stride=sample.density.stride)
    masks = {
        s: AttentionMask(m.values[:, ::-1].copy(), stride=s) for s, m in sample.masks.items()
    }
    return TrainSample(scene=flipped, density=density, masks=masks)


# -- dataset assembly ---------------------------------------------------------


def scene_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def build_sample(scene: AnnotatedScene, sigma=None, beta=0.3, k=3) -> TrainSample:
    gt = build_ground_truth(scene, sigma=sigma, beta=beta, k=k)
    return TrainSample(scene=scene, density=gt.density, masks=gt.masks)


def synth_dataset(n_scenes, seed, width=64, height=64, heads_min=5, heads_max=20,
                  clutter=0.3, clusters=3, perspective=0.3, sigma=None, beta=0.3, k=3):
    """Generate scenes plus ground truth, all deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))
    samples = []
    for i in range(n_scenes):
        if heads_max < heads_min:
            raise ConfigError(f"heads_max {heads_max} < heads_min {heads_min}")
        n_heads = int(rng.integers(heads_min, heads_max + 1))
        spec = SceneSpec(
            seed=scene_seed(seed, i),
            width=width,
            height=height,
            n_heads=n_heads,
            cluster_count=clusters,
            perspective=perspective,
            clutter_level=clutter,
        )
        scene = generate_scene(spec, scene_id=f"scene_{i:04d}")
        samples.append(build_sample(scene, sigma=sigma, beta=beta, k=k))
    return samples


def write_dataset(samples, out_dir):
    """Write images, annotations, and precomputed density/mask DMAP files."""
    os.makedirs(out_dir, exist_ok=True)
    save_annotations([s.scene for s in samples], os.path.join(out_dir, "annotations.txt"))
    for s in samples:
        base = os.path.join(out_dir, s.scene.id)
        mio.write_pgm(base + ".pgm", s.scene.image)
        mio.write_dmap(base + ".den.dmap", s.density.values, stride=1)
        for stride, m in sorted(s.masks.items()):
            mio.write_dmap(base + f".att{stride}.dmap", m.values, stride=stride)


def load_dataset(data_dir, mask_strides=(2, 4, 8)):
    """Load a dataset written by :func:`write_dataset`."""
    scenes = load_annotations(os.path.join(data_dir, "annotations.txt"))
    samples = []
    for scene in scenes:
        base = os.path.join(data_dir, scene.id)
        scene.image = mio.read_image(base + ".pgm")
        den_values, den_stride = mio.read_dmap(base + ".den.dmap")
        masks = {}
        for stride in mask_strides:
            m_values, m_stride = mio.read_dmap(base + f".att{stride}.dmap")
            if m_stride != stride:
                raise ParseError(
                    f"mask stride {m_stride} does not match filename stride {stride}",
                    path=base + f".att{stride}.dmap",
                )
            masks[stride] = AttentionMask(m_values, stride=stride)
        samples.append(
            TrainSample(scene=scene, density=DensityMap(den_values, stride=den_stride), masks=masks)
        )
    return samples
