"""Synthetic top-down referring scenes with exact ground-truth masks.

Each scene is a low-contrast textured background with a few coloured shapes:
roads (long thin rectangles), buildings (squares), vehicles (small
rectangles) and tanks (circles). One shape is the referent; the expression
``the <color> <category> [on the <side>]`` names it uniquely. Masks are hard
rasterisations of the shape predicate at pixel centres.

On disk a dataset is a directory of binary PPM images, binary PGM masks
(0/255) and a ``manifest.jsonl`` index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .union_encoder import Vocabulary

COLORS = {
    "red": (0.80, 0.28, 0.25),
    "green": (0.28, 0.70, 0.30),
    "blue": (0.25, 0.40, 0.85),
    "yellow": (0.88, 0.80, 0.25),
    "white": (0.93, 0.93, 0.90),
}
CATEGORIES = ("road", "building", "vehicle", "tank")
SIDES = {"x": ("left", "right"), "y": ("top", "bottom")}
GRAMMAR_WORDS = ("the", "on", *COLORS, *CATEGORIES, "left", "right", "top", "bottom")

MAX_TRIES = 200


def build_vocabulary() -> Vocabulary:
    return Vocabulary(GRAMMAR_WORDS)


class SynthesisError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    canvas: int = 128
    min_distractors: int = 2
    max_distractors: int = 4
    side_prob: float = 0.35
    contrast: float = 0.75
    noise: float = 0.03

    def __post_init__(self):
        if self.canvas % 16:
            raise ValueError(f"canvas {self.canvas} must be divisible by 16")
        if not 0 <= self.min_distractors <= self.max_distractors:
            raise ValueError("need 0 <= min_distractors <= max_distractors")


@dataclass(frozen=True)
class Shape:
    category: str
    color: str
    cx: float
    cy: float
    length: float  # full extent along the shape axis (diameter for tanks)
    width: float
    angle: float = 0.0

    def contains(self, x, y, margin: float = 0.0):
        """Point-in-shape test on arrays (or scalars) of coordinates."""
        dx, dy = x - self.cx, y - self.cy
        if self.category == "tank":
            r = self.length / 2 + margin
            return dx * dx + dy * dy <= r * r
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= self.length / 2 + margin) & (np.abs(v) <= self.width / 2 + margin)

    @property
    def reach(self) -> float:
        return math.hypot(self.length, self.width) / 2 if self.category != "tank" else self.length / 2

    def side(self, axis: str, canvas: int) -> str:
        pos = self.cx if axis == "x" else self.cy
        return SIDES[axis][0] if pos < canvas / 2 else SIDES[axis][1]

    def rasterize(self, canvas: int) -> np.ndarray:
        ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
        return np.asarray(self.contains(xs, ys), dtype=bool)


@dataclass
class SceneSpec:
    seed: int
    canvas: int
    objects: list[Shape]
    referent: int
    side_axis: str | None = None

    @property
    def distractors(self) -> int:
        return len(self.objects) - 1

    def attributes(self, i: int) -> tuple:
        obj = self.objects[i]
        attrs = (obj.color, obj.category)
        if self.side_axis:
            attrs += (obj.side(self.side_axis, self.canvas),)
        return attrs

    def expression(self) -> str:
        attrs = self.attributes(self.referent)
        text = f"the {attrs[0]} {attrs[1]}"
        return text + f" on the {attrs[2]}" if self.side_axis else text


@dataclass(eq=False)
class ReferringSample:
    image: np.ndarray  # [H, W, 3] float64, values k/255
    expression: str
    gt_mask: np.ndarray  # [H, W] bool
    seed: int
    meta: SceneSpec | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ReferringSample)
                and self.expression == other.expression
                and self.seed == other.seed
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt_mask, other.gt_mask))


def _random_shape(rng, category: str, color: str, canvas: int) -> Shape:
    k = canvas / 128
    angle = float(rng.uniform(0, math.pi))
    if category == "road":
        length, width = rng.uniform(48, 76) * k, rng.uniform(9, 13) * k
    elif category == "building":
        length = rng.uniform(20, 30) * k
        width = length
    elif category == "vehicle":
        length, width = rng.uniform(16, 22) * k, rng.uniform(9, 12) * k
    else:
        length = width = 2 * rng.uniform(8, 13) * k
        angle = 0.0
    reach = math.hypot(length, width) / 2 if category != "tank" else length / 2
    lo, hi = reach + 2, canvas - reach - 2
    cx, cy = rng.uniform(lo, hi, size=2)
    return Shape(category, color, float(cx), float(cy), float(length), float(width), angle)


def _fits(shape: Shape, occupied: np.ndarray, canvas: int) -> bool:
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    keep_out = np.asarray(shape.contains(xs, ys, margin=3.0), dtype=bool)
    return not (keep_out & occupied).any()


def _place(rng, spec_fn, occupied, canvas, accept=lambda s: True) -> Shape:
    for _ in range(MAX_TRIES):
        shape = spec_fn()
        if accept(shape) and _fits(shape, occupied, canvas):
            occupied |= shape.rasterize(canvas)
            return shape
    raise SynthesisError("could not place a shape")


def make_scene(seed: int, cfg: SynthConfig = SynthConfig()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    canvas = cfg.canvas
    colors = list(COLORS)
    occupied = np.zeros((canvas, canvas), dtype=bool)
    try:
        category = CATEGORIES[rng.integers(len(CATEGORIES))]
        color = colors[rng.integers(len(colors))]
        axis = None
        if rng.random() < cfg.side_prob:
            axis = "x" if rng.random() < 0.5 else "y"

        def off_midline(s: Shape) -> bool:
            if axis is None:
                return True
            pos = s.cx if axis == "x" else s.cy
            return abs(pos - canvas / 2) >= 4

        referent = _place(rng, lambda: _random_shape(rng, category, color, canvas),
                          occupied, canvas, off_midline)
        objects = [referent]
        if axis is not None:
            ref_side = referent.side(axis, canvas)
            twin = _place(rng, lambda: _random_shape(rng, category, color, canvas), occupied, canvas,
                          lambda s: off_midline(s) and s.side(axis, canvas) != ref_side)
            objects.append(twin)
        n_extra = int(rng.integers(cfg.min_distractors, cfg.max_distractors + 1)) - (axis is not None)
        def distractor() -> Shape:
            while True:
                cat = CATEGORIES[rng.integers(len(CATEGORIES))]
                col = colors[rng.integers(len(colors))]
                if (col, cat) != (color, category):
                    return _random_shape(rng, cat, col, canvas)

        for _ in range(max(n_extra, 0)):
            objects.append(_place(rng, distractor, occupied, canvas))
    except SynthesisError as err:
        raise SynthesisError(f"seed {seed}: {err} after {MAX_TRIES} tries") from None
    scene = SceneSpec(seed=seed, canvas=canvas, objects=objects, referent=0, side_axis=axis)
    ref = scene.attributes(0)
    if any(scene.attributes(i) == ref for i in range(1, len(objects))):
        raise SynthesisError(f"seed {seed}: referent is not unique")
    return scene


def render(scene: SceneSpec, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    rng = np.random.default_rng([scene.seed, 1])
    n = scene.canvas
    base = rng.uniform(0.38, 0.52) + rng.uniform(-0.04, 0.04, size=3)
    theta = rng.uniform(0, 2 * math.pi)
    ys, xs = (np.mgrid[0:n, 0:n] + 0.5) / n - 0.5
    ramp = 0.08 * (xs * math.cos(theta) + ys * math.sin(theta))
    img = base[None, None, :] + ramp[..., None] + rng.normal(0, cfg.noise, size=(n, n, 3))
    for obj in scene.objects:
        mask = obj.rasterize(n)
        color = base + cfg.contrast * (np.array(COLORS[obj.color]) - base)
        img[mask] = color + rng.normal(0, cfg.noise * 0.5, size=(int(mask.sum()), 3))
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8) / 255.0


def synth_scene(seed: int, cfg: SynthConfig = SynthConfig()) -> ReferringSample:
    scene = make_scene(seed, cfg)
    return ReferringSample(image=render(scene, cfg), expression=scene.expression(),
                           gt_mask=scene.objects[scene.referent].rasterize(scene.canvas),
                           seed=seed, meta=scene)


def synth_dataset(n: int, seed0: int, cfg: SynthConfig = SynthConfig()) -> list[ReferringSample]:
    return [synth_scene(seed0 + i, cfg) for i in range(n)]


# -- binary PPM / PGM ---------------------------------------------------------

def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    path.write_bytes(magic + b"\n" + f"{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes())


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DatasetError(f"{path}: cannot read ({err.strerror})") from None
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} file, found {fields[0][:8]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    size = w * h * channels
    if len(data) - pos != size:
        raise DatasetError(f"{path}: expected {size} pixel bytes, found {len(data) - pos}")
    arr = np.frombuffer(data, dtype=np.uint8, offset=pos, count=size)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def write_ppm(path, image: np.ndarray) -> None:
    _write_pnm(Path(path), b"P6", np.round(np.asarray(image) * 255))


def read_ppm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P6", 3) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    _write_pnm(Path(path), b"P5", np.asarray(mask, dtype=bool) * 255)


def read_pgm(path) -> np.ndarray:
    raw = _read_pnm(Path(path), b"P5", 1)
    if not np.isin(raw, (0, 255)).all():
        raise DatasetError(f"{path}: mask values must be 0 or 255")
    return raw == 255


def write_dataset(samples, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        image, mask = f"img_{i:05d}.ppm", f"mask_{i:05d}.pgm"
        write_ppm(out / image, sample.image)
        write_pgm(out / mask, sample.gt_mask)
        lines.append(json.dumps({"id": i, "image": image, "mask": mask,
                                 "expression": sample.expression, "seed": sample.seed}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def read_dataset(directory) -> list[ReferringSample]:
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: manifest not found")
    samples = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image_path, mask_path = root / rec["image"], root / rec["mask"]
            expression, seed = rec["expression"], int(rec["seed"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"{manifest}:{lineno}: bad manifest record ({err})") from None
        image, mask = read_ppm(image_path), read_pgm(mask_path)
        if image.shape[:2] != mask.shape:
            raise DatasetError(f"{mask_path}: mask size {mask.shape} does not match image {image.shape[:2]}")
        samples.append(ReferringSample(image=image, expression=expression, gt_mask=mask, seed=seed))
    if not samples:
        raise DatasetError(f"{manifest}: no samples")
    return samples
