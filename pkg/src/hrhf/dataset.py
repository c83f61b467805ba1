"""Procedural shapes dataset and incremental step splits.

Every foreground class is a shape family drawn with its own texture, on a
noisy background.  Labels are exact: a pixel belongs to a shape when its
centre lies inside the analytic region.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 0
IGNORE = 255

# class id -> (shape family, texture)
CLASS_STYLES = {
    1: ("circle", "hstripes"),
    2: ("square", "checker"),
    3: ("triangle", "vstripes"),
    4: ("cross", "diagonal"),
    5: ("bar", "dots"),
    6: ("ring", "solid"),
}
UNIVERSE = tuple(sorted(CLASS_STYLES))

_BASE_COLORS = {
    1: (0.85, 0.25, 0.2),
    2: (0.2, 0.7, 0.3),
    3: (0.25, 0.35, 0.9),
    4: (0.9, 0.8, 0.2),
    5: (0.75, 0.3, 0.8),
    6: (0.2, 0.8, 0.85),
}

PROTOCOLS = {
    "3-1": ((1, 2, 3), (4,)),
    "3-3": ((1, 2, 3), (4, 5, 6)),
    "3-1-1-1": ((1, 2, 3), (4,), (5,), (6,)),
    "6": ((1, 2, 3, 4, 5, 6),),
}


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: np.ndarray  # H x W, global class ids
    instances: list = field(default_factory=list)  # (class, (y0, x0, y1, x1))

    def classes(self):
        return sorted(int(c) for c in np.unique(self.label) if c != BACKGROUND)


@dataclass(frozen=True)
class StepSpec:
    steps: tuple
    mode: str = "disjoint"

    def __post_init__(self):
        if self.mode not in ("disjoint", "overlapped"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        seen = set()
        for classes in self.steps:
            if BACKGROUND in classes:
                raise ValueError("background is implicit and cannot be a step class")
            if seen & set(classes):
                raise ValueError("step class sets must be pairwise disjoint")
            seen |= set(classes)
        object.__setattr__(self, "steps", tuple(tuple(s) for s in self.steps))

    @classmethod
    def preset(cls, name, mode="disjoint"):
        return cls(PROTOCOLS[name], mode)

    @property
    def classes(self):
        return tuple(c for step in self.steps for c in step)

    def class_order(self, upto=None):
        """Model channel order: background first, then classes in step order."""
        steps = self.steps if upto is None else self.steps[: upto + 1]
        return (BACKGROUND,) + tuple(c for s in steps for c in s)

    def num_classes(self, step):
        return len(self.class_order(step))

    def old_count(self, step):
        """Channels of the model trained up to ``step - 1``."""
        return len(self.class_order(step - 1)) if step > 0 else 0

    def lut(self, step=None, fill=BACKGROUND):
        """Lookup table from global class id to model channel."""
        table = np.full(256, fill, dtype=np.int64)
        table[IGNORE] = IGNORE
        for idx, c in enumerate(self.class_order(step)):
            table[c] = idx
        return table


# --- rendering ---------------------------------------------------------------

def _shape_mask(family, yy, xx, cy, cx, s, vertical):
    dy, dx = yy - cy, xx - cx
    if family == "circle":
        return dy * dy + dx * dx <= s * s
    if family == "square":
        a = 0.85 * s
        return (np.abs(dy) <= a) & (np.abs(dx) <= a)
    if family == "triangle":
        # apex up, base at cy + 0.8 s
        depth = dy + s
        return (depth >= 0) & (dy <= 0.8 * s) & (np.abs(dx) <= 0.6 * depth)
    if family == "cross":
        arm = s / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    if family == "bar":
        long_, short = 1.3 * s, 0.45 * s
        if vertical:
            dy, dx = dx, dy
        return (np.abs(dx) <= long_) & (np.abs(dy) <= short)
    if family == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= s * s) & (r2 >= (0.45 * s) ** 2)
    raise ValueError(f"unknown shape family {family!r}")


def _texture(kind, yy, xx, phase):
    y = np.floor(yy + phase[0]).astype(np.int64)
    x = np.floor(xx + phase[1]).astype(np.int64)
    if kind == "hstripes":
        return (y // 2) % 2 == 0
    if kind == "vstripes":
        return (x // 2) % 2 == 0
    if kind == "checker":
        return (y // 2 + x // 2) % 2 == 0
    if kind == "diagonal":
        return ((x + y) // 2) % 2 == 0
    if kind == "dots":
        return (y % 4 < 2) & (x % 4 < 2)
    if kind == "solid":
        return np.ones_like(y, dtype=bool)
    raise ValueError(f"unknown texture {kind!r}")


def _background(rng, size):
    base = rng.uniform(0.25, 0.75, size=3)
    sigma = rng.uniform(0.03, 0.25)
    img = base + rng.normal(0.0, sigma, size=(size, size, 3))
    # slow illumination gradient
    ramp = np.linspace(-1.0, 1.0, size)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    img += (gy * ramp[:, None] + gx * ramp[None, :])[..., None]
    return img


def draw_shape(image, label, cls, cy, cx, s, rng, vertical=False):
    """Paint one instance of ``cls`` in place; returns its visible mask."""
    size = image.shape[0]
    family, texture = CLASS_STYLES[cls]
    centres = np.arange(size) + 0.5
    yy, xx = np.meshgrid(centres, centres, indexing="ij")
    mask = _shape_mask(family, yy, xx, cy, cx, s, vertical)
    base = np.clip(np.asarray(_BASE_COLORS[cls]) + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
    dark = base * rng.uniform(0.25, 0.45)
    tex = _texture(texture, yy, xx, rng.integers(0, 4, size=2))
    paint = np.where(tex[..., None], base, dark) + rng.normal(0.0, 0.03, size=image.shape)
    image[mask] = paint[mask]
    label[mask] = cls
    return mask


def gen_scene(rng, class_subset, canvas_size=64, size_range=(9.0, 15.0)) -> Scene:
    """Render one scene with one instance of every class in ``class_subset``."""
    class_subset = list(class_subset)
    if len(class_subset) > 4:
        raise ValueError("at most 4 classes per scene")
    if canvas_size < 32:
        raise ValueError("canvas must be at least 32 pixels")
    for c in class_subset:
        if c not in CLASS_STYLES:
            raise ValueError(f"class {c} outside the universe {UNIVERSE}")
    scale = canvas_size / 64.0
    image = _background(rng, canvas_size)
    label = np.zeros((canvas_size, canvas_size), dtype=np.uint8)
    placed = []
    instances = []
    for cls in class_subset:
        s = rng.uniform(*size_range) * scale
        reach = 1.3 * s
        for _ in range(50):
            cy, cx = rng.uniform(reach, canvas_size - reach, size=2)
            if all(np.hypot(cy - py, cx - px) > reach + pr for py, px, pr in placed):
                break
        placed.append((cy, cx, reach))
        mask = draw_shape(image, label, cls, cy, cx, s, rng, vertical=bool(rng.integers(2)))
        ys, xs = np.nonzero(mask)
        bbox = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1) if len(ys) else None
        instances.append((cls, bbox))
    return Scene(np.clip(image, 0.0, 1.0), label, instances)


DEFAULT_CLASSES_PER_SCENE = {1: 0.75, 2: 0.2, 3: 0.05}


def sample_subset(rng, classes, classes_per_scene=None):
    weights = DEFAULT_CLASSES_PER_SCENE if classes_per_scene is None else classes_per_scene
    counts = sorted(int(k) for k in weights)
    p = np.array([weights[k] if k in weights else weights[str(k)] for k in counts], dtype=float)
    k = counts[rng.choice(len(counts), p=p / p.sum())]
    k = min(k, len(classes))
    return sorted(int(c) for c in rng.choice(classes, size=k, replace=False))


def make_scenes(seed, count, classes, canvas_size=64, classes_per_scene=None):
    """``count`` scenes over ``classes``; scene i depends only on (seed, i)."""
    children = np.random.SeedSequence(seed).spawn(count)
    scenes = []
    for child in children:
        rng = np.random.default_rng(child)
        subset = sample_subset(rng, list(classes), classes_per_scene)
        scenes.append(gen_scene(rng, subset, canvas_size))
    return scenes


# --- incremental splits ------------------------------------------------------

def split_incremental(scenes, step_spec: StepSpec):
    """Indices of the scenes available at each learning step."""
    universe = set(step_spec.classes)
    present = []
    for i, sc in enumerate(scenes):
        cls = set(sc.classes())
        if not cls <= universe:
            raise ValueError(f"scene {i} has classes {sorted(cls - universe)} outside the protocol")
        present.append(cls)
    out = []
    for t, step_classes in enumerate(step_spec.steps):
        future = set(c for s in step_spec.steps[t + 1:] for c in s)
        chosen = []
        for i, cls in enumerate(present):
            if not cls & set(step_classes):
                continue
            if step_spec.mode == "disjoint" and cls & future:
                continue
            chosen.append(i)
        out.append(chosen)
    return out


def relabel_for_step(label, step_spec: StepSpec, step):
    """Training labels at ``step``: current-step classes keep their channel, the rest is background."""
    table = np.full(256, BACKGROUND, dtype=np.int64)
    table[IGNORE] = IGNORE
    order = step_spec.class_order(step)
    for c in step_spec.steps[step]:
        table[c] = order.index(c)
    return table[np.asarray(label)]


def full_label(label, step_spec: StepSpec, step=None):
    """Ground truth in model channel space with every class up to ``step``."""
    return step_spec.lut(step)[np.asarray(label)]
