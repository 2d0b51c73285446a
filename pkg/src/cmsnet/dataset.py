"""Polygon annotations, layered rasterization, split manifests and synthetic scenes."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

CONDITIONS = ("daytime", "daytime-dust", "raining", "night", "evening")


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    priority: int
    color: tuple[int, int, int]


@dataclass
class ClassTable:
    classes: list[ClassInfo]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ConfigError("class ids must be dense 0..C-1 in order")

    def __len__(self):
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def by_name(self, name: str) -> ClassInfo:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def subset(self, n: int) -> "ClassTable":
        return ClassTable(self.classes[:n])

    def palette(self) -> np.ndarray:
        return np.array([c.color for c in self.classes], np.uint8)


# background < road < countable things; things share one priority so that
# later shapes in the file paint over earlier ones
DEFAULT_CLASSES = ClassTable([
    ClassInfo(0, "background", 0, (0, 0, 0)),
    ClassInfo(1, "road", 1, (128, 64, 128)),
    ClassInfo(2, "person", 2, (220, 20, 60)),
    ClassInfo(3, "car", 2, (0, 0, 142)),
    ClassInfo(4, "moto", 2, (0, 0, 230)),
    ClassInfo(5, "truck", 2, (0, 0, 70)),
    ClassInfo(6, "bus", 2, (0, 60, 100)),
    ClassInfo(7, "bike", 2, (119, 11, 32)),
    ClassInfo(8, "animal", 2, (152, 251, 152)),
    ClassInfo(9, "cone", 2, (250, 170, 30)),
])


@dataclass
class Shape:
    label: str
    class_name: str
    instance: int | None
    points: np.ndarray  # (k, 2) array of (x, y) pixel coordinates


@dataclass
class SceneAnnotation:
    width: int
    height: int
    shapes: list[Shape] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "imageWidth": self.width,
            "imageHeight": self.height,
            "shapes": [{"label": s.label, "points": s.points.tolist()} for s in self.shapes],
        })


_LABEL_RE = re.compile(r"^(?P<name>[A-Za-z_]+)(?:-(?P<inst>\d+))?$")


def parse_label(label: str, table: ClassTable = DEFAULT_CLASSES) -> tuple[str, int | None]:
    m = _LABEL_RE.match(label.strip())
    if not m or m.group("name") not in table.names:
        raise ParseError(f"unknown label {label!r}; valid classes: {', '.join(table.names)}")
    inst = m.group("inst")
    return m.group("name"), None if inst is None else int(inst)


def parse_annotation(text: str, table: ClassTable = DEFAULT_CLASSES, source: str = "<annotation>") -> SceneAnnotation:
    """Parse a LabelMe-style ``{imageWidth, imageHeight, shapes: [{label, points}]}`` document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")
    for key in ("imageWidth", "imageHeight", "shapes"):
        if key not in doc:
            raise ParseError(f"{source}: missing field {key!r}")
    try:
        width, height = int(doc["imageWidth"]), int(doc["imageHeight"])
    except (TypeError, ValueError):
        raise ParseError(f"{source}: imageWidth/imageHeight must be integers") from None
    if width < 1 or height < 1:
        raise ParseError(f"{source}: image dims must be positive")
    if not isinstance(doc["shapes"], list):
        raise ParseError(f"{source}: 'shapes' must be a list")
    shapes = []
    for k, item in enumerate(doc["shapes"]):
        where = f"{source}: shapes[{k}]"
        if not isinstance(item, dict) or "label" not in item or "points" not in item:
            raise ParseError(f"{where}: needs 'label' and 'points'")
        try:
            name, inst = parse_label(str(item["label"]), table)
        except ParseError as exc:
            raise ParseError(f"{where}: {exc}") from None
        try:
            pts = np.asarray(item["points"], dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"{where}.points: not a list of [x, y] pairs") from None
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ParseError(f"{where}.points: not a list of [x, y] pairs")
        if len(pts) < 3:
            raise ParseError(f"{where}.points: degenerate polygon with {len(pts)} vertices")
        shapes.append(Shape(str(item["label"]), name, inst, pts))
    return SceneAnnotation(width, height, shapes)


def load_annotation(path, table: ClassTable = DEFAULT_CLASSES) -> SceneAnnotation:
    return parse_annotation(Path(path).read_text(), table, str(path))


def fill_polygon(mask: np.ndarray, points: np.ndarray, value: int) -> None:
    """Even-odd scanline fill of pixels whose centers lie inside ``points``.

    Coverage is half-open: a pixel center exactly on a left or top edge is
    inside, on a right or bottom edge outside.  Out-of-bounds parts are clipped.
    """
    h, w = mask.shape
    x0, y0 = points[:, 0], points[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    rows = range(max(int(np.floor(y0.min())), 0), min(int(np.ceil(y0.max())) + 1, h))
    for y in rows:
        yc = y + 0.5
        crossing = ((y0 <= yc) & (yc < y1)) | ((y1 <= yc) & (yc < y0))
        if not crossing.any():
            continue
        xa, ya, xb, yb = x0[crossing], y0[crossing], x1[crossing], y1[crossing]
        xs = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        for left, right in zip(xs[0::2], xs[1::2]):
            c0 = max(int(np.ceil(left - 0.5)), 0)
            c1 = min(int(np.ceil(right - 0.5)), w)
            if c1 > c0:
                mask[y, c0:c1] = value


def rasterize(annotation: SceneAnnotation, table: ClassTable = DEFAULT_CLASSES) -> np.ndarray:
    """Paint shapes in ascending render priority (stable within a priority)."""
    mask = np.zeros((annotation.height, annotation.width), np.uint8)
    ordered = sorted(
        enumerate(annotation.shapes),
        key=lambda t: (table.by_name(t[1].class_name).priority, t[0]),
    )
    for _, shape in ordered:
        fill_polygon(mask, shape.points, table.by_name(shape.class_name).id)
    return mask


def write_mask(path, mask: np.ndarray) -> None:
    """8-bit single-channel mask (PNG or PGM, chosen by suffix)."""
    from PIL import Image

    path = Path(path)
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise DataError(f"{path}: mask must be 2-D with values in 0..255")
    Image.fromarray(mask.astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ParseError(f"{path}: mask must be single-channel, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise ParseError(f"{path}: unreadable mask ({e})") from None


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, np.uint8)).save(path)


def colorize(mask: np.ndarray, table: ClassTable = DEFAULT_CLASSES) -> np.ndarray:
    return table.palette()[np.asarray(mask)]


def overlay(image: np.ndarray, mask: np.ndarray, table: ClassTable = DEFAULT_CLASSES, alpha: float = 0.5) -> np.ndarray:
    blend = (1 - alpha) * image.astype(np.float64) + alpha * colorize(mask, table)
    return np.clip(np.rint(blend), 0, 255).astype(np.uint8)


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str
    mask_path: str
    condition: str
    split: str = ""


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    conditions: dict[str, str]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError("splits are not disjoint")
        if set().union(*sets) != set(self.conditions):
            raise ConfigError("splits do not cover the manifest")

    def split_of(self, sample_id: str) -> str:
        for name in ("train", "val", "test"):
            if sample_id in getattr(self, name):
                return name
        raise KeyError(sample_id)


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"sample_id", "image_path", "mask_path", "condition"}
        if not reader.fieldnames or not need <= set(reader.fieldnames):
            raise ParseError(f"{path}: header must contain {', '.join(sorted(need))}")
        rows = []
        for line, r in enumerate(reader, start=2):
            if r["condition"] not in CONDITIONS:
                raise ParseError(f"{path}:{line}: unknown condition {r['condition']!r}")
            rows.append(ManifestEntry(r["sample_id"], r["image_path"], r["mask_path"], r["condition"], r.get("split") or ""))
    return rows


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "image_path", "mask_path", "condition", "split"])
        for e in entries:
            w.writerow([e.sample_id, e.image_path, e.mask_path, e.condition, e.split])


def _allocate(n: int, ratios) -> list[int]:
    ideal = np.asarray(ratios, float) / float(sum(ratios)) * n
    counts = np.floor(ideal).astype(int)
    for k in np.argsort(-(ideal - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    if n >= len(counts):
        # stratification: every split gets at least one sample
        for k in range(len(counts)):
            if counts[k] == 0:
                counts[int(np.argmax(counts))] -= 1
                counts[k] = 1
    return counts.tolist()


def split_dataset(manifest, ratios=(0.73, 0.08, 0.19), seed: int = 42) -> SplitManifest:
    """Stratified per-condition train/val/test split.

    ``manifest`` is a sequence of :class:`ManifestEntry` or ``(sample_id, condition)``
    pairs.  Each condition is shuffled with a seeded generator and cut by
    largest-remainder rounding of ``ratios``.
    """
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError("ratios must be three nonnegative numbers with a positive sum")
    pairs = [(e.sample_id, e.condition) if isinstance(e, ManifestEntry) else (str(e[0]), str(e[1])) for e in manifest]
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sample ids in manifest")
    conditions = dict(pairs)
    rng = np.random.default_rng(seed)
    out = ([], [], [])
    for cond in sorted(set(conditions.values())):
        members = sorted(i for i, c in pairs if c == cond)
        members = [members[k] for k in rng.permutation(len(members))]
        start = 0
        for bucket, count in zip(out, _allocate(len(members), ratios)):
            bucket.extend(members[start:start + count])
            start += count
    return SplitManifest(sorted(out[0]), sorted(out[1]), sorted(out[2]), conditions)


def synthetic_annotation(seed: int, dims=(64, 96), n_classes: int = 2,
                         table: ClassTable = DEFAULT_CLASSES) -> SceneAnnotation:
    """Random road band plus geometric obstacles as a polygon annotation."""
    if n_classes < 2 or n_classes > len(table):
        raise ConfigError(f"n_classes must be in [2, {len(table)}]")
    h, w = dims
    rng = np.random.default_rng(seed)
    horizon = rng.uniform(0.3, 0.55) * h
    center = rng.uniform(0.35, 0.65) * w
    top_half = rng.uniform(0.12, 0.22) * w
    bottom_half = rng.uniform(0.5, 0.75) * w
    shift = rng.uniform(-0.1, 0.1) * w
    road = np.array([
        [center - bottom_half + shift, h + 1.0],
        [center - top_half, horizon],
        [center + top_half, horizon],
        [center + bottom_half + shift, h + 1.0],
    ])
    shapes = [Shape("road", "road", None, road)]
    things = table.names[2:n_classes]
    for k in range(int(rng.integers(1, 4)) if things else 0):
        name = things[int(rng.integers(len(things)))]
        cx = rng.uniform(0.2, 0.8) * w
        cy = rng.uniform(horizon + 0.1 * (h - horizon), h * 0.95)
        size = rng.uniform(0.06, 0.16) * min(h, w) * (0.5 + cy / h)
        kind = rng.integers(3)
        if kind == 0:
            pts = [[cx - size, cy - size], [cx + size, cy - size], [cx + size, cy + size], [cx - size, cy + size]]
        elif kind == 1:
            pts = [[cx, cy - size], [cx + size, cy + size], [cx - size, cy + size]]
        else:
            ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
            pts = np.c_[cx + size * np.cos(ang), cy + size * np.sin(ang)]
        shapes.append(Shape(f"{name}-{k}", name, k, np.asarray(pts, float)))
    return SceneAnnotation(w, h, shapes)


def render_scene(annotation: SceneAnnotation, mask: np.ndarray, seed: int,
                 table: ClassTable = DEFAULT_CLASSES) -> np.ndarray:
    """Color an image from ``mask``: shaded background, sandy road, flat obstacles."""
    h, w = mask.shape
    rng = np.random.default_rng(seed + 7919)
    yy = np.linspace(0, 1, h)[:, None, None]
    sky = np.array([150, 180, 210], float)
    ground = np.array([70, 110, 60], float)
    img = np.broadcast_to((1 - yy) * sky + yy * ground, (h, w, 3)).copy()
    road_col = np.array([200, 170, 120], float) + rng.uniform(-15, 15, 3)
    img[mask == 1] = road_col * (0.85 + 0.15 * np.broadcast_to(yy[..., 0], (h, w))[mask == 1])[:, None]
    for c in range(2, len(table)):
        sel = mask == c
        if sel.any():
            img[sel] = np.array(table.classes[c].color, float) * 0.7 + 40
    img += rng.normal(0, 4.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_scene(seed: int, dims=(64, 96), n_classes: int = 2,
                             table: ClassTable = DEFAULT_CLASSES):
    """Deterministic ``(image uint8 HxWx3, mask uint8 HxW)`` pair."""
    ann = synthetic_annotation(seed, dims, n_classes, table)
    mask = rasterize(ann, table)
    return render_scene(ann, mask, seed, table), mask
