"""Synthetic proposal dataset: bright shapes on textured noise plus unlabelled distractors.

On disk a dataset is a directory::

    manifest.json        split name, count, image size, generator params + seed
    annotations.jsonl    {"image_id", "width", "height", "boxes": [[x1, y1, x2, y2], ...]}
    images/<id>.pgm      8-bit binary graymaps

Objects are filled rectangles or ellipses.  Distractors (hollow outlines,
striped patches, thin bars) share their brightness and edges but are never
annotated, which is what gives the RPN confident false positives to learn from.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

SMALL_MAX = 32 ** 2
MEDIUM_MAX = 96 ** 2
FORMAT_VERSION = 1

# box-area ranges sampled for each bucket, kept clear of the 32^2 / 96^2 edges
_AREA_RANGE = {"S": (10 ** 2, 28 ** 2), "M": (36 ** 2, 88 ** 2), "L": (100 ** 2, None)}


class DatasetError(ValueError):
    pass


@dataclass
class SampleRecord:
    image_id: str
    image: np.ndarray  # uint8 (C, H, W)
    gts: np.ndarray  # (N, 4) float64

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def tensor(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


@dataclass
class GeneratorParams:
    n: int
    image_size: int = 128
    size_mix: tuple = (0.3, 0.4, 0.3)
    objects_per_image: tuple = (1, 3)
    distractors_per_image: tuple = (2, 4)
    seed: int = 0
    stride: int = 8


@dataclass
class DatasetManifest:
    split: str
    count: int
    width: int
    height: int
    channels: int = 1
    generator: dict | None = None
    format_version: int = FORMAT_VERSION
    tool_version: str = __version__


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def validate_params(p: GeneratorParams):
    if p.n <= 0:
        raise DatasetError("n must be positive")
    if p.image_size <= 0 or p.image_size % p.stride:
        raise DatasetError(f"image size {p.image_size} must be a positive multiple of stride {p.stride}")
    mix = tuple(float(v) for v in p.size_mix)
    if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-6:
        raise DatasetError(f"size mix must be three non-negative proportions summing to 1, got {p.size_mix}")
    lo, hi = p.objects_per_image
    if lo < 1 or hi < lo:
        raise DatasetError("objects_per_image must be a range with 1 <= lo <= hi")
    dlo, dhi = p.distractors_per_image
    if dlo < 0 or dhi < dlo:
        raise DatasetError("distractors_per_image must be a range with 0 <= lo <= hi")
    side = p.image_size
    if mix[2] > 0 and side * side < _AREA_RANGE["L"][0]:
        raise DatasetError(f"size mix asks for large objects but a {side}x{side} image cannot hold one")
    if mix[1] > 0 and side * side < _AREA_RANGE["M"][0] * 2:
        raise DatasetError(f"size mix asks for medium objects but a {side}x{side} image is too small")


def _bucket_plan(rng, counts, mix):
    """Assign S/M/L to every object so the totals follow ``mix`` (largest remainder).

    Large objects go to distinct images first since two of them rarely fit
    side by side.
    """
    total = int(sum(counts))
    raw = np.array(mix) * total
    alloc = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - alloc), kind="stable")[: total - alloc.sum()]:
        alloc[i] += 1
    n_large = int(alloc[2])
    slots = [[None] * int(c) for c in counts]
    image_order = rng.permutation(len(counts))
    free = []
    for rnd in range(max(counts, default=0)):
        for i in image_order:
            if rnd < len(slots[i]):
                free.append((i, rnd))
    for i, r in free[:n_large]:
        slots[i][r] = "L"
    rest = np.repeat(np.array(["S", "M"]), alloc[:2])
    rng.shuffle(rest)
    for (i, r), b in zip(free[n_large:], rest):
        slots[i][r] = str(b)
    return slots


def _smooth_noise(rng, size, cells):
    coarse = rng.normal(0.0, 1.0, (cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _sample_size(rng, bucket, side):
    lo, hi = _AREA_RANGE[bucket]
    hi = side * side * 0.95 if hi is None else hi
    for _ in range(100):
        area = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        w = int(round(np.sqrt(area / ratio)))
        h = int(round(np.sqrt(area * ratio)))
        if 4 <= w <= side and 4 <= h <= side and lo <= w * h <= hi:
            return w, h
    raise DatasetError(f"could not sample a {bucket} object for image size {side}")


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _place(rng, w, h, side, taken):
    """Random position, preferring no contact with earlier boxes, else least overlap."""
    best, best_cost = None, None
    for _ in range(50):
        x1 = int(rng.integers(0, side - w + 1))
        y1 = int(rng.integers(0, side - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        grown = (x1 - 2, y1 - 2, x1 + w + 2, y1 + h + 2)
        cost = max([_box_iou(grown, t) for t in taken], default=0.0)
        if cost == 0.0:
            return box
        if best_cost is None or cost < best_cost:
            best, best_cost = box, cost
    return best


def _shape_mask(kind, w, h):
    if kind == "rect":
        return np.ones((h, w), dtype=bool)
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def _draw_distractor(rng, canvas, side):
    kind = rng.choice(["outline", "stripes", "bar"])
    if kind == "bar":
        length = int(rng.integers(20, max(21, side // 2)))
        thick = int(rng.integers(3, 6))
        w, h = (length, thick) if rng.random() < 0.5 else (thick, length)
    else:
        w = int(rng.integers(12, side // 2))
        h = int(np.clip(round(w * np.exp(rng.uniform(-0.5, 0.5))), 12, side - 1))
    x1 = int(rng.integers(0, side - w + 1))
    y1 = int(rng.integers(0, side - h + 1))
    level = rng.uniform(0.6, 0.95)
    patch = canvas[y1 : y1 + h, x1 : x1 + w]
    if kind == "outline":
        t = int(rng.integers(2, 4))
        patch[:t, :] = level
        patch[-t:, :] = level
        patch[:, :t] = level
        patch[:, -t:] = level
    elif kind == "stripes":
        period = int(rng.integers(4, 8))
        on = (np.arange(w) // (period // 2)) % 2 == 0 if rng.random() < 0.5 else None
        if on is None:
            rows = (np.arange(h) // (period // 2)) % 2 == 0
            patch[rows, :] = level
        else:
            patch[:, on] = level
    else:
        patch[:, :] = level


def _render(rng, side, buckets, n_distractors):
    img = 0.22 + 0.06 * _smooth_noise(rng, side, 4) + 0.03 * _smooth_noise(rng, side, 16)
    for _ in range(n_distractors):
        _draw_distractor(rng, img, side)

    sizes = [_sample_size(rng, b, side) for b in buckets]
    # draw large first so smaller objects stay visible on top
    order = sorted(range(len(sizes)), key=lambda i: -sizes[i][0] * sizes[i][1])
    boxes = [None] * len(sizes)
    taken = []
    for i in order:
        w, h = sizes[i]
        box = _place(rng, w, h, side, taken)
        taken.append(box)
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        mask = _shape_mask(kind, w, h)
        ys, xs = np.nonzero(mask)
        x1, y1 = box[0], box[1]
        level = rng.uniform(0.65, 0.95)
        shade = level + 0.05 * np.linspace(-1, 1, w)[None, :]
        region = img[y1 : y1 + h, x1 : x1 + w]
        region[mask] = np.broadcast_to(shade, (h, w))[mask]
        # darker rim keeps touching objects separable
        inner = np.zeros_like(mask)
        inner[1:-1, 1:-1] = mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
        region[mask & ~inner] = 0.6 * level
        boxes[i] = [float(x1 + xs.min()), float(y1 + ys.min()), float(x1 + xs.max() + 1), float(y1 + ys.max() + 1)]

    img = img + rng.normal(0.0, 0.02, img.shape)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img[None], np.array(boxes, dtype=np.float64).reshape(-1, 4)


def generate_synthetic_dataset(params: GeneratorParams, split: str = "train") -> Dataset:
    """Deterministic function of ``params`` (including its seed)."""
    validate_params(params)
    master = np.random.default_rng([params.seed, 0x5EED])
    lo, hi = params.objects_per_image
    counts = master.integers(lo, hi + 1, size=params.n)
    plans = _bucket_plan(master, counts, params.size_mix)
    dlo, dhi = params.distractors_per_image
    n_dis = master.integers(dlo, dhi + 1, size=params.n)
    samples = []
    for i in range(params.n):
        rng = np.random.default_rng([params.seed, i])
        img, gts = _render(rng, params.image_size, plans[i], int(n_dis[i]))
        samples.append(SampleRecord(f"{split}_{i:05d}", img, gts))
    gen = asdict(params)
    gen["size_mix"] = list(gen["size_mix"])
    gen["objects_per_image"] = list(gen["objects_per_image"])
    gen["distractors_per_image"] = list(gen["distractors_per_image"])
    manifest = DatasetManifest(split, params.n, params.image_size, params.image_size, 1, gen)
    return Dataset(manifest, samples)


def size_bucket_of_area(area: float) -> str:
    if area < SMALL_MAX:
        return "S"
    if area < MEDIUM_MAX:
        return "M"
    return "L"


# -- file I/O ----------------------------------------------------------------


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DatasetError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixels, found {pixels.size}")
    return pixels.reshape(1, h, w).copy()


def save_dataset(dataset: Dataset, path):
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    manifest = asdict(dataset.manifest)
    manifest["count"] = len(dataset.samples)
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path / "annotations.jsonl", "w") as fh:
        for s in dataset.samples:
            row = {"image_id": s.image_id, "width": s.width, "height": s.height, "boxes": s.gts.tolist()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    for s in dataset.samples:
        write_pgm(path / "images" / f"{s.image_id}.pgm", s.image)


def _parse_row(line, lineno, fname):
    try:
        row = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{fname}:{lineno}: malformed annotation row ({e.msg})") from None
    for key in ("image_id", "width", "height", "boxes"):
        if key not in row:
            raise DatasetError(f"{fname}:{lineno}: annotation row is missing {key!r}")
    boxes = row["boxes"]
    if not isinstance(boxes, list) or any(not isinstance(b, list) or len(b) != 4 for b in boxes):
        raise DatasetError(f"{fname}:{lineno}: boxes must be a list of [x1, y1, x2, y2]")
    return row


def validate_record(rec: SampleRecord):
    h, w = rec.height, rec.width
    for b in rec.gts:
        x1, y1, x2, y2 = b
        if not (x2 > x1 and y2 > y1):
            raise DatasetError(f"record {rec.image_id}: degenerate box {b.tolist()}")
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            raise DatasetError(f"record {rec.image_id}: box {b.tolist()} lies outside the {w}x{h} image")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise DatasetError(f"{path}: no manifest.json")
    with open(path / "manifest.json") as fh:
        manifest = DatasetManifest(**json.load(fh))
    samples = []
    ann = path / "annotations.jsonl"
    with open(ann) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = _parse_row(line, lineno, ann.name)
            img_path = path / "images" / f"{row['image_id']}.pgm"
            if not img_path.exists():
                raise DatasetError(f"missing image for record {row['image_id']}: {img_path}")
            image = read_pgm(img_path)
            if image.shape[1:] != (row["height"], row["width"]):
                raise DatasetError(f"record {row['image_id']}: image is {image.shape[2]}x{image.shape[1]}, annotation says {row['width']}x{row['height']}")
            rec = SampleRecord(row["image_id"], image, np.array(row["boxes"], dtype=np.float64).reshape(-1, 4))
            validate_record(rec)
            samples.append(rec)
    if len(samples) != manifest.count:
        raise DatasetError(f"{path}: manifest lists {manifest.count} samples, annotations have {len(samples)}")
    return Dataset(manifest, samples)


def dataset_digest(path) -> str:
    """sha256 over every file in a dataset directory, in sorted path order."""
    h = hashlib.sha256()
    for root, _, files in sorted(os.walk(path)):
        for f in sorted(files):
            p = Path(root) / f
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
