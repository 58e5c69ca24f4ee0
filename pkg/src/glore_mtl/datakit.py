"""Dataset ingestion, preprocessing, and the deterministic synthetic generator.

On-disk layout (documented in docs/dataset.md):

    <root>/seq_XX/images/NNNNN.png       RGB frame
    <root>/seq_XX/masks/NNNNN.png        8-bit palette PNG, values 0..7
    <root>/seq_XX/annotations/NNNNN.json {boxes, semantics, edges, targets}

Boxes are normalized [x1, y1, x2, y2]; node 0 of every annotation is the
single defective-tissue node. The synthetic generator writes the same layout
with rule-generated interaction labels so that end-to-end training can be
verified without any restricted data.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .labels import (
    NUM_INTERACTION_CLASSES,
    NUM_NODE_CATEGORIES,
    NUM_SEG_CLASSES,
    TISSUE_NODE_CATEGORY,
)
from .scenegraph import validate_scene_topology

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_SEQUENCES = (2, 3, 4, 6, 7, 9, 10, 11, 12, 14, 15)
DEFAULT_TEST_SEQUENCES = (1, 5, 16)
EXCLUDED_SEQUENCES = (13,)
CROSS_VAL_TEST_FOLDS = ((1, 5, 16), (2, 3, 15), (4, 6, 14), (4, 11, 12))

DEFAULT_IMAGE_SIZE = (320, 400)  # (H, W) working resolution
NATIVE_IMAGE_SIZE = (1024, 1280)
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)

# Render colors: index 0 is background; 1..7 are the instrument classes.
MASK_PALETTE = (
    (0, 0, 0),
    (220, 40, 40),
    (40, 200, 60),
    (50, 80, 230),
    (235, 220, 50),
    (50, 220, 220),
    (230, 60, 220),
    (245, 150, 40),
)
TISSUE_COLOR = (185, 115, 125)

INT_IDLE = 0
INT_RETRACTION = 2
INT_TISSUE_MANIPULATION = 3


class DatasetError(RuntimeError):
    """Raised for malformed dataset layouts or annotations."""


@dataclass(frozen=True)
class FrameRecord:
    sequence: int
    frame: int
    image_path: Path
    mask_path: Path
    annotation: dict

    @property
    def frame_id(self) -> str:
        return f"seq_{self.sequence:02d}/{self.frame:05d}"


@dataclass
class SceneSample:
    """One fully-loaded frame ready for the model."""

    image: torch.Tensor    # 3 x H x W, normalized
    mask: torch.Tensor     # H x W int64
    boxes: torch.Tensor    # M x 4 normalized
    semantics: list        # M node category ids; index 0 convention not required
    edges: list            # (tissue_idx, instrument_idx) pairs
    targets: torch.Tensor  # E x 13 binary
    frame_id: str = ""


def validate_annotation(annotation: dict, context: str = "") -> None:
    """Schema check for one annotation dict; raises DatasetError."""
    where = f" in {context}" if context else ""
    for key in ("boxes", "semantics", "edges", "targets"):
        if key not in annotation:
            raise DatasetError(f"annotation missing key {key!r}{where}")
    boxes = annotation["boxes"]
    semantics = annotation["semantics"]
    edges = annotation["edges"]
    targets = annotation["targets"]
    if len(boxes) != len(semantics):
        raise DatasetError(f"boxes/semantics length mismatch{where}")
    for i, box in enumerate(boxes):
        x1, y1, x2, y2 = (float(v) for v in box)
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise DatasetError(f"box {i} is not a valid normalized box{where}")
    try:
        validate_scene_topology(semantics, [tuple(e) for e in edges])
    except ValueError as exc:
        raise DatasetError(f"{exc}{where}") from exc
    if len(targets) != len(edges):
        raise DatasetError(f"targets/edges length mismatch{where}")
    for row in targets:
        if len(row) != NUM_INTERACTION_CLASSES:
            raise DatasetError(
                f"each target row must have {NUM_INTERACTION_CLASSES} entries{where}"
            )
        if any(int(v) not in (0, 1) for v in row):
            raise DatasetError(f"targets must be binary{where}")


def _resolve_split(split, present: list) -> list:
    if split == "train":
        wanted = [s for s in DEFAULT_TRAIN_SEQUENCES if s in present]
    elif split == "test":
        wanted = [s for s in DEFAULT_TEST_SEQUENCES if s in present]
    elif split == "all":
        wanted = list(present)
    else:
        wanted = [int(s) for s in split]
        missing = [s for s in wanted if s not in present]
        if missing:
            raise DatasetError(f"requested sequences not on disk: {missing}")
    skipped = [s for s in wanted if s in EXCLUDED_SEQUENCES]
    for s in skipped:
        logger.info("sequence %d present but excluded from use; skipping", s)
    return [s for s in wanted if s not in EXCLUDED_SEQUENCES]


def load_dataset(root, split="train", validate: bool = True) -> list:
    """Scan a dataset root and return FrameRecords for the requested split.

    ``split`` is "train", "test", "all", or an iterable of sequence numbers
    (cross-validation folds pass their test sequences explicitly).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    present = {}
    for seq_dir in sorted(root.glob("seq_*")):
        try:
            present[int(seq_dir.name.split("_")[1])] = seq_dir
        except (IndexError, ValueError):
            continue
    if not present:
        raise DatasetError(f"no seq_XX directories under {root}")

    records = []
    for seq in _resolve_split(split, sorted(present)):
        seq_dir = present[seq]
        image_paths = sorted((seq_dir / "images").glob("*.png"))
        if not image_paths:
            raise DatasetError(f"{seq_dir} contains no images")
        for image_path in image_paths:
            stem = image_path.stem
            mask_path = seq_dir / "masks" / f"{stem}.png"
            ann_path = seq_dir / "annotations" / f"{stem}.json"
            if not mask_path.is_file():
                raise DatasetError(f"missing mask for {image_path}")
            if not ann_path.is_file():
                raise DatasetError(f"missing annotation for {image_path}")
            annotation = json.loads(ann_path.read_text())
            if validate:
                validate_annotation(annotation, context=str(ann_path))
                labels = np.unique(np.array(Image.open(mask_path)))
                if labels.min() < 0 or labels.max() >= NUM_SEG_CLASSES:
                    raise DatasetError(
                        f"mask {mask_path} contains labels outside 0..{NUM_SEG_CLASSES - 1}"
                    )
            records.append(
                FrameRecord(
                    sequence=seq,
                    frame=int(stem),
                    image_path=image_path,
                    mask_path=mask_path,
                    annotation=annotation,
                )
            )
    if not records:
        raise DatasetError(f"split {split!r} matched no frames under {root}")
    return records


def preprocess(
    image,
    mask=None,
    size=DEFAULT_IMAGE_SIZE,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
    expected_size=None,
):
    """Resize (bilinear image, nearest mask) and normalize per channel.

    Returns ``(image 3 x H x W float32, mask H x W int64 or None)``. Boxes
    need no adjustment: they are normalized coordinates.
    """
    if not isinstance(image, Image.Image):
        image = Image.fromarray(np.asarray(image))
    if expected_size is not None and (image.height, image.width) != tuple(expected_size):
        raise DatasetError(
            f"input resolution {image.height}x{image.width} does not match the "
            f"expected {expected_size[0]}x{expected_size[1]}"
        )
    h, w = size
    image = image.convert("RGB").resize((w, h), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 1, 3)
    std = np.asarray(std, dtype=np.float32).reshape(1, 1, 3)
    tensor = torch.from_numpy(((arr - mean) / std).transpose(2, 0, 1).copy())

    mask_tensor = None
    if mask is not None:
        if not isinstance(mask, Image.Image):
            mask = Image.fromarray(np.asarray(mask))
        mask = mask.resize((w, h), Image.NEAREST)
        mask_tensor = torch.from_numpy(np.asarray(mask).astype(np.int64))
    return tensor, mask_tensor


def load_scene_sample(
    record: FrameRecord,
    size=DEFAULT_IMAGE_SIZE,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
) -> SceneSample:
    image, mask = preprocess(
        Image.open(record.image_path), Image.open(record.mask_path), size, mean, std
    )
    ann = record.annotation
    return SceneSample(
        image=image,
        mask=mask,
        boxes=torch.tensor(ann["boxes"], dtype=torch.float32),
        semantics=[int(s) for s in ann["semantics"]],
        edges=[tuple(e) for e in ann["edges"]],
        targets=torch.tensor(ann["targets"], dtype=torch.float32),
        frame_id=record.frame_id,
    )


def compute_channel_stats(records, size=DEFAULT_IMAGE_SIZE):
    """Per-channel mean/std over the raw (resized, unnormalized) images."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for record in records:
        image = Image.open(record.image_path).convert("RGB")
        image = image.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(image, dtype=np.float64) / 255.0
        total += arr.sum(axis=(0, 1))
        total_sq += (arr**2).sum(axis=(0, 1))
        count += arr.shape[0] * arr.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 1e-8)
    return tuple(float(m) for m in mean), tuple(float(s) for s in np.sqrt(var))


# ---------------------------------------------------------------------------
# Synthetic scene generation
# ---------------------------------------------------------------------------


def _draw_instrument(layer: ImageDraw.ImageDraw, class_id: int, cx, cy, s) -> None:
    """Rasterize the fixed shape for an instrument class, half-extent s."""
    x1, y1, x2, y2 = cx - s, cy - s, cx + s, cy + s
    if class_id == 1:
        layer.ellipse([x1, y1, x2, y2], fill=1)
    elif class_id == 2:
        layer.rectangle([x1, y1, x2, y2], fill=1)
    elif class_id == 3:
        layer.polygon([(cx, y1), (x2, y2), (x1, y2)], fill=1)
    elif class_id == 4:
        layer.ellipse([x1, cy - s // 2, x2, cy + s // 2], fill=1)
    elif class_id == 5:
        layer.polygon([(cx, y1), (x2, cy), (cx, y2), (x1, cy)], fill=1)
    elif class_id == 6:
        third = max(1, s // 3)
        layer.rectangle([x1, cy - third, x2, cy + third], fill=1)
        layer.rectangle([cx - third, y1, cx + third, y2], fill=1)
    elif class_id == 7:
        layer.ellipse([x1, y1, x2, y2], fill=1)
        hole = max(1, s // 2)
        layer.ellipse([cx - hole, cy - hole, cx + hole, cy + hole], fill=0)
    else:
        raise ValueError(f"no shape defined for class {class_id}")


def _layer_bbox(layer: np.ndarray):
    ys, xs = np.nonzero(layer)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def box_gap_pixels(a, b) -> int:
    """Largest axis-wise separation between two pixel boxes; 0 when they overlap."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    gap_x = max(0, max(ax1, bx1) - min(ax2, bx2))
    gap_y = max(0, max(ay1, by1) - min(ay2, by2))
    return max(gap_x, gap_y)


def interaction_rule(instrument_layer, instrument_bbox, tissue_layer, tissue_bbox, margin):
    """Idle / retraction / tissue-manipulation decision for one instrument."""
    if np.logical_and(instrument_layer, tissue_layer).any():
        return INT_TISSUE_MANIPULATION
    if box_gap_pixels(instrument_bbox, tissue_bbox) <= margin:
        return INT_RETRACTION
    return INT_IDLE


def _make_background(rng, h, w) -> np.ndarray:
    coarse = rng.integers(35, 95, size=(8, 10, 3), dtype=np.int64).astype(np.uint8)
    img = Image.fromarray(coarse).resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) + rng.normal(0, 5, size=(h, w, 3))
    return np.clip(arr, 0, 255).astype(np.uint8)


def _make_tissue_layer(rng, h, w) -> np.ndarray:
    cx = rng.uniform(0.3, 0.7) * w
    cy = rng.uniform(0.3, 0.7) * h
    base = rng.uniform(0.16, 0.26) * min(h, w)
    angles = np.linspace(0, 2 * math.pi, 14, endpoint=False)
    points = []
    for ang in angles:
        r = base * (1.0 + rng.uniform(-0.35, 0.35))
        points.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon(points, fill=1)
    return np.asarray(canvas, dtype=bool)


def synth_generate(
    root,
    n_frames: int,
    seed: int = 0,
    canvas=DEFAULT_IMAGE_SIZE,
    sequences=(2,),
    max_instruments: int = 3,
    margin: int = 12,
) -> list:
    """Write a deterministic synthetic dataset; returns per-frame ground truth.

    Frames hold a textured background, one amorphous tissue blob (background
    label in the mask), and 1..max_instruments non-overlapping colored shapes
    whose mask labels are their class ids. Interaction targets follow
    ``interaction_rule`` and are therefore perfectly recomputable from the
    geometry.
    """
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    root = Path(root)
    h, w = canvas
    rng = np.random.default_rng(seed)
    sequences = list(sequences)
    frame_counter = {s: 0 for s in sequences}
    truth = []

    for idx in range(n_frames):
        seq = sequences[idx % len(sequences)]
        frame = frame_counter[seq]
        frame_counter[seq] += 1

        image = _make_background(rng, h, w).astype(np.float64)
        tissue_layer = _make_tissue_layer(rng, h, w)
        tissue_bbox = _layer_bbox(tissue_layer)
        tint = rng.normal(0, 6, size=3)
        image[tissue_layer] = np.clip(np.asarray(TISSUE_COLOR, dtype=np.float64) + tint, 0, 255)

        n_instruments = int(rng.integers(1, max_instruments + 1))
        class_ids = rng.choice(np.arange(1, 8), size=n_instruments, replace=False)
        occupied = np.zeros((h, w), dtype=bool)
        layers = []
        for class_id in class_ids:
            placed = None
            for _ in range(60):
                s = int(rng.uniform(0.10, 0.20) * min(h, w) / 2) + 4
                mode = int(rng.integers(0, 3))
                if mode == 0:  # aim for overlap with the tissue blob
                    cx = rng.uniform(tissue_bbox[0], tissue_bbox[2])
                    cy = rng.uniform(tissue_bbox[1], tissue_bbox[3])
                elif mode == 1:  # aim for the near-miss band around it
                    side = rng.uniform(0, 2 * math.pi)
                    reach = max(tissue_bbox[2] - tissue_bbox[0], tissue_bbox[3] - tissue_bbox[1]) / 2
                    dist = reach + s + rng.uniform(0, margin)
                    cx = (tissue_bbox[0] + tissue_bbox[2]) / 2 + dist * math.cos(side)
                    cy = (tissue_bbox[1] + tissue_bbox[3]) / 2 + dist * math.sin(side)
                else:
                    cx = rng.uniform(s + 1, w - s - 1)
                    cy = rng.uniform(s + 1, h - s - 1)
                if not (s < cx < w - s - 1 and s < cy < h - s - 1):
                    continue
                layer_img = Image.new("L", (w, h), 0)
                _draw_instrument(ImageDraw.Draw(layer_img), int(class_id), cx, cy, s)
                layer = np.asarray(layer_img, dtype=bool)
                if layer.any() and not (layer & occupied).any():
                    placed = layer
                    break
            if placed is None:
                continue
            occupied |= placed
            layers.append((int(class_id), placed))

        if not layers:  # retry pattern would complicate determinism; force one
            fallback = Image.new("L", (w, h), 0)
            _draw_instrument(ImageDraw.Draw(fallback), int(class_ids[0]), w // 2, h // 4, min(h, w) // 8)
            layers.append((int(class_ids[0]), np.asarray(fallback, dtype=bool)))

        mask = np.zeros((h, w), dtype=np.uint8)
        boxes_px = []
        for class_id, layer in layers:
            mask[layer] = class_id
            color = np.asarray(MASK_PALETTE[class_id], dtype=np.float64)
            image[layer] = np.clip(color + rng.normal(0, 4, size=3), 0, 255)
            boxes_px.append(_layer_bbox(layer))

        boxes = [
            [tissue_bbox[0] / w, tissue_bbox[1] / h, (tissue_bbox[2] + 1) / w, (tissue_bbox[3] + 1) / h]
        ]
        semantics = [TISSUE_NODE_CATEGORY]
        edges = []
        targets = []
        for node, ((class_id, layer), bbox) in enumerate(zip(layers, boxes_px), start=1):
            boxes.append([bbox[0] / w, bbox[1] / h, (bbox[2] + 1) / w, (bbox[3] + 1) / h])
            semantics.append(class_id)
            edges.append([0, node])
            label = interaction_rule(layer, bbox, tissue_layer, tissue_bbox, margin)
            row = [0] * NUM_INTERACTION_CLASSES
            row[label] = 1
            targets.append(row)

        annotation = {
            "boxes": boxes,
            "semantics": semantics,
            "edges": edges,
            "targets": targets,
        }

        seq_dir = root / f"seq_{seq:02d}"
        for sub in ("images", "masks", "annotations"):
            (seq_dir / sub).mkdir(parents=True, exist_ok=True)
        stem = f"{frame:05d}"
        Image.fromarray(image.astype(np.uint8)).save(seq_dir / "images" / f"{stem}.png")
        mask_img = Image.fromarray(mask, mode="P")
        palette = [c for color in MASK_PALETTE for c in color]
        mask_img.putpalette(palette + [0] * (768 - len(palette)))
        mask_img.save(seq_dir / "masks" / f"{stem}.png")
        (seq_dir / "annotations" / f"{stem}.json").write_text(
            json.dumps(annotation, indent=1, sort_keys=True)
        )
        truth.append({"sequence": seq, "frame": frame, **annotation})
    return truth


def overlay_labels(image_rgb: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend class colors over an RGB image; background stays untouched."""
    if image_rgb.shape[:2] != labels.shape:
        raise ValueError("image and label map sizes disagree")
    out = image_rgb.astype(np.float64).copy()
    for class_id in range(1, NUM_SEG_CLASSES):
        sel = labels == class_id
        if sel.any():
            color = np.asarray(MASK_PALETTE[class_id], dtype=np.float64)
            out[sel] = (1 - alpha) * out[sel] + alpha * color
    return np.clip(out, 0, 255).astype(np.uint8)
