"""Synthetic four-class shapes corpus for trainer tests.

Classes are separable by both silhouette and hue (red circle, green square,
blue triangle, yellow cross) on noisy dark backgrounds, so even a randomly
initialized backbone learns them within a few epochs. Emits images plus
train/validation manifest CSVs in the harness's manifest schema.
"""

from __future__ import annotations

import csv
import random
from pathlib import Path

from PIL import Image, ImageDraw

CLASSES = ("blue-triangle", "green-square", "red-circle", "yellow-cross")

_FILLS = {
    "red-circle": (205, 30, 30),
    "green-square": (25, 160, 40),
    "blue-triangle": (35, 60, 200),
    "yellow-cross": (220, 200, 30),
}

MANIFEST_HEADER = ("id", "plant", "resolution", "label", "split", "phase", "local_path", "public_url")


def _draw_sample(label: str, size: int, rng: random.Random) -> Image.Image:
    background = tuple(rng.randint(10, 60) for _ in range(3))
    image = Image.new("RGB", (size, size), background)
    draw = ImageDraw.Draw(image)
    fill = tuple(min(255, c + rng.randint(-25, 25)) for c in _FILLS[label])
    margin = size // 5 + rng.randint(-size // 16, size // 16)
    lo, hi = margin, size - margin
    mid = size // 2
    if label == "red-circle":
        draw.ellipse([lo, lo, hi, hi], fill=fill)
    elif label == "green-square":
        draw.rectangle([lo, lo, hi, hi], fill=fill)
    elif label == "blue-triangle":
        draw.polygon([(mid, lo), (lo, hi), (hi, hi)], fill=fill)
    else:
        arm = max(2, size // 8)
        draw.rectangle([mid - arm, lo, mid + arm, hi], fill=fill)
        draw.rectangle([lo, mid - arm, hi, mid + arm], fill=fill)
    # speckle noise so the task is not literally constant-color
    for _ in range(size):
        x, y = rng.randrange(size), rng.randrange(size)
        draw.point((x, y), fill=tuple(rng.randint(0, 255) for _ in range(3)))
    return image


def generate_shapes_corpus(
    root: Path | str,
    train_per_class: int = 16,
    val_per_class: int = 8,
    size: int = 64,
    seed: int = 7,
) -> tuple[Path, Path]:
    """Write the corpus and return (train manifest path, validation manifest path)."""
    root = Path(root)
    rng = random.Random(seed)
    rows: dict[str, list[tuple[str, str]]] = {"train": [], "validation": []}
    for label in CLASSES:
        folder = root / "shapes" / label
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(train_per_class + val_per_class):
            path = folder / f"{label}-{i}.png"
            _draw_sample(label, size, rng).save(path)
            split = "train" if i < train_per_class else "validation"
            rows[split].append((f"{label}/{label}-{i}", label, str(path)))

    manifests = []
    for split in ("train", "validation"):
        dest = root / f"shapes-{split}.csv"
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for sample_id, label, path in rows[split]:
                writer.writerow([sample_id, "shapes", size, label, split, "", path, ""])
        manifests.append(dest)
    return manifests[0], manifests[1]
