"""Manifest-CSV image dataset.

The manifest schema is the harness's export format: a header row containing
at least ``label`` and ``local_path`` columns. Class order is sorted label
order; a validation manifest must be mapped with the training set's classes.
Unreadable images are dropped at construction via the ``on_bad_image``
callback so the caller can surface a warning.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable

from PIL import Image
from torch.utils.data import Dataset
from torchvision import transforms

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

NATIVE_INPUT = 224  # backbone's canonical input edge; smaller images are upscaled


def read_manifest(path: Path | str) -> list[tuple[str, str]]:
    """(local_path, label) rows in file order."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "local_path"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: not a manifest CSV (header {reader.fieldnames})")
        for row in reader:
            rows.append((row["local_path"], row["label"]))
    if not rows:
        raise ValueError(f"{path}: manifest has no rows")
    return rows


def build_transform(sample_path: str) -> transforms.Compose:
    with Image.open(sample_path) as first:
        edge = max(first.size)
    target = max(NATIVE_INPUT, edge)
    return transforms.Compose(
        [
            transforms.Resize((target, target)),
            transforms.ToTensor(),
            transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
        ]
    )


class ManifestDataset(Dataset):
    def __init__(
        self,
        manifest_path: Path | str,
        classes: list[str] | None = None,
        on_bad_image: Callable[[str, str], None] | None = None,
    ):
        rows = read_manifest(manifest_path)
        self.rows = []
        for path, label in rows:
            try:
                with Image.open(path) as image:
                    image.verify()
            except (OSError, SyntaxError) as exc:
                if on_bad_image:
                    on_bad_image(path, str(exc))
                continue
            self.rows.append((path, label))
        if not self.rows:
            raise ValueError(f"{manifest_path}: no readable images")
        self.classes = classes if classes is not None else sorted({label for _, label in self.rows})
        self.class_index = {label: i for i, label in enumerate(self.classes)}
        for _, label in self.rows:
            if label not in self.class_index:
                raise ValueError(f"label {label!r} not in training classes {self.classes}")
        self.transform = build_transform(self.rows[0][0])

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, index: int):
        path, label = self.rows[index]
        with Image.open(path) as image:
            tensor = self.transform(image.convert("RGB"))
        return tensor, self.class_index[label]
