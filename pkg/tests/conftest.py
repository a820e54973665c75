from __future__ import annotations

from pathlib import Path

import pytest
from PIL import Image

from leafbench.dataset import PLANT_CLASSES

GOLDEN_DIR = Path(__file__).parent / "golden"


def build_corpus(root: Path, per_class: int = 10, plants=("apple", "corn"), size: int = 256) -> Path:
    """Class-per-folder tree of tiny JPEGs named ``<label>-<n>.JPG``."""
    for plant in plants:
        for label in PLANT_CLASSES[plant]:
            folder = root / plant / label
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                color = (hash((plant, label, i)) % 200 + 30, (i * 37) % 255, 90)
                Image.new("RGB", (size, size), color).save(folder / f"{label}-{i}.JPG")
    return root


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory) -> Path:
    """Small shared corpus: 10 images per class, both plants, 256px."""
    return build_corpus(tmp_path_factory.mktemp("corpus"), per_class=10)


@pytest.fixture()
def golden():
    def load(name: str) -> str:
        return (GOLDEN_DIR / name).read_text(encoding="utf-8")

    return load
