"""Corpus curation: scanning, undersampling, stratified splits, thumbnails, manifest CSV.

All operations are pure functions of (inputs, seed). Shuffling uses the
package's splitmix64 generator so repeated runs on any platform produce
byte-identical manifests.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from PIL import Image

from .errors import ClassShortageError, DatasetError
from .rng import SplitMix64

log = logging.getLogger(__name__)

PLANT_CLASSES: dict[str, tuple[str, ...]] = {
    "apple": ("black-rot", "healthy", "rust", "scab"),
    "corn": ("gray-leaf-spot", "healthy", "northern-leaf-blight", "rust"),
}

RESOLUTIONS: tuple[int, ...] = (100, 150, 256)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png"}

MANIFEST_HEADER = ("id", "plant", "resolution", "label", "split", "phase", "local_path", "public_url")

# Split arithmetic: 80/20 test holdout, then 80/20 train/validation on the rest.
# For 200 samples per class this yields exactly 128 / 32 / 40.
_TEST_DENOM = 5
_VAL_DENOM = 5


@dataclass(frozen=True)
class ImageSample:
    """One labeled leaf image at one resolution."""

    id: str
    plant: str
    label: str
    local_path: str
    public_url: str | None = None
    resolution_px: int = 256

    def __post_init__(self):
        if self.plant not in PLANT_CLASSES:
            raise DatasetError(f"unknown plant {self.plant!r}")
        if self.label not in PLANT_CLASSES[self.plant]:
            raise DatasetError(f"label {self.label!r} is not a {self.plant} class")
        if self.resolution_px not in RESOLUTIONS:
            raise DatasetError(f"resolution {self.resolution_px} not in {RESOLUTIONS}")


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of samples for one (plant, resolution)."""

    plant: str
    resolution_px: int
    samples: tuple[ImageSample, ...]
    seed: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise DatasetError("sample ids are not unique")
        for s in self.samples:
            if s.plant != self.plant or s.resolution_px != self.resolution_px:
                raise DatasetError(f"sample {s.id} does not belong to this manifest")

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> dict[str, int]:
        counts = {label: 0 for label in PLANT_CLASSES[self.plant]}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.samples}

    def is_balanced(self) -> bool:
        counts = set(self.class_counts().values())
        return len(counts) == 1


@dataclass(frozen=True)
class SplitSpec:
    """Stratified train/validation/test assignment plus optional train phases."""

    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    phases: tuple[tuple[str, ...], ...] = ()
    seed: int = 0

    def assignment(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name in ("train", "validation", "test"):
            for sid in getattr(self, name):
                out[sid] = name
        return out

    def phase_of(self) -> dict[str, int]:
        return {sid: k + 1 for k, phase in enumerate(self.phases) for sid in phase}


def scan_dataset(root: Path | str, plant: str, resolution_px: int = 256) -> DatasetManifest:
    """Scan ``<root>/<plant>/<label>/*`` (or ``<root>/<plant>/<res>/<label>/*``).

    Files are ordered lexicographically by path; non-image files are skipped
    with a warning. A subdirectory that is not a known class for the plant is
    an error.
    """
    root = Path(root)
    if plant not in PLANT_CLASSES:
        raise DatasetError(f"unknown plant {plant!r}")
    if resolution_px == 256:
        # native resolution always reads the original tree, never a resized copy
        base = root / plant
    else:
        base = root / plant / str(resolution_px)
        if not base.is_dir():
            raise DatasetError(f"no {resolution_px}px tree under {root / plant}")
    if not base.is_dir():
        raise DatasetError(f"unreadable dataset directory {base}")

    samples: list[ImageSample] = []
    for label_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        label = label_dir.name
        if label in (str(r) for r in RESOLUTIONS):
            continue  # resized trees live alongside label folders
        if label not in PLANT_CLASSES[plant]:
            raise DatasetError(f"unrecognized label folder {label_dir}")
        for path in sorted(label_dir.iterdir()):
            if not path.is_file():
                continue
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                log.warning("skipping non-image file %s", path)
                continue
            samples.append(
                ImageSample(
                    id=f"{label}/{path.stem}",
                    plant=plant,
                    label=label,
                    local_path=path.as_posix(),
                    resolution_px=resolution_px,
                )
            )
    return DatasetManifest(plant=plant, resolution_px=resolution_px, samples=tuple(samples))


def undersample_balance(manifest: DatasetManifest, per_class: int, seed: int) -> DatasetManifest:
    """Reduce every class to exactly ``per_class`` samples by seeded sampling.

    Selection order of the survivors follows the input manifest; classes are
    drawn in sorted label order from a single splitmix64 stream, so the result
    is a pure function of (manifest, seed).
    """
    if per_class < 0:
        raise DatasetError("per_class must be non-negative")
    counts = manifest.class_counts()
    for label in sorted(counts):
        if counts[label] < per_class:
            raise ClassShortageError(label, counts[label], per_class)

    rng = SplitMix64(seed)
    keep: set[str] = set()
    by_label: dict[str, list[ImageSample]] = {label: [] for label in sorted(counts)}
    for s in manifest.samples:
        by_label[s.label].append(s)
    for label in sorted(by_label):
        chosen = rng.sample_without_replacement(by_label[label], per_class)
        keep.update(s.id for s in chosen)

    survivors = tuple(s for s in manifest.samples if s.id in keep)
    return replace(manifest, samples=survivors, seed=seed)


def split_dataset(manifest: DatasetManifest, seed: int = 42) -> SplitSpec:
    """Stratified 80/20 test holdout, then 80/20 train/validation on the rest.

    Every class must have the same sample count, divisible by 25 so the
    per-class allocations are integral (200 -> 128/32/40). Each class is
    shuffled independently; the combined subsets are shuffled once more so a
    later contiguous phase partition mixes classes.
    """
    counts = manifest.class_counts()
    sizes = set(counts.values())
    if len(sizes) != 1:
        raise DatasetError(f"manifest is not balanced: {counts}")
    n_class = sizes.pop()
    if n_class == 0 or n_class % (_TEST_DENOM * _VAL_DENOM) != 0:
        raise DatasetError(f"per-class count {n_class} does not yield integral stratified splits")
    n_test = n_class // _TEST_DENOM
    n_val = (n_class - n_test) // _VAL_DENOM
    n_train = n_class - n_test - n_val

    rng = SplitMix64(seed)
    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    by_label: dict[str, list[str]] = {label: [] for label in sorted(counts)}
    for s in manifest.samples:
        by_label[s.label].append(s.id)
    for label in sorted(by_label):
        ids = list(by_label[label])
        rng.shuffle(ids)
        train.extend(ids[:n_train])
        val.extend(ids[n_train : n_train + n_val])
        test.extend(ids[n_train + n_val :])
    rng.shuffle(train)
    rng.shuffle(val)
    rng.shuffle(test)
    return SplitSpec(train=tuple(train), validation=tuple(val), test=tuple(test), seed=seed)


def partition_phases(split: SplitSpec, phase_size: int = 128) -> SplitSpec:
    """Slice the (already shuffled) train list into contiguous disjoint phases."""
    if phase_size <= 0:
        raise DatasetError("phase_size must be positive")
    if len(split.train) % phase_size != 0:
        raise DatasetError(f"train size {len(split.train)} is not divisible by phase size {phase_size}")
    phases = tuple(
        tuple(split.train[i : i + phase_size]) for i in range(0, len(split.train), phase_size)
    )
    return replace(split, phases=phases)


def fit_within(width: int, height: int, size: int) -> tuple[int, int]:
    """Output dimensions for an aspect-preserving fit into a size x size box.

    Round-half-up on the scaled dimensions; images already within the box are
    left unscaled.
    """
    scale = min(1.0, size / max(width, height))
    return (int(width * scale + 0.5), int(height * scale + 0.5))


def make_thumbnails(manifest: DatasetManifest, sizes: Sequence[int]) -> list[DatasetManifest]:
    """Write aspect-preserving thumbnails under per-size subfolders.

    ``<plant>/<label>/<file>`` becomes ``<plant>/<size>/<label>/<file>``.
    Decode failures are reported per file and the run continues; the failed
    sample is dropped from the emitted manifest.
    """
    out: list[DatasetManifest] = []
    for size in sizes:
        if size not in RESOLUTIONS:
            raise DatasetError(f"thumbnail size {size} not in {RESOLUTIONS}")
        resized: list[ImageSample] = []
        for s in manifest.samples:
            src = Path(s.local_path)
            dest = src.parent.parent / str(size) / s.label / src.name
            dest.parent.mkdir(parents=True, exist_ok=True)
            try:
                with Image.open(src) as im:
                    dims = fit_within(im.width, im.height, size)
                    im.resize(dims, Image.BILINEAR).save(dest)
            except (OSError, ValueError) as exc:
                log.warning("cannot thumbnail %s: %s", src, exc)
                continue
            resized.append(
                replace(s, local_path=dest.as_posix(), resolution_px=size, public_url=None)
            )
        out.append(DatasetManifest(plant=manifest.plant, resolution_px=size,
                                   samples=tuple(resized), seed=manifest.seed))
    return out


def with_public_urls(manifest: DatasetManifest, url_base: str, root: Path | str) -> DatasetManifest:
    """Assign ``<url_base>/<path relative to root>`` to every sample."""
    root = Path(root)
    base = url_base.rstrip("/")
    samples = tuple(
        replace(s, public_url=f"{base}/{Path(s.local_path).relative_to(root).as_posix()}")
        for s in manifest.samples
    )
    return replace(manifest, samples=samples)


def export_manifest_csv(manifest: DatasetManifest, split: SplitSpec | None, dest: Path | str) -> Path:
    """Write the manifest as UTF-8, LF-terminated CSV in manifest order."""
    if not manifest.samples:
        raise DatasetError("refusing to export an empty manifest")
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    assignment = split.assignment() if split else {}
    phase_of = split.phase_of() if split else {}
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            phase = phase_of.get(s.id)
            writer.writerow(
                [
                    s.id,
                    s.plant,
                    s.resolution_px,
                    s.label,
                    assignment.get(s.id, ""),
                    "" if phase is None else phase,
                    s.local_path,
                    s.public_url or "",
                ]
            )
    return dest


def import_manifest_csv(path: Path | str, seed: int = 0) -> tuple[DatasetManifest, SplitSpec]:
    """Inverse of :func:`export_manifest_csv`.

    Seeds are not part of the CSV schema; the caller supplies one when it
    matters. Phase lists are reconstructed in row order.
    """
    path = Path(path)
    samples: list[ImageSample] = []
    split_lists: dict[str, list[str]] = {"train": [], "validation": [], "test": []}
    phase_lists: dict[int, list[str]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{path}: unexpected manifest header {header}")
        for row in reader:
            sid, plant, res, label, split_name, phase, local_path, public_url = row
            samples.append(
                ImageSample(
                    id=sid,
                    plant=plant,
                    label=label,
                    local_path=local_path,
                    public_url=public_url or None,
                    resolution_px=int(res),
                )
            )
            if split_name:
                split_lists[split_name].append(sid)
            if phase:
                phase_lists.setdefault(int(phase), []).append(sid)
    if not samples:
        raise DatasetError(f"{path}: empty manifest")
    manifest = DatasetManifest(
        plant=samples[0].plant,
        resolution_px=samples[0].resolution_px,
        samples=tuple(samples),
        seed=seed,
    )
    phases = tuple(tuple(phase_lists[k]) for k in sorted(phase_lists))
    split = SplitSpec(
        train=tuple(split_lists["train"]),
        validation=tuple(split_lists["validation"]),
        test=tuple(split_lists["test"]),
        phases=phases,
        seed=seed,
    )
    return manifest, split


def subset(manifest: DatasetManifest, ids: Iterable[str]) -> DatasetManifest:
    """Samples with the given ids, in the order the ids are listed."""
    lookup = manifest.by_id()
    try:
        samples = tuple(lookup[i] for i in ids)
    except KeyError as exc:
        raise DatasetError(f"id {exc.args[0]!r} not in manifest") from None
    return replace(manifest, samples=samples)
