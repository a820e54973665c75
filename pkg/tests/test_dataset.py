from __future__ import annotations

import logging
from pathlib import Path

import pytest
from PIL import Image

from leafbench import dataset as ds
from leafbench.errors import ClassShortageError, DatasetError

from conftest import build_corpus


@pytest.fixture(scope="module")
def apple(tmp_path_factory):
    root = build_corpus(tmp_path_factory.mktemp("apple_corpus"), per_class=25, plants=("apple",), size=64)
    return root, ds.scan_dataset(root, "apple")


class TestScan:
    def test_counts_and_order(self, apple):
        _, manifest = apple
        assert len(manifest) == 100
        assert manifest.class_counts() == {c: 25 for c in ds.PLANT_CLASSES["apple"]}
        paths = [s.local_path for s in manifest.samples]
        assert paths == sorted(paths)

    def test_empty_root_is_empty_manifest(self, tmp_path):
        (tmp_path / "apple").mkdir()
        manifest = ds.scan_dataset(tmp_path, "apple")
        assert len(manifest) == 0

    def test_missing_root_errors(self, tmp_path):
        with pytest.raises(DatasetError):
            ds.scan_dataset(tmp_path / "nope", "apple")

    def test_non_image_skipped_with_warning(self, tmp_path, caplog):
        build_corpus(tmp_path, per_class=2, plants=("apple",), size=16)
        (tmp_path / "apple" / "rust" / "notes.txt").write_text("stray")
        with caplog.at_level(logging.WARNING):
            manifest = ds.scan_dataset(tmp_path, "apple")
        assert len(manifest) == 8
        assert any("notes.txt" in r.message for r in caplog.records)

    def test_unrecognized_label_folder_errors(self, tmp_path):
        build_corpus(tmp_path, per_class=1, plants=("apple",), size=16)
        (tmp_path / "apple" / "mildew").mkdir()
        with pytest.raises(DatasetError, match="mildew"):
            ds.scan_dataset(tmp_path, "apple")

    def test_duplicate_ids_rejected(self, apple):
        _, manifest = apple
        with pytest.raises(DatasetError, match="unique"):
            ds.DatasetManifest(
                plant="apple",
                resolution_px=256,
                samples=manifest.samples[:1] + manifest.samples[:1],
            )


class TestBalance:
    def test_exact_per_class(self, apple):
        _, manifest = apple
        balanced = ds.undersample_balance(manifest, 20, seed=1)
        assert balanced.class_counts() == {c: 20 for c in ds.PLANT_CLASSES["apple"]}

    def test_zero_gives_empty(self, apple):
        _, manifest = apple
        assert len(ds.undersample_balance(manifest, 0, seed=1)) == 0

    def test_shortage_names_class(self, apple):
        _, manifest = apple
        trimmed = ds.DatasetManifest(
            plant="apple",
            resolution_px=256,
            samples=tuple(s for s in manifest.samples if s.label != "rust")
            + tuple(s for s in manifest.samples if s.label == "rust")[:15],
        )
        with pytest.raises(ClassShortageError, match="rust"):
            ds.undersample_balance(trimmed, 20, seed=1)

    def test_deterministic(self, apple):
        _, manifest = apple
        a = ds.undersample_balance(manifest, 20, seed=9)
        b = ds.undersample_balance(manifest, 20, seed=9)
        c = ds.undersample_balance(manifest, 20, seed=10)
        assert [s.id for s in a.samples] == [s.id for s in b.samples]
        assert [s.id for s in a.samples] != [s.id for s in c.samples]


@pytest.fixture(scope="module")
def balanced_split(apple):
    _, manifest = apple
    balanced = ds.undersample_balance(manifest, 25, seed=42)
    split = ds.split_dataset(balanced, seed=42)
    return balanced, split


class TestSplit:
    def test_sizes(self, balanced_split):
        balanced, split = balanced_split
        # 25 per class -> 16/4/5 per class -> 64/16/20 overall
        assert (len(split.train), len(split.validation), len(split.test)) == (64, 16, 20)

    def test_stratified_per_class(self, balanced_split):
        balanced, split = balanced_split
        lookup = balanced.by_id()
        for ids, expected in ((split.train, 16), (split.validation, 4), (split.test, 5)):
            for label in ds.PLANT_CLASSES["apple"]:
                assert sum(lookup[i].label == label for i in ids) == expected

    def test_partition_laws(self, balanced_split):
        balanced, split = balanced_split
        train, val, test = set(split.train), set(split.validation), set(split.test)
        assert not (train & val) and not (train & test) and not (val & test)
        assert train | val | test == set(balanced.by_id())

    def test_deterministic_given_seed(self, balanced_split):
        balanced, split = balanced_split
        assert ds.split_dataset(balanced, seed=42) == split
        assert ds.split_dataset(balanced, seed=7) != split

    def test_unbalanced_rejected(self, apple):
        _, manifest = apple
        with pytest.raises(DatasetError, match="balanced"):
            ds.split_dataset(ds.DatasetManifest("apple", 256, manifest.samples[:97]), seed=42)

    def test_indivisible_count_rejected(self, apple):
        _, manifest = apple
        trimmed = []
        for label in ds.PLANT_CLASSES["apple"]:
            trimmed.extend([s for s in manifest.samples if s.label == label][:10])
        with pytest.raises(DatasetError, match="integral"):
            ds.split_dataset(ds.DatasetManifest("apple", 256, tuple(trimmed)), seed=42)


class TestPhases:
    def test_four_phases(self, balanced_split):
        _, split = balanced_split
        phased = ds.partition_phases(split, phase_size=16)
        assert len(phased.phases) == 4
        assert all(len(p) == 16 for p in phased.phases)

    def test_identity_partition(self, balanced_split):
        _, split = balanced_split
        phased = ds.partition_phases(split, phase_size=len(split.train))
        assert phased.phases == (split.train,)

    def test_phases_partition_train(self, balanced_split):
        _, split = balanced_split
        phased = ds.partition_phases(split, phase_size=16)
        seen: set[str] = set()
        for phase in phased.phases:
            assert not (seen & set(phase))
            seen |= set(phase)
        assert seen == set(split.train)
        assert tuple(i for phase in phased.phases for i in phase) == split.train

    def test_indivisible_rejected(self, balanced_split):
        _, split = balanced_split
        with pytest.raises(DatasetError):
            ds.partition_phases(split, phase_size=48)


class TestThumbnails:
    def test_fit_within_dimensions(self):
        assert ds.fit_within(256, 256, 100) == (100, 100)
        assert ds.fit_within(256, 192, 100) == (100, 75)
        assert ds.fit_within(256, 256, 256) == (256, 256)
        assert ds.fit_within(64, 64, 100) == (64, 64)  # never upscale

    def test_square_outputs(self, tmp_path):
        root = build_corpus(tmp_path, per_class=2, plants=("apple",), size=256)
        manifest = ds.scan_dataset(root, "apple")
        out = ds.make_thumbnails(manifest, [100])
        assert len(out) == 1 and out[0].resolution_px == 100
        for s in out[0].samples:
            with Image.open(s.local_path) as im:
                assert im.size == (100, 100)
            assert f"/100/{s.label}/" in s.local_path

    def test_aspect_ratio_preserved(self, tmp_path):
        folder = tmp_path / "apple" / "scab"
        folder.mkdir(parents=True)
        Image.new("RGB", (256, 192), (10, 10, 10)).save(folder / "scab-0.JPG")
        manifest = ds.scan_dataset(tmp_path, "apple")
        out = ds.make_thumbnails(manifest, [100])[0]
        with Image.open(out.samples[0].local_path) as im:
            assert im.size == (100, 75)
            assert abs(im.width / im.height - 256 / 192) < 0.02

    def test_decode_failure_skips_and_continues(self, tmp_path, caplog):
        root = build_corpus(tmp_path, per_class=2, plants=("apple",), size=32)
        bad = root / "apple" / "rust" / "rust-0.JPG"
        bad.write_bytes(b"not a jpeg")
        manifest = ds.scan_dataset(root, "apple")
        with caplog.at_level(logging.WARNING):
            out = ds.make_thumbnails(manifest, [100])[0]
        assert len(out) == len(manifest) - 1
        assert any("rust-0" in r.message for r in caplog.records)


class TestManifestCsv:
    def test_row_count_and_header(self, balanced_split, tmp_path):
        balanced, split = balanced_split
        dest = ds.export_manifest_csv(balanced, split, tmp_path / "m.csv")
        lines = dest.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(balanced) + 1
        assert lines[0] == "id,plant,resolution,label,split,phase,local_path,public_url"

    def test_split_column_values(self, balanced_split, tmp_path):
        balanced, split = balanced_split
        dest = ds.export_manifest_csv(balanced, split, tmp_path / "m.csv")
        seen = {line.split(",")[4] for line in dest.read_text().splitlines()[1:]}
        assert seen == {"train", "validation", "test"}

    def test_round_trip_byte_identical(self, balanced_split, tmp_path):
        balanced, split = balanced_split
        split = ds.partition_phases(split, phase_size=16)
        first = ds.export_manifest_csv(balanced, split, tmp_path / "a.csv")
        manifest2, split2 = ds.import_manifest_csv(first)
        second = ds.export_manifest_csv(manifest2, split2, tmp_path / "b.csv")
        assert first.read_bytes() == second.read_bytes()

    def test_lf_line_endings(self, balanced_split, tmp_path):
        balanced, split = balanced_split
        dest = ds.export_manifest_csv(balanced, split, tmp_path / "m.csv")
        raw = dest.read_bytes()
        assert b"\r" not in raw and raw.endswith(b"\n")

    def test_empty_manifest_rejected(self, tmp_path):
        empty = ds.DatasetManifest("apple", 256, ())
        with pytest.raises(DatasetError):
            ds.export_manifest_csv(empty, None, tmp_path / "m.csv")


def test_public_urls(apple, tmp_path):
    root, manifest = apple
    tagged = ds.with_public_urls(manifest, "https://img.example/leaves/", root)
    sample = tagged.samples[0]
    assert sample.public_url.startswith("https://img.example/leaves/apple/")
    assert sample.public_url.endswith(".JPG")


def test_subset_preserves_requested_order(apple):
    _, manifest = apple
    ids = [manifest.samples[5].id, manifest.samples[2].id]
    sub = ds.subset(manifest, ids)
    assert [s.id for s in sub.samples] == ids
    with pytest.raises(DatasetError):
        ds.subset(manifest, ["missing/id"])
