import json

import numpy as np
import pytest
import torch

from coftad.data import (
    CorruptionSpec,
    DatasetManifest,
    FewShotSplit,
    SynthSpec,
    build_corruption_protocol,
    corrupt_image,
    crop_patches,
    load_image,
    load_image_folder,
    render_normal_image,
    resolve_path,
    sample_few_shot,
    save_image,
    subsample_anomalies,
    synth_dataset,
)
from coftad.errors import DataError
from coftad.seeding import seed_stream


def write_folder_dataset(root, n_normal, n_abnormal, size=12):
    rng = seed_stream(0, "folder-fixture")
    for i in range(n_normal):
        save_image(torch.rand(3, size, size, generator=torch.Generator().manual_seed(i)), root / "normal" / f"n{i:03d}.png")
    for i in range(n_abnormal):
        save_image(
            torch.rand(3, size, size, generator=torch.Generator().manual_seed(1000 + i)),
            root / "abnormal" / f"a{i:03d}.png",
        )
    del rng
    return root


class TestLoadImageFolder:
    def test_counts_and_labels(self, tmp_path):
        write_folder_dataset(tmp_path, 3, 2)
        manifest = load_image_folder(tmp_path)
        assert len(manifest.entries) == 5
        assert len(manifest.normals()) == 3
        assert len(manifest.abnormals()) == 2

    def test_empty_abnormal_folder(self, tmp_path):
        write_folder_dataset(tmp_path, 2, 0)
        (tmp_path / "abnormal").mkdir()
        manifest = load_image_folder(tmp_path)
        assert len(manifest.abnormals()) == 0

    def test_duplicate_filename_across_folders_is_path_qualified(self, tmp_path):
        img = torch.rand(3, 8, 8)
        save_image(img, tmp_path / "normal" / "same.png")
        save_image(img, tmp_path / "abnormal" / "same.png")
        manifest = load_image_folder(tmp_path)
        ids = [e.path for e in manifest.entries]
        assert len(set(ids)) == 2
        assert "normal/same.png" in ids and "abnormal/same.png" in ids

    def test_missing_normal_folder_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_image_folder(tmp_path)

    def test_unreadable_image_skipped_and_reported(self, tmp_path):
        write_folder_dataset(tmp_path, 2, 0)
        (tmp_path / "normal" / "broken.png").write_bytes(b"not a png at all")
        manifest = load_image_folder(tmp_path)
        assert len(manifest.normals()) == 2
        assert manifest.skipped == ["normal/broken.png"]

    def test_png_round_trip_bitwise(self, tmp_path):
        img = torch.rand(3, 9, 9)
        quantized = (img * 255.0).round() / 255.0
        path = save_image(img, tmp_path / "normal" / "x.png")
        np.testing.assert_allclose(load_image(path).numpy(), quantized.numpy(), atol=1e-7)


class TestSampleFewShot:
    def test_flowers_style_protocol_sizes(self, tmp_path):
        write_folder_dataset(tmp_path, 80, 10, size=8)
        manifest = load_image_folder(tmp_path)
        split = sample_few_shot(manifest, k=5, seed=0, reserve_test=(70, 10))
        assert len(split.train_ids) == 5
        assert len(split.test_normal_ids) == 70
        assert len(split.test_abnormal_ids) == 10
        assert not set(split.train_ids) & set(split.test_normal_ids)

    def test_same_seed_reproduces_ids(self, tmp_path):
        write_folder_dataset(tmp_path, 12, 4, size=8)
        manifest = load_image_folder(tmp_path)
        a = sample_few_shot(manifest, 3, seed=9, reserve_test=(5, 2))
        b = sample_few_shot(manifest, 3, seed=9, reserve_test=(5, 2))
        assert a.train_ids == b.train_ids
        assert a.test_normal_ids == b.test_normal_ids
        assert a.test_abnormal_ids == b.test_abnormal_ids

    def test_all_normals_trainable_with_zero_reserve(self, tmp_path):
        write_folder_dataset(tmp_path, 6, 3, size=8)
        manifest = load_image_folder(tmp_path)
        split = sample_few_shot(manifest, 6, seed=1, reserve_test=(0, 3))
        assert sorted(split.train_ids) == sorted(e.path for e in manifest.normals())

    def test_insufficient_counts_error_states_shortfall(self, tmp_path):
        write_folder_dataset(tmp_path, 4, 1, size=8)
        manifest = load_image_folder(tmp_path)
        with pytest.raises(DataError, match="need"):
            sample_few_shot(manifest, 3, seed=0, reserve_test=(5, 1))

    def test_split_round_trips_through_file(self, tmp_path):
        write_folder_dataset(tmp_path, 8, 2, size=8)
        manifest = load_image_folder(tmp_path)
        split = sample_few_shot(manifest, 2, seed=4, reserve_test=(4, 2))
        path = split.save(tmp_path / "split.json")
        loaded = FewShotSplit.load(path)
        assert loaded == split


class TestSubsampleAnomalies:
    def _split(self):
        return FewShotSplit(
            train_ids=[f"n{i}" for i in range(5)],
            test_normal_ids=[f"tn{i}" for i in range(500)],
            test_abnormal_ids=[f"ta{i}" for i in range(110)],
            seed=0,
            protocol="fixture",
        )

    def test_one_percent_ratio(self):
        out = subsample_anomalies(self._split(), 5, seed=1)
        assert len(out.test_normal_ids) == 500
        assert len(out.test_abnormal_ids) == 5
        assert set(out.test_abnormal_ids) <= set(self._split().test_abnormal_ids)

    def test_full_count_is_identity(self):
        split = self._split()
        out = subsample_anomalies(split, 110, seed=2)
        assert sorted(out.test_abnormal_ids) == sorted(split.test_abnormal_ids)

    def test_seeded_reruns_identical(self):
        a = subsample_anomalies(self._split(), 20, seed=3)
        b = subsample_anomalies(self._split(), 20, seed=3)
        assert a.test_abnormal_ids == b.test_abnormal_ids

    def test_oversized_request_rejected(self):
        with pytest.raises(DataError):
            subsample_anomalies(self._split(), 111, seed=0)


class TestCropPatches:
    def test_wide_strip_protocol(self):
        image = torch.rand(3, 256, 4096)
        patches = crop_patches(image, size=256, n=5, rng=seed_stream(0, "crop"))
        assert len(patches) == 5
        assert all(p.shape == (3, 256, 256) for p in patches)

    def test_exact_size_image_gives_identical_crops(self):
        image = torch.rand(3, 256, 256)
        patches = crop_patches(image, size=256, n=3, rng=seed_stream(1, "crop"))
        for p in patches:
            assert torch.equal(p, image)

    def test_seeded_reproducibility(self):
        image = torch.rand(3, 300, 300)
        a = crop_patches(image, 256, 4, seed_stream(2, "crop"))
        b = crop_patches(image, 256, 4, seed_stream(2, "crop"))
        for pa, pb in zip(a, b):
            assert torch.equal(pa, pb)

    def test_undersized_image_rejected(self):
        with pytest.raises(DataError):
            crop_patches(torch.rand(3, 100, 300), size=256, n=2, rng=seed_stream(3, "crop"))


class TestCorruptionProtocol:
    def test_counts(self, tmp_path):
        write_folder_dataset(tmp_path / "clean", 10, 0, size=10)
        clean = load_image_folder(tmp_path / "clean")
        out = build_corruption_protocol(clean, CorruptionSpec(), tmp_path / "protocol", seed=0)
        assert len(out.normals()) == 10
        assert len(out.abnormals()) == 90  # 10 images x 9 corruption types

    def test_empty_type_subset_rejected(self):
        with pytest.raises(ValueError):
            CorruptionSpec(types=[])

    def test_unknown_type_rejected(self):
        with pytest.raises(ValueError):
            CorruptionSpec(types=["vortex"])

    def test_identity_corruption_copies_bitwise(self, tmp_path):
        write_folder_dataset(tmp_path / "clean", 3, 0, size=10)
        clean = load_image_folder(tmp_path / "clean")
        spec = CorruptionSpec(types=["noise", "blur"])
        out = build_corruption_protocol(
            clean, spec, tmp_path / "protocol", corrupt_fn=lambda img, name, sev, rng: img, seed=0
        )
        for entry in out.abnormals():
            corrupted = load_image(resolve_path(out.root, entry.path))
            source_name = entry.path.split("__", 1)[1]
            original = load_image(tmp_path / "clean" / "normal" / source_name)
            assert torch.equal(corrupted, original)

    def test_mixed_labels_rejected(self, tmp_path):
        write_folder_dataset(tmp_path / "clean", 2, 1, size=10)
        clean = load_image_folder(tmp_path / "clean")
        with pytest.raises(DataError):
            build_corruption_protocol(clean, CorruptionSpec(), tmp_path / "protocol")

    def test_every_builtin_corruption_changes_the_image(self):
        image = torch.rand(3, 24, 24, generator=torch.Generator().manual_seed(5))
        for name in CorruptionSpec().types:
            out = corrupt_image(image, name, severity=4, rng=seed_stream(0, name))
            assert out.shape == image.shape
            assert not torch.equal(out, image), name
            assert out.min() >= 0 and out.max() <= 1


class TestSynthDataset:
    def test_pure_normal_manifest(self, tmp_path):
        spec = SynthSpec(n_normal=4, n_abnormal=0, image_size=24)
        manifest = synth_dataset(spec, tmp_path / "ds", seed=0)
        assert len(manifest.normals()) == 4
        assert len(manifest.abnormals()) == 0
        assert (tmp_path / "ds" / "synth.json").exists()

    def test_seeded_rerun_bitwise_identical(self, tmp_path):
        spec = SynthSpec(n_normal=3, n_abnormal=2, image_size=24)
        synth_dataset(spec, tmp_path / "a", seed=7)
        synth_dataset(spec, tmp_path / "b", seed=7)
        for sub in ("normal", "abnormal"):
            for f in sorted((tmp_path / "a" / sub).iterdir()):
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()

    def test_paste_defect_confined_to_recorded_rectangle(self, tmp_path):
        spec = SynthSpec(n_normal=1, n_abnormal=5, image_size=32, defect_family="paste")
        manifest = synth_dataset(spec, tmp_path / "ds", seed=3)
        truth = json.loads((tmp_path / "ds" / "synth.json").read_text())
        for record in truth["abnormal"]:
            abnormal = load_image(resolve_path(manifest.root, record["id"]))
            base_rng = seed_stream(3, "synth", "abnormal", record["index"])
            base = render_normal_image(spec, base_rng)
            base_quantized = (base * 255.0).round() / 255.0
            diff = (abnormal - base_quantized).abs().max(dim=0).values > 1e-6
            top, left, h, w = record["box"]
            outside = diff.clone()
            outside[top : top + h, left : left + w] = False
            assert not outside.any(), "defect pixels leaked outside the recorded box"
            assert diff.any(), "defect region is empty"

    def test_loadable_through_folder_convention(self, tmp_path):
        spec = SynthSpec(n_normal=2, n_abnormal=2, image_size=24)
        synth_dataset(spec, tmp_path / "ds", seed=1)
        manifest = load_image_folder(tmp_path / "ds")
        assert len(manifest.normals()) == 2 and len(manifest.abnormals()) == 2

    def test_manifest_round_trip(self, tmp_path):
        spec = SynthSpec(n_normal=2, n_abnormal=1, image_size=24)
        manifest = synth_dataset(spec, tmp_path / "ds", seed=2)
        loaded = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
        assert loaded == manifest
