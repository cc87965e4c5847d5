"""Dataset generation, manifest I/O, split construction, batching."""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from biview.data import (IRREGULARITY_THRESHOLD, NoduleLatent, PatientRecord,
                         SplitPlan, batch_sampler, dataset_hash,
                         generate_synthetic, load_image, load_manifest,
                         load_mask, make_splits, sample_latent)
from biview.errors import ConfigError, DataError


def make_record(i: int, *, views: str = "tl", label: int = 0) -> PatientRecord:
    return PatientRecord(
        patient_id=f"x{i:04d}",
        label=label,
        transverse_path=f"images/x{i:04d}_t.png" if "t" in views else None,
        longitudinal_path=f"images/x{i:04d}_l.png" if "l" in views else None,
    )


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "small"
    generate_synthetic(root, 30, missing_rate=0.3, image_size=32, seed=11)
    return root


@pytest.fixture(scope="module")
def paired_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "paired"
    generate_synthetic(root, 100, missing_rate=0.0, image_size=32, seed=4)
    return root


class TestRecords:
    def test_view_indicators(self):
        r = make_record(0, views="l")
        assert (r.a, r.b) == (0, 1)
        assert not r.paired and r.num_images == 1
        r2 = make_record(1, views="tl")
        assert (r2.a, r2.b) == (1, 1)
        assert r2.paired and r2.num_images == 2

    def test_zero_views_rejected(self):
        with pytest.raises(DataError, match="no views"):
            make_record(2, views="")

    def test_bad_label_rejected(self):
        with pytest.raises(DataError, match="label"):
            make_record(3, label=2)


class TestLabelRule:
    def base_latent(self, **kw) -> NoduleLatent:
        args = dict(center=(0.5, 0.5), depth=0.2, width=0.3, length=0.3,
                    irregularity=0.0, echogenicity=0.4, margin_blur=0.8,
                    harmonics=((2, 0.7, 0.1), (3, 0.6, 1.0)))
        args.update(kw)
        return NoduleLatent(**args)

    def test_smooth_wide_nodule_is_benign(self):
        assert self.base_latent(irregularity=0.0, depth=0.2, length=0.3).label == 0

    def test_irregular_nodule_is_malignant(self):
        assert self.base_latent(irregularity=IRREGULARITY_THRESHOLD + 0.01).label == 1

    def test_taller_than_long_is_malignant(self):
        assert self.base_latent(depth=0.31, length=0.30).label == 1

    def test_threshold_is_strict(self):
        assert self.base_latent(irregularity=IRREGULARITY_THRESHOLD).label == 0


class TestGeneration:
    def test_missing_rate_zero_gives_paired_records(self, paired_dataset):
        records = load_manifest(paired_dataset)
        assert len(records) == 100
        assert all(r.paired for r in records)

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic(a, 12, missing_rate=0.4, image_size=32, seed=9)
        generate_synthetic(b, 12, missing_rate=0.4, image_size=32, seed=9)
        digest = lambda root: sorted(
            (p.relative_to(root).as_posix(), hashlib.sha256(p.read_bytes()).hexdigest())
            for p in Path(root).rglob("*") if p.is_file())
        assert digest(a) == digest(b)

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic(a, 12, image_size=32, seed=1)
        generate_synthetic(b, 12, image_size=32, seed=2)
        assert dataset_hash(a) != dataset_hash(b)

    def test_parameter_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_synthetic(tmp_path / "x", 5, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic(tmp_path / "x", 20, missing_rate=1.0, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic(tmp_path / "x", 20, image_size=4, seed=0)

    def test_images_and_masks_well_formed(self, small_dataset):
        records = load_manifest(small_dataset)
        r = next(rec for rec in records if rec.a)
        img = load_image(small_dataset, r.transverse_path)
        mask = load_mask(small_dataset, r.transverse_mask_path)
        assert img.shape == (32, 32) and img.dtype == np.float32
        assert 0.0 <= img.min() and img.max() <= 1.0
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert mask.sum() > 0  # zero-area nodules are re-sampled away

    def test_missing_views_occur_and_one_view_always_kept(self, small_dataset):
        records = load_manifest(small_dataset)
        assert any(not r.paired for r in records)
        assert all(r.a + r.b >= 1 for r in records)

    def test_view_consistency_mask_centroids(self, paired_dataset):
        # both views render the same latent: centroids agree within 2 px
        records = load_manifest(paired_dataset)
        for r in records[:20]:
            mt = load_mask(paired_dataset, r.transverse_mask_path)
            ml = load_mask(paired_dataset, r.longitudinal_mask_path)
            ct = np.argwhere(mt > 0).mean(axis=0)
            cl = np.argwhere(ml > 0).mean(axis=0)
            assert np.all(np.abs(ct - cl) <= 2.0), (r.patient_id, ct, cl)

    def test_label_balance(self, tmp_path):
        root = generate_synthetic(tmp_path / "bal", 240, image_size=32, seed=21)
        records = load_manifest(root)
        frac = np.mean([r.label for r in records])
        assert 0.40 <= frac <= 0.60, f"malignant fraction {frac:.3f}"

    def test_latent_labels_match_manifest(self, paired_dataset):
        # the stored label is the latent's deterministic label
        records = load_manifest(paired_dataset)
        assert {r.label for r in records} == {0, 1}


class TestManifest:
    def test_round_trip_identity(self, small_dataset):
        records = load_manifest(small_dataset)
        again = load_manifest(small_dataset)
        assert records == again

    def test_empty_manifest_warns(self, tmp_path, caplog):
        (tmp_path / "manifest.jsonl").write_text("")
        with caplog.at_level(logging.WARNING, logger="biview.data"):
            assert load_manifest(tmp_path) == []
        assert any("no records" in r.message for r in caplog.records)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest not found"):
            load_manifest(tmp_path / "nope")

    def _write(self, tmp_path: Path, rows: list[dict | str]) -> Path:
        lines = [r if isinstance(r, str) else json.dumps(r) for r in rows]
        (tmp_path / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        return tmp_path

    def _valid_row(self, tmp_path: Path, pid: str = "p0000") -> dict:
        img = tmp_path / "images"
        img.mkdir(exist_ok=True)
        (img / f"{pid}_l.png").write_bytes(b"\x89PNG")
        return {"patient_id": pid, "label": "benign",
                "transverse_path": None, "longitudinal_path": f"images/{pid}_l.png",
                "transverse_mask_path": None, "longitudinal_mask_path": None}

    def test_single_view_record_indicators(self, tmp_path):
        root = self._write(tmp_path, [self._valid_row(tmp_path)])
        (rec,) = load_manifest(root)
        assert (rec.a, rec.b) == (0, 1)

    def test_invalid_json_names_line(self, tmp_path):
        root = self._write(tmp_path, [self._valid_row(tmp_path), "{broken"])
        with pytest.raises(DataError, match="line 2"):
            load_manifest(root)

    def test_duplicate_patient_id_names_line(self, tmp_path):
        row = self._valid_row(tmp_path)
        root = self._write(tmp_path, [row, row])
        with pytest.raises(DataError, match="line 2.*duplicate"):
            load_manifest(root)

    def test_zero_views_names_line(self, tmp_path):
        row = self._valid_row(tmp_path)
        row["longitudinal_path"] = None
        root = self._write(tmp_path, [row])
        with pytest.raises(DataError, match="line 1"):
            load_manifest(root)

    def test_missing_referenced_file_names_line(self, tmp_path):
        row = self._valid_row(tmp_path)
        row["longitudinal_path"] = "images/ghost.png"
        root = self._write(tmp_path, [row])
        with pytest.raises(DataError, match="line 1.*ghost"):
            load_manifest(root)

    def test_unknown_and_missing_fields(self, tmp_path):
        row = self._valid_row(tmp_path)
        row["extra"] = 1
        with pytest.raises(DataError, match="unknown fields"):
            load_manifest(self._write(tmp_path, [row]))
        row2 = self._valid_row(tmp_path)
        del row2["label"]
        with pytest.raises(DataError, match="missing fields"):
            load_manifest(self._write(tmp_path, [row2]))

    def test_bad_label_value(self, tmp_path):
        row = self._valid_row(tmp_path)
        row["label"] = "suspicious"
        with pytest.raises(DataError, match="line 1.*label"):
            load_manifest(self._write(tmp_path, [row]))

    def test_dataset_hash_is_manifest_sha256(self, small_dataset):
        expected = hashlib.sha256((small_dataset / "manifest.jsonl").read_bytes()).hexdigest()
        assert dataset_hash(small_dataset) == expected


class TestSplitPlan:
    def test_defaults_valid(self):
        SplitPlan()

    @pytest.mark.parametrize("kw", [
        {"test_subsets": (0, 0)},
        {"test_subsets": (0, 10)},
        {"fold": 8},
        {"fold": -1},
        {"proportions": ()},
        {"proportions": (0, 100)},
        {"proportions": (20, 10, 100)},
        {"proportions": (10, 20)},
    ])
    def test_rejects_bad_plans(self, kw):
        with pytest.raises(ConfigError):
            SplitPlan(**kw)


class TestMakeSplits:
    def records(self, n_paired: int, n_unpaired: int = 0) -> list[PatientRecord]:
        recs = [make_record(i, views="tl", label=i % 2) for i in range(n_paired)]
        recs += [make_record(1000 + i, views="t" if i % 2 else "l")
                 for i in range(n_unpaired)]
        return recs

    def test_hundred_paired_patients_arithmetic(self):
        sp = make_splits(self.records(100), SplitPlan(), seed=0)
        assert len(sp.test) == 20
        assert len(sp.train_by_r[100]) == 70
        assert len(sp.val) == 10

    def test_pretrain_disjoint_from_test(self):
        sp = make_splits(self.records(100, 30), SplitPlan(), seed=1)
        assert not (sp.ids("pretrain") & sp.ids("test"))

    def test_proportions_are_nested(self):
        sp = make_splits(self.records(100), SplitPlan(), seed=2)
        assert len(sp.train_by_r[10]) == 7
        ids10 = {r.patient_id for r in sp.train_by_r[10]}
        ids20 = {r.patient_id for r in sp.train_by_r[20]}
        ids50 = {r.patient_id for r in sp.train_by_r[50]}
        ids100 = {r.patient_id for r in sp.train_by_r[100]}
        assert ids10 <= ids20 <= ids50 <= ids100

    def test_unpaired_only_in_pretrain(self):
        sp = make_splits(self.records(100, 40), SplitPlan(), seed=3)
        unpaired = {f"x{1000 + i:04d}" for i in range(40)}
        assert unpaired <= sp.ids("pretrain")
        assert not (unpaired & sp.ids("test"))
        assert not (unpaired & sp.ids("train"))
        assert not (unpaired & sp.ids("val"))

    def test_train_val_test_partition(self):
        sp = make_splits(self.records(100), SplitPlan(), seed=4)
        train, val, test = sp.ids("train"), sp.ids("val"), sp.ids("test")
        assert not (train & val) and not (train & test) and not (val & test)
        assert len(train | val | test) == 100

    def test_determinism(self):
        recs = self.records(60, 10)
        a = make_splits(recs, SplitPlan(), seed=7)
        b = make_splits(recs, SplitPlan(), seed=7)
        assert a == b
        c = make_splits(recs, SplitPlan(), seed=8)
        assert a != c

    def test_fold_rotates_validation(self):
        recs = self.records(100)
        vals = [make_splits(recs, SplitPlan(fold=f), seed=5).ids("val")
                for f in range(8)]
        # the eight validation subsets partition the eight non-test subsets
        assert not any(vals[i] & vals[j] for i in range(8) for j in range(i + 1, 8))
        union = set().union(*vals)
        test = make_splits(recs, SplitPlan(fold=0), seed=5).ids("test")
        assert len(union) == 80 and not (union & test)

    def test_insufficient_paired_records(self):
        with pytest.raises(DataError, match="at least 10 paired"):
            make_splits(self.records(9, 50), SplitPlan(), seed=0)


class TestBatchSampler:
    def test_paired_batch_image_count(self):
        recs = [make_record(i, views="tl") for i in range(64)]
        (batch,) = batch_sampler(recs, 64, seed=0, epoch=0)
        assert len(batch) == 64
        assert sum(r.num_images for r in batch) == 128

    def test_all_unpaired_batch_image_count(self):
        recs = [make_record(i, views="t") for i in range(64)]
        (batch,) = batch_sampler(recs, 64, seed=0, epoch=0)
        assert sum(r.num_images for r in batch) == 64

    def test_same_seed_epoch_identical(self):
        recs = [make_record(i) for i in range(20)]
        a = batch_sampler(recs, 6, seed=3, epoch=2)
        b = batch_sampler(recs, 6, seed=3, epoch=2)
        assert a == b

    def test_epochs_shuffle_differently(self):
        recs = [make_record(i) for i in range(20)]
        a = batch_sampler(recs, 6, seed=3, epoch=0)
        b = batch_sampler(recs, 6, seed=3, epoch=1)
        assert a != b
        flat = lambda bs: sorted(r.patient_id for batch in bs for r in batch)
        assert flat(a) == flat(b)  # same patients, different order

    def test_short_last_batch_kept(self):
        recs = [make_record(i) for i in range(10)]
        batches = batch_sampler(recs, 4, seed=0, epoch=0)
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_batch_size_validated(self):
        with pytest.raises(ConfigError):
            batch_sampler([make_record(0)], 0, seed=0, epoch=0)
