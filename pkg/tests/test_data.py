"""Data module tests: schema encoding, synthetic generation, folds, file IO."""

import numpy as np
import pytest
from helpers import nearest_centroid_bcc

from dermfuse.data import (
    Column,
    Dataset,
    FoldPlan,
    MetadataEncoder,
    MetadataSchema,
    SyntheticSpec,
    batch_iter,
    encode_metadata,
    generate_synthetic,
    load_csv_metadata,
    load_dataset,
    pad_like_schema,
    read_tensor_file,
    save_dataset,
    stratified_kfold,
    write_tensor_file,
)
from dermfuse.errors import ConfigError, DataFormatError


def tiny_schema():
    return MetadataSchema((
        Column("age", "numeric"),
        Column("region", "categorical", levels=("head", "arm", "leg")),
        Column("diagnosis", "label", levels=("A", "B")),
    ))


def write_csv(tmp_path, text, name="meta.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestCsvParsing:
    def test_three_row_file(self, tmp_path):
        path = write_csv(tmp_path, "age,region,diagnosis\n10,head,A\n20,arm,B\n30,leg,A\n")
        ds = load_csv_metadata(path, tiny_schema())
        assert len(ds) == 3
        assert ds.records[1] == {"age": 20.0, "region": "arm"}
        assert ds.labels.tolist() == [0, 1, 0]

    def test_numeric_parse_error_names_row_and_column(self, tmp_path):
        path = write_csv(tmp_path, "age,region,diagnosis\n10,head,A\nUNK,arm,B\n")
        with pytest.raises(DataFormatError, match="row 2, column 'age'"):
            load_csv_metadata(path, tiny_schema())

    def test_header_mismatch(self, tmp_path):
        path = write_csv(tmp_path, "age,place,diagnosis\n10,head,A\n")
        with pytest.raises(DataFormatError, match="header"):
            load_csv_metadata(path, tiny_schema())

    def test_unknown_categorical_level(self, tmp_path):
        path = write_csv(tmp_path, "age,region,diagnosis\n10,torso,A\n")
        with pytest.raises(DataFormatError, match="unknown level 'torso'"):
            load_csv_metadata(path, tiny_schema())

    def test_unknown_label(self, tmp_path):
        path = write_csv(tmp_path, "age,region,diagnosis\n10,head,C\n")
        with pytest.raises(DataFormatError, match="'diagnosis'"):
            load_csv_metadata(path, tiny_schema())

    def test_missing_cell_recorded_as_missing(self, tmp_path):
        path = write_csv(tmp_path, "age,region,diagnosis\n,head,A\n")
        ds = load_csv_metadata(path, tiny_schema())
        assert ds.records[0]["age"] is None


class TestEncoding:
    def test_one_hot_position(self):
        records = [{"age": 5.0, "region": "arm"}, {"age": 6.0, "region": "head"}]
        ds = Dataset(tiny_schema(), records, np.array([0, 1]))
        enc = encode_metadata(ds)
        np.testing.assert_array_equal(enc[0, 1:], [0, 1, 0])

    def test_min_max_scaling(self):
        records = [{"age": a, "region": "head"} for a in (0.0, 100.0, 25.0)]
        ds = Dataset(tiny_schema(), records, np.array([0, 1, 0]))
        enc = encode_metadata(ds)
        assert enc[2, 0] == pytest.approx(0.25)

    def test_pad_like_dimension_hand_count(self):
        # 3 numerics + region(14) + fitzpatrick(6) + 16 booleans = 39
        schema = pad_like_schema()
        assert len(schema.feature_columns) == 21
        assert schema.encoded_dim == 3 + 14 + 6 + 16

    def test_pad_like_single_row_hand_encoding(self):
        schema = pad_like_schema()
        record = {c.name: None for c in schema.feature_columns}
        record.update({
            "age": 50.0, "diameter_1": 10.0, "diameter_2": 5.0,
            "region": "nose", "fitzpatrick": "III",
        })
        for name in ("itch", "bleed"):
            record[name] = True
        for c in schema.feature_columns:
            if c.kind == "boolean" and record[c.name] is None:
                record[c.name] = False
        ds = Dataset(schema, [record, dict(record, age=0.0, diameter_1=0.0, diameter_2=0.0)],
                     np.array([0, 1]))
        enc = encode_metadata(ds)
        row = enc[0]
        # numerics scaled by the two-row min/max fit
        np.testing.assert_allclose(row[:3], 1.0)
        # region one-hot: "nose" is level index 2 of 14
        expected_region = np.zeros(14)
        expected_region[2] = 1
        np.testing.assert_array_equal(row[3:17], expected_region)
        # fitzpatrick "III" is index 2 of 6
        expected_fitz = np.zeros(6)
        expected_fitz[2] = 1
        np.testing.assert_array_equal(row[17:23], expected_fitz)
        # booleans in declared order, itch first, bleed fifth
        booleans = row[23:]
        assert booleans.tolist() == [1, 0, 0, 0, 1] + [0] * 11

    def test_one_hot_blocks_sum_to_one_when_present(self):
        ds = generate_synthetic(SyntheticSpec(n=60, seed=1))
        enc = encode_metadata(ds)
        region_block = enc[:, 3:17]
        fitz_block = enc[:, 17:23]
        np.testing.assert_array_equal(region_block.sum(axis=1), 1.0)
        np.testing.assert_array_equal(fitz_block.sum(axis=1), 1.0)

    def test_missing_one_hot_block_is_zero_with_indicator(self):
        schema = MetadataSchema((
            Column("region", "categorical", levels=("a", "b"), missing="indicator"),
            Column("diagnosis", "label", levels=("X", "Y")),
        ))
        assert schema.encoded_dim == 3
        ds = Dataset(schema, [{"region": None}, {"region": "b"}], np.array([0, 1]))
        enc = encode_metadata(ds)
        np.testing.assert_array_equal(enc[0], [0, 0, 1])
        np.testing.assert_array_equal(enc[1], [0, 1, 0])

    def test_fit_on_train_only_no_leakage(self):
        records = [{"age": a, "region": "head"} for a in (10.0, 20.0, 40.0)]
        ds = Dataset(tiny_schema(), records, np.array([0, 1, 0]))
        enc = MetadataEncoder(ds.schema).fit(ds, np.array([0, 1]))
        train = enc.transform(ds, np.array([0, 1]))
        val = enc.transform(ds, np.array([2]))
        assert train[:, 0].min() >= 0 and train[:, 0].max() <= 1
        assert val[0, 0] == pytest.approx(3.0)  # outside [0,1]: no refit on val

    def test_constant_numeric_column_warns_and_encodes_zero(self):
        records = [{"age": 5.0, "region": "head"}, {"age": 5.0, "region": "arm"}]
        ds = Dataset(tiny_schema(), records, np.array([0, 1]))
        with pytest.warns(UserWarning, match="constant"):
            enc = encode_metadata(ds)
        np.testing.assert_array_equal(enc[:, 0], 0.0)


class TestSynthetic:
    def test_balanced_labels(self):
        ds = generate_synthetic(SyntheticSpec(n=600, seed=0))
        counts = np.bincount(ds.labels, minlength=6)
        np.testing.assert_array_equal(counts, 100)

    def test_uneven_n_balanced_within_one(self):
        ds = generate_synthetic(SyntheticSpec(n=603, seed=0))
        counts = np.bincount(ds.labels, minlength=6)
        assert counts.max() - counts.min() <= 1

    def test_n_below_classes_rejected(self):
        with pytest.raises(ConfigError, match="smaller than"):
            SyntheticSpec(n=5, num_classes=6)

    def test_bit_reproducible(self):
        a = generate_synthetic(SyntheticSpec(n=60, seed=7))
        b = generate_synthetic(SyntheticSpec(n=60, seed=7))
        assert a.images.tobytes() == b.images.tobytes()
        assert a.records == b.records

    def test_zero_delta_metadata_mode_is_chance_level(self):
        ds = generate_synthetic(SyntheticSpec(n=600, mode="metadata-only", delta=0.0, seed=2))
        enc = encode_metadata(ds)
        half = len(ds) // 2
        bcc = nearest_centroid_bcc(enc, ds.labels, np.arange(half),
                                   np.arange(half, len(ds)), 6)
        assert bcc <= 0.35  # chance is 1/6

    def test_image_only_delta3_nearest_centroid_oracle(self):
        ds = generate_synthetic(SyntheticSpec(n=600, mode="image-only", delta=3.0, seed=3))
        half = len(ds) // 2
        bcc = nearest_centroid_bcc(ds.images, ds.labels, np.arange(half),
                                   np.arange(half, len(ds)), 6)
        assert bcc >= 0.95

    def test_image_only_metadata_carries_no_signal(self):
        ds = generate_synthetic(SyntheticSpec(n=600, mode="image-only", delta=3.0, seed=4))
        enc = encode_metadata(ds)
        half = len(ds) // 2
        bcc = nearest_centroid_bcc(enc, ds.labels, np.arange(half),
                                   np.arange(half, len(ds)), 6)
        assert bcc <= 0.35

    def test_metadata_only_delta3_is_separable(self):
        ds = generate_synthetic(SyntheticSpec(n=600, mode="metadata-only", delta=3.0, seed=5))
        enc = encode_metadata(ds)
        half = len(ds) // 2
        bcc = nearest_centroid_bcc(enc, ds.labels, np.arange(half),
                                   np.arange(half, len(ds)), 6)
        assert bcc >= 0.95


class TestStratifiedKfold:
    def test_balanced_60_samples(self):
        labels = np.repeat(np.arange(6), 10)
        plan = stratified_kfold(labels, k=5, seed=0)
        for f in range(5):
            val = plan.val_indices(f)
            assert len(val) == 12
            counts = np.bincount(labels[val], minlength=6)
            np.testing.assert_array_equal(counts, 2)

    def test_partition_property(self):
        labels = np.random.default_rng(1).integers(0, 6, size=200)
        labels[:30] = np.arange(30) % 6  # ensure every class has >= 5
        plan = stratified_kfold(labels, k=5, seed=2)
        all_val = np.concatenate([plan.val_indices(f) for f in range(5)])
        assert sorted(all_val.tolist()) == list(range(200))  # union + disjoint
        for f in range(5):
            assert not set(plan.val_indices(f)) & set(plan.train_indices(f))

    def test_per_class_imbalance_at_most_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            sizes = rng.integers(5, 80, size=6)
            labels = np.repeat(np.arange(6), sizes)
            rng.shuffle(labels)
            plan = stratified_kfold(labels, k=5, seed=int(rng.integers(1 << 30)))
            for c in range(6):
                per_fold = [np.sum(labels[plan.val_indices(f)] == c) for f in range(5)]
                assert max(per_fold) - min(per_fold) <= 1

    def test_pad_sized_imbalanced_vector(self):
        rng = np.random.default_rng(4)
        labels = rng.choice(6, size=2298, p=[0.37, 0.08, 0.32, 0.10, 0.02, 0.11])
        labels[:30] = np.arange(30) % 6
        plan = stratified_kfold(labels, k=5, seed=5)
        for c in range(6):
            per_fold = [np.sum(labels[plan.val_indices(f)] == c) for f in range(5)]
            assert max(per_fold) - min(per_fold) <= 1

    def test_class_too_small_names_class(self):
        labels = np.array([0] * 10 + [1] * 3)
        with pytest.raises(ConfigError, match="class 1"):
            stratified_kfold(labels, k=5)

    def test_grouped_assignment_keeps_groups_together(self):
        labels = np.repeat(np.arange(3), 20)
        groups = np.arange(60) // 4  # 15 groups of 4, grouped within class
        plan = stratified_kfold(labels, k=5, seed=6, groups=groups)
        for g in np.unique(groups):
            folds = plan.assignments[groups == g]
            assert len(set(folds.tolist())) == 1


class TestBatchIter:
    def test_sizes(self):
        batches = batch_iter(np.arange(100), batch_size=30, seed=0, epoch=0)
        assert [len(b) for b in batches] == [30, 30, 30, 10]

    def test_deterministic_per_seed_epoch(self):
        a = batch_iter(np.arange(50), 30, seed=1, epoch=2)
        b = batch_iter(np.arange(50), 30, seed=1, epoch=2)
        c = batch_iter(np.arange(50), 30, seed=1, epoch=3)
        assert [x.tolist() for x in a] == [x.tolist() for x in b]
        assert [x.tolist() for x in a] != [x.tolist() for x in c]

    def test_multiset_equality(self):
        indices = np.array([5, 9, 11, 40, 41, 42, 77])
        batches = batch_iter(indices, 3, seed=2, epoch=1)
        yielded = sorted(np.concatenate(batches).tolist())
        assert yielded == sorted(indices.tolist())


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((3, 2, 4))
        path = tmp_path / "x.fbts"
        write_tensor_file(path, arr)
        back = read_tensor_file(path)
        assert back.tobytes() == arr.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.fbts"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataFormatError, match="magic"):
            read_tensor_file(path)

    def test_truncated_payload(self, tmp_path):
        arr = np.zeros((2, 2))
        path = tmp_path / "x.fbts"
        write_tensor_file(path, arr)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="payload"):
            read_tensor_file(path)


class TestDatasetPersistence:
    def test_round_trip_equality(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(n=30, seed=9))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path / "metadata.csv", tmp_path / "schema.json",
                            tmp_path / "images.fbts")
        assert back.records == ds.records
        assert back.labels.tolist() == ds.labels.tolist()
        assert back.images.tobytes() == ds.images.tobytes()
        assert back.schema == ds.schema

    def test_regeneration_is_byte_identical(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(n=30, seed=10))
        save_dataset(ds, tmp_path / "a")
        save_dataset(generate_synthetic(SyntheticSpec(n=30, seed=10)), tmp_path / "b")
        for name in ("metadata.csv", "schema.json", "images.fbts"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
