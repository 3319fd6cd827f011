import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flam import synthdata as sd
from flam.errors import ConfigError, FormatError, SplitError
from flam.retrieval import train_probe

SMALL = sd.GenConfig(dim=32, instances=200, views=2)


def test_generate_is_pure(small_schema):
    a = sd.generate(SMALL, small_schema, seed=5)
    b = sd.generate(SMALL, small_schema, seed=5)
    c = sd.generate(SMALL, small_schema, seed=6)
    assert a == b
    assert not np.array_equal(a.features, c.features)


def test_features_unit_norm_and_finite(small_dataset):
    norms = np.linalg.norm(small_dataset.features.astype(np.float64), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)
    assert np.isfinite(small_dataset.features).all()


def test_views_share_labels(small_dataset):
    for inst in np.unique(small_dataset.instance_ids)[:20]:
        rows = small_dataset.labels[small_dataset.instance_ids == inst]
        assert (rows == rows[0]).all()


def test_zero_noise_views_identical(small_schema):
    ds = sd.generate(dataclasses.replace(SMALL, noise=0.0), small_schema, seed=1)
    f = ds.features.reshape(SMALL.instances, SMALL.views, -1)
    assert np.array_equal(f[:, 0], f[:, 1])


def test_full_correlation_couples_classes():
    schema = sd.AttributeSchema(("shape", "color", "pattern"), (5, 7, 4))
    ds = sd.generate(sd.GenConfig(dim=32, instances=300, class_correlation=1.0), schema, seed=2)
    color, pattern = ds.label_column("color"), ds.label_column("pattern")
    assert np.array_equal(pattern, color % 4)


def test_dim_too_small_without_mixing():
    with pytest.raises(ConfigError):
        sd.generate(sd.GenConfig(dim=16, instances=10))
    ds = sd.generate(sd.GenConfig(dim=16, instances=10, mixing="random-rotation"))
    assert ds.dim == 16


@pytest.mark.parametrize("bad", [dict(noise=-1.0), dict(signal=0.0), dict(label_density=1.5),
                                 dict(mixing="swirl"), dict(signal={"color": -1.0})])
def test_invalid_gen_config(bad):
    with pytest.raises(ConfigError):
        sd.GenConfig(**bad)


@pytest.mark.parametrize("types,counts", [(("a",), (3,)), (("a", "b"), (3, 1)), (("a", "a"), (2, 2))])
def test_invalid_schema(types, counts):
    with pytest.raises(ConfigError):
        sd.AttributeSchema(types, counts)


def test_absent_fraction_tracks_density():
    ds = sd.generate(sd.GenConfig(instances=2500, label_density=0.3))
    assert len(ds) >= 5000
    frac = (ds.labels == sd.ABSENT).mean(axis=0)
    assert np.all(np.abs(frac - 0.7) <= 0.03)


def test_rotation_preserves_raw_cosines(small_schema):
    base = sd.raw_features(SMALL, small_schema, seed=4)
    rot = sd.raw_features(dataclasses.replace(SMALL, mixing="random-rotation"), small_schema, seed=4)
    cos = lambda X: (X / np.linalg.norm(X, axis=1, keepdims=True)) @ (X / np.linalg.norm(X, axis=1, keepdims=True)).T
    np.testing.assert_allclose(cos(base), cos(rot), atol=1e-10)
    assert not np.allclose(base, rot)


def test_default_config_linearly_decodable():
    ds = sd.generate(sd.GenConfig())
    train, query, gallery = sd.split(ds, (2 / 3, 2 / 15, 1 / 5))
    assert len(train) == 5000
    probe = train_probe(train)
    for a, attr in enumerate(ds.schema.types):
        assert probe.accuracy(attr, gallery.features, gallery.labels[:, a]) > 0.9


class TestSplit:
    def test_all_train(self, small_dataset):
        train, query, gallery = sd.split(small_dataset, (1, 0, 0))
        assert len(train) == len(small_dataset) and len(query) == len(gallery) == 0

    def test_query_instances_in_gallery(self, small_schema):
        ds = sd.generate(sd.GenConfig(dim=32, instances=100), small_schema)
        train, query, gallery = sd.split(ds, (0.8, 0.1, 0.1))
        assert len(query) == 10
        assert np.isin(query.instance_ids, gallery.instance_ids).all()
        assert not np.isin(train.instance_ids, np.r_[query.instance_ids, gallery.instance_ids]).any()
        assert len(train) + len(query) + len(gallery) == len(ds)

    def test_deterministic(self, small_dataset):
        a = sd.split(small_dataset, seed=9)
        b = sd.split(small_dataset, seed=9)
        assert all(x == y for x, y in zip(a, b))

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.5, 0.5)])
    def test_bad_fractions(self, small_dataset, fractions):
        with pytest.raises(SplitError):
            sd.split(small_dataset, fractions)

    def test_single_view_queries_rejected(self, small_schema):
        ds = sd.generate(sd.GenConfig(dim=32, instances=50, views=1), small_schema)
        with pytest.raises(SplitError):
            sd.split(ds, (0.6, 0.2, 0.2))

    def test_too_few_instances(self, small_schema):
        ds = sd.generate(sd.GenConfig(dim=32, instances=2), small_schema)
        with pytest.raises(SplitError):
            sd.split(ds, (0.9, 0.05, 0.05))


def test_mask_labels_per_instance(small_dataset):
    masked = sd.mask_labels(small_dataset, 0.5, seed=1)
    assert (masked.labels == sd.ABSENT).any() and (masked.labels != sd.ABSENT).any()
    keep = masked.labels != sd.ABSENT
    assert np.array_equal(masked.labels[keep], small_dataset.labels[keep])
    f = keep.reshape(-1, 2, small_dataset.schema.n)
    assert np.array_equal(f[:, 0], f[:, 1])


class TestFeatureFile:
    def test_roundtrip(self, small_dataset, tmp_path):
        path = tmp_path / "f.flamfeat"
        sd.save_features(small_dataset, path)
        back = sd.load_features(path)
        assert back == small_dataset
        assert sd.dumps_features(back) == path.read_bytes()

    def test_roundtrip_with_absent_labels(self, small_dataset):
        masked = sd.mask_labels(small_dataset, 0.4)
        assert sd.loads_features(sd.dumps_features(masked)) == masked

    def test_layout(self, small_dataset):
        blob = sd.dumps_features(small_dataset)
        magic, version, D, count = struct.unpack_from("<8sIIQ", blob, 0)
        assert (magic, version, D, count) == (b"FLAMFEAT", 1, small_dataset.dim, len(small_dataset))
        inst, *labels = struct.unpack_from("<Q3i", blob, 24)
        assert inst == small_dataset.instance_ids[0] and labels == small_dataset.labels[0].tolist()
        first = np.frombuffer(blob, "<f4", count=D, offset=24 + 8 + 12)
        assert np.array_equal(first, small_dataset.features[0])

    def test_bad_magic(self, small_dataset):
        blob = bytearray(sd.dumps_features(small_dataset))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError, match="offset 0"):
            sd.loads_features(bytes(blob))

    def test_bad_version(self, small_dataset):
        blob = bytearray(sd.dumps_features(small_dataset))
        blob[8:12] = struct.pack("<I", 7)
        with pytest.raises(FormatError, match="offset 8"):
            sd.loads_features(bytes(blob))

    @given(st.integers(1, 400))
    def test_truncation(self, small_dataset, cut):
        blob = sd.dumps_features(small_dataset)
        with pytest.raises(FormatError):
            sd.loads_features(blob[:-cut])

    def test_empty(self, small_schema):
        empty = sd.Dataset(small_schema, np.zeros((0, 8)), np.zeros(0), np.zeros((0, 3)), SMALL, 0)
        back = sd.loads_features(sd.dumps_features(empty))
        assert len(back) == 0 and back.dim == 8 and back.schema == small_schema
