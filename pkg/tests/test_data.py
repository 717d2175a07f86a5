import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gvida.data import (
    Batch,
    DomainDataset,
    ShiftSpec,
    batches,
    check_compatible,
    cycle_batches,
    generate_pair,
    load_dataset,
    rotation_matrix,
    save_dataset,
)
from gvida.errors import ConfigurationError, FormatError, ParameterError


def test_identity_shift_copies_source():
    s, t = generate_pair(ShiftSpec("rotation", 0.0, 0.0, 7), 20, 3, 4)
    assert np.array_equal(s.features, t.features)
    assert np.array_equal(s.labels, t.labels)
    assert (s.domain_tag, t.domain_tag) == ("source", "target")


def test_quarter_turn_matches_rotation_oracle():
    s, t = generate_pair(ShiftSpec("rotation", math.pi / 2, 0.0, 7), 25, 4, 2)
    # (x, y) -> (-y, x), written out by hand
    expected = np.stack([-s.features[:, 1], s.features[:, 0]], axis=1)
    assert np.max(np.abs(t.features - expected)) < 1e-9


def test_generation_is_deterministic():
    spec = ShiftSpec("affine", 0.5, 0.1, 3)
    a = generate_pair(spec, 10, 3, 5)
    b = generate_pair(spec, 10, 3, 5)
    assert a[0] == b[0] and a[1] == b[1]
    c = generate_pair(ShiftSpec("affine", 0.5, 0.1, 4), 10, 3, 5)
    assert not np.array_equal(a[1].features, c[1].features)


def test_blob_means_sit_on_radius_three_circle():
    s, _ = generate_pair(ShiftSpec(seed=1), 4000, 5, 3)
    for c in range(5):
        m = s.features[s.labels == c].mean(axis=0)
        assert abs(np.linalg.norm(m[:2]) - 3.0) < 0.05
        assert abs(m[2]) < 0.05
    assert abs(s.features[s.labels == 0].std(axis=0).mean() - 0.4) < 0.02


def test_moons_two_classes_only():
    s, t = generate_pair(ShiftSpec("rotation", math.pi / 4, 0, 0), 50, 2, 2, geometry="moons")
    assert s.n == 100 and set(s.labels.tolist()) == {0, 1}
    with pytest.raises(ParameterError):
        generate_pair(ShiftSpec(), 10, 3, 2, geometry="moons")


@pytest.mark.parametrize("kind", ["rotation", "affine", "class_conditional_offset"])
def test_all_shift_kinds_keep_shape(kind):
    s, t = generate_pair(ShiftSpec(kind, 0.7, 0.0, 2), 15, 3, 4)
    assert t.features.shape == s.features.shape and t.class_count == s.class_count


@pytest.mark.parametrize("args", [(0, 3, 2), (5, 1, 2), (5, 3, 1)])
def test_invalid_dimensions(args):
    with pytest.raises(ParameterError):
        generate_pair(ShiftSpec(), *args)


def test_shift_spec_invariants():
    with pytest.raises(ParameterError):
        ShiftSpec("shear")
    with pytest.raises(ParameterError):
        ShiftSpec("rotation", float("inf"))
    with pytest.raises(ParameterError):
        ShiftSpec("rotation", 0.1, -0.5)


@given(angle=st.floats(-6.3, 6.3), seed=st.integers(0, 1000))
def test_rotation_is_an_isometry_within_classes(angle, seed):
    s, t = generate_pair(ShiftSpec("rotation", angle, 0.0, seed), 6, 2, 3)
    for c in range(2):
        a, b = s.features[s.labels == c], t.features[t.labels == c]
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        assert np.max(np.abs(da - db)) < 1e-9


def test_rotation_matrix_is_orthogonal():
    r = rotation_matrix(4, 0.3)
    assert np.allclose(r @ r.T, np.eye(4), atol=1e-15)


def test_dataset_invariants():
    with pytest.raises(ParameterError):
        DomainDataset(np.zeros((2, 2)), [0, 2], "source", 2)
    with pytest.raises(ParameterError):
        DomainDataset(np.array([[0.0, np.nan]]), [0], "source", 2)
    with pytest.raises(ParameterError):
        DomainDataset(np.zeros((1, 2)), [0], "elsewhere", 2)
    with pytest.raises(ParameterError):
        DomainDataset(np.zeros((1, 2)), [0], "source", 1)


def test_sentinel_only_on_target_batches():
    Batch(np.zeros((1, 2)), np.array([-1]), "target")
    with pytest.raises(ParameterError):
        Batch(np.zeros((1, 2)), np.array([-1]), "source")


def test_small_round_trip(tmp_path):
    ds = DomainDataset(np.array([[0.1, -2.5], [1e-300, 3.0], [np.pi, np.e]]), [0, 1, 1], "target", 2)
    save_dataset(ds, tmp_path / "d.csv")
    assert load_dataset(tmp_path / "d.csv", 2) == ds


def test_large_round_trip_row_by_row(tmp_path, rng):
    ds = DomainDataset(rng.standard_normal((1000, 5)) * 10 ** rng.uniform(-8, 8, (1000, 1)),
                       rng.integers(0, 7, 1000), "source", 7)
    save_dataset(ds, tmp_path / "big.csv")
    back = load_dataset(tmp_path / "big.csv", 7)
    for i in range(ds.n):
        assert np.array_equal(ds.features[i], back.features[i])
        assert ds.labels[i] == back.labels[i]


def test_class_count_inferred_without_hint(tmp_path):
    ds = DomainDataset(np.zeros((3, 2)), [0, 4, 2], "source", 5)
    save_dataset(ds, tmp_path / "d.csv")
    assert load_dataset(tmp_path / "d.csv").class_count == 5


def _write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text, encoding="utf-8")
    return p


@pytest.mark.parametrize("text,needle", [
    ("f0,f1,label\n1,2,0\n", "row 1"),
    ("f0,f1,label,domain\n1,2,0,source\n1,2,3,source\n", "row 3"),
    ("f0,f1,label,domain\n1,x,0,source\n", "row 2"),
    ("f0,f1,label,domain\n1,2,0,source\n1,2,source\n", "row 3"),
    ("f0,f1,label,domain\n1,nan,0,source\n", "row 2"),
    ("f0,f1,label,domain\n1,2,0,moon\n", "row 2"),
])
def test_format_errors_name_the_row(tmp_path, text, needle):
    with pytest.raises(FormatError, match=needle):
        load_dataset(_write(tmp_path, text), 3)


def test_label_equal_to_class_count_rejected(tmp_path):
    with pytest.raises(FormatError, match="out of range"):
        load_dataset(_write(tmp_path, "f0,f1,label,domain\n0,0,2,source\n"), 2)


def test_mixed_domains_rejected(tmp_path):
    with pytest.raises(FormatError, match="mixed"):
        load_dataset(_write(tmp_path, "f0,label,domain\n0,0,source\n0,1,target\n"), 2)


def test_batch_sizes_and_single_batch():
    ds = DomainDataset(np.arange(20.0).reshape(10, 2), np.arange(10) % 2, "source", 2)
    assert [len(b) for b in batches(ds, 3, seed=0)] == [3, 3, 3, 1]
    (only,) = batches(ds, 10, seed=5)
    assert sorted(only.indices.tolist()) == list(range(10))


def test_batch_order_is_seeded():
    ds = DomainDataset(np.arange(40.0).reshape(20, 2), np.zeros(20), "source", 2)
    a = [b.indices.tolist() for b in batches(ds, 4, seed=11)]
    assert a == [b.indices.tolist() for b in batches(ds, 4, seed=11)]
    assert a != [b.indices.tolist() for b in batches(ds, 4, seed=12)]


@given(n=st.integers(1, 60), b=st.integers(1, 70), seed=st.integers(0, 2 ** 31 - 1))
def test_partition_property(n, b, seed):
    feats = np.arange(n * 2, dtype=float).reshape(n, 2)
    ds = DomainDataset(feats, np.arange(n) % 3, "source", 3)
    out = batches(ds, b, seed=seed)
    assert all(len(x) <= b for x in out)
    idx = np.concatenate([x.indices for x in out])
    assert sorted(idx.tolist()) == list(range(n))
    stacked = np.concatenate([x.features for x in out])
    assert np.array_equal(stacked[np.argsort(idx)], feats)


def test_cycle_restarts_stream():
    ds = DomainDataset(np.zeros((5, 2)), np.zeros(5), "target", 2)
    out = list(cycle_batches(ds, 2, seed=0, count=7))
    assert [len(b) for b in out] == [2, 2, 1, 2, 2, 1, 2]


def test_incompatible_pair():
    a = DomainDataset(np.zeros((2, 2)), [0, 1], "source", 2)
    b = DomainDataset(np.zeros((2, 3)), [0, 1], "target", 2)
    with pytest.raises(ConfigurationError):
        check_compatible(a, b)
