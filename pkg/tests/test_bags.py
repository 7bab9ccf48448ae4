import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cersdx.bags import (
    BadMagicError,
    BadVersionError,
    EmbeddingBag,
    EmptyBagError,
    SIGNAL_AXIS,
    SyntheticSpec,
    TruncatedError,
    decode_bag,
    encode_bag,
    few_shot_sample,
    generate_synthetic_bags,
    load_manifest_bags,
    read_bag,
    read_manifest,
    stratified_kfold,
    write_bag,
    write_cohort,
)
from cersdx.errors import DataError


def small_bag(label=1):
    return EmbeddingBag("s", np.array([[1.0, -2.5, 3.25]]), np.array([[256, 512]]), label)


def test_payload_size_43():
    assert len(encode_bag(small_bag())) == 43


def test_layout_is_little_endian():
    buf = encode_bag(small_bag(label=None))
    assert buf[:4] == b"CEB1"
    assert struct.unpack_from("<III", buf, 4) == (1, 1, 3)
    assert struct.unpack_from("<H", buf, 16) == (1,)
    assert buf[18:19] == b"s"
    assert struct.unpack_from("<i", buf, 19) == (-1,)
    assert struct.unpack_from("<ii", buf, 23) == (256, 512)
    assert struct.unpack_from("<3f", buf, 31) == (1.0, -2.5, 3.25)


bag_strategy = st.builds(
    lambda sid, arr, label, seed: EmbeddingBag(
        sid, arr, np.random.default_rng(seed).integers(-(2**31), 2**31 - 1, size=(arr.shape[0], 2)), label
    ),
    st.text(max_size=20),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
               elements=st.floats(-1e6, 1e6, width=32)),
    st.one_of(st.none(), st.integers(0, 2**31 - 1)),
    st.integers(0, 2**32 - 1),
)


@given(bag_strategy)
@settings(max_examples=200, deadline=None)
def test_round_trip_property(bag):
    back = decode_bag(encode_bag(bag))
    assert back == bag
    assert encode_bag(back) == encode_bag(bag)


def test_file_and_stream_round_trip(tmp_path):
    bag = small_bag()
    path = tmp_path / "b.ceb"
    write_bag(bag, path)
    assert read_bag(path) == bag
    sink = io.BytesIO()
    write_bag(bag, sink)
    sink.seek(0)
    assert read_bag(sink) == bag


def test_bad_magic(tmp_path):
    buf = b"XXXX" + encode_bag(small_bag())[4:]
    with pytest.raises(BadMagicError):
        decode_bag(buf)


def test_bad_version():
    buf = bytearray(encode_bag(small_bag()))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(BadVersionError):
        decode_bag(bytes(buf))


@pytest.mark.parametrize("cut", [0, 3, 10, 20, 42])
def test_truncated(cut):
    with pytest.raises(TruncatedError):
        decode_bag(encode_bag(small_bag())[:cut])


def test_empty_dimensions():
    buf = bytearray(encode_bag(small_bag()))
    buf[12:16] = struct.pack("<I", 0)
    with pytest.raises(EmptyBagError):
        decode_bag(bytes(buf))
    with pytest.raises(EmptyBagError):
        EmbeddingBag("x", np.zeros((0, 4)), None)


def test_error_codes_distinct():
    codes = {cls.code for cls in (BadMagicError, BadVersionError, TruncatedError, EmptyBagError)}
    assert len(codes) == 4


def test_non_finite_rejected():
    with pytest.raises(DataError):
        EmbeddingBag("x", np.array([[np.nan]]), None)


def test_synthetic_deterministic():
    spec = SyntheticSpec(n_bags=5, n_instances=10, dim=8, k_signal=2, n_ood=3, seed=4)
    a, b = generate_synthetic_bags(spec), generate_synthetic_bags(spec)
    assert a.bags == b.bags and a.ood_bags == b.ood_bags
    for label, idx in zip(a.labels, a.signal_idx):
        assert len(idx) == (2 if label == 1 else 0)


def test_synthetic_signal_location():
    c = generate_synthetic_bags(SyntheticSpec(n_bags=40, n_instances=20, dim=8, k_signal=3, mu=6, seed=1))
    sig, rest = [], []
    for bag, idx in zip(c.bags, c.signal_idx):
        x = bag.instances[:, SIGNAL_AXIS]
        mask = np.zeros(bag.n, dtype=bool)
        mask[idx] = True
        sig.extend(x[mask])
        rest.extend(x[~mask])
    assert abs(np.mean(sig) - 6) < 4 / np.sqrt(len(sig))
    assert abs(np.mean(rest)) < 4 / np.sqrt(len(rest))


def test_synthetic_errors():
    with pytest.raises(DataError):
        SyntheticSpec(n_instances=3, k_signal=4)
    with pytest.raises(DataError):
        SyntheticSpec(dim=2)


def test_cohort_files(tmp_path):
    c = generate_synthetic_bags(SyntheticSpec(n_bags=3, n_instances=4, dim=5, n_ood=2, seed=0))
    manifest, ood = write_cohort(c, tmp_path / "out")
    assert manifest.read_text().splitlines()[0] == "slide_id,label,path,n_signal"
    bags, labels = load_manifest_bags(manifest)
    assert bags == c.bags and labels.tolist() == c.labels.tolist()
    rows = read_manifest(ood)
    assert len(rows) == 2 and all(r["label"] == -1 for r in rows)


def test_kfold_exact_stratification():
    split = stratified_kfold([0] * 5 + [1] * 5, 5, seed=3)
    labels = np.array([0] * 5 + [1] * 5)
    for f in range(5):
        assert sorted(labels[split.indices(f)].tolist()) == [0, 1]


def test_kfold_uneven_counts():
    labels = np.array([0] * 7 + [1] * 3)
    split = stratified_kfold(labels, 3, seed=0)
    c0 = sorted(np.sum((split.folds == f) & (labels == 0)) for f in range(3))
    c1 = sorted(np.sum((split.folds == f) & (labels == 1)) for f in range(3))
    assert c0 == [2, 2, 3] and c1 == [1, 1, 1]


def check_kfold(labels, k, seed):
    split = stratified_kfold(labels, k, seed)
    assert np.all((split.folds >= 0) & (split.folds < k))
    sizes = np.bincount(split.folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1
    for cls in np.unique(labels):
        counts = np.bincount(split.folds[labels == cls], minlength=k)
        assert counts.max() - counts.min() <= 1
    assert np.array_equal(split.folds, stratified_kfold(labels, k, seed).folds)


def test_kfold_random_label_vectors(rng):
    for _ in range(50):
        n = int(rng.integers(5, 60))
        labels = rng.integers(0, rng.integers(1, 5), size=n)
        check_kfold(labels, 5, int(rng.integers(1000)))


def test_kfold_errors():
    with pytest.raises(DataError):
        stratified_kfold([0, 1, 0], 5)


def test_train_val_test_disjoint():
    split = stratified_kfold(np.arange(20) % 2, 5, 0)
    tr, va, te = split.train_val_test(0)
    assert set(tr) | set(va) | set(te) == set(range(20))
    assert not (set(tr) & set(va)) and not (set(tr) & set(te)) and not (set(va) & set(te))


def test_few_shot_counts():
    labels = np.repeat([0, 1, 2], 10)
    idx = few_shot_sample(labels, 4, seed=0)
    assert len(idx) == 12 and np.bincount(labels[idx]).tolist() == [4, 4, 4]
    assert len(set(idx)) == 12


def test_few_shot_whole_class():
    labels = np.repeat([0, 1], [3, 8])
    idx = few_shot_sample(labels, 3, seed=1)
    assert set(np.flatnonzero(labels == 0)) <= set(idx)


def test_few_shot_error_names_class():
    with pytest.raises(DataError, match="class 7"):
        few_shot_sample([7, 7, 7, 2, 2, 2, 2, 2], 5)
