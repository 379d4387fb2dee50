import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modal_distill import data


@pytest.fixture(scope="module")
def base():
    return data.make_toy_shapes(12, num_classes=4, seed=3, size=16)


def test_toy_structure(base):
    assert len(base) == 12 * data.FRAMES_PER_SCENE
    assert base.images.shape == (60, 3, 16, 16)
    assert np.bincount(base.labels).tolist() == [15, 15, 15, 15]
    for sid in set(base.scene_ids):
        idx = [i for i, s in enumerate(base.scene_ids) if s == sid]
        assert sorted(base.frame_ids[idx].tolist()) == list(range(5))
        assert len(set(base.labels[idx].tolist())) == 1
    # stored values survive an fp32 round trip
    assert np.array_equal(base.images, base.images.astype(np.float32).astype(np.float64))


def test_generators_are_pure(base):
    again = data.make_toy_shapes(12, num_classes=4, seed=3, size=16)
    assert again.images.tobytes() == base.images.tobytes()
    for kind in ("invertible_affine", "channel_permute", "complementary_halves"):
        a = data.generate_paired_synthetic(kind, base, seed=5)
        b = data.generate_paired_synthetic(kind, base, seed=5)
        assert a.paired.d.tobytes() == b.paired.d.tobytes() and a.paired.scene_ids == b.paired.scene_ids


def test_channel_permute_inverse(base):
    pairs = data.generate_paired_synthetic("channel_permute", base, seed=1)
    tf = pairs.transform
    assert not np.array_equal(tf.perm, np.arange(3))
    np.testing.assert_array_equal(tf.inverse(pairs.paired.d), base.images)
    np.testing.assert_array_equal(pairs.paired.s, base.images)


def test_affine_is_bijective(base):
    pairs = data.generate_paired_synthetic("invertible_affine", base, seed=2)
    tf = pairs.transform
    x = base.images[:5]
    np.testing.assert_allclose(tf.inverse(tf.apply(x)), x, atol=1e-9)
    y = np.random.default_rng(0).normal(size=x.shape)
    np.testing.assert_allclose(tf.apply(tf.inverse(y)), y, atol=1e-9)
    assert abs(np.linalg.det(tf.matrix)) > 0.1


def test_invertible_pairs_are_aligned(base):
    pairs = data.generate_paired_synthetic("invertible_affine", base, seed=2)
    p = pairs.paired
    assert p.scene_ids == base.scene_ids and np.array_equal(p.frame_ids, base.frame_ids)
    assert np.array_equal(pairs.labeled_d.labels, base.labels)


def test_complementary_halves(base):
    pairs = data.generate_paired_synthetic("complementary_halves", base, seed=4)
    s, d = pairs.paired.s, pairs.paired.d
    w = s.shape[-1]
    assert not np.any(s[..., w // 2 :]) and not np.any(d[..., : w // 2])
    c = base.num_classes
    assert pairs.labeled_s.num_classes == c * c
    # each half determines only its own factor of the label
    left = pairs.labeled_s.labels // c
    right = pairs.labeled_d.labels % c
    assert np.array_equal(pairs.labeled_s.labels, pairs.labeled_d.labels)
    assert len(set(left.tolist())) == c and len(set(right.tolist())) == c
    for sid, sa, sb in ((sid, *sid.split("|")) for sid in pairs.paired.scene_ids):
        assert sa in base.scene_ids and sb in base.scene_ids


def test_empty_base_rejected(base):
    with pytest.raises(ValueError):
        data.generate_paired_synthetic("invertible_affine", base.subset([]), seed=0)


def test_one_scene_per_split():
    ds = data.make_toy_shapes(3, num_classes=3, seed=0, size=8)
    scenes = sorted(set(ds.scene_ids))
    spec = data.SplitSpec({scenes[0]}, {scenes[1]}, {scenes[2]})
    parts = data.split_by_scene(ds, spec)
    assert [sorted(set(p.scene_ids)) for p in parts] == [[s] for s in scenes]


def test_unassigned_scene(base):
    with pytest.raises(data.UnassignedSceneError):
        data.split_by_scene(base, data.SplitSpec({"s000"}, set(), set()))
    with pytest.raises(ValueError):
        data.SplitSpec({"a"}, {"a"}, set())


def test_random_100_scene_split_is_disjoint():
    ds = data.make_toy_shapes(100, num_classes=2, seed=1, size=8, frames_per_scene=2)
    parts = data.split_by_scene(ds, data.random_split(ds.scene_ids, seed=9))
    sets = [set(p.scene_ids) for p in parts]
    # pairwise brute-force intersection check
    for a, b in itertools.combinations(sets, 2):
        assert not [s for s in a if s in b]
    assert sum(len(p) for p in parts) == len(ds)
    assert set().union(*sets) == set(ds.scene_ids)


@given(st.integers(1, 40), st.integers(1, 50), st.integers(0, 10**6), st.integers(0, 5))
def test_batches_cover_and_stay_aligned(n, bs, seed, epoch):
    ids = [f"sc{i // 3}" for i in range(n)]
    frames = np.arange(n) % 3
    s = np.arange(n, dtype=float)[:, None] * np.ones((1, 2))
    p = data.PairedDataset(ids, frames, s, -s)
    seen = []
    for b in data.batches(p, bs, seed, epoch):
        assert len(b.s) <= bs
        for i, row in enumerate(b.s):
            k = int(row[0])
            assert b.scene_ids[i] == ids[k] and b.frame_ids[i] == frames[k] and b.d[i][0] == -k
        seen.extend(int(r[0]) for r in b.s)
    assert sorted(seen) == list(range(n))
    again = [int(r[0]) for b in data.batches(p, bs, seed, epoch) for r in b.s]
    assert again == seen


def test_full_batch_is_permutation(base):
    out = list(data.batches(base, len(base), 0, 0))
    assert len(out) == 1
    assert sorted(map(tuple, out[0][0].reshape(len(base), -1)[:, :3])) == sorted(
        map(tuple, base.images.reshape(len(base), -1)[:, :3])
    )


def test_split_then_batch_alignment(base):
    pairs = data.generate_paired_synthetic("invertible_affine", base, seed=2)
    train, _, _ = data.split_by_scene(pairs.paired, data.random_split(pairs.paired.scene_ids, seed=1))
    tf = pairs.transform
    for b in data.batches(train, 7, 3, 1):
        np.testing.assert_allclose(tf.inverse(b.d), b.s, atol=1e-5)


def test_per_class(base):
    sub = base.per_class(2, seed=1)
    assert np.bincount(sub.labels).tolist() == [2, 2, 2, 2]
    assert base.per_class(2, seed=1).images.tobytes() == sub.images.tobytes()


def test_dataset_files_round_trip(tmp_path, base):
    pairs = data.generate_paired_synthetic("invertible_affine", base, seed=2, modality_names=("rgb", "depth"))
    for ds, name in ((base, "lab"), (pairs.paired, "pair")):
        path = data.save_dataset(ds, tmp_path / name)
        back = data.load_dataset(path)
        if isinstance(ds, data.PairedDataset):
            assert back.modality_names == ("rgb", "depth")
            np.testing.assert_array_equal(back.d, ds.d.astype(np.float32))
            assert back.scene_ids == ds.scene_ids
        else:
            np.testing.assert_array_equal(back.images, ds.images)
            assert back.class_names == ds.class_names and back.scene_ids == ds.scene_ids
        assert (tmp_path / name / "manifest.json").read_text().startswith("{")


def test_labeled_validation():
    with pytest.raises(ValueError):
        data.LabeledDataset(np.zeros((2, 1, 2, 2)), [0, 3], ["a", "b"])
    with pytest.raises(ValueError):
        data.PairedDataset(["a"], [0, 1], np.zeros((1, 1)), np.zeros((1, 1)))
