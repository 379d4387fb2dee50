import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from modal_distill import nets, toy, zeroshot
from modal_distill.tensor import ShapeError, Tensor, no_grad
from modal_distill.zeroshot import AssemblyError


@pytest.fixture
def teacher(tiny_spec):
    return nets.build_network(tiny_spec, seed=4)


def test_franken_of_teacher_with_itself_is_bit_exact(teacher, rng):
    x = rng.normal(size=(6, 3, 8, 8))
    for seam in ["pool1", "pool2", "pool3"]:
        fr = zeroshot.assemble_franken(teacher, teacher, seam)
        with no_grad():
            assert np.array_equal(fr(Tensor(x)).data, teacher(Tensor(x)).data)
        assert np.array_equal(fr.predict(x), nets.predict(teacher, x))


def test_franken_uses_student_lower_and_teacher_upper(teacher, tiny_spec, rng):
    student = nets.build_network(toy.lower_spec(tiny_spec, "pool2"), seed=9)
    fr = zeroshot.assemble_franken(student, teacher, "pool2")
    x = rng.normal(size=(3, 3, 8, 8))
    _, upper = nets.split_network(teacher, "pool2")
    with no_grad():
        expect = upper(student(Tensor(x))).data
        assert np.array_equal(fr(Tensor(x)).data, expect)


def test_franken_from_checkpoints(tmp_path, teacher, rng):
    nets.save_checkpoint(teacher, tmp_path / "t.pten")
    fr = zeroshot.assemble_franken(tmp_path / "t.pten", tmp_path / "t.pten", "pool1")
    x = rng.normal(size=(2, 3, 8, 8))
    # checkpoints hold float32, so compare against the reloaded teacher
    assert np.array_equal(fr.predict(x), nets.predict(nets.load_checkpoint(tmp_path / "t.pten"), x))


def test_seam_errors(teacher, tiny_spec):
    with pytest.raises(AssemblyError, match="nope"):
        zeroshot.assemble_franken(teacher, teacher, "nope")
    with pytest.raises(AssemblyError):
        zeroshot.assemble_franken(teacher, teacher, "fc5")
    narrow = toy.teacher_spec(3, input_shape=(3, 8, 8), widths=(2, 4, 4), hidden=8)
    with pytest.raises(AssemblyError, match="pool1"):
        zeroshot.assemble_franken(nets.build_network(narrow), teacher, "pool1")


def test_fuse_examples():
    assert np.array_equal(zeroshot.fuse_scores([np.array([1.0, 3.0]), np.array([3.0, 1.0])]), [2.0, 2.0])
    out = zeroshot.fuse_scores([np.array([0.0]), np.array([4.0])], weights=[3, 1])
    assert out.tolist() == [1.0]
    with pytest.raises(ShapeError):
        zeroshot.fuse_scores([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        zeroshot.fuse_scores([])
    with pytest.raises(ValueError):
        zeroshot.fuse_scores([np.zeros(2)], weights=[-1])


score = hnp.arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(score)
def test_fuse_is_idempotent(s):
    assert np.allclose(zeroshot.fuse_scores([s, s, s]), s, rtol=1e-12, atol=1e-12)


@given(st.lists(score, min_size=2, max_size=4), st.randoms())
def test_fuse_permutation_invariant(sets, r):
    perm = list(sets)
    r.shuffle(perm)
    assert np.allclose(zeroshot.fuse_scores(sets), zeroshot.fuse_scores(perm), rtol=1e-12, atol=1e-9)


@given(score, st.floats(-50, 50, allow_nan=False))
def test_fused_argmax_unchanged_by_shared_shift(s, c):
    base = zeroshot.fuse_scores([s, s * 0.5])
    shifted = zeroshot.fuse_scores([s + c, s * 0.5 + c])
    keep = np.sort(base, axis=1)
    clear = (keep[:, -1] - keep[:, -2]) > 1e-6  # rows without a near-tie
    assert np.array_equal(base.argmax(1)[clear], shifted.argmax(1)[clear])
