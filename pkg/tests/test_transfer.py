import math
import warnings
import numpy as np
import pytest

from modal_distill import data, nets, toy, transfer
from modal_distill.optim import OptimState
from modal_distill.tensor import ShapeError
from modal_distill.transfer import AdapterSpec, LossSpec, TransferConfig, TransferPoint


@pytest.fixture(scope="module")
def world():
    spec = toy.teacher_spec(3, input_shape=(3, 8, 8), widths=(4, 4, 4), hidden=8)
    teacher = nets.build_network(spec, seed=11, modality_tag="s")
    base = data.make_toy_shapes(12, num_classes=3, seed=1, size=8)
    pairs = data.generate_paired_synthetic("invertible_affine", base, seed=2)
    return spec, teacher, base, pairs


def _cfg(world, **kw):
    spec, teacher, _, pairs = world
    defaults = dict(
        teacher=nets.clone(teacher),
        student_spec=toy.lower_spec(spec, "pool2"),
        points=[TransferPoint("pool2", "pool2", AdapterSpec("identity"))],
        paired_data=pairs.paired,
        iterations=5,
        batch_size=8,
        learning_rate=1e-3,
        seed=0,
    )
    defaults.update(kw)
    return TransferConfig(**defaults)


def test_calibrate_scale_examples(rng):
    t = np.zeros((2, 3))
    t[:, 0] = 10.0
    s = np.zeros((2, 3))
    s[:, 1] = 5.0
    assert transfer.calibrate_scale(t, s) == 2.0
    x = rng.normal(size=(4, 6))
    assert transfer.calibrate_scale(x, x) == 1.0
    tt, ss = rng.normal(size=(5, 2, 3, 3)) * 3, rng.normal(size=(5, 2, 3, 3))
    k = transfer.calibrate_scale(tt, ss)
    mean_norm = lambda a: np.linalg.norm(a.reshape(len(a), -1), axis=1).mean()
    assert mean_norm(ss * k) == pytest.approx(mean_norm(tt), rel=1e-9)
    with pytest.raises(transfer.CalibrationError):
        transfer.calibrate_scale(tt, np.zeros_like(ss))


def test_identity_adapter_requires_equal_shapes():
    with pytest.raises(ShapeError):
        transfer.build_adapter(TransferPoint("a", "b", AdapterSpec("identity")), (4, 2, 2), (8, 2, 2), 0)
    ad = transfer.build_adapter(TransferPoint("a", "b", AdapterSpec(use_scale=True)), (4, 2, 2), (8, 2, 2), 0)
    assert [l.kind for l in ad.spec.layers] == ["conv", "relu", "scale"]
    assert ad.spec.output_shape() == (8, 2, 2)


def test_student_equals_teacher_gives_zero_loss_and_no_update(world):
    spec, teacher, base, _ = world
    same = data.generate_paired_synthetic("channel_permute", base, seed=0).paired
    same = data.PairedDataset(same.scene_ids, same.frame_ids, same.s, same.s)
    student = nets.truncate(nets.clone(teacher), "pool2")
    before = student.snapshot()
    batch = next(data.batches(same, 8, 0, 0))
    point = TransferPoint("pool2", "pool2", AdapterSpec("identity"))
    adapter = transfer.build_adapter(point, (4, 2, 2), (4, 2, 2), 0)
    rec = transfer.transfer_step(batch, teacher, student, [point], LossSpec(), OptimState(), {point.key: adapter})
    assert rec.total == 0.0
    assert student.snapshot() == before


def test_step_keeps_teacher_frozen_and_lowers_batch_loss(world):
    spec, teacher, _, pairs = world
    teacher = nets.clone(teacher)
    for _, t in teacher.parameters():
        t.requires_grad = False
    before = teacher.snapshot()
    student = nets.build_network(toy.lower_spec(spec, "pool2"), seed=3)
    point = TransferPoint("pool2", "pool2", AdapterSpec())
    adapters = {point.key: transfer.build_adapter(point, (4, 2, 2), (4, 2, 2), 1)}
    batch = next(data.batches(pairs.paired, 16, 0, 0))
    optim = OptimState(1e-4, 0.9)
    first = transfer.transfer_step(batch, teacher, student, [point], LossSpec(), optim, adapters)
    second = transfer.transfer_step(batch, teacher, student, [point], LossSpec(), optim, adapters)
    assert second.total < first.total
    assert teacher.snapshot() == before


def test_adapted_shape_mismatch_names_point(world):
    spec, teacher, _, pairs = world
    student = nets.build_network(toy.lower_spec(spec, "pool1"), seed=3)
    point = TransferPoint("pool2", "pool1", AdapterSpec())
    adapters = {point.key: nets.build_network(nets.NetworkSpec((), (4, 4, 4)))}
    batch = next(data.batches(pairs.paired, 4, 0, 0))
    with pytest.raises(ShapeError, match="pool2->pool1"):
        transfer.transfer_step(batch, teacher, student, [point], LossSpec(), OptimState(), adapters)


def test_train_transfer_history_and_determinism(world):
    r1 = transfer.train_transfer(_cfg(world))
    r2 = transfer.train_transfer(_cfg(world))
    assert len(r1.loss_history) == 5
    assert [h.step for h in r1.loss_history] == list(range(5))
    assert [h.total for h in r1.loss_history] == [h.total for h in r2.loss_history]
    assert r1.student.snapshot() == r2.student.snapshot()


def test_frozen_teacher_invariant(world):
    cfg = _cfg(world)
    before = cfg.teacher.snapshot()
    transfer.train_transfer(cfg)
    assert cfg.teacher.snapshot() == before


def test_multi_point_total_is_weighted_sum(world):
    spec = world[0]
    cfg = _cfg(
        world,
        student_spec=toy.lower_spec(spec, "pool3"),
        points=[TransferPoint("pool2", "pool2", AdapterSpec(), 0.3), TransferPoint("pool3", "pool3", AdapterSpec(), 2.0)],
    )
    rep = transfer.train_transfer(cfg)
    for h in rep.loss_history:
        assert abs(h.total - (0.3 * h.per_point["pool2->pool2"] + 2.0 * h.per_point["pool3->pool3"])) <= 1e-12


def test_calibration_runs_once_and_scale_trains(world):
    cfg = _cfg(world, points=[TransferPoint("pool2", "pool2", AdapterSpec(use_scale=True))])
    rep = transfer.train_transfer(cfg)
    assert set(rep.calibration) == {"pool2->pool2"} and rep.calibration["pool2->pool2"] > 0
    ad = rep.adapters["pool2->pool2"]
    assert ad.params["adapt.pool2.scale"]["scale"].item() != rep.calibration["pool2->pool2"]


def test_sigmoid_loss_option(world):
    rep = transfer.train_transfer(_cfg(world, loss=LossSpec("sigmoid", alpha=2.0, tau=0.1)))
    assert all(math.isfinite(h.total) for h in rep.loss_history)


def test_config_validation(world):
    with pytest.raises(ValueError):
        transfer.train_transfer(_cfg(world, iterations=0))
    with pytest.raises(ValueError):
        transfer.train_transfer(_cfg(world, points=[]))
    with pytest.raises(ValueError):
        TransferPoint("a", "b", weight=0.0)


def test_nan_aborts(world):
    pairs = world[3].paired
    bad = pairs.d.copy()
    bad[:] = np.nan
    cfg = _cfg(world, paired_data=data.PairedDataset(pairs.scene_ids, pairs.frame_ids, pairs.s, bad))
    with pytest.raises(transfer.DivergenceError, match="step"):
        transfer.train_transfer(cfg)


@pytest.fixture(scope="module")
def labeled(world):
    spec, teacher, base, _ = world
    return base.subset(range(0, 40)), base.subset(range(40, 60))


def test_finetune_fc_only_keeps_trunk(world, labeled):
    spec, teacher, _, _ = world
    trunk = nets.truncate(nets.clone(teacher), "pool2")
    before = trunk.snapshot()
    res = transfer.finetune(trunk, toy.upper_spec(spec, "pool2"), labeled[0], "fc_only",
                            transfer.TrainSettings(epochs=2, batch_size=8), labeled[1])
    snap = res.classifier.snapshot()
    assert all(snap[k] == v for k, v in before.items())
    assert trunk.snapshot() == before
    assert len(res.history) == 2 and res.accuracy is not None


def test_from_scratch_equals_fresh_build(world, labeled):
    spec, teacher, _, _ = world
    settings = transfer.TrainSettings(epochs=2, batch_size=8, seed=5)
    trunk_spec = toy.lower_spec(spec, "pool2")
    a = transfer.finetune(nets.truncate(teacher, "pool2"), toy.upper_spec(spec, "pool2"), labeled[0], "from_scratch", settings)
    b = transfer.finetune(nets.build_network(trunk_spec, seed=5), toy.upper_spec(spec, "pool2"), labeled[0], "all", settings)
    assert a.classifier.snapshot() == b.classifier.snapshot()


def test_finetune_shape_mismatch(world, labeled):
    spec, teacher, _, _ = world
    with pytest.raises(ShapeError):
        transfer.finetune(nets.truncate(teacher, "pool1"), toy.upper_spec(spec, "pool2"), labeled[0])


def test_probe_on_logits_matches_classifier(labeled):
    train, test = labeled
    spec = toy.teacher_spec(3, input_shape=(3, 8, 8), widths=(4, 4, 4), hidden=8)
    net = nets.build_network(spec, seed=2)
    transfer.train_classifier(net, train, transfer.TrainSettings(epochs=15, batch_size=8, learning_rate=0.05))
    acc = transfer.evaluate_accuracy(net, test)
    probe = transfer.linear_probe(net, "fc5", train, test, max_iter=2000)
    assert abs(probe.accuracy - acc) <= 0.01 + 1 / len(test) or probe.accuracy >= acc


def test_probe_on_zero_trunk_is_majority_rate(labeled, tiny_spec):
    train, test = labeled
    net = nets.build_network(tiny_spec, init="zeros")
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        r = transfer.linear_probe(net, "pool2", train, test)
    assert any("all zero" in str(x.message) for x in w)
    majority = np.bincount(test.labels).max() / len(test)
    assert r.accuracy <= majority + 1e-12


def test_sweep_rows_and_skips(world, labeled):
    spec, _, _, _ = world
    cfg = _cfg(world, iterations=3)
    rows = transfer.sweep_layers(
        cfg, [("pool1", "pool1"), ("nope", "nope"), ("pool2", "pool2")],
        head_for=lambda l: toy.upper_spec(spec, l), labeled=labeled[0], test=labeled[1],
        settings=transfer.TrainSettings(epochs=1, batch_size=8),
        student_spec_for=lambda l: toy.lower_spec(spec, l), adapter=AdapterSpec(),
    )
    assert len(rows) == 3 and rows[-1].skipped and rows[-1].student_layer == "nope"
    done = [r for r in rows if r.skipped is None]
    assert [r.accuracy for r in done] == sorted((r.accuracy for r in done), reverse=True)


def test_single_candidate_sweep_is_transfer_plus_finetune(world, labeled):
    spec = world[0]
    cfg = _cfg(world, iterations=3, student_spec=toy.lower_spec(spec, "pool2"),
               points=[TransferPoint("pool2", "pool2", AdapterSpec())])
    settings = transfer.TrainSettings(epochs=1, batch_size=8)
    (row,) = transfer.sweep_layers(cfg, [("pool2", "pool2")], lambda l: toy.upper_spec(spec, l), labeled[0], labeled[1],
                                   settings, lambda l: toy.lower_spec(spec, l), AdapterSpec())
    rep = transfer.train_transfer(cfg)
    res = transfer.finetune(rep.student, toy.upper_spec(spec, "pool2"), labeled[0], "fc_only", settings, labeled[1])
    assert row.accuracy == res.accuracy and row.final_loss == rep.final_loss
