import numpy as np
import pytest

from modal_distill import nets, toy
from modal_distill.nets import NetworkSpec, SpecError
from modal_distill.optim import OptimState, sgd_step
from modal_distill import ops
from modal_distill.tensor import ShapeError, Tensor


def conv_stack():
    return NetworkSpec(
        (nets.conv("c1", 4, 3, pad=1), nets.relu("r1"), nets.conv("c2", 5, 3, stride=2), nets.relu("r2"),
         nets.conv("c3", 2, 1), nets.relu("r3")),
        (3, 9, 9),
    )


def test_same_seed_same_bytes(tiny_spec):
    a, b = nets.build_network(tiny_spec, seed=7), nets.build_network(tiny_spec, seed=7)
    assert a.snapshot() == b.snapshot()
    assert nets.build_network(tiny_spec, seed=8).snapshot() != a.snapshot()


def test_zero_init_gives_zero_output(rng):
    net = nets.build_network(conv_stack(), init="zeros")
    out = net(Tensor(rng.normal(size=(2, 3, 9, 9))))
    assert not np.any(out.data)


def test_fan_in_std():
    spec = NetworkSpec((nets.conv("c", 16, 4),), (16, 8, 8))  # 16*16*4*4 = 4096 weights
    w = nets.build_network(spec, seed=0).params["c"]["weight"].data
    assert w.size == 4096
    assert abs(w.std() / np.sqrt(2.0 / (16 * 16)) - 1) < 0.10
    assert not np.any(nets.build_network(spec, seed=0).params["c"]["bias"].data)


def test_shape_error_names_layer():
    with pytest.raises(SpecError, match="c2"):
        NetworkSpec((nets.conv("c1", 4, 3), nets.conv("c2", 4, 9)), (3, 8, 8))
    with pytest.raises(SpecError, match="duplicate"):
        NetworkSpec((nets.relu("a"), nets.relu("a")), (3, 8, 8))


def test_symbolic_shapes_match_forward(rng):
    spec = conv_stack()
    net = nets.build_network(spec, seed=1)
    _, feats = nets.forward(net, Tensor(rng.normal(size=(2, 3, 9, 9))), spec.names)
    assert {k: v.shape[1:] for k, v in feats.items()} == spec.shapes()
    # hand-derived oracle: pad 1 keeps 9, stride 2 k3 gives 4, 1x1 keeps 4
    assert spec.shapes() == {"c1": (4, 9, 9), "r1": (4, 9, 9), "c2": (5, 4, 4), "r2": (5, 4, 4),
                             "c3": (2, 4, 4), "r3": (2, 4, 4)}


def test_taps_do_not_perturb_output(tiny_spec, rng):
    net = nets.build_network(tiny_spec, seed=2)
    x = Tensor(rng.normal(size=(3, 3, 8, 8)))
    plain, _ = nets.forward(net, x)
    tapped, feats = nets.forward(net, x, {"pool2", "fc5"})
    assert plain.data.tobytes() == tapped.data.tobytes()
    assert feats["fc5"].data.tobytes() == plain.data.tobytes()
    with pytest.raises(KeyError):
        nets.forward(net, x, {"nope"})
    with pytest.raises(ShapeError):
        nets.forward(net, Tensor(np.zeros((1, 3, 9, 9))))


def test_split_recompose_bit_exact(tiny_spec, rng):
    net = nets.build_network(tiny_spec, seed=3)
    lower, upper = nets.split_network(net, "pool2")
    assert lower.spec.output_shape() == tiny_spec.shapes()["pool2"]
    assert lower.param_count() + upper.param_count() == net.param_count()
    assert lower.params["conv1"]["weight"] is net.params["conv1"]["weight"]
    for _ in range(10):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        assert upper(lower(x)).data.tobytes() == net(x).data.tobytes()
    with pytest.raises(SpecError):
        nets.split_network(net, "conv1")
    with pytest.raises(SpecError):
        nets.split_network(net, "fc5")


def test_checkpoint_round_trip(tmp_path, tiny_spec):
    net = nets.build_network(tiny_spec, seed=4, modality_tag="d")
    nets.freeze(net, "conv2")
    p1 = nets.save_checkpoint(net, tmp_path / "a.pten")
    back = nets.load_checkpoint(p1)
    p2 = nets.save_checkpoint(back, tmp_path / "b.pten")
    assert p1.read_bytes() == p2.read_bytes()
    assert back.spec == net.spec and back.modality_tag == "d"
    assert not back.params["conv1"]["weight"].requires_grad and back.params["conv3"]["weight"].requires_grad
    for (n, a), (_, b) in zip(net.parameters(), back.parameters()):
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32))


def test_checkpoint_corruption(tmp_path, tiny_spec):
    from modal_distill.pten import PtenDigestError

    p = nets.save_checkpoint(nets.build_network(tiny_spec), tmp_path / "a.pten")
    raw = bytearray(p.read_bytes())
    raw[-20] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(PtenDigestError):
        nets.load_checkpoint(p)


def _train_steps(net, x, y, steps):
    opt = OptimState(0.05, 0.9)
    for _ in range(steps):
        params = net.trainable()
        for _, t in params:
            t.grad = None
        loss = ops.cross_entropy_loss(net(Tensor(x)), y)
        if loss.requires_grad:
            loss.backward()
        sgd_step(params, opt)


def test_freeze_prefix_survives_100_steps(tiny_spec, rng):
    net = nets.build_network(tiny_spec, seed=5)
    nets.freeze(net, "pool2")
    before = net.snapshot()
    x, y = rng.normal(size=(8, 3, 8, 8)), rng.integers(0, 3, 8)
    _train_steps(net, x, y, 100)
    after = net.snapshot()
    for name in before:
        if name.startswith(("conv1", "conv2")):
            assert after[name] == before[name], name
        else:
            assert after[name] != before[name], name


def test_freeze_all_and_first_layer(tiny_spec, rng):
    x, y = rng.normal(size=(4, 3, 8, 8)), rng.integers(0, 3, 4)
    net = nets.freeze(nets.build_network(tiny_spec, seed=6), "fc5")
    before = net.snapshot()
    _train_steps(net, x, y, 3)
    assert net.snapshot() == before
    spec = NetworkSpec((nets.relu("r0"),) + tiny_spec.layers, tiny_spec.input_shape)
    net = nets.freeze(nets.build_network(spec, seed=6), "r0")
    before = net.snapshot()
    _train_steps(net, x, y, 2)
    assert all(net.snapshot()[k] != v for k, v in before.items())
    with pytest.raises(KeyError):
        nets.freeze(net, "missing")


def test_spec_dict_round_trip(tiny_spec):
    assert NetworkSpec.from_dict(tiny_spec.to_dict()) == tiny_spec


def test_toy_specs(tiny_spec):
    low = toy.lower_spec(tiny_spec, "pool2")
    up = toy.upper_spec(tiny_spec, "pool2")
    assert low.names[-1] == "pool2" and up.input_shape == low.output_shape()
    assert low.names + up.names == tiny_spec.names
    parametric = [l for l in tiny_spec.layers if l.kind in ("conv", "linear")]
    assert len(parametric) == 5


def test_predict_matches_forward_and_batches(tiny_spec, rng):
    net = nets.build_network(tiny_spec, seed=9)
    x = rng.normal(size=(7, 3, 8, 8))
    np.testing.assert_array_equal(nets.predict(net, x, batch_size=3), net(Tensor(x)).data)
    assert nets.predict(net, x[:0]).shape == (0, 3)
