import numpy as np
import pytest

from pacda import tensor as T
from pacda.errors import ConfigError, ContractError, ShapeError
from pacda.network import ArchSpec, BNLayer, BNState, init_network, parameter_count
from pacda.tensor import Tensor, no_grad


@pytest.fixture
def x(tiny_arch):
    return np.random.default_rng(5).normal(size=(10, tiny_arch.input_dim))


class TestArchitecture:
    def test_layer_names_and_shapes(self, tiny_net):
        params = tiny_net.parameters()
        assert tiny_net.prunable == ["fc0.weight", "fc1.weight", "bottleneck.weight"]
        assert params["fc0.weight"].shape == (5, 7)
        assert params["bottleneck.weight"].shape == (6, 4)
        assert params["classifier.weight"].shape == (4, 3)
        assert tiny_net.first_bn_id == "fc0"
        assert list(tiny_net.bn_layers()) == ["fc0", "fc1", "bottleneck"]
        assert "classifier" not in tiny_net.bn_layers()

    def test_parameter_count(self, tiny_net):
        # weights + biases + 2 affine terms per BN feature
        assert parameter_count(tiny_net) == (5 * 7 + 7 + 14) + (7 * 6 + 6 + 12) + (6 * 4 + 4 + 8) + (4 * 3 + 3)

    def test_init_is_seeded_and_bounded(self, tiny_arch):
        a, b = init_network(tiny_arch, 3), init_network(tiny_arch, 3)
        for name, p in a.parameters().items():
            np.testing.assert_array_equal(p.data, b.parameters()[name].data)
        w = a.parameters()["fc0.weight"].data
        assert np.all(np.abs(w) <= 1 / np.sqrt(5))

    def test_invalid_arch(self):
        with pytest.raises(ConfigError):
            ArchSpec(4, [0], 2, 3)
        with pytest.raises(ConfigError):
            ArchSpec(4, [3], 2, 1)


class TestBatchNorm:
    def test_train_mode_normalizes_and_updates_stats(self):
        bn = BNLayer.fresh(2, momentum=0.1, eps=1e-5, name="bn")
        x = np.array([[1.0, 10.0], [3.0, 14.0], [5.0, 12.0]])
        out = bn.forward(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_eval_mode_uses_running_stats(self):
        bn = BNLayer.fresh(2, 0.1, 1e-5, "bn")
        bn.running_mean, bn.running_var = np.array([1.0, 2.0]), np.array([4.0, 9.0])
        bn.training = False
        out = bn.forward(Tensor([[3.0, 2.0]])).data
        np.testing.assert_allclose(out, [[2 / np.sqrt(4 + 1e-5), 0.0]])
        np.testing.assert_array_equal(bn.running_mean, [1.0, 2.0])

    def test_override_mutates_nothing(self):
        bn = BNLayer.fresh(2, 0.1, 1e-5, "bn")
        before = bn.state()
        s = BNState(np.array([2.0, 1.0]), np.array([0.5, 0.0]), np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        out = bn.forward(Tensor([[2.0, 0.0], [0.0, 1.0]]), override=s).data
        np.testing.assert_allclose(out[0], [2.0 / np.sqrt(1 + 1e-5) + 0.5, 0.0])
        for a, b in zip(before, bn.state()):
            np.testing.assert_array_equal(a, b)

    def test_train_batch_of_one_rejected(self):
        with pytest.raises(ContractError):
            BNLayer.fresh(2, 0.1, 1e-5, "bn").forward(Tensor([[1.0, 2.0]]))

    def test_bias_before_bn_has_zero_gradient(self, tiny_net, x):
        net = tiny_net.copy().train()
        T.sum_(net(x) ** 2).backward()
        for name in net.bn_cancelled():
            assert np.abs(net.parameters()[name].grad).max() < 1e-12


class TestForward:
    def test_logit_shape(self, tiny_net, x):
        assert tiny_net.eval()(x).shape == (10, 3)

    def test_input_shape_checked(self, tiny_net):
        with pytest.raises(ShapeError):
            tiny_net(np.zeros((2, 4)))

    def test_mask_equals_zeroed_weights(self, tiny_net, x):
        rng = np.random.default_rng(0)
        params = tiny_net.parameters()
        mask = {n: rng.random(params[n].shape) < 0.5 for n in tiny_net.prunable}
        net = tiny_net.copy().eval()
        with no_grad():
            masked = net(x, mask).data
        for n, m in mask.items():
            net.parameters()[n].data = np.where(m, net.parameters()[n].data, 0.0)
        with no_grad():
            np.testing.assert_array_equal(masked, net(x).data)

    def test_mask_must_cover_prunable_set(self, tiny_net, x):
        with pytest.raises(ContractError):
            tiny_net(x, {"fc0.weight": np.ones((5, 7), dtype=bool)})

    def test_bn_source_ignores_live_state(self, tiny_net, x):
        net = tiny_net.copy()
        stored = net.bn_state()
        with no_grad():
            ref = net.eval()(x).data
            net.train()(x)  # moves live running stats
            out = net(x, bn_source=stored).data
        np.testing.assert_allclose(out, ref, rtol=1e-14)

    def test_trace_and_first_bn_input(self, tiny_net, x):
        trace = {}
        tiny_net.eval()(x, trace=trace)
        assert "fc0.pre_bn" in trace and "classifier.out" in trace
        np.testing.assert_array_equal(tiny_net.first_bn_input(x).data, trace["fc0.pre_bn"].data)

    def test_state_dict_roundtrip(self, tiny_net, tiny_arch, x):
        tiny_net.train()(x)
        other = init_network(tiny_arch, 99)
        other.load_state_dict(tiny_net.state_dict())
        with no_grad():
            np.testing.assert_array_equal(other.eval()(x).data, tiny_net.eval()(x).data)

    def test_state_dict_keys_checked(self, tiny_net):
        state = tiny_net.state_dict()
        state.pop("fc0.bias")
        with pytest.raises(ShapeError):
            tiny_net.load_state_dict(state)
