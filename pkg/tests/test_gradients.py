"""Every analytic gradient checked against central finite differences.

All checks run in float64. Inputs are nudged away from the relu and relu6
kinks (and sigmoid saturation is harmless) so the two-sided difference
measures the same branch the analytic derivative took. Tolerance is a max
relative error of 1e-4 with a 1e-8 denominator floor.
"""

import numpy as np
import pytest

import cropstress.tensor as T
from cropstress.tensor import Tensor

from _oracles import central_diff, rel_err

TOL = 1e-4
KINK_GAP = 0.02


def _away_from_kinks(rng, shape, kinks=(0.0,)):
    """Uniform values in [-3, 3] at least KINK_GAP from every kink."""
    x = rng.uniform(-3.0, 3.0, size=shape)
    for k in kinks:
        near = np.abs(x - k) < KINK_GAP
        x[near] = k + KINK_GAP * np.where(x[near] >= k, 1.0, -1.0) * 2.0
    return x


def _check(loss_builder, tensors):
    """Compare .backward() grads on ``tensors`` against finite differences.

    loss_builder() must rebuild the graph from the tensors' current .data
    and return the scalar loss Tensor.
    """
    for t in tensors:
        t.zero_grad()
    loss_builder().backward()
    numeric = central_diff(lambda: float(loss_builder().data), [t.data for t in tensors])
    for t, ref in zip(tensors, numeric):
        assert t.grad is not None
        err = rel_err(t.grad, ref)
        assert err < TOL, f"gradient mismatch: rel err {err:.3e}"


def _seeds(n, base):
    return [base * 1000 + i for i in range(n)]


class TestElementwiseGradients:
    @pytest.mark.parametrize("seed", _seeds(15, 1))
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(_away_from_kinks(rng, (2, 3)), requires_grad=True)
        _check(lambda: T.relu(x).sum(), [x])

    @pytest.mark.parametrize("seed", _seeds(15, 2))
    def test_relu6(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.uniform(-3.0, 9.0, size=(2, 4))
        for k in (0.0, 6.0):
            near = np.abs(v - k) < KINK_GAP
            v[near] = k + 2 * KINK_GAP
        x = Tensor(v, requires_grad=True)
        _check(lambda: T.relu6(x).sum(), [x])

    @pytest.mark.parametrize("seed", _seeds(10, 3))
    def test_sigmoid(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-4.0, 4.0, size=(3, 2)), requires_grad=True)
        # square the output so the sigmoid grad is probed with a non-uniform
        # upstream signal
        _check(lambda: (T.sigmoid(x) * T.sigmoid(x)).sum(), [x])

    @pytest.mark.parametrize("seed", _seeds(10, 4))
    def test_mul_and_sub(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.uniform(-2, 2, size=(2, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(2, 3)), requires_grad=True)
        _check(lambda: (T.sub(a * b, b)).mean(), [a, b])


class TestConvGradients:
    @pytest.mark.parametrize("seed", _seeds(8, 5))
    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_conv2d_both_sides(self, seed, stride, padding):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(2, 5, 4, 2)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(3, 3, 2, 3)), requires_grad=True)
        _check(lambda: (T.conv2d(x, k, stride=stride, padding=padding) * T.conv2d(x, k, stride=stride, padding=padding)).sum(), [x, k])

    @pytest.mark.parametrize("seed", _seeds(8, 6))
    @pytest.mark.parametrize("stride", [1, 2])
    def test_depthwise_both_sides(self, seed, stride):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(2, 5, 5, 3)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(3, 3, 3)), requires_grad=True)
        _check(lambda: (T.depthwise_conv2d(x, k, stride=stride) * T.depthwise_conv2d(x, k, stride=stride)).sum(), [x, k])

    @pytest.mark.parametrize("seed", _seeds(6, 7))
    def test_conv_input_only(self, seed):
        # frozen kernel: only x requires grad, kernel branch must be skipped
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(1, 4, 4, 2)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(3, 3, 2, 2)))
        _check(lambda: T.conv2d(x, k).sum(), [x])
        assert k.grad is None


class TestNormalizationGradients:
    @pytest.mark.parametrize("seed", _seeds(10, 8))
    def test_batch_norm_train_mode(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-2, 2, size=(3, 2, 2, 2)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = Tensor(rng.uniform(-0.5, 0.5, size=2), requires_grad=True)

        def build():
            rm = Tensor(np.zeros(2))
            rv = Tensor(np.ones(2))
            out = T.batch_norm(x, gamma, beta, rm, rv, mode="train")
            return (out * out).sum()

        _check(build, [x, gamma, beta])

    @pytest.mark.parametrize("seed", _seeds(6, 9))
    def test_batch_norm_infer_mode(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-2, 2, size=(2, 2, 2, 3)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = Tensor(rng.uniform(-0.5, 0.5, size=3), requires_grad=True)
        rm = Tensor(rng.uniform(-0.3, 0.3, size=3))
        rv = Tensor(rng.uniform(0.5, 1.5, size=3))

        def build():
            out = T.batch_norm(x, gamma, beta, rm, rv, mode="infer", num_updates=3)
            return (out * out).sum()

        _check(build, [x, gamma, beta])


class TestPoolDenseGradients:
    @pytest.mark.parametrize("seed", _seeds(6, 10))
    def test_avg_pool(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(2, 5, 4, 2)), requires_grad=True)
        _check(lambda: (T.avg_pool_2x2(x) * T.avg_pool_2x2(x)).sum(), [x])

    @pytest.mark.parametrize("seed", _seeds(6, 11))
    def test_global_avg_pool(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(3, 4, 4, 2)), requires_grad=True)
        _check(lambda: (T.global_avg_pool(x) * T.global_avg_pool(x)).sum(), [x])

    @pytest.mark.parametrize("seed", _seeds(8, 12))
    def test_dense(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(4, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, size=(5, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)
        _check(lambda: (T.dense(x, w, b) * T.dense(x, w, b)).sum(), [x, w, b])

    @pytest.mark.parametrize("seed", _seeds(6, 13))
    def test_concat_slice(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 2)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)), requires_grad=True)

        def build():
            cat = T.concat_channels(a, b)
            mid = T.slice_channels(cat, 1, 4)  # straddles the seam
            return (mid * mid).sum()

        _check(build, [a, b])


class TestCompositeGradients:
    @pytest.mark.parametrize("seed", _seeds(5, 14))
    def test_conv_bn_relu_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(2, 6, 6, 2)), requires_grad=True)
        k = Tensor(rng.uniform(-0.5, 0.5, size=(3, 3, 2, 3)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.8, 1.2, size=3), requires_grad=True)
        beta = Tensor(rng.uniform(-0.2, 0.2, size=3), requires_grad=True)

        def build():
            rm = Tensor(np.zeros(3))
            rv = Tensor(np.ones(3))
            h = T.conv2d(x, k, stride=2, padding="same")
            h = T.batch_norm(h, gamma, beta, rm, rv, mode="train")
            # sigmoid instead of relu keeps the composite free of kinks that
            # batch-norm output could land on
            h = T.sigmoid(h)
            return (h * h).sum()

        _check(build, [x, k, gamma, beta])

    def test_full_tiny_model(self):
        """End-to-end finite differences through a whole model.

        Every bottleneck runs at stride 1 so an 8x8 input survives to the
        pooling stages, and all nonlinearities are probed away from kinks
        by keeping the input scale moderate. Checks the loss gradient of
        every trainable parameter.
        """
        from cropstress.model import ArchitectureConfig, build_model
        from cropstress.train import bce_loss

        config = ArchitectureConfig(
            input_size=(8, 8),
            stem_filters=2,
            bottlenecks=[(2, 1, 1), (2, 6, 1), (2, 6, 1), (2, 6, 1)],
            dense_layers=2,
            growth_rate=2,
            transition_reduction=0.5,
            post_bottlenecks=[(2, 6, 1)],
            head_units=2,
        )
        model = build_model(config, seed=404, dtype=np.float64)
        rng = np.random.default_rng(405)
        x = rng.uniform(0.05, 0.95, size=(2, 8, 8, 3))
        y = np.array([1.0, 0.0])

        def build():
            pred = model.forward(Tensor(x), mode="train")
            return bce_loss(pred, y)

        params = model.store.trainable_items()
        model.store.zero_grad()
        build().backward()
        analytic = {name: t.grad.copy() for name, t in params}
        for name, t in params:
            assert analytic[name] is not None, name

        numeric = central_diff(lambda: float(build().data), [t.data for _, t in params])
        worst = 0.0
        for (name, _), ref in zip(params, numeric):
            # Denominator floor 1e-5, not the per-op 1e-8: some betas here have
            # an exactly-zero loss derivative (a constant channel shift ahead
            # of a 1x1 conv is annihilated by the next normalization), where
            # central differences only deliver machine noise around 1e-11.
            err = float(np.max(np.abs(analytic[name] - ref) / (np.abs(ref) + 1e-5)))
            worst = max(worst, err)
            assert err < TOL, f"{name}: rel err {err:.3e}"
        assert worst < TOL
