import numpy as np
from django.test import SimpleTestCase

from tripletshot_lib.autodiff import (
    BatchNormState,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm,
    concat_rows,
    conv2d,
    flatten,
    fully_connected,
    grad_check,
    maxpool2d_ceil,
    mean,
    mul,
    no_tape,
    relu,
    reshape,
    sigmoid_bce_with_logits,
    square,
    sub,
    tsum,
)
from tripletshot_lib.exceptions import ContractError, DegenerateBatchError, NumericError, ShapeError
from tripletshot_lib.losses import (
    EmbeddedTriplets,
    LossConfig,
    SiameseHead,
    embedding_regularizer,
    siamese_pair_loss,
    total_loss,
    triplet_loss,
)
from tripletshot_lib.network import build_network, embed, he_init
from tripletshot_project.testing import tiny_arch

TOLERANCE = 1e-5


def leaf(rng, *shape, name=None, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name, dtype=np.float64)


class PrimitiveTests(SimpleTestCase):
    def test_backward_of_a_product(self):
        a = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        with Tape() as tape:
            loss = tsum(mul(a, b))
        backward(loss, tape)
        np.testing.assert_array_equal(a.grad, [3.0, 4.0])
        np.testing.assert_array_equal(b.grad, [2.0, -1.0])

    def test_gradients_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = tsum(square(x))
        backward(loss, tape)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_tape():
                tsum(square(x))
        self.assertEqual(len(tape), 0)
        constant = Tensor(np.ones(3))
        with Tape() as tape:
            tsum(square(constant))
        self.assertEqual(len(tape), 0)

    def test_relu_subgradient_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = tsum(relu(x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_conv2d_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_ceil_pooling_keeps_the_edge(self):
        x = Tensor(np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3), requires_grad=True)
        with Tape() as tape:
            out = maxpool2d_ceil(x)
            loss = tsum(out)
        np.testing.assert_array_equal(out.data[0, 0], [[4, 5], [7, 8]])
        backward(loss, tape)
        expected = np.zeros((3, 3))
        expected[1, 1] = expected[1, 2] = expected[2, 1] = expected[2, 2] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_pooling_ties_go_to_the_first_maximum(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(maxpool2d_ceil(x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_batchnorm_running_statistics(self):
        x = Tensor(np.array([[1.0], [3.0]]))
        state = BatchNormState.for_channels(1, dtype=np.float64)
        out = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, mode='train')
        np.testing.assert_allclose(out.data[:, 0], [-1.0, 1.0], atol=1e-5)
        self.assertAlmostEqual(state.running_mean[0], 0.2)
        # unbiased variance of (1, 3) is 2
        self.assertAlmostEqual(state.running_var[0], 0.9 + 0.1 * 2.0)

    def test_batchnorm_needs_two_in_train_mode(self):
        state = BatchNormState.for_channels(2)
        with self.assertRaises(DegenerateBatchError):
            batchnorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode='train')
        out = batchnorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode='eval')
        self.assertEqual(out.shape, (1, 2))

    def test_non_finite_output(self):
        with self.assertRaises(NumericError):
            add(Tensor(np.array([np.inf])), 1.0)

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))), Tensor(np.zeros(3)))
        with self.assertRaises(ShapeError):
            fully_connected(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.zeros(5)))
        with self.assertRaises(ContractError):
            backward(Tensor(np.ones(2)), Tape())

    def test_float32_is_kept(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        self.assertEqual(square(x).dtype, np.float32)
        self.assertEqual(Tensor([1.0, 2.0]).dtype, np.float32)


class GradientCheckTests(SimpleTestCase):
    """Finite-difference checks in float64 for each primitive and a few compositions."""

    def setUp(self):
        self.rng = np.random.default_rng(20)

    def check(self, build, params, tolerance=TOLERANCE):
        self.assertLess(grad_check(build, params), tolerance)

    def test_broadcast_add(self):
        a, b = leaf(self.rng, 3, 4), leaf(self.rng, 4)
        self.check(lambda: tsum(square(add(a, b))), [a, b])

    def test_sub_and_mul(self):
        a, b = leaf(self.rng, 5), leaf(self.rng, 5)
        self.check(lambda: tsum(sub(mul(a, b), square(a))), [a, b])

    def test_mean_over_axis_sum(self):
        a = leaf(self.rng, 3, 4)
        self.check(lambda: mean(square(tsum(a, axis=1))), [a])

    def test_reshape_and_flatten(self):
        a = leaf(self.rng, 2, 3, 2)
        w = Tensor(self.rng.normal(size=(2, 6)))
        self.check(lambda: tsum(mul(flatten(a), w)) + tsum(square(reshape(a, (3, 4)))), [a])

    def test_slices_and_concat(self):
        a = leaf(self.rng, 4, 3)
        self.check(lambda: tsum(square(concat_rows([a[2:4], a[0:1]]))) + tsum(mul(a[1], a[2])), [a])

    def test_relu_away_from_the_kink(self):
        a = Tensor(np.array([-1.5, -0.3, 0.4, 2.0]), requires_grad=True, dtype=np.float64)
        self.check(lambda: tsum(square(relu(a))), [a])

    def test_sigmoid_cross_entropy(self):
        z = leaf(self.rng, 6, scale=3.0)
        targets = np.array([1, 0, 1, 1, 0, 0])
        self.check(lambda: mean(sigmoid_bce_with_logits(z, targets)), [z])

    def test_conv2d(self):
        x, w, b = leaf(self.rng, 2, 2, 5, 4), leaf(self.rng, 3, 2, 3, 3), leaf(self.rng, 3)
        weights = Tensor(self.rng.normal(size=(2, 3, 5, 4)))
        self.check(lambda: tsum(mul(conv2d(x, w, b), weights)), [x, w, b])

    def test_maxpool_odd_extent(self):
        x = leaf(self.rng, 2, 2, 5, 3)
        weights = Tensor(self.rng.normal(size=(2, 2, 3, 2)))
        self.check(lambda: tsum(mul(maxpool2d_ceil(x), weights)), [x])

    def test_batchnorm_train(self):
        x, gamma, beta = leaf(self.rng, 4, 3, 2, 2), leaf(self.rng, 3), leaf(self.rng, 3)
        weights = Tensor(self.rng.normal(size=(4, 3, 2, 2)))
        state = BatchNormState.for_channels(3, dtype=np.float64)
        self.check(lambda: tsum(mul(batchnorm(x, gamma, beta, state, mode='train'), weights)), [x, gamma, beta])

    def test_batchnorm_eval(self):
        x, gamma, beta = leaf(self.rng, 3, 2), leaf(self.rng, 2), leaf(self.rng, 2)
        state = BatchNormState(np.array([0.3, -0.2]), np.array([1.5, 0.7]))
        weights = Tensor(self.rng.normal(size=(3, 2)))
        self.check(lambda: tsum(mul(batchnorm(x, gamma, beta, state, mode='eval'), weights)), [x, gamma, beta])

    def test_fully_connected(self):
        x, w, b = leaf(self.rng, 3, 4), leaf(self.rng, 4, 2), leaf(self.rng, 2)
        self.check(lambda: tsum(square(fully_connected(x, w, b))), [x, w, b])

    def test_conv_bn_relu_pool_fc(self):
        config = LossConfig(margin=2.0, lambda_reg=1e-3)
        for seed in range(20):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(100 + seed)
                x = Tensor(rng.normal(size=(6, 1, 5, 5)), dtype=np.float64)
                w, bias = leaf(rng, 2, 1, 3, 3, name='w'), leaf(rng, 2, name='bias')
                gamma, beta = leaf(rng, 2, name='gamma'), leaf(rng, 2, name='beta')
                fc_w, fc_b = leaf(rng, 18, 3, name='fc_w', scale=0.5), leaf(rng, 3, name='fc_b')
                state = BatchNormState.for_channels(2, dtype=np.float64)

                def build():
                    h = relu(batchnorm(conv2d(x, w, bias), gamma, beta, state, mode='train'))
                    emb = relu(fully_connected(flatten(maxpool2d_ceil(h)), fc_w, fc_b))
                    return total_loss(EmbeddedTriplets.from_stacked(emb, 2), config)

                # the batch mean cancels the conv bias, leaving only rounding in its gradient
                self.check(build, [w, gamma, beta, fc_w, fc_b])

    def test_triplet_loss(self):
        p1, p2, n = leaf(self.rng, 4, 3), leaf(self.rng, 4, 3), leaf(self.rng, 4, 3)
        self.check(lambda: mean(triplet_loss(p1, p2, n, margin=2.0)), [p1, p2, n])

    def test_regularized_total(self):
        p1, p2, n = leaf(self.rng, 3, 5), leaf(self.rng, 3, 5), leaf(self.rng, 3, 5)
        config = LossConfig(margin=2.0, lambda_reg=0.1)
        self.check(lambda: total_loss(EmbeddedTriplets(p1, p2, n), config), [p1, p2, n])

    def test_regularizer_alone(self):
        p1, p2, n = leaf(self.rng, 2, 3), leaf(self.rng, 2, 3), leaf(self.rng, 2, 3)
        self.check(lambda: embedding_regularizer(EmbeddedTriplets(p1, p2, n)), [p1, p2, n])

    def test_triplets_from_list(self):
        rows = [(leaf(self.rng, 3), leaf(self.rng, 3), leaf(self.rng, 3)) for _ in range(2)]
        params = [t for row in rows for t in row]
        self.check(lambda: total_loss(EmbeddedTriplets.from_list(rows), LossConfig()), params)

    def test_siamese_pair_loss(self):
        a, b = leaf(self.rng, 4, 3, scale=0.5), leaf(self.rng, 4, 3, scale=0.5)
        head = SiameseHead.with_values(-0.8, 0.3, dtype=np.float64)
        same = [True, False, True, False]
        self.check(lambda: siamese_pair_loss(a, b, same, head), [a, b, head.weight, head.bias])

    def test_whole_network_triplet_loss(self):
        model = he_init(build_network(tiny_arch(dtype='float64')), seed=3)
        images = Tensor(np.random.default_rng(4).random((6, 1, 8, 8)))
        params = {name: p for name, p in model.parameters.items() if not name.startswith('conv-') or
                  not name.endswith('.bias')}

        def build():
            embeddings = embed(model, images, mode='train')
            return total_loss(EmbeddedTriplets.from_stacked(embeddings, 2), LossConfig())

        self.check(build, params, tolerance=1e-4)

    def test_network_without_batch_norm(self):
        model = he_init(build_network(tiny_arch(dtype='float64', batch_norm=False)), seed=5)
        images = Tensor(np.random.default_rng(6).random((3, 1, 8, 8)))

        def build():
            return total_loss(EmbeddedTriplets.from_stacked(embed(model, images, mode='train'), 1), LossConfig())

        self.check(build, model.parameters, tolerance=1e-4)
