"""
Tests for the reverse-mode matrix kernel, graph operations and losses
"""
import math
import os
import struct
import tempfile

import numpy as np
from django.test import SimpleTestCase, override_settings

from promsec_app.neural_kernel import (
    CHECKPOINT_MAGIC, CorruptCheckpoint, EmptyGraph, GraphBatch, Mat, NeuralError, NonFiniteGradient,
    ShapeMismatch, TrainConfig, VersionMismatch, ZeroVector, add, adv_loss, concat_rows, contrastive_loss,
    cosine, disc_loss, grad_check, graph_conv, load_params, matmul, mean_pool, mixture, mul, row,
    save_params, sgd_step, softmax_rows, total, undirected_neighbors,
)


class MatTest(SimpleTestCase):
    """Test matrix construction and elementwise gradients"""

    def test_scalars_and_vectors_become_2d(self):
        """Test that 0-d and 1-d inputs are promoted to rows"""
        self.assertEqual(Mat(3.0).shape, (1, 1))
        self.assertEqual(Mat([1.0, 2.0, 3.0]).shape, (1, 3))
        with self.assertRaises(ShapeMismatch):
            Mat(np.zeros((2, 2, 2)))

    def test_item_needs_scalar(self):
        """Test that item() is only defined on 1x1 matrices"""
        self.assertEqual(Mat(2.5).item(), 2.5)
        with self.assertRaises(ShapeMismatch):
            Mat([1.0, 2.0]).item()

    def test_matmul_gradient(self):
        """Test the gradient of sum(A @ B) with respect to both factors"""
        a = Mat.param([[1.0, 2.0], [3.0, 4.0]])
        b = Mat.param([[1.0], [1.0]])
        total(matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, [[1.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(b.grad, [[4.0], [6.0]])

    def test_shape_errors(self):
        """Test that incompatible shapes raise ShapeMismatch"""
        with self.assertRaises(ShapeMismatch):
            matmul(Mat([[1.0, 2.0]]), Mat([[1.0, 2.0]]))
        with self.assertRaises(ShapeMismatch):
            add(Mat([[1.0, 2.0]]), Mat([[1.0, 2.0, 3.0]]))
        with self.assertRaises(ShapeMismatch):
            mul(Mat([[1.0]]), Mat([[1.0, 2.0]]))
        with self.assertRaises(ShapeMismatch):
            concat_rows([Mat([[1.0]]), Mat([[1.0, 2.0]])])
        with self.assertRaises(ShapeMismatch):
            Mat.param([[1.0, 2.0]]).backward()

    def test_row_broadcast_add(self):
        """Test that a bias row is broadcast and its gradient summed over rows"""
        a = Mat.const([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        bias = Mat.param([[0.5, -0.5]])
        total(add(a, bias)).backward()
        np.testing.assert_allclose(bias.grad, [[3.0, 3.0]])

    def test_softmax_rows_sum_to_one(self):
        """Test that softmax rows are a distribution even for large inputs"""
        out = softmax_rows(Mat([[1000.0, 1000.0], [0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.values.sum(axis=1), [1.0, 1.0])
        np.testing.assert_allclose(out.values[1], [0.25, 0.75])

    def test_mixture(self):
        """Test that mixture picks per-row combinations of the bases"""
        weights = Mat.param([[1.0, 0.0], [0.25, 0.75]])
        bases = np.array([[[1.0], [2.0]], [[10.0], [20.0]]])
        out = mixture(weights, bases)
        np.testing.assert_allclose(out.values, [[1.0], [15.5]])
        with self.assertRaises(ShapeMismatch):
            mixture(weights, np.zeros((3, 2, 1)))


class GraphOpsTest(SimpleTestCase):
    """Test batched graph convolution and pooling"""

    def setUp(self):
        """Set up a batch of a 2-node and a 3-node graph"""
        self.batch = GraphBatch.from_arrays(
            [np.eye(2, 3), np.ones((3, 3))],
            [undirected_neighbors(2, [(0, 1)]), undirected_neighbors(3, [(0, 1), (1, 2), (2, 2)])],
        )

    def test_undirected_neighbors(self):
        """Test that neighbor lists are symmetric without self loops"""
        self.assertEqual(undirected_neighbors(3, [(0, 1), (1, 2), (2, 2), (1, 0)]), [[1], [0, 2], [1]])

    def test_batch_offsets(self):
        """Test that local neighbor indices are shifted by the graph offset"""
        self.assertEqual(self.batch.boundaries, [(0, 2), (2, 5)])
        self.assertEqual(self.batch.neighbors[3], [2, 4])
        self.assertEqual(len(self.batch), 2)

    def test_neighbor_outside_graph(self):
        """Test that edges crossing graph boundaries are rejected"""
        with self.assertRaises(ShapeMismatch):
            GraphBatch(Mat.const(np.zeros((3, 1))), [[2], [], [0]], [(0, 2), (2, 3)])
        with self.assertRaises(ShapeMismatch):
            GraphBatch(Mat.const(np.zeros((3, 1))), [[], [], []], [(0, 2)])

    def test_graph_conv_linear(self):
        """Test h W_self + A h W_neigh on a two node graph"""
        batch = GraphBatch.from_arrays([np.array([[1.0], [2.0]])], [[[1], [0]]])
        out = graph_conv(Mat.param([[1.0]]), Mat.param([[10.0]]), batch, activation='linear')
        np.testing.assert_allclose(out.values, [[21.0], [12.0]])
        with self.assertRaises(NeuralError):
            graph_conv(Mat.param([[1.0]]), Mat.param([[1.0]]), batch, activation='tanh')
        with self.assertRaises(ShapeMismatch):
            graph_conv(Mat.param([[1.0, 2.0]]), Mat.param([[1.0]]), batch)

    def test_mean_pool(self):
        """Test one pooled row per graph"""
        pooled = mean_pool(self.batch.features, self.batch.boundaries)
        np.testing.assert_allclose(pooled.values, [[0.5, 0.5, 0.0], [1.0, 1.0, 1.0]])
        with self.assertRaises(EmptyGraph):
            mean_pool(Mat.const(np.zeros((1, 2))), [(0, 1), (1, 1)])

    def test_cosine(self):
        """Test cosine similarity values and the zero-vector error"""
        self.assertAlmostEqual(cosine(Mat([1.0, 0.0]), Mat([2.0, 0.0])).item(), 1.0)
        self.assertAlmostEqual(cosine(Mat([1.0, 0.0]), Mat([0.0, 3.0])).item(), 0.0)
        self.assertAlmostEqual(cosine(Mat([1.0, 1.0]), Mat([-1.0, -1.0])).item(), -1.0)
        with self.assertRaises(ZeroVector):
            cosine(Mat([0.0, 0.0]), Mat([1.0, 0.0]))
        with self.assertRaises(ShapeMismatch):
            cosine(Mat([1.0, 0.0]), Mat([1.0, 0.0, 0.0]))

    def test_gradients_match_finite_differences(self):
        """Test reverse-mode gradients through conv, pooling and cosine"""
        rng = np.random.default_rng(3)
        w_self = Mat.param(rng.normal(size=(3, 4)))
        w_neigh = Mat.param(rng.normal(size=(3, 4)))
        batch = self.batch.with_features(Mat.const(rng.normal(size=(5, 3))))

        def loss():
            h = graph_conv(w_self, w_neigh, batch, activation='sigmoid')
            pooled = mean_pool(h, batch.boundaries)
            return add(total(mul(h, h)), cosine(row(pooled, 0), row(pooled, 1)))

        self.assertLess(grad_check(loss, [w_self, w_neigh], eps=1e-5), 1e-4)

    def test_grad_check_eps_range(self):
        """Test that grad_check only accepts perturbations in [1e-7, 1e-3]"""
        p = Mat.param([[1.0]])
        with self.assertRaises(NeuralError):
            grad_check(lambda: total(p), [p], eps=1e-2)


class LossTest(SimpleTestCase):
    """Test the adversarial and contrastive losses"""

    def test_contrastive_value(self):
        """Test the loss for one positive at 1 and two negatives at -1"""
        loss = contrastive_loss(Mat(1.0), [Mat(-1.0), Mat(-1.0)])
        self.assertAlmostEqual(loss.item(), math.log(1 + 2 * math.exp(-2)), places=12)

    def test_contrastive_negative_sign(self):
        """Test the exp(-s) variant on the same scores"""
        loss = contrastive_loss(Mat(1.0), [Mat(-1.0), Mat(-1.0)], sign=-1.0)
        self.assertAlmostEqual(loss.item(), math.log(1 + 2 * math.exp(2)), places=10)

    def test_contrastive_is_stable(self):
        """Test that large scores do not overflow"""
        loss = contrastive_loss(Mat(1000.0), [Mat(999.0)])
        self.assertAlmostEqual(loss.item(), math.log(1 + math.exp(-1)), places=10)

    def test_contrastive_gradient(self):
        """Test that the positive score gradient is p_pos - 1"""
        pos, neg = Mat.param(0.0), Mat.param(0.0)
        contrastive_loss(pos, [neg]).backward()
        self.assertAlmostEqual(pos.grad[0, 0], -0.5)
        self.assertAlmostEqual(neg.grad[0, 0], 0.5)

    def test_adversarial_losses(self):
        """Test generator and discriminator losses at d = 0.5"""
        self.assertAlmostEqual(adv_loss(Mat([[0.5], [0.5]])).item(), math.log(2))
        self.assertAlmostEqual(disc_loss(Mat(0.5), Mat(0.5)).item(), 2 * math.log(2))

    def test_log_is_clamped(self):
        """Test that a zero probability gives a finite loss and zero gradient"""
        d = Mat.param(0.0)
        loss = adv_loss(d)
        self.assertAlmostEqual(loss.item(), -math.log(1e-7))
        loss.backward()
        self.assertEqual(d.grad[0, 0], 0.0)


class TrainingStepTest(SimpleTestCase):
    """Test SGD updates, checkpoints and training configuration"""

    def test_sgd_step(self):
        """Test that parameters move against the gradient and gradients are reset"""
        p = Mat.param([[1.0, 2.0]])
        total(mul(p, p)).backward()
        sgd_step([p], 0.25)
        np.testing.assert_allclose(p.values, [[0.5, 1.0]])
        np.testing.assert_allclose(p.grad, [[0.0, 0.0]])

    def test_non_finite_gradient(self):
        """Test that a NaN gradient stops the update before any parameter moves"""
        good, bad = Mat.param([[1.0]]), Mat.param([[1.0]])
        good.grad = np.array([[1.0]])
        bad.grad = np.array([[np.nan]])
        with self.assertRaises(NonFiniteGradient):
            sgd_step([good, bad], 0.1)
        np.testing.assert_allclose(good.values, [[1.0]])

    def test_checkpoint_round_trip(self):
        """Test that saved parameters load back bit-exact"""
        params = [Mat.param(np.arange(6.0).reshape(2, 3) / 7.0), Mat.param([[math.pi]])]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.bin')
            save_params(path, params)
            loaded = load_params(path)
        self.assertEqual(len(loaded), 2)
        for a, b in zip(params, loaded):
            self.assertTrue(np.array_equal(a.values, b.values))
            self.assertTrue(b.requires_grad)

    def test_checkpoint_errors(self):
        """Test truncated, foreign, trailing and future-version files"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.bin')
            save_params(path, [Mat.param([[1.0, 2.0]])])
            with open(path, 'rb') as fh:
                blob = fh.read()
            cases = [
                (blob[:-4], CorruptCheckpoint),
                (blob[:5], CorruptCheckpoint),
                (b'NOPE' + blob[4:], CorruptCheckpoint),
                (blob + b'\x00', CorruptCheckpoint),
                (struct.pack('<4sHI', CHECKPOINT_MAGIC, 99, 0), VersionMismatch),
            ]
            for data, error in cases:
                with open(path, 'wb') as fh:
                    fh.write(data)
                with self.assertRaises(error):
                    load_params(path)

    def test_train_config_validation(self):
        """Test that invalid hyperparameters are rejected"""
        for bad in ({'batch_size': 1}, {'epochs': -1}, {'learning_rate': 0}, {'loss_mix': -0.1},
                    {'hidden_dim': 0}, {'contrastive_sign': 0.5}):
            with self.assertRaises(NeuralError):
                TrainConfig(**bad)

    def test_train_config_dict(self):
        """Test that unknown keys are ignored when rebuilding a config"""
        cfg = TrainConfig(epochs=3, batch_size=4)
        data = dict(cfg.to_dict(), note='ignored')
        self.assertEqual(TrainConfig.from_dict(data), cfg)

    @override_settings(PROMSEC_TRAIN_EPOCHS=5)
    def test_train_config_from_settings(self):
        """Test that settings supply defaults and explicit overrides win"""
        cfg = TrainConfig.from_settings(batch_size=4, learning_rate=None)
        self.assertEqual(cfg.epochs, 5)
        self.assertEqual(cfg.batch_size, 4)
        self.assertEqual(cfg.hidden_dim, 64)
