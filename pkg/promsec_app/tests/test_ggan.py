"""
Tests for the graph GAN generator, discriminator and training loop
"""
import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from promsec_app.code_graphs import AST, CFG, INSERT_AFTER, KEEP, RELABEL, EditAction, edit_graph, graph_from_source
from promsec_app.corpus import CorpusSpec, generate_corpus
from promsec_app.fix_templates import TemplateBank
from promsec_app.ggan import (
    MASKED, GganError, GganModel, ScorePair, _batches, delta_k, discriminate, embed, generate, load, save,
    similarity, train, train_config_from_checkpoint,
)
from promsec_app.neural_kernel import CorruptCheckpoint, Mat, TrainConfig, VersionMismatch
from promsec_app.security_analyzer import Analyzer, AnalyzerConfig

from .fixtures import HARDCODED_SECRETS, corpus_graphs, desk_scale_training


def node_named(g, name):
    return next(n.id for n in g.nodes if n.name == name)


class GeneratorTest(SimpleTestCase):
    """Test action proposals from an untrained model"""

    def setUp(self):
        """Set up a small model and the CFG of a program with hardcoded secrets"""
        self.model = GganModel(hidden_dim=16, seed=3)
        self.g = graph_from_source(HARDCODED_SECRETS, CFG, unit_id='secrets')

    def test_action_vocabulary(self):
        """Test that actions are KEEP, DELETE, then one per template"""
        ops = [a.op for a in self.model.actions]
        self.assertEqual(ops[:2], [KEEP, 'DELETE'])
        self.assertEqual(len(ops), 2 + len(self.model.bank))
        self.assertEqual(ops.count(INSERT_AFTER), 2)

    def test_prior_masks_inadmissible_actions(self):
        """Test that only KEEP is open on non-statements and matching templates get the template prior"""
        prior = self.model.action_prior(self.g)
        entry = next(n.id for n in self.g.nodes if n.kind == 'Entry')
        self.assertEqual(prior[entry, 0], GganModel.PRIOR_KEEP)
        self.assertTrue(np.all(prior[entry, 1:] == MASKED))
        password = node_named(self.g, 'Assign:password')
        columns = {str(a): i for i, a in enumerate(self.model.actions)}
        self.assertEqual(prior[password, columns['RELABEL(env-password)']], GganModel.PRIOR_TEMPLATE)
        self.assertEqual(prior[password, columns['DELETE']], 0.0)
        self.assertEqual(prior[password, columns['INSERT_AFTER(sanitize-input)']], MASKED)

    def test_untrained_model_prefers_template_fixes(self):
        """Test that the prior alone drives an untrained generator to the matching fix"""
        plan, g_hat = generate(self.model, self.g)
        password = node_named(self.g, 'Assign:password')
        self.assertIn(password, plan.realized)
        action = plan.realized[password]
        self.assertEqual((action.op, action.template, action.target), (RELABEL, 'env-password', 'Assign:getenv'))
        self.assertIn('Assign:getenv', g_hat.label_histogram())
        self.assertFalse(plan.is_identity())
        np.testing.assert_allclose(plan.probs.values.sum(axis=1), np.ones(len(self.g.nodes)))

    def test_generated_fix_lowers_findings(self):
        """Test that the decoded edits remove weaknesses once reconstructed"""
        _, g_hat = generate(self.model, self.g)
        self.assertGreater(delta_k(self.g, g_hat, analyzer=Analyzer(AnalyzerConfig())), 0)

    def test_graph_kind_mismatch(self):
        """Test that a CFG model refuses AST graphs"""
        with self.assertRaises(GganError):
            generate(self.model, graph_from_source(HARDCODED_SECRETS, AST))


class DiscriminatorTest(SimpleTestCase):
    """Test discriminator scores and embeddings"""

    def setUp(self):
        """Set up a small model and one graph"""
        self.model = GganModel(hidden_dim=16, seed=3)
        self.g = graph_from_source(HARDCODED_SECRETS, CFG, unit_id='secrets')

    def test_probability_range(self):
        """Test that the discriminator returns a probability strictly inside (0, 1)"""
        d = discriminate(self.model, self.g)
        self.assertGreater(d, 0.0)
        self.assertLess(d, 1.0)

    def test_self_similarity(self):
        """Test that a graph is maximally similar to itself"""
        self.assertAlmostEqual(similarity(self.model, self.g, self.g).item(), 1.0, places=6)
        self.assertEqual(embed(self.model, self.g).shape, (1, 16))

    def test_zero_embedding_similarity(self):
        """Test that a vanished embedding gives similarity 0"""
        self.assertEqual(similarity(self.model, Mat([0.0, 0.0]), Mat([1.0, 0.0])).item(), 0.0)


class ScoreTest(SimpleTestCase):
    """Test composite scores, batching and the delta-k signal"""

    def test_composite(self):
        """Test alpha * delta_k + beta * S for floats and matrices"""
        self.assertEqual(ScorePair(2, 0.5, alpha=1.0, beta=2.0).composite, 3.0)
        composite = ScorePair(1, Mat.param(0.25), alpha=0.5, beta=4.0).composite
        self.assertAlmostEqual(composite.item(), 1.5)
        self.assertTrue(composite.requires_grad)

    def test_batches_merge_trailing_singleton(self):
        """Test that no batch is left with a single graph"""
        self.assertEqual(_batches(list(range(5)), 2), [[0, 1], [2, 3, 4]])
        self.assertEqual(_batches(list(range(4)), 2), [[0, 1], [2, 3]])

    def test_delta_k(self):
        """Test findings removed by an inserted sanitizer and by an identity edit"""
        bank = TemplateBank.default()
        analyzer = Analyzer(AnalyzerConfig())
        g = graph_from_source('host = input()\nos.system("ping " + host)\n', CFG, unit_id='ping')
        fixed, _ = edit_graph(g, {1: EditAction(INSERT_AFTER, template='sanitize-input')}, bank)
        same, _ = edit_graph(g, {}, bank)
        self.assertEqual(delta_k(g, fixed, analyzer=analyzer, bank=bank), 1)
        self.assertEqual(delta_k(g, same, analyzer=analyzer, bank=bank), 0)


class TrainingTest(SimpleTestCase):
    """Test the alternating training loop and checkpoints"""

    def setUp(self):
        """Set up four generated programs as CFGs"""
        programs = generate_corpus(CorpusSpec(count=4, seed=5))
        self.graphs = [graph_from_source(p.unit.text, CFG, unit_id=p.id) for p in programs]
        self.cfg = TrainConfig(epochs=1, batch_size=2, hidden_dim=8, learning_rate=0.01, seed=5)

    def test_one_epoch(self):
        """Test that a short run reports one finite epoch"""
        model = GganModel.from_config(self.cfg)
        seen = []
        model, history = train(model, self.graphs, self.cfg, analyzer=Analyzer(AnalyzerConfig()),
                               progress=seen.append)
        self.assertEqual(len(history), 1)
        self.assertEqual(seen, history)
        stats = history[0]
        self.assertEqual(stats.epoch, 1)
        self.assertTrue(math.isfinite(stats.loss_g))
        self.assertTrue(math.isfinite(stats.loss_d))
        self.assertTrue(model.is_finite())

    def test_zero_epochs(self):
        """Test that zero epochs leaves the model untouched"""
        model = GganModel.from_config(self.cfg)
        before = model.snapshot()
        _, history = train(model, self.graphs, TrainConfig(epochs=0, batch_size=2, hidden_dim=8))
        self.assertEqual(history, [])
        for a, b in zip(before, model.snapshot()):
            self.assertTrue(np.array_equal(a, b))

    def test_too_few_graphs(self):
        """Test that a corpus smaller than one batch is rejected"""
        cfg = TrainConfig(epochs=1, batch_size=8, hidden_dim=8)
        with self.assertRaises(GganError):
            train(GganModel.from_config(cfg), self.graphs, cfg)

    def test_checkpoint_round_trip(self):
        """Test that a saved model reloads bit-exactly with its training config"""
        model = GganModel.from_config(self.cfg)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'ggan.bin')
            save(model, path, self.cfg)
            loaded = load(path)
            self.assertEqual(train_config_from_checkpoint(path), self.cfg)
        self.assertEqual(loaded.graph_kind, CFG)
        self.assertEqual(loaded.hidden_dim, 8)
        for a, b in zip(model.parameters(), loaded.parameters()):
            self.assertTrue(np.array_equal(a.values, b.values))

    def test_checkpoint_bank_mismatch(self):
        """Test that a checkpoint refuses a template bank with different actions"""
        model = GganModel.from_config(self.cfg)
        bank = TemplateBank.default()
        smaller = TemplateBank([t for t in bank if t.id != 'drop-shell'])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'ggan.bin')
            save(model, path)
            with self.assertRaises(VersionMismatch):
                load(path, bank=smaller)
            self.assertIsNone(train_config_from_checkpoint(path))

    def test_missing_sidecar(self):
        """Test that weights without their sidecar cannot be loaded"""
        model = GganModel.from_config(self.cfg)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'ggan.bin')
            save(model, path)
            os.remove(path + '.json')
            with self.assertRaises(CorruptCheckpoint):
                load(path)


class DeskScaleTrainingTest(SimpleTestCase):
    """Test training with the default configuration on the 50-program corpus"""

    def test_generator_loss_falls(self):
        """Test that the last epoch's generator loss is at most 80% of the first epoch's"""
        _, history = desk_scale_training()
        self.assertEqual([s.epoch for s in history], list(range(1, 31)))
        self.assertTrue(all(math.isfinite(s.loss_g) and math.isfinite(s.loss_d) for s in history))
        self.assertLessEqual(history[-1].loss_g, 0.8 * history[0].loss_g)

    def test_training_is_reproducible(self):
        """Test that two runs with the same seed give identical histories and weights"""
        graphs = corpus_graphs(p.unit for p in generate_corpus(CorpusSpec(count=50, seed=7)))
        cfg = TrainConfig(epochs=2)
        (first, first_history), (second, second_history) = [
            train(GganModel.from_config(cfg), graphs, cfg, analyzer=Analyzer(AnalyzerConfig())) for _ in range(2)
        ]
        self.assertEqual(first_history, second_history)
        for a, b in zip(first.snapshot(), second.snapshot()):
            self.assertTrue(np.array_equal(a, b))
