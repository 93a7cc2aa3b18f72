"""
Tests for AST/CFG/DFG construction, labels and graph edits
"""
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from promsec_app.code_graphs import (
    AST, CFG, CHILD, DEF_USE, DELETE, DFG, FLOW_FALSE, FLOW_TRUE, FLOW_UNCOND, INSERT_AFTER, RELABEL,
    EditAction, GraphEdge, GraphInvariantError, NodeVocab, VocabError, build_ast, build_cfg, build_dfg,
    build_graph, categorize, default_vocab, edit_graph, featurize, graph_from_source, node_label,
    parse_graph_kind, to_dot, unparse,
)
from promsec_app.code_parser import parse_text
from promsec_app.corpus import CorpusSpec, generate_corpus
from promsec_app.fix_templates import TemplateBank

from .fixtures import CANONICAL, HARDCODED_SECRETS, VULNERABLE_LOOKUP


def flow_edges(doc):
    return {(e.src, e.dst, e.kind) for e in doc.edges}


class LabelTest(SimpleTestCase):
    """Test node labelling and the vocabulary"""

    def test_categories(self):
        """Test identifier categories used in statement signatures"""
        self.assertEqual(categorize('system'), 'exec')
        self.assertEqual(categorize('db_password'), 'password')
        self.assertEqual(categorize('api_key'), 'secret')
        self.assertEqual(categorize('md5'), 'weakhash')
        self.assertIsNone(categorize('total'))

    def test_statement_label_uses_highest_priority_category(self):
        """Test that shell outranks exec in a statement signature"""
        tree = parse_text('subprocess.call(cmd, shell=True)\npassword = "x"\n')
        self.assertEqual(node_label(tree, 1), 'ExprStmt:shell')
        assign = tree.nodes[0].children[1]
        self.assertEqual(node_label(tree, assign), 'Assign:password')

    def test_unlabelled_statement(self):
        """Test that statements without security identifiers get the empty signature"""
        tree = parse_text('total = total + 1\n')
        self.assertEqual(node_label(tree, 1), 'Assign:-')

    def test_default_vocab_is_bijective(self):
        """Test that the default vocabulary maps labels and indices both ways"""
        vocab = default_vocab()
        for i, label in enumerate(vocab.labels):
            self.assertEqual(vocab.index(label), i)
            self.assertEqual(vocab.label(i), label)
        self.assertIn('Entry', vocab)
        self.assertIn('Assign:password', vocab)

    def test_duplicate_label_rejected(self):
        """Test that a vocabulary cannot hold a label twice"""
        with self.assertRaises(VocabError):
            NodeVocab(['a', 'b', 'a'])

    def test_unknown_label(self):
        """Test that looking up a missing label raises"""
        with self.assertRaises(VocabError):
            default_vocab().index('NotALabel')

    def test_vocab_save_load(self):
        """Test that a saved vocabulary reloads with the same digest"""
        vocab = default_vocab()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'vocab.txt')
            vocab.save(path)
            self.assertEqual(NodeVocab.load(path).digest(), vocab.digest())

    def test_parse_graph_kind(self):
        """Test that graph kinds are case-insensitive"""
        self.assertEqual(parse_graph_kind('cfg'), CFG)
        with self.assertRaises(ValueError):
            parse_graph_kind('pdg')


class AstGraphTest(SimpleTestCase):
    """Test AST graphs"""

    def test_ids_follow_tree(self):
        """Test that AST node ids equal syntax tree indices"""
        tree = parse_text(VULNERABLE_LOOKUP)
        g = build_ast(tree)
        self.assertEqual(len(g), len(tree.nodes))
        self.assertTrue(all(n.syn_node == n.id for n in g.nodes))
        self.assertTrue(g.validate())

    def test_sibling_edges(self):
        """Test that consecutive children are linked by next-sibling edges"""
        g = build_ast(parse_text('x = 1\ny = 2\n'))
        siblings = [(e.src, e.dst) for e in g.edges if e.kind == 'next-sibling']
        self.assertIn((1, 4), siblings)

    def test_two_roots_invalid(self):
        """Test that a disconnected AST fails validation"""
        g = build_ast(parse_text('x = 1\n'))
        g.edges = [e for e in g.edges if not (e.src == 0 and e.kind == CHILD)]
        with self.assertRaises(GraphInvariantError):
            g.validate()

    def test_unparse_round_trip(self):
        """Test that an unedited AST document unparses to canonical text"""
        g = build_ast(parse_text(CANONICAL))
        self.assertEqual(unparse(g).text, CANONICAL)


class CfgTest(SimpleTestCase):
    """Test control-flow graphs"""

    def test_branch_edges(self):
        """Test that an if/else gets true and false edges that rejoin"""
        g = build_cfg(parse_text('x = input()\nif x:\n    y = 1\nelse:\n    y = 2\nprint(y)\n'))
        # Entry 0, x 1, if 2, y=1 3, y=2 4, print 5, Exit 6
        self.assertEqual([n.kind for n in g.nodes],
                         ['Entry', 'Assign', 'If', 'Assign', 'Assign', 'ExprStmt', 'Exit'])
        self.assertEqual(flow_edges(g), {
            (0, 1, FLOW_UNCOND), (1, 2, FLOW_UNCOND), (2, 3, FLOW_TRUE), (2, 4, FLOW_FALSE),
            (3, 5, FLOW_UNCOND), (4, 5, FLOW_UNCOND), (5, 6, FLOW_UNCOND),
        })
        self.assertTrue(g.validate())

    def test_loop_back_edge(self):
        """Test that a loop body links back to its header"""
        g = build_cfg(parse_text('while n > 0:\n    n = n - 1\n'))
        self.assertEqual(flow_edges(g), {
            (0, 1, FLOW_UNCOND), (1, 2, FLOW_TRUE), (2, 1, FLOW_UNCOND), (1, 3, FLOW_FALSE),
        })

    def test_return_goes_to_exit(self):
        """Test that return jumps to the scope exit"""
        g = build_cfg(parse_text('def f(a):\n    if a:\n        return 1\n    return 2\n'))
        exits = g.exits()
        returns = [n.id for n in g.nodes if n.kind == 'Return']
        for r in returns:
            self.assertIn((r, exits[g.nodes[r].scope], FLOW_UNCOND), flow_edges(g))

    def test_unreachable_statement_hangs_off_entry(self):
        """Test that a statement after an exhaustive return is linked from the scope entry"""
        g = build_cfg(parse_text(
            'def f(a):\n    if a:\n        return 1\n    else:\n        return 2\n    b = 3\n'))
        dead = next(n for n in g.nodes if n.kind == 'Assign')
        entry = g.entries()[dead.scope]
        incoming = {(e.src, e.kind) for e in g.edges if e.dst == dead.id}
        self.assertEqual(incoming, {(entry, FLOW_UNCOND)})
        self.assertTrue(g.validate())

    def test_function_scopes(self):
        """Test that each function gets its own entry and exit"""
        g = build_cfg(parse_text(VULNERABLE_LOOKUP))
        self.assertEqual(len(g.entries()), 2)
        self.assertEqual(len(g.exits()), 2)
        self.assertTrue(g.validate())

    def test_generated_corpus_validates(self):
        """Test that every graph kind validates for every generated program"""
        for program in generate_corpus(CorpusSpec(count=15, seed=5)):
            for kind in (AST, CFG, DFG):
                self.assertTrue(graph_from_source(program.unit.text, kind).validate(), program.id)


class DfgTest(SimpleTestCase):
    """Test data-flow graphs"""

    def test_def_use_chain(self):
        """Test that definitions reach their uses"""
        g = build_dfg(parse_text('x = input()\ny = x + 1\nprint(y)\n'))
        edges = {(e.src, e.dst, e.var) for e in g.edges}
        self.assertEqual(edges, {(1, 2, 'x'), (2, 3, 'y')})
        self.assertTrue(all(e.kind == DEF_USE for e in g.edges))

    def test_loop_carried_definition(self):
        """Test that a definition in a loop body reaches the loop header and itself"""
        g = build_dfg(parse_text('while n > 0:\n    n = n - 1\n'))
        edges = {(e.src, e.dst, e.var) for e in g.edges}
        self.assertIn((2, 1, 'n'), edges)
        self.assertIn((2, 2, 'n'), edges)

    def test_redefinition_kills(self):
        """Test that a later definition hides an earlier one"""
        g = build_dfg(parse_text('x = 1\nx = 2\nprint(x)\n'))
        edges = {(e.src, e.dst, e.var) for e in g.edges}
        self.assertEqual(edges, {(2, 3, 'x')})

    def test_parameters_defined_at_entry(self):
        """Test that function parameters are defined by the entry node"""
        g = build_dfg(parse_text('def f(a):\n    return a\n'))
        entry = g.entries()[1]
        ret = next(n.id for n in g.nodes if n.kind == 'Return')
        self.assertIn((entry, ret, 'a'), {(e.src, e.dst, e.var) for e in g.edges})


class FeatureTest(SimpleTestCase):
    """Test featurization and rendering"""

    def test_one_hot_rows(self):
        """Test that each row has exactly one hot entry at the node label"""
        g = build_graph(parse_text(VULNERABLE_LOOKUP), 'cfg')
        x = featurize(g)
        self.assertEqual(x.shape, (len(g), default_vocab().dim))
        np.testing.assert_array_equal(x.sum(axis=1), np.ones(len(g)))
        for node in g.nodes:
            self.assertEqual(x[node.id, node.label], 1.0)

    def test_dot_output(self):
        """Test that dot rendering names every node and edge"""
        g = build_cfg(parse_text('x = 1\n'))
        dot = to_dot(g)
        self.assertTrue(dot.startswith('digraph CFG {'))
        self.assertIn('n0 -> n1', dot)
        self.assertIn('label="Assign:-"', dot)


class EditGraphTest(SimpleTestCase):
    """Test per-node graph edits"""

    def setUp(self):
        """Set up the template bank"""
        self.bank = TemplateBank.default()

    def test_ast_relabel_rewrites_statement(self):
        """Test that a RELABEL on an AST statement splices in the template output"""
        g = build_ast(parse_text('password = "hunter2"\nprint(password)\n'))
        edited, realized = edit_graph(g, {1: EditAction(RELABEL, template='env-password')}, self.bank)
        self.assertEqual(list(realized), [1])
        self.assertEqual(unparse(edited).text, 'password = os.getenv("PASSWORD")\nprint(password)\n')
        self.assertTrue(edited.validate())
        self.assertTrue(edited.is_provenance_annotated())

    def test_ast_insert_after(self):
        """Test that INSERT_AFTER adds the template statement after its anchor"""
        g = build_ast(parse_text('host = input()\nos.system("ping " + host)\n'))
        edited, realized = edit_graph(g, {1: EditAction(INSERT_AFTER, template='sanitize-input')}, self.bank)
        self.assertEqual(len(realized), 1)
        self.assertEqual(unparse(edited).text,
                         'host = input()\nhost = shlex.quote(host)\nos.system("ping " + host)\n')

    def test_ast_delete(self):
        """Test that DELETE drops a statement and its subtree"""
        g = build_ast(parse_text('x = 1\ny = 2\n'))
        edited, _ = edit_graph(g, {1: EditAction(DELETE)})
        self.assertEqual(unparse(edited).text, 'y = 2\n')

    def test_inadmissible_action_demoted(self):
        """Test that an inapplicable template is demoted to KEEP"""
        g = build_ast(parse_text('x = 1\n'))
        edited, realized = edit_graph(g, {1: EditAction(RELABEL, template='env-password')}, self.bank)
        self.assertEqual(realized, {})
        self.assertEqual(unparse(edited).text, 'x = 1\n')

    def test_unknown_template_demoted(self):
        """Test that a missing template id is demoted to KEEP"""
        g = build_cfg(parse_text('password = "x"\n'))
        _, realized = edit_graph(g, {1: EditAction(RELABEL, template='no-such-template')}, self.bank)
        self.assertEqual(realized, {})

    def test_cfg_delete_bridges_flow(self):
        """Test that deleting a CFG statement reconnects its neighbours"""
        g = build_cfg(parse_text('x = 1\ny = 2\nz = 3\n'))
        edited, realized = edit_graph(g, {2: EditAction(DELETE)})
        self.assertIn(2, realized)
        self.assertEqual(len(edited), len(g) - 1)
        self.assertTrue(edited.validate())

    def test_cfg_relabel_keeps_shape(self):
        """Test that a CFG RELABEL only changes the node label"""
        g = graph_from_source(HARDCODED_SECRETS, CFG)
        target = next(n.id for n in g.nodes if n.name == 'Assign:password')
        edited, realized = edit_graph(g, {target: EditAction(RELABEL, template='env-password')}, self.bank)
        self.assertIn(target, realized)
        self.assertEqual(edited.nodes[target].name, 'Assign:getenv')
        self.assertEqual(edited.nodes[target].template, 'env-password')
        self.assertEqual(len(edited.edges), len(g.edges))

    def test_cfg_insert_splices_flow(self):
        """Test that a CFG insert sits between the anchor and its successors"""
        g = build_cfg(parse_text('host = input()\nos.system("ping " + host)\n'))
        edited, _ = edit_graph(g, {1: EditAction(INSERT_AFTER, template='sanitize-input')}, self.bank)
        self.assertEqual(len(edited), len(g) + 1)
        inserted = next(n for n in edited.nodes if n.template == 'sanitize-input')
        self.assertEqual(inserted.anchor, 1)
        self.assertIn(GraphEdge(1, inserted.id, FLOW_UNCOND), edited.edges)
        self.assertTrue(edited.validate())
