"""
Graph-to-code reconstruction.

An edited graph carries provenance (``origin``, ``template``, ``anchor`` on
every node). ``diff_graphs`` turns that provenance back into statement-level
edits, ``apply_edits`` replays them on the original text line by line so that
untouched lines stay byte-identical, and ``verify_consistency`` rebuilds the
graph of the result and compares it with the edited graph.
"""
import logging
from dataclasses import dataclass, field

import networkx as nx
from networkx.algorithms.isomorphism import categorical_edge_match, categorical_node_match

from .code_graphs import (
    DELETE, INSERT_AFTER, RELABEL, EditAction, build_ast, build_cfg, build_graph, edit_graph,
)
from .code_parser import (
    STATEMENT_KINDS, LexError, ParseError, SourceUnit, parse_text,
)
from .fix_templates import TemplateBank, TemplateMismatch
from .utils import PipelineError

logger = logging.getLogger(__name__)


class ReconstructionError(PipelineError):
    pass


class ProvenanceLost(ReconstructionError):
    pass


class SpanNotFound(ReconstructionError):
    pass


@dataclass(frozen=True)
class StatementEdit:
    op: str
    node: int              # id in the original graph (the anchor for inserts)
    syn_node: int          # statement index in the original syntax tree
    template: str = None
    old: str = None
    new: str = None

    def to_action(self):
        if self.op == DELETE:
            return EditAction(DELETE)
        if self.op == RELABEL:
            return EditAction(RELABEL, target=self.new, template=self.template)
        return EditAction(INSERT_AFTER, template=self.template)

    def to_dict(self):
        return {'op': self.op, 'node': self.node, 'syn_node': self.syn_node,
                'template': self.template, 'old': self.old, 'new': self.new}


@dataclass
class GraphDiff:
    kind: str
    deletes: list = field(default_factory=list)
    relabels: list = field(default_factory=list)
    inserts: list = field(default_factory=list)
    edges_added: list = field(default_factory=list)
    edges_removed: list = field(default_factory=list)

    @property
    def edits(self):
        return self.deletes + self.relabels + self.inserts

    def is_empty(self):
        return not self.edits

    def to_actions(self):
        """Per-node actions equivalent to this diff (inserts keyed by their anchor)"""
        return {e.node: e.to_action() for e in self.edits}

    def to_dict(self):
        return {
            'kind': self.kind,
            'deletes': [e.to_dict() for e in self.deletes],
            'relabels': [e.to_dict() for e in self.relabels],
            'inserts': [e.to_dict() for e in self.inserts],
            'edges_added': [list(e) for e in self.edges_added],
            'edges_removed': [list(e) for e in self.edges_removed],
        }


@dataclass(frozen=True)
class AppliedEdit:
    op: str
    template: str
    line: int
    text: str = ''

    def to_dict(self):
        return {'op': self.op, 'template': self.template, 'line': self.line, 'text': self.text}


@dataclass
class ReconstructionResult:
    unit: SourceUnit
    applied: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (StatementEdit, reason)
    consistent: bool = None

    @property
    def changed(self):
        return bool(self.applied)

    def to_dict(self):
        return {
            'unit_id': self.unit.id,
            'applied': [a.to_dict() for a in self.applied],
            'skipped': [{'edit': e.to_dict(), 'reason': reason} for e, reason in self.skipped],
            'consistent': self.consistent,
        }


def _edge_key(node):
    if node.origin is not None:
        return node.origin
    return f"+{node.anchor}:{node.template}:{node.name}"


def diff_graphs(g, g_hat):
    """
    Statement-level edits that turn g into g_hat.

    Raises:
        ProvenanceLost: g_hat has a node that neither came from g nor from a template
    """
    if not g_hat.is_provenance_annotated():
        raise ProvenanceLost(f"edited {g_hat.kind} graph has nodes without provenance")
    if g_hat.kind != g.kind:
        raise ReconstructionError(f"cannot diff a {g.kind} graph against a {g_hat.kind} graph")
    diff = GraphDiff(g.kind)
    by_origin = {n.origin: n for n in g_hat.nodes if n.origin is not None}
    for node in g.nodes:
        if node.kind not in STATEMENT_KINDS:
            continue
        edited = by_origin.get(node.id)
        if edited is None:
            diff.deletes.append(StatementEdit(DELETE, node.id, node.syn_node, old=node.name))
        elif edited.template is not None:
            diff.relabels.append(StatementEdit(RELABEL, node.id, node.syn_node, edited.template,
                                               node.name, edited.name))
    for node in g_hat.nodes:
        if node.origin is not None or node.kind not in STATEMENT_KINDS:
            continue
        if node.anchor is None or not 0 <= node.anchor < len(g.nodes):
            raise ProvenanceLost(f"inserted node {node.id} has no anchor in the original graph")
        anchor = g.nodes[node.anchor]
        diff.inserts.append(StatementEdit(INSERT_AFTER, anchor.id, anchor.syn_node, node.template,
                                          None, node.name))
    before = {(e.src, e.dst, e.kind) for e in g.edges}
    after = set()
    for e in g_hat.edges:
        after.add((_edge_key(g_hat.nodes[e.src]), _edge_key(g_hat.nodes[e.dst]), e.kind))
    diff.edges_added = sorted(after - before, key=str)
    diff.edges_removed = sorted(before - after, key=str)
    return diff


def _statement_lines(tree, lines, syn_node):
    """(first line, last line, indentation) of a simple statement, 1-based"""
    if syn_node is None or not 0 <= syn_node < len(tree.nodes):
        raise SpanNotFound(f"no syntax node {syn_node}")
    node = tree.nodes[syn_node]
    if node.kind not in STATEMENT_KINDS:
        raise SpanNotFound(f"syntax node {syn_node} is a {node.kind}, not a statement")
    start, col, end, _ = node.span
    if not 1 <= start <= end <= len(lines):
        raise SpanNotFound(f"statement span {node.span} is outside the unit", line=start)
    prefix = lines[start - 1][:col - 1]
    if prefix.strip():
        raise SpanNotFound("statement does not start its line", line=start, col=col)
    return start, end, prefix


def _with_newline(line):
    return line if line.endswith('\n') else line + '\n'


def _parses(text):
    try:
        parse_text(text)
    except (LexError, ParseError):
        return False
    return True


class _LineEditor:
    """Replays statement edits on the line list of the original unit"""

    def __init__(self, original, tree, bank):
        self.tree = tree
        self.bank = bank
        self.lines = original.text.splitlines(keepends=True)
        self.parents = tree.parents()

    def plan(self, diff):
        """Located edits, bottom-up, plus the ones that cannot be located"""
        ops, unplaced = [], []
        deleted = {e.syn_node for e in diff.deletes}
        for order, edit in enumerate(diff.edits):
            try:
                start, end, indent = _statement_lines(self.tree, self.lines, edit.syn_node)
            except SpanNotFound as e:
                unplaced.append((edit, str(e)))
                continue
            if edit.op == INSERT_AFTER:
                key = (end, 1, order)
            else:
                key = (start, 0, order)
            ops.append((key, edit, start, end, indent))
        ops.sort(key=lambda op: op[0], reverse=True)
        return ops, deleted, unplaced

    def render(self, edit, indent):
        if edit.template not in self.bank:
            raise TemplateMismatch(f"unknown fix template {edit.template!r}")
        return indent + self.bank[edit.template].render(self.tree, edit.syn_node) + '\n'

    def emptied_block(self, syn_node, deleted):
        parent = self.parents[syn_node]
        if parent is None or self.tree.nodes[parent].kind == 'Module':
            return False
        return all(c in deleted for c in self.tree.nodes[parent].children)

    def apply(self, diff, unit_id):
        ops, deleted, skipped = self.plan(diff)
        applied = []
        for _, edit, start, end, indent in ops:
            lines = list(self.lines)
            try:
                if edit.op == DELETE:
                    keep_pass = (self.emptied_block(edit.syn_node, deleted)
                                 and max(c for c in self.tree.nodes[self.parents[edit.syn_node]].children)
                                 == edit.syn_node)
                    lines[start - 1:end] = [indent + 'pass\n'] if keep_pass else []
                    text = ''
                elif edit.op == RELABEL:
                    text = self.render(edit, indent)
                    if not lines[end - 1].endswith('\n'):
                        text = text[:-1]
                    lines[start - 1:end] = [text]
                else:
                    text = self.render(edit, indent)
                    lines[end - 1] = _with_newline(lines[end - 1])
                    lines[end:end] = [text]
            except TemplateMismatch as e:
                skipped.append((edit, str(e)))
                logger.info("Skipped %s on statement %s: %s", edit.op, edit.syn_node, e)
                continue
            if not _parses(''.join(lines)):
                skipped.append((edit, 'result does not parse'))
                logger.info("Skipped %s on statement %s: result does not parse", edit.op, edit.syn_node)
                continue
            self.lines = lines
            applied.append(AppliedEdit(edit.op, edit.template, start if edit.op != INSERT_AFTER else end + 1,
                                       text.strip()))
        applied.reverse()
        return SourceUnit.from_text(''.join(self.lines), origin='reconstructed',
                                    id=f"{unit_id}-reconstructed"), applied, skipped


def apply_edits(original, ast, cfg, diff, bank=None):
    """
    Replay a graph diff on the original text.

    Args:
        original: SourceUnit the graphs were built from
        ast: AST GraphDoc of the original (its tree locates statements)
        cfg: CFG GraphDoc of the original
        diff: GraphDiff computed against a graph of the same original
        bank: TemplateBank rendering RELABEL / INSERT_AFTER text

    Returns:
        ReconstructionResult whose unit always reparses; edits that cannot be
        placed or rendered are listed in ``skipped``
    """
    tree = ast.tree if ast is not None and ast.tree is not None else cfg.tree
    if tree is None:
        tree = parse_text(original.text)
    editor = _LineEditor(original, tree, bank or TemplateBank.default())
    unit, applied, skipped = editor.apply(diff, original.id)
    if not applied:
        unit = SourceUnit.from_text(original.text, origin='reconstructed', id=f"{original.id}-reconstructed")
    return ReconstructionResult(unit, applied, skipped)


def verify_consistency(result, g_hat):
    """True when the graph of the reconstructed text matches g_hat in labels and structure"""
    try:
        rebuilt = build_graph(parse_text(result.unit.text), g_hat.kind, g_hat.vocab)
    except PipelineError as e:
        logger.warning("Reconstructed unit %s does not rebuild: %s", result.unit.id, e)
        return False
    if rebuilt.label_histogram() != g_hat.label_histogram():
        return False
    return nx.is_isomorphic(
        rebuilt.to_networkx(), g_hat.to_networkx(),
        node_match=categorical_node_match('label', None),
        edge_match=categorical_edge_match('kinds', None),
    )


def reconstruct(original, g, g_hat, bank=None):
    """Diff, replay and verify in one step"""
    bank = bank or TemplateBank.default()
    diff = diff_graphs(g, g_hat)
    tree = g.tree if g.tree is not None else parse_text(original.text)
    result = apply_edits(original, build_ast(tree, g.vocab), build_cfg(tree, g.vocab), diff, bank)
    target = g_hat
    if result.skipped:
        skipped_nodes = {edit.node for edit, _ in result.skipped}
        actions = {node: action for node, action in diff.to_actions().items() if node not in skipped_nodes}
        target, _ = edit_graph(g, actions, bank)
    result.consistent = verify_consistency(result, target)
    if not result.consistent:
        logger.info("Reconstruction of %s is not consistent with the edited %s graph", original.id, g.kind)
    return result
