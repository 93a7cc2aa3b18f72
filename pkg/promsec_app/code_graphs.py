"""
Code graphs: AST, CFG and DFG views over a parsed subject-language unit.

Every graph node carries a label from a fixed NodeVocab. Statement nodes are
labelled ``Kind:signature`` where the signature is the most security-relevant
identifier category found in the statement's own expressions (for example
``Assign:password`` or ``ExprStmt:exec``). CFG and DFG nodes keep the owning
SyntaxTree index so that graph edits can be mapped back to source spans.
"""
import hashlib
import logging
import re
import zlib
from collections import Counter
from dataclasses import dataclass, replace

import networkx as nx
import numpy as np

from .code_parser import (
    SIMPLE_STATEMENT_KINDS, STATEMENT_KINDS, MalformedAst, SourceUnit,
    parse_text, unparse_nodes,
)
from .utils import PipelineError

logger = logging.getLogger(__name__)

AST = 'AST'
CFG = 'CFG'
DFG = 'DFG'
GRAPH_KINDS = (AST, CFG, DFG)

CHILD = 'child'
NEXT_SIBLING = 'next-sibling'
FLOW_TRUE = 'flow-true'
FLOW_FALSE = 'flow-false'
FLOW_UNCOND = 'flow-uncond'
DEF_USE = 'def-use'
FLOW_KINDS = (FLOW_TRUE, FLOW_FALSE, FLOW_UNCOND)
EDGE_KINDS = {
    AST: (CHILD, NEXT_SIBLING),
    CFG: FLOW_KINDS,
    DFG: (DEF_USE,),
}

HASH_BUCKETS = 32


class VocabError(PipelineError):
    pass


class UnsupportedConstruct(PipelineError):
    pass


class GraphInvariantError(PipelineError):
    pass


class DecodeError(PipelineError):
    pass


def parse_graph_kind(value):
    kind = str(value).upper()
    if kind not in GRAPH_KINDS:
        raise ValueError(f"unknown graph kind {value!r}")
    return kind


# ==================== Identifier categories ====================

_PASSWORD_RE = re.compile(r'(^|_)(password|passwd|pwd)s?($|_)', re.IGNORECASE)
_SECRET_RE = re.compile(r'(^|_)(api_?key|apikey|token|secret|key)s?($|_)', re.IGNORECASE)

# Highest priority first
CATEGORIES = (
    ('sanitize', frozenset({'sanitize', 'quote', 'escape', 'basename', 'secure_filename'})),
    ('getenv', frozenset({'getenv', 'environ'})),
    ('params', frozenset({'params'})),
    ('safeload', frozenset({'safe_load'})),
    ('json', frozenset({'json'})),
    ('secrets', frozenset({'secrets', 'token_hex', 'token_bytes', 'token_urlsafe', 'SystemRandom'})),
    ('stronghash', frozenset({'sha256', 'sha512', 'sha3_256', 'blake2b'})),
    ('shell', frozenset({'shell'})),
    ('exec', frozenset({'system', 'popen', 'call', 'run', 'check_output', 'check_call',
                        'Popen', 'getoutput', 'spawn'})),
    ('execute', frozenset({'execute', 'executemany'})),
    ('weakhash', frozenset({'md5', 'sha1', 'des', 'DES'})),
    ('random', frozenset({'random', 'randint', 'choice', 'randrange', 'uniform'})),
    ('pickle', frozenset({'pickle', 'marshal', 'dill'})),
    ('yaml', frozenset({'yaml'})),
    ('open', frozenset({'open'})),
    ('input', frozenset({'input', 'raw_input', 'argv', 'request'})),
    ('password', _PASSWORD_RE),
    ('secret', _SECRET_RE),
    ('cmd', frozenset({'cmd', 'command'})),
    ('query', frozenset({'query', 'sql'})),
    ('path', frozenset({'path', 'filename', 'filepath', 'file_path', 'fname'})),
)
CATEGORY_NAMES = tuple(name for name, _ in CATEGORIES)
_CATEGORY_RANK = {name: rank for rank, name in enumerate(CATEGORY_NAMES)}
NO_SIGNATURE = '-'

STATEMENT_LABEL_KINDS = ('Assign', 'ExprStmt', 'Return', 'If', 'While', 'For', 'Try',
                         'Except', 'With', 'Pass', 'Import', 'ImportFrom', 'FunctionDef')
IDENTIFIER_LABEL_KINDS = ('Name', 'Attr', 'Kw', 'Arg', 'Alias')
_IDENTIFIER_PREFIX = {'Name': 'Name', 'Attribute': 'Attr', 'Keyword': 'Kw', 'Arg': 'Arg', 'Alias': 'Alias'}
PLAIN_LABELS = ('Module', 'Suite', 'Arguments', 'WithItem', 'Call', 'Subscript', 'List',
                'Str', 'Num', 'Bool', 'NoneLit')
OPERATOR_LABELS = (
    'BinOp:+', 'BinOp:-', 'BinOp:*', 'BinOp:/', 'BinOp:%',
    'Compare:==', 'Compare:!=', 'Compare:<', 'Compare:>', 'Compare:<=', 'Compare:>=', 'Compare:in',
    'BoolOp:and', 'BoolOp:or', 'UnaryOp:not', 'UnaryOp:-',
)


def categorize(name):
    """Security category of one identifier, or None"""
    for category, members in CATEGORIES:
        if isinstance(members, frozenset):
            if name in members:
                return category
        elif members.search(name):
            return category
    return None


def bucket(name):
    """Category name, or a stable hash bucket '#k' for everything else"""
    category = categorize(name)
    if category is not None:
        return category
    return f"#{zlib.crc32(name.encode('utf-8')) % HASH_BUCKETS}"


def alias_parts(payload):
    """Identifiers named by an import alias payload such as 'os.path as p'"""
    parts = []
    for chunk in payload.split(' as '):
        parts.extend(p for p in chunk.split('.') if p)
    return parts


def best_category(names):
    ranked = [c for c in (categorize(n) for n in names) if c is not None]
    if not ranked:
        return None
    return min(ranked, key=_CATEGORY_RANK.__getitem__)


def own_expressions(tree, index):
    """Expression children of a statement, excluding nested suites"""
    node = tree.nodes[index]
    return [c for c in node.children if tree.nodes[c].kind not in ('Suite',)]


def statement_identifiers(tree, index):
    """Every identifier appearing in a statement's own expressions, in pre-order"""
    node = tree.nodes[index]
    names = []
    if node.kind == 'FunctionDef':
        names.append(node.payload)
    elif node.kind == 'ExceptHandler' and node.payload:
        names.append(node.payload)
    for root in own_expressions(tree, index):
        for i in tree.walk(root):
            n = tree.nodes[i]
            if n.kind in ('Name', 'Attribute', 'Keyword', 'Arg'):
                names.append(n.payload)
            elif n.kind == 'Alias':
                names.extend(alias_parts(n.payload))
            elif n.kind == 'WithItem' and n.payload:
                names.append(n.payload)
    return names


def statement_signature(tree, index):
    return best_category(statement_identifiers(tree, index)) or NO_SIGNATURE


def statement_label_kind(kind):
    return 'Except' if kind == 'ExceptHandler' else kind


def node_label(tree, index):
    """Vocabulary label text for a SyntaxTree node"""
    node = tree.nodes[index]
    kind = node.kind
    if kind in STATEMENT_KINDS:
        return f"{statement_label_kind(kind)}:{statement_signature(tree, index)}"
    if kind in _IDENTIFIER_PREFIX:
        if kind == 'Alias':
            category = best_category(alias_parts(node.payload))
            value = category or bucket(node.payload)
        else:
            value = bucket(node.payload)
        return f"{_IDENTIFIER_PREFIX[kind]}:{value}"
    if kind in ('BinOp', 'Compare', 'BoolOp', 'UnaryOp'):
        return f"{kind}:{node.payload}"
    return kind


def label_kind(label):
    """Statement kind part of a label ('Assign:password' -> 'Assign')"""
    return label.split(':', 1)[0]


def label_signature(label):
    return label.split(':', 1)[1] if ':' in label else ''


# ==================== Vocabulary ====================

class NodeVocab:
    """Ordered, bijective label set used for one-hot featurization"""

    def __init__(self, labels):
        self.labels = list(labels)
        self._index = {}
        for i, label in enumerate(self.labels):
            if label in self._index:
                raise VocabError(f"duplicate vocabulary label {label!r}")
            self._index[label] = i

    @property
    def dim(self):
        return len(self.labels)

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._index

    def index(self, label):
        try:
            return self._index[label]
        except KeyError:
            raise VocabError(f"label {label!r} is not in the vocabulary")

    def label(self, index):
        return self.labels[index]

    def digest(self):
        return hashlib.sha256('\n'.join(self.labels).encode('utf-8')).hexdigest()

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as fh:
            fh.write('\n'.join(self.labels) + '\n')

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as fh:
            return cls([line.rstrip('\n') for line in fh if line.strip()])

    @classmethod
    def default(cls):
        signatures = CATEGORY_NAMES + (NO_SIGNATURE,)
        values = CATEGORY_NAMES + tuple(f"#{k}" for k in range(HASH_BUCKETS))
        labels = ['Entry', 'Exit']
        labels.extend(PLAIN_LABELS)
        labels.extend(OPERATOR_LABELS)
        labels.extend(f"{kind}:{sig}" for kind in STATEMENT_LABEL_KINDS for sig in signatures)
        labels.extend(f"{kind}:{value}" for kind in IDENTIFIER_LABEL_KINDS for value in values)
        return cls(labels)


_DEFAULT_VOCAB = None


def default_vocab():
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = NodeVocab.default()
    return _DEFAULT_VOCAB


# ==================== Graph documents ====================

@dataclass
class GraphNode:
    id: int
    label: int
    name: str
    kind: str
    payload: str = ''
    span: tuple = None
    syn_node: int = None
    scope: int = 0
    origin: int = None     # id of the node in the graph this one was derived from
    template: str = None   # fix template that produced or rewrote this node
    anchor: int = None     # original node an inserted node follows


@dataclass(frozen=True)
class GraphEdge:
    src: int
    dst: int
    kind: str
    var: str = None


@dataclass
class GraphDoc:
    kind: str
    nodes: list
    edges: list
    vocab: NodeVocab
    tree: object = None
    unit_id: str = None

    @property
    def vocab_id(self):
        return self.vocab.digest()

    def __len__(self):
        return len(self.nodes)

    def copy(self):
        return GraphDoc(self.kind, [replace(n) for n in self.nodes], list(self.edges),
                        self.vocab, self.tree, self.unit_id)

    def out_edges(self, node_id, kinds=None):
        return [e for e in self.edges if e.src == node_id and (kinds is None or e.kind in kinds)]

    def in_edges(self, node_id, kinds=None):
        return [e for e in self.edges if e.dst == node_id and (kinds is None or e.kind in kinds)]

    def children(self, node_id):
        return [e.dst for e in self.edges if e.src == node_id and e.kind == CHILD]

    def entries(self):
        return {n.scope: n.id for n in self.nodes if n.kind == 'Entry'}

    def exits(self):
        return {n.scope: n.id for n in self.nodes if n.kind == 'Exit'}

    def statement_nodes(self):
        return [n for n in self.nodes if n.kind in STATEMENT_KINDS]

    def label_histogram(self):
        return Counter(n.name for n in self.nodes)

    def is_provenance_annotated(self):
        return all(n.origin is not None or n.template is not None for n in self.nodes)

    def to_networkx(self, kinds=None):
        """DiGraph with node 'label' and edge 'kinds' (frozenset) attributes"""
        graph = nx.DiGraph()
        for n in self.nodes:
            graph.add_node(n.id, label=n.name)
        for e in self.edges:
            if kinds is not None and e.kind not in kinds:
                continue
            if graph.has_edge(e.src, e.dst):
                graph[e.src][e.dst]['kinds'] = graph[e.src][e.dst]['kinds'] | {e.kind}
            else:
                graph.add_edge(e.src, e.dst, kinds=frozenset({e.kind}))
        return graph

    def validate(self):
        """Raise GraphInvariantError when a structural invariant is broken"""
        problems = []
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                problems.append(f"node id {node.id} at position {i}")
            if not 0 <= node.label < self.vocab.dim or self.vocab.label(node.label) != node.name:
                problems.append(f"node {i} label {node.name!r} does not match vocabulary")
        allowed = EDGE_KINDS[self.kind]
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                problems.append(f"edge {e.src}->{e.dst} has an invalid endpoint")
            if e.kind not in allowed:
                problems.append(f"edge kind {e.kind} not allowed in {self.kind}")
        if problems:
            raise GraphInvariantError('; '.join(problems))
        if self.kind == AST:
            self._validate_tree(problems)
        elif self.kind == CFG:
            self._validate_flow(problems)
        else:
            self._validate_scopes(problems)
            for e in self.edges:
                if not e.var:
                    problems.append(f"def-use edge {e.src}->{e.dst} has no variable")
        if problems:
            raise GraphInvariantError('; '.join(problems))
        return True

    def _validate_tree(self, problems):
        incoming = Counter(e.dst for e in self.edges if e.kind == CHILD)
        roots = [node.id for node in self.nodes if incoming[node.id] == 0]
        if len(roots) != 1 and self.nodes:
            problems.append(f"AST has {len(roots)} roots")
            return
        if any(count > 1 for count in incoming.values()):
            problems.append("AST node with more than one parent")
            return
        if self.nodes:
            reached = nx.descendants(self.to_networkx((CHILD,)), roots[0]) | {roots[0]}
            if len(reached) != len(self.nodes):
                problems.append("AST child edges do not form a tree")

    def _validate_scopes(self, problems):
        entries = Counter(n.scope for n in self.nodes if n.kind == 'Entry')
        exits = Counter(n.scope for n in self.nodes if n.kind == 'Exit')
        scopes = {n.scope for n in self.nodes}
        for scope in scopes:
            if entries[scope] != 1 or exits[scope] != 1:
                problems.append(f"scope {scope} needs exactly one entry and one exit")

    def _validate_flow(self, problems):
        self._validate_scopes(problems)
        if problems:
            return
        graph = self.to_networkx(FLOW_KINDS)
        entries, exits = self.entries(), self.exits()
        for scope, entry in entries.items():
            forward = nx.descendants(graph, entry) | {entry}
            backward = nx.ancestors(graph, exits[scope]) | {exits[scope]}
            for node in self.nodes:
                if node.scope != scope:
                    continue
                if node.id not in forward or node.id not in backward:
                    problems.append(f"node {node.id} ({node.name}) is not on an entry-exit path")


class _Builder:
    def __init__(self, kind, vocab, tree, unit_id=None):
        self.doc = GraphDoc(kind, [], [], vocab, tree, unit_id)
        self.vocab = vocab
        self.tree = tree
        self._edge_set = set()

    def add_node(self, name, kind, payload='', span=None, syn_node=None, scope=0):
        node_id = len(self.doc.nodes)
        self.doc.nodes.append(GraphNode(
            id=node_id, label=self.vocab.index(name), name=name, kind=kind, payload=payload,
            span=span, syn_node=syn_node, scope=scope, origin=node_id,
        ))
        return node_id

    def add_syntax_node(self, index, scope=0):
        syn = self.tree.nodes[index]
        return self.add_node(node_label(self.tree, index), syn.kind, syn.payload, syn.span, index, scope)

    def add_edge(self, src, dst, kind, var=None):
        key = (src, dst, kind, var)
        if key not in self._edge_set:
            self._edge_set.add(key)
            self.doc.edges.append(GraphEdge(src, dst, kind, var))


# ==================== AST ====================

def build_ast(tree, vocab=None, unit_id=None):
    """
    One graph node per SyntaxTree node, child edges mirroring the tree and
    next-sibling edges between consecutive children. Node ids equal tree indices.
    """
    vocab = vocab or default_vocab()
    builder = _Builder(AST, vocab, tree, unit_id)
    for i in range(len(tree.nodes)):
        builder.add_syntax_node(i)
    for i, node in enumerate(tree.nodes):
        for c in node.children:
            builder.add_edge(i, c, CHILD)
        for a, b in zip(node.children, node.children[1:]):
            builder.add_edge(a, b, NEXT_SIBLING)
    return builder.doc


# ==================== CFG ====================

def _scopes(tree):
    """(scope id, body statement indices) for the module and each function, in pre-order"""
    scopes = [(0, list(tree.nodes[tree.root].children))]
    for i in tree.walk():
        node = tree.nodes[i]
        if node.kind == 'FunctionDef':
            body = node.children[1]
            scopes.append((i, list(tree.nodes[body].children)))
    return scopes


def _scope_statements(tree, body):
    """Statements of one scope in pre-order, not descending into nested functions"""
    out = []
    stack = list(reversed(body))
    while stack:
        i = stack.pop()
        node = tree.nodes[i]
        if node.kind in STATEMENT_KINDS:
            out.append(i)
            if node.kind == 'FunctionDef':
                continue
        if node.kind not in STATEMENT_KINDS and node.kind != 'Suite':
            continue
        stack.extend(reversed([c for c in node.children
                               if tree.nodes[c].kind in ('Suite',) or tree.nodes[c].kind in STATEMENT_KINDS]))
    return out


class _FlowBuilder:
    def __init__(self, builder, stmt_node, entry_id, exit_id):
        self.b = builder
        self.tree = builder.tree
        self.stmt_node = stmt_node
        self.entry_id = entry_id
        self.exit_id = exit_id

    def connect(self, pending, dst):
        for src, kind in pending:
            self.b.add_edge(src, dst, kind)

    def sequence(self, stmts, pending):
        for s in stmts:
            if not pending:
                # unreachable code hangs off its scope entry
                pending = [(self.entry_id, FLOW_UNCOND)]
            pending = self.statement(s, pending)
        return pending

    def suite(self, index, pending):
        return self.sequence(list(self.tree.nodes[index].children), pending)

    def statement(self, s, pending):
        node = self.tree.nodes[s]
        n = self.stmt_node[s]
        self.connect(pending, n)
        kind = node.kind
        if kind == 'Return':
            self.b.add_edge(n, self.exit_id, FLOW_UNCOND)
            return []
        if kind in SIMPLE_STATEMENT_KINDS or kind == 'FunctionDef':
            return [(n, FLOW_UNCOND)]
        if kind == 'If':
            out = self.suite(node.children[1], [(n, FLOW_TRUE)])
            if len(node.children) == 3:
                out = out + self.suite(node.children[2], [(n, FLOW_FALSE)])
            else:
                out = out + [(n, FLOW_FALSE)]
            return out
        if kind in ('While', 'For'):
            body_out = self.suite(node.children[-1], [(n, FLOW_TRUE)])
            self.connect(body_out, n)
            return [(n, FLOW_FALSE)]
        if kind == 'With':
            return self.suite(node.children[-1], [(n, FLOW_UNCOND)])
        if kind == 'Try':
            out = self.suite(node.children[0], [(n, FLOW_UNCOND)])
            for h in node.children[1:]:
                h_node = self.stmt_node[h]
                self.b.add_edge(n, h_node, FLOW_UNCOND)
                out = out + self.suite(self.tree.nodes[h].children[-1], [(h_node, FLOW_UNCOND)])
            return out
        raise UnsupportedConstruct(f"statement kind {kind} has no control-flow rule",
                                   line=node.span[0], col=node.span[1])


def _build_flow(tree, vocab, kind, unit_id):
    builder = _Builder(kind, vocab, tree, unit_id)
    layout = []
    for scope, body in _scopes(tree):
        entry = builder.add_node('Entry', 'Entry', syn_node=scope, scope=scope)
        stmt_node = {}
        for s in _scope_statements(tree, body):
            stmt_node[s] = builder.add_syntax_node(s, scope)
        exit_id = builder.add_node('Exit', 'Exit', syn_node=scope, scope=scope)
        layout.append((scope, body, entry, exit_id, stmt_node))
    flows = []
    for scope, body, entry, exit_id, stmt_node in layout:
        flow = _FlowBuilder(builder, stmt_node, entry, exit_id)
        out = flow.sequence(body, [(entry, FLOW_UNCOND)])
        flow.connect(out, exit_id)
        flows.append((scope, entry, exit_id, stmt_node))
    return builder, flows


def build_cfg(tree, vocab=None, unit_id=None):
    """
    Per function (and for the module body): an Entry node, one node per
    statement, an Exit node; flow-true/flow-false edges leave branch and loop
    headers and loop bodies link back to their header. A statement no path
    reaches is linked from its scope's Entry so every node stays on an
    entry-exit path.
    """
    builder, _ = _build_flow(tree, vocab or default_vocab(), CFG, unit_id)
    return builder.doc


# ==================== DFG ====================

def _expr_names(tree, roots):
    names = []
    for root in roots:
        for i in tree.walk(root):
            if tree.nodes[i].kind == 'Name':
                names.append(tree.nodes[i].payload)
    return names


def statement_defs(tree, index):
    """Variables defined by a statement"""
    node = tree.nodes[index]
    kind = node.kind
    if kind == 'Assign':
        target = tree.nodes[node.children[0]]
        return [target.payload] if target.kind == 'Name' else []
    if kind == 'For':
        return [tree.nodes[node.children[0]].payload]
    if kind == 'With':
        return [tree.nodes[c].payload for c in node.children[:-1] if tree.nodes[c].payload]
    if kind == 'ExceptHandler':
        return [node.payload] if node.payload else []
    if kind == 'FunctionDef':
        return [node.payload]
    if kind in ('Import', 'ImportFrom'):
        names = []
        for c in node.children:
            payload = tree.nodes[c].payload
            if ' as ' in payload:
                names.append(payload.split(' as ')[1])
            else:
                names.append(payload.split('.')[0])
        return names
    return []


def statement_uses(tree, index):
    """Variables read by a statement's own expressions, in first-use order"""
    node = tree.nodes[index]
    kind = node.kind
    if kind == 'Assign':
        target = node.children[0]
        roots = [node.children[1]]
        if tree.nodes[target].kind != 'Name':
            roots.append(target)
    elif kind == 'For':
        roots = [node.children[1]]
    elif kind in ('FunctionDef', 'Import', 'ImportFrom', 'Pass', 'Try'):
        roots = []
    else:
        roots = own_expressions(tree, index)
    seen = []
    for name in _expr_names(tree, roots):
        if name not in seen:
            seen.append(name)
    return seen


def _scope_params(tree, scope):
    if scope == 0:
        return []
    arguments = tree.nodes[tree.nodes[scope].children[0]]
    return [tree.nodes[a].payload for a in arguments.children]


def reaching_definitions(doc, defs):
    """
    Forward reaching definitions over the flow edges of a CFG-shaped document.

    Args:
        doc: GraphDoc with flow edges
        defs: node id -> list of variables defined at that node

    Returns:
        node id -> frozenset of (variable, defining node id) reaching the node entry
    """
    preds = {n.id: [] for n in doc.nodes}
    succs = {n.id: [] for n in doc.nodes}
    for e in doc.edges:
        if e.kind in FLOW_KINDS:
            preds[e.dst].append(e.src)
            succs[e.src].append(e.dst)
    gen = {i: frozenset((v, i) for v in defs.get(i, ())) for i in preds}
    killed = {i: frozenset(defs.get(i, ())) for i in preds}
    reach_in = {i: frozenset() for i in preds}
    reach_out = dict(gen)
    worklist = sorted(preds)
    pending = set(worklist)
    while worklist:
        i = worklist.pop(0)
        pending.discard(i)
        incoming = frozenset().union(*(reach_out[p] for p in preds[i])) if preds[i] else frozenset()
        reach_in[i] = incoming
        out = gen[i] | frozenset(d for d in incoming if d[0] not in killed[i])
        if out != reach_out[i]:
            reach_out[i] = out
            for s in succs[i]:
                if s not in pending:
                    pending.add(s)
                    worklist.append(s)
    return reach_in


def build_dfg(tree, vocab=None, unit_id=None):
    """
    Same nodes as the CFG with def-use edges from every definition to each use
    it reaches. Function entry nodes define the parameters.
    """
    builder, _ = _build_flow(tree, vocab or default_vocab(), DFG, unit_id)
    flow_doc = builder.doc
    defs, uses = {}, {}
    for node in flow_doc.nodes:
        if node.kind == 'Entry':
            defs[node.id] = _scope_params(tree, node.scope)
        elif node.kind in STATEMENT_KINDS:
            defs[node.id] = statement_defs(tree, node.syn_node)
            uses[node.id] = statement_uses(tree, node.syn_node)
    reach = reaching_definitions(flow_doc, defs)
    flow_doc.edges = []
    builder._edge_set = set()
    for node_id in sorted(uses):
        for var in uses[node_id]:
            for d_var, d_node in sorted(reach[node_id], key=lambda d: (d[1], d[0])):
                if d_var == var:
                    builder.add_edge(d_node, node_id, DEF_USE, var)
    return builder.doc


def build_graph(tree, kind, vocab=None, unit_id=None):
    kind = parse_graph_kind(kind)
    return {AST: build_ast, CFG: build_cfg, DFG: build_dfg}[kind](tree, vocab, unit_id)


def graph_from_source(text, kind, vocab=None, unit_id=None):
    return build_graph(parse_text(text), kind, vocab, unit_id)


# ==================== Features and rendering ====================

def featurize(g, vocab=None):
    """n x dim one-hot matrix; row v is hot at the label of node v"""
    vocab = vocab or g.vocab
    features = np.zeros((len(g.nodes), vocab.dim), dtype=np.float64)
    for node in g.nodes:
        if not 0 <= node.label < vocab.dim:
            raise VocabError(f"label index {node.label} outside vocabulary of size {vocab.dim}")
        features[node.id, node.label] = 1.0
    return features


def unparse(ast):
    """Source text for an AST document (including one produced by edit_graph)"""
    if ast.kind != AST:
        raise MalformedAst(f"unparse needs an AST document, got {ast.kind}")
    n = len(ast.nodes)
    children = [[] for _ in range(n)]
    has_parent = [False] * n
    for e in ast.edges:
        if e.kind == CHILD:
            children[e.src].append(e.dst)
            has_parent[e.dst] = True
    roots = [i for i in range(n) if not has_parent[i]]
    if len(roots) != 1:
        raise MalformedAst(f"AST document has {len(roots)} roots")
    text = unparse_nodes([node.kind for node in ast.nodes], children,
                         [node.payload for node in ast.nodes], roots[0])
    return SourceUnit.from_text(text, origin='reconstructed')


def to_dot(g):
    """Dot-style text rendering of a GraphDoc"""
    lines = [f"digraph {g.kind} {{"]
    for node in g.nodes:
        label = node.name.replace('"', '\\"')
        extra = f" line={node.span[0]}" if node.span else ''
        lines.append(f'  n{node.id} [label="{label}"{extra}];')
    for e in g.edges:
        tag = e.kind if e.var is None else f"{e.kind}:{e.var}"
        lines.append(f'  n{e.src} -> n{e.dst} [label="{tag}"];')
    lines.append('}')
    return '\n'.join(lines) + '\n'


# ==================== Graph edits ====================

KEEP = 'KEEP'
DELETE = 'DELETE'
RELABEL = 'RELABEL'
INSERT_AFTER = 'INSERT_AFTER'


@dataclass(frozen=True)
class EditAction:
    op: str
    target: str = None     # full target label for RELABEL
    template: str = None   # fix template id for RELABEL / INSERT_AFTER

    def __str__(self):
        if self.op == KEEP or self.op == DELETE:
            return self.op
        return f"{self.op}({self.template})"


KEEP_ACTION = EditAction(KEEP)
DELETE_ACTION = EditAction(DELETE)


class _EditState:
    """Mutable working copy used while applying actions"""

    def __init__(self, g):
        self.g = g
        self.nodes = {n.id: replace(n) for n in g.nodes}
        self.edges = list(g.edges)
        self.next_id = len(g.nodes)
        self.place = {}  # new node id -> original id it is placed after

    def snapshot(self):
        return ({k: replace(v) for k, v in self.nodes.items()}, list(self.edges), self.next_id, dict(self.place))

    def restore(self, snap):
        self.nodes, self.edges, self.next_id, self.place = snap

    def new_node(self, name, kind, payload, vocab, template, anchor, scope, place_after):
        node_id = self.next_id
        self.next_id += 1
        self.nodes[node_id] = GraphNode(node_id, vocab.index(name), name, kind, payload,
                                        None, None, scope, None, template, anchor)
        self.place[node_id] = place_after
        return node_id

    def descendants(self, node_id):
        out, stack = [], [node_id]
        while stack:
            i = stack.pop()
            for e in self.edges:
                if e.src == i and e.kind == CHILD:
                    out.append(e.dst)
                    stack.append(e.dst)
        return out

    def remove_nodes(self, ids):
        ids = set(ids)
        for i in ids:
            self.nodes.pop(i, None)
        self.edges = [e for e in self.edges if e.src not in ids and e.dst not in ids]

    def finish(self, kind):
        originals = sorted(i for i in self.nodes if i not in self.place)
        following = {}
        for new_id in sorted(self.place):
            following.setdefault(self.place[new_id], []).append(new_id)
        order = []
        for i in originals:
            order.append(i)
            order.extend(self._placed_after(i, following))
        for anchor in sorted(following):
            if anchor not in self.nodes:
                order.extend(self._placed_after(anchor, following))
        remap = {old: new for new, old in enumerate(order)}
        nodes = [replace(self.nodes[old], id=remap[old]) for old in order]
        edges = []
        seen = set()
        for e in self.edges:
            if e.kind == NEXT_SIBLING:
                continue
            moved = GraphEdge(remap[e.src], remap[e.dst], e.kind, e.var)
            if moved not in seen:
                seen.add(moved)
                edges.append(moved)
        if kind == AST:
            edges = _with_sibling_edges(edges)
        return GraphDoc(kind, nodes, edges, self.g.vocab, self.g.tree, self.g.unit_id)

    def _placed_after(self, anchor, following):
        out = []
        for new_id in following.get(anchor, ()):
            if new_id in self.nodes:
                out.append(new_id)
                out.extend(self._placed_after(new_id, following))
        return out


def _with_sibling_edges(edges):
    out = list(edges)
    children = {}
    for e in edges:
        if e.kind == CHILD:
            children.setdefault(e.src, []).append(e.dst)
    for parent in sorted(children):
        kids = children[parent]
        for a, b in zip(kids, kids[1:]):
            out.append(GraphEdge(a, b, NEXT_SIBLING))
    return out


def _flow_connected(state, scope):
    graph = nx.DiGraph()
    entry = exit_id = None
    for node in state.nodes.values():
        if node.scope == scope:
            graph.add_node(node.id)
            if node.kind == 'Entry':
                entry = node.id
            elif node.kind == 'Exit':
                exit_id = node.id
    for e in state.edges:
        if e.kind in FLOW_KINDS and e.src in graph and e.dst in graph:
            graph.add_edge(e.src, e.dst)
    return entry is not None and exit_id is not None and nx.has_path(graph, entry, exit_id)


def _replace_child(state, parent, old, new_ids):
    """Swap child `old` of `parent` for `new_ids` keeping child order"""
    edges = []
    for e in state.edges:
        if e.src == parent and e.dst == old and e.kind == CHILD:
            edges.extend(GraphEdge(parent, n, CHILD) for n in new_ids)
        else:
            edges.append(e)
    state.edges = edges


def _graft_subtree(state, sub_tree, sub_root, vocab, template, anchor, scope, place_after):
    """Copy a SyntaxTree subtree into the working state; returns the new root id"""
    ids = {}
    last = place_after
    for i in sub_tree.walk(sub_root):
        syn = sub_tree.nodes[i]
        ids[i] = state.new_node(node_label(sub_tree, i), syn.kind, syn.payload, vocab,
                                template, anchor, scope, last)
        last = ids[i]
    for i in sub_tree.walk(sub_root):
        for c in sub_tree.nodes[i].children:
            state.edges.append(GraphEdge(ids[i], ids[c], CHILD))
    return ids[sub_root]


def _apply_ast(state, node, action, tmpl, g):
    parent = next((e.src for e in state.edges if e.dst == node.id and e.kind == CHILD), None)
    if action.op == DELETE:
        if parent is None:
            raise DecodeError("cannot delete the AST root")
        state.remove_nodes([node.id] + state.descendants(node.id))
        return
    rendered = tmpl.render_tree(g.tree, node.syn_node)
    stmt_root = rendered.nodes[rendered.root].children[0]
    if action.op == RELABEL:
        old_desc = state.descendants(node.id)
        state.remove_nodes(old_desc)
        syn = rendered.nodes[stmt_root]
        node.kind, node.payload = syn.kind, syn.payload
        node.name = node_label(rendered, stmt_root)
        node.label = g.vocab.index(node.name)
        node.template = tmpl.id
        last = node.id
        for c in syn.children:
            child = _graft_subtree(state, rendered, c, g.vocab, tmpl.id, node.id, node.scope, last)
            state.edges.append(GraphEdge(node.id, child, CHILD))
            last = max([child] + state.descendants(child))
        return
    if parent is None:
        raise DecodeError("cannot insert after the AST root")
    tail = max([node.id] + [d for d in state.descendants(node.id) if d < len(g.nodes)])
    new_root = _graft_subtree(state, rendered, stmt_root, g.vocab, tmpl.id, node.id, node.scope, tail)
    _replace_child(state, parent, node.id, [node.id, new_root])


def _apply_flow(state, node, action, tmpl, g):
    flow = g.kind == CFG
    if action.op == DELETE:
        if flow:
            preds = [(e.src, e.kind) for e in state.edges if e.dst == node.id and e.kind in FLOW_KINDS]
            succs = [e.dst for e in state.edges if e.src == node.id and e.kind in FLOW_KINDS]
        state.remove_nodes([node.id])
        if flow:
            for src, kind in preds:
                for dst in succs:
                    if dst != node.id and src != node.id:
                        edge = GraphEdge(src, dst, kind)
                        if edge not in state.edges:
                            state.edges.append(edge)
        return
    if action.op == RELABEL:
        node.name = action.target or tmpl.target_label(node.name)
        node.label = g.vocab.index(node.name)
        node.template = tmpl.id
        return
    name = tmpl.insert_label
    new_id = state.new_node(name, label_kind(name), '', g.vocab, tmpl.id, node.id, node.scope, node.id)
    if flow:
        moved = []
        for e in state.edges:
            if e.src == node.id and e.kind in FLOW_KINDS:
                moved.append(GraphEdge(new_id, e.dst, e.kind))
            else:
                moved.append(e)
        moved.append(GraphEdge(node.id, new_id, FLOW_UNCOND))
        state.edges = moved
    else:
        defined = set(statement_defs(g.tree, node.syn_node)) if node.syn_node is not None else set()
        moved = []
        for e in state.edges:
            if e.src == node.id and e.kind == DEF_USE and e.var in defined:
                moved.append(GraphEdge(new_id, e.dst, e.kind, e.var))
            else:
                moved.append(e)
        for var in sorted(defined):
            moved.append(GraphEdge(node.id, new_id, DEF_USE, var))
        state.edges = moved


def deletable(tree, index):
    """Simple statements that are not alone in their block may be deleted"""
    if index is None or tree.nodes[index].kind not in SIMPLE_STATEMENT_KINDS:
        return False
    parent = tree.parents()[index]
    return parent is not None and len(tree.nodes[parent].children) > 1


def insertable(tree, index):
    """A fix statement may follow any simple statement except return"""
    return (index is not None and tree.nodes[index].kind in SIMPLE_STATEMENT_KINDS
            and tree.nodes[index].kind != 'Return')


def action_admissible(g, node, action, tmpl=None):
    if action.op == KEEP:
        return True
    if node.kind not in STATEMENT_KINDS or node.syn_node is None or g.tree is None:
        return False
    if action.op == DELETE:
        return deletable(g.tree, node.syn_node)
    if tmpl is None or not tmpl.matches(node.name):
        return False
    if action.op == INSERT_AFTER:
        return tmpl.action == 'insert' and insertable(g.tree, node.syn_node)
    return tmpl.action == 'rewrite' and node.kind in SIMPLE_STATEMENT_KINDS


def edit_graph(g, actions, bank=None):
    """
    Apply per-node edit actions to a graph.

    Args:
        g: GraphDoc of any kind
        actions: mapping node id -> EditAction (missing ids mean KEEP)
        bank: template bank resolving template ids (needed for RELABEL / INSERT_AFTER)

    Returns:
        (edited GraphDoc with provenance, dict of the actions actually realized)

    Actions that cannot be applied (unknown template, capture failure, or a
    CFG edit that would disconnect entry from exit) are demoted to KEEP and
    logged as DecodeError.
    """
    state = _EditState(g)
    realized = {}
    for node_id in sorted(actions):
        action = actions[node_id]
        if action is None or action.op == KEEP:
            continue
        node = state.nodes.get(node_id)
        snap = state.snapshot()
        try:
            if node is None or node.kind not in STATEMENT_KINDS:
                raise DecodeError(f"node {node_id} is not an editable statement")
            tmpl = None
            if action.op in (RELABEL, INSERT_AFTER):
                if bank is None or action.template not in bank:
                    raise DecodeError(f"unknown fix template {action.template!r}")
                tmpl = bank[action.template]
            if not action_admissible(g, node, action, tmpl):
                raise DecodeError(f"{action} is not admissible on {node.name}")
            if g.kind == AST:
                _apply_ast(state, node, action, tmpl, g)
            else:
                _apply_flow(state, node, action, tmpl, g)
            if g.kind == CFG and not _flow_connected(state, node.scope):
                raise DecodeError(f"{action} on node {node_id} disconnects entry from exit")
            realized[node_id] = action
        except PipelineError as e:
            state.restore(snap)
            logger.info("Demoted %s on node %s to KEEP: %s", action, node_id, e)
    return state.finish(g.kind), realized


def statement_anchor(g, node_id):
    """Syntax index of the statement a node belongs to (the node itself for CFG/DFG)"""
    node = g.nodes[node_id]
    if g.kind != AST or node.kind in STATEMENT_KINDS:
        return node.syn_node
    parents = {}
    for e in g.edges:
        if e.kind == CHILD:
            parents[e.dst] = e.src
    current = node_id
    while current in parents:
        current = parents[current]
        if g.nodes[current].kind in STATEMENT_KINDS:
            return g.nodes[current].syn_node
    return None
