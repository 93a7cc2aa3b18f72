"""
CWE-keyed fix templates.

A template matches statement labels (``Assign:password``, ``*:shell``) and
either rewrites the matched statement (``rewrite``) or inserts a new statement
after it (``insert``). The emitted text is subject-language source with
``${capture}`` slots bound from the matched statement's subtree.
"""
import json
import re
from string import Template

from .code_graphs import (
    SIMPLE_STATEMENT_KINDS, categorize, label_kind, label_signature, node_label,
)
from .code_parser import ParseError, LexError, parse_text, string_value, unparse_expression
from .utils import PipelineError, data_path

_SLOT_RE = re.compile(r'\$\{(\w+)\}')
_STATEMENT_LABEL_KINDS_FOR_WILDCARD = ('Assign', 'ExprStmt', 'Return')
_STRONG_HASHES = {'md5': 'sha256', 'sha1': 'sha256'}


class TemplateMismatch(PipelineError):
    pass


class TemplateBankError(PipelineError):
    pass


def _call_parts(tree, call):
    node = tree.nodes[call]
    func = node.children[0]
    positional = [c for c in node.children[1:] if tree.nodes[c].kind != 'Keyword']
    keywords = [c for c in node.children[1:] if tree.nodes[c].kind == 'Keyword']
    return func, positional, keywords


def call_names(tree, call):
    """Identifiers naming a call: its function path plus keyword names"""
    func, _, keywords = _call_parts(tree, call)
    names = []
    for i in tree.walk(func):
        if tree.nodes[i].kind in ('Name', 'Attribute'):
            names.append(tree.nodes[i].payload)
    names.extend(tree.nodes[k].payload for k in keywords)
    return names


def call_terminal(tree, call):
    """Rightmost name of a call's function ('os.system' -> 'system')"""
    func = tree.nodes[tree.nodes[call].children[0]]
    return func.payload if func.kind in ('Name', 'Attribute') else ''


def find_call(tree, root, category=None):
    """First call under root (pre-order) whose names include the category"""
    for i in tree.walk(root):
        if tree.nodes[i].kind != 'Call':
            continue
        if category is None:
            return i
        if any(categorize(name) == category for name in call_names(tree, i)):
            return i
    return None


def _flatten_concat(tree, index):
    node = tree.nodes[index]
    if node.kind == 'BinOp' and node.payload == '+':
        return _flatten_concat(tree, node.children[0]) + _flatten_concat(tree, node.children[1])
    return [index]


def _strip_quotes(texts):
    for i in range(1, len(texts)):
        for quote in ('\'', '"'):
            if texts[i - 1].endswith(quote) and texts[i].startswith(quote):
                texts[i - 1] = texts[i - 1][:-1]
                texts[i] = texts[i][1:]
                break
    return texts


def parameterize_query(tree, index):
    """
    Split a dynamically built query into placeholder text and parameters.

    Handles ``"..." + x + "..."``, ``"... %s" % x`` and ``"... {}".format(x)``.

    Returns:
        (sql literal source, parameter list source) or None when the
        expression is not a dynamic query
    """
    node = tree.nodes[index]
    texts, params = [], []
    if node.kind == 'BinOp' and node.payload == '+':
        parts = _flatten_concat(tree, index)
        if not any(tree.nodes[p].kind == 'Str' for p in parts):
            return None
        current = ''
        for p in parts:
            if tree.nodes[p].kind == 'Str':
                current += string_value(tree.nodes[p].payload)
            else:
                texts.append(current)
                current = ''
                params.append(unparse_expression(tree, p))
        texts.append(current)
    elif node.kind == 'BinOp' and node.payload == '%' and tree.nodes[node.children[0]].kind == 'Str':
        texts = re.split(r'%[sdrf]', string_value(tree.nodes[node.children[0]].payload))
        right = tree.nodes[node.children[1]]
        items = right.children if right.kind == 'List' else (node.children[1],)
        params = [unparse_expression(tree, c) for c in items]
        if len(texts) != len(params) + 1:
            return None
    elif node.kind == 'Call':
        func, positional, _ = _call_parts(tree, index)
        f = tree.nodes[func]
        if not (f.kind == 'Attribute' and f.payload == 'format' and tree.nodes[f.children[0]].kind == 'Str'):
            return None
        texts = re.split(r'\{[^{}]*\}', string_value(tree.nodes[f.children[0]].payload))
        params = [unparse_expression(tree, c) for c in positional]
        if len(texts) != len(params) + 1:
            return None
    else:
        return None
    if not params:
        return None
    texts = _strip_quotes(texts)
    sql = texts[0] + ''.join('?' + t for t in texts[1:])
    literal = '"' + sql.replace('\\', '\\\\').replace('"', '\\"') + '"'
    return literal, '[' + ', '.join(params) + ']'


def strengthen_hash(tree, index):
    """Expression text with weak hash names swapped for sha256, or None"""
    overrides = {}
    for i in tree.walk(index):
        node = tree.nodes[i]
        if node.kind in ('Name', 'Attribute') and node.payload in _STRONG_HASHES:
            overrides[i] = _STRONG_HASHES[node.payload]
        elif node.kind == 'Str' and string_value(node.payload).lower() in _STRONG_HASHES:
            quote = node.payload[0]
            overrides[i] = f"{quote}sha256{quote}"
    if not overrides:
        return None
    return unparse_expression(tree, index, overrides)


def env_name(tree, target):
    node = tree.nodes[target]
    if node.kind not in ('Name', 'Attribute'):
        return None
    return re.sub(r'\W', '_', node.payload).upper()


class FixTemplate:
    """One CWE-keyed edit pattern"""

    def __init__(self, id, cwe, action, match, emit, target=None, call=None,
                 description='', example=None):
        if action not in ('rewrite', 'insert'):
            raise TemplateBankError(f"template {id}: unknown action {action!r}")
        if action == 'rewrite' and not target:
            raise TemplateBankError(f"template {id}: rewrite templates need a target signature")
        self.id = id
        self.cwe = int(cwe)
        self.action = action
        self.match = list(match)
        self.emit = emit
        self.target = target
        self.call = call
        self.description = description
        self.example = example or {}
        self.slots = tuple(dict.fromkeys(_SLOT_RE.findall(emit)))
        self.insert_label = self._dummy_label() if action == 'insert' else None

    @classmethod
    def load(cls, data):
        try:
            return cls(
                id=data['id'], cwe=data['cwe'], action=data.get('action', 'rewrite'),
                match=data['match'], emit=data['emit'], target=data.get('target'),
                call=data.get('call'), description=data.get('description', ''),
                example=data.get('example'),
            )
        except KeyError as e:
            raise TemplateBankError(f"template entry is missing field {e}")

    def to_dict(self):
        data = {'id': self.id, 'cwe': self.cwe, 'action': self.action, 'match': self.match,
                'emit': self.emit}
        if self.target:
            data['target'] = self.target
        if self.call:
            data['call'] = self.call
        return data

    def __repr__(self):
        return f"FixTemplate({self.id}, CWE-{self.cwe}, {self.action})"

    def _dummy_label(self):
        tree = self._parse_emitted(Template(self.emit).substitute({s: 'x' for s in self.slots}))
        return node_label(tree, tree.nodes[tree.root].children[0])

    def _parse_emitted(self, text):
        try:
            tree = parse_text(text + '\n')
        except (LexError, ParseError) as e:
            raise TemplateBankError(f"template {self.id} emits text that does not parse: {e}")
        if len(tree.nodes[tree.root].children) != 1:
            raise TemplateBankError(f"template {self.id} must emit exactly one statement")
        return tree

    def matches(self, label):
        kind, sig = label_kind(label), label_signature(label)
        for pattern in self.match:
            p_kind, _, p_sig = pattern.partition(':')
            kind_ok = kind == p_kind or (p_kind == '*' and kind in _STATEMENT_LABEL_KINDS_FOR_WILDCARD)
            if kind_ok and (p_sig == '*' or p_sig == sig):
                return True
        return False

    def target_label(self, label):
        if self.action == 'insert':
            return self.insert_label
        return f"{label_kind(label)}:{self.target}"

    def bind(self, tree, index):
        """Capture values for the statement at tree index; TemplateMismatch if a slot stays unbound"""
        node = tree.nodes[index]
        if node.kind not in SIMPLE_STATEMENT_KINDS:
            raise TemplateMismatch(f"template {self.id} cannot bind a {node.kind} statement")
        captures = {}
        rhs = None
        if node.kind == 'Assign':
            target, rhs = node.children
            captures['target'] = unparse_expression(tree, target)
            captures['lhs'] = captures['target'] + ' = '
            env = env_name(tree, target)
            if env:
                captures['target_env'] = env
        elif node.kind == 'ExprStmt':
            rhs = node.children[0]
            captures['lhs'] = ''
        elif node.kind == 'Return' and node.children:
            rhs = node.children[0]
            captures['lhs'] = 'return '
        if rhs is not None:
            captures['rhs'] = unparse_expression(tree, rhs)
            call = find_call(tree, rhs, self.call)
            if call is not None:
                func, positional, keywords = _call_parts(tree, call)
                captures['func'] = unparse_expression(tree, func)
                rendered_kw = [(tree.nodes[k].payload,
                                f"{tree.nodes[k].payload}={unparse_expression(tree, tree.nodes[k].children[0])}")
                               for k in keywords]
                rendered_pos = [unparse_expression(tree, p) for p in positional]
                captures['args'] = ', '.join(rendered_pos + [text for _, text in rendered_kw])
                captures['args_noshell'] = ', '.join(rendered_pos + [text for name, text in rendered_kw
                                                                     if name != 'shell'])
                if positional:
                    captures['arg0'] = rendered_pos[0]
                    query = parameterize_query(tree, positional[0])
                    if query:
                        captures['sql'], captures['param_list'] = query
            strong = strengthen_hash(tree, rhs)
            if strong:
                captures['rhs_strong'] = strong
        missing = [slot for slot in self.slots if slot not in captures]
        if missing:
            raise TemplateMismatch(f"template {self.id} cannot bind {', '.join(missing)}",
                                   line=node.span[0], col=node.span[1], template=self.id)
        return captures

    def render(self, tree, index):
        """Emitted statement text (no indentation) for the statement at tree index"""
        return Template(self.emit).substitute(self.bind(tree, index))

    def render_tree(self, tree, index):
        """SyntaxTree of a one-statement module holding the emitted statement"""
        text = self.render(tree, index)
        try:
            return self._parse_emitted(text)
        except TemplateBankError as e:
            raise TemplateMismatch(str(e), template=self.id)


class TemplateBank:
    """Ordered collection of fix templates, keyed by id"""

    def __init__(self, templates):
        self.id2template = {}
        for t in templates:
            if t.id in self.id2template:
                raise TemplateBankError(f"duplicate template id {t.id!r}")
            self.id2template[t.id] = t

    @classmethod
    def load(cls, path):
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                entries = json.load(fh)
        except (OSError, ValueError) as e:
            raise TemplateBankError(f"cannot read template bank {path}: {e}")
        if not isinstance(entries, list):
            raise TemplateBankError("template bank must be a JSON array")
        return cls(FixTemplate.load(entry) for entry in entries)

    @classmethod
    def default(cls):
        return cls.load(data_path('fix_templates.json'))

    def __contains__(self, template_id):
        return template_id in self.id2template

    def __getitem__(self, template_id):
        return self.id2template[template_id]

    def __iter__(self):
        return iter(self.id2template.values())

    def __len__(self):
        return len(self.id2template)

    @property
    def ids(self):
        return list(self.id2template)

    def for_label(self, label):
        return [t for t in self if t.matches(label)]

    def for_cwe(self, cwe):
        return [t for t in self if t.cwe == int(cwe)]

    def cwes(self):
        return sorted({t.cwe for t in self})
