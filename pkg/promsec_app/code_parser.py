"""
Lexer, parser and unparser for the subject language.

The subject language is a small imperative subset with Python 3 surface
syntax: imports, single-target assignment, expression statements, function
definitions, return, if/elif/else, while, for-in, try/except, with and pass.
Blocks are introduced by a colon and a 4-space indented suite; tabs in
indentation are rejected.

Tokens keep the trivia (spaces, comments, blank lines) that precedes them in
``prefix`` so that ``''.join(t.prefix + t.lexeme for t in tokens)`` gives back
the original text.
"""
import re
from dataclasses import dataclass

from .utils import PipelineError, sha256_text


# Token kinds
IDENT = 'ident'
STRING = 'string-lit'
NUMBER = 'number-lit'
KEYWORD = 'keyword'
OPERATOR = 'operator'
PUNCT = 'punct'
NEWLINE = 'newline'
INDENT = 'indent'
DEDENT = 'dedent'
EOF = 'eof'

SUBJECT_LANGUAGE = 'subject-subset'
EXTERNAL_LANGUAGE = 'external'

ORIGINS = ('user-code', 'llm-generated', 'reconstructed')

KEYWORDS = frozenset({
    'import', 'from', 'as', 'def', 'return', 'if', 'elif', 'else', 'while',
    'for', 'in', 'try', 'except', 'with', 'pass', 'and', 'or', 'not',
    'True', 'False', 'None',
})

# Longest first so that '==' wins over '='
OPERATORS = ('==', '!=', '<=', '>=', '=', '<', '>', '+', '-', '*', '/', '%')
PUNCTUATION = frozenset('()[],:.')

_IDENT_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_]*')
_NUMBER_RE = re.compile(r'\d+(?:\.\d+)?')
_STRING_RE = re.compile(r'"(?:[^"\\\n]|\\.)*"|\'(?:[^\'\\\n]|\\.)*\'')

STATEMENT_KINDS = frozenset({
    'Assign', 'ExprStmt', 'Return', 'If', 'While', 'For', 'Try',
    'ExceptHandler', 'With', 'Pass', 'Import', 'ImportFrom', 'FunctionDef',
})
SIMPLE_STATEMENT_KINDS = frozenset({
    'Assign', 'ExprStmt', 'Return', 'Pass', 'Import', 'ImportFrom',
})

# kind -> (min children, max children); None means unbounded
ARITY = {
    'Module': (0, None),
    'Suite': (1, None),
    'FunctionDef': (2, 2),
    'Arguments': (0, None),
    'Arg': (0, 0),
    'If': (2, 3),
    'While': (2, 2),
    'For': (3, 3),
    'Try': (2, None),
    'ExceptHandler': (1, 2),
    'With': (2, None),
    'WithItem': (1, 1),
    'Import': (1, None),
    'ImportFrom': (1, None),
    'Alias': (0, 0),
    'Assign': (2, 2),
    'ExprStmt': (1, 1),
    'Return': (0, 1),
    'Pass': (0, 0),
    'Call': (1, None),
    'Keyword': (1, 1),
    'Attribute': (1, 1),
    'Subscript': (2, 2),
    'List': (0, None),
    'Name': (0, 0),
    'Str': (0, 0),
    'Num': (0, 0),
    'Bool': (0, 0),
    'NoneLit': (0, 0),
    'BinOp': (2, 2),
    'Compare': (2, 2),
    'BoolOp': (2, 2),
    'UnaryOp': (1, 1),
}


class LexError(PipelineError):
    pass


class ParseError(PipelineError):
    def __init__(self, message, line=None, col=None, expected=()):
        self.expected = tuple(sorted(set(expected)))
        if self.expected:
            message = f"{message}; expected one of: {', '.join(self.expected)}"
        super().__init__(message, line=line, col=col)


class MalformedAst(PipelineError):
    pass


@dataclass(frozen=True)
class SourceUnit:
    """A piece of source code flowing through the pipeline"""
    id: str
    text: str
    language: str = SUBJECT_LANGUAGE
    origin: str = 'user-code'

    @classmethod
    def from_text(cls, text, origin='user-code', id=None, language=SUBJECT_LANGUAGE):
        if id is None:
            id = f"{origin}-{sha256_text(text)[:12]}"
        return cls(id=id, text=text, language=language, origin=origin)

    @property
    def digest(self):
        return sha256_text(self.text)

    def line_count(self):
        if not self.text:
            return 0
        return self.text.count('\n') + (0 if self.text.endswith('\n') else 1)


@dataclass(frozen=True)
class Token:
    kind: str
    lexeme: str
    line: int
    col: int
    prefix: str = ''

    @property
    def end(self):
        return (self.line, self.col + len(self.lexeme))

    def __repr__(self):
        return f"Token({self.kind} {self.lexeme!r} @{self.line}:{self.col})"


@dataclass(frozen=True)
class SyntaxNode:
    kind: str
    children: tuple
    span: tuple  # (start line, start col, end line, end col), end exclusive
    payload: str = ''


@dataclass(frozen=True)
class SyntaxTree:
    """Nodes are stored in pre-order; the root is node 0."""
    nodes: tuple
    root: int = 0
    text: str = ''

    def __len__(self):
        return len(self.nodes)

    def node(self, index):
        return self.nodes[index]

    def children(self, index):
        return self.nodes[index].children

    def walk(self, index=None):
        """Pre-order indices of the subtree rooted at index"""
        stack = [self.root if index is None else index]
        while stack:
            i = stack.pop()
            yield i
            stack.extend(reversed(self.nodes[i].children))

    def parents(self):
        parent = [None] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            for c in n.children:
                parent[c] = i
        return parent

    def statements(self):
        return [i for i in self.walk() if self.nodes[i].kind in STATEMENT_KINDS]


# ==================== Lexer ====================

class _Lexer:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.line = 1
        self.line_start = 0
        self.depth = 0
        self.indents = [0]
        self.trivia = []
        self.tokens = []

    def error(self, message):
        raise LexError(message, line=self.line, col=self.pos - self.line_start + 1)

    def emit(self, kind, lexeme, start):
        self.tokens.append(Token(kind, lexeme, self.line, start - self.line_start + 1, ''.join(self.trivia)))
        self.trivia = []

    def emit_synthetic(self, kind):
        self.tokens.append(Token(kind, '', self.line, self.pos - self.line_start + 1, ''))

    def newline(self):
        self.pos += 1
        self.line += 1
        self.line_start = self.pos

    def run(self):
        text = self.text
        at_line_start = True
        while self.pos < len(text):
            if at_line_start and self.depth == 0:
                at_line_start = not self.line_indent()
                continue
            ch = text[self.pos]
            if ch in ' \t\r':
                self.trivia.append(ch)
                self.pos += 1
            elif ch == '#':
                end = text.find('\n', self.pos)
                end = len(text) if end < 0 else end
                self.trivia.append(text[self.pos:end])
                self.pos = end
            elif ch == '\n':
                if self.depth > 0:
                    self.trivia.append(ch)
                    self.newline()
                else:
                    self.emit(NEWLINE, ch, self.pos)
                    self.newline()
                    at_line_start = True
            elif ch == '\\':
                self.error("line continuation is not supported")
            elif ch in '"\'':
                m = _STRING_RE.match(text, self.pos)
                if not m:
                    self.error("unterminated string literal")
                self.emit(STRING, m.group(), self.pos)
                self.pos = m.end()
            elif ch.isdigit():
                m = _NUMBER_RE.match(text, self.pos)
                self.emit(NUMBER, m.group(), self.pos)
                self.pos = m.end()
            elif ch == '_' or ('a' <= ch <= 'z') or ('A' <= ch <= 'Z'):
                m = _IDENT_RE.match(text, self.pos)
                word = m.group()
                self.emit(KEYWORD if word in KEYWORDS else IDENT, word, self.pos)
                self.pos = m.end()
            elif ch in PUNCTUATION:
                if ch in '([':
                    self.depth += 1
                elif ch in ')]':
                    if self.depth == 0:
                        self.error(f"unbalanced {ch!r}")
                    self.depth -= 1
                self.emit(PUNCT, ch, self.pos)
                self.pos += 1
            else:
                for op in OPERATORS:
                    if text.startswith(op, self.pos):
                        self.emit(OPERATOR, op, self.pos)
                        self.pos += len(op)
                        break
                else:
                    self.error(f"illegal character {ch!r}")
        if self.depth > 0:
            self.error("unexpected end of input inside brackets")
        if self.tokens and self.tokens[-1].kind != NEWLINE:
            self.emit_synthetic(NEWLINE)
        while len(self.indents) > 1:
            self.indents.pop()
            self.emit_synthetic(DEDENT)
        self.emit(EOF, '', self.pos)
        return self.tokens

    def line_indent(self):
        """Handle the start of a physical line. Returns True when a logical line begins."""
        text = self.text
        j = self.pos
        while j < len(text) and text[j] == ' ':
            j += 1
        if j < len(text) and text[j] == '\t':
            self.pos = j
            self.error("tab characters are not allowed in indentation")
        if j >= len(text):
            self.trivia.append(text[self.pos:j])
            self.pos = j
            return True
        if text[j] in '\r\n#':
            end = text.find('\n', j)
            if end < 0:
                self.trivia.append(text[self.pos:])
                self.pos = len(text)
                return True
            self.trivia.append(text[self.pos:end + 1])
            self.pos = end
            self.newline()
            return False
        width = j - self.pos
        self.trivia.append(text[self.pos:j])
        self.pos = j
        if width > self.indents[-1]:
            self.indents.append(width)
            self.emit_synthetic(INDENT)
        elif width < self.indents[-1]:
            while width < self.indents[-1]:
                self.indents.pop()
                self.emit_synthetic(DEDENT)
            if width != self.indents[-1]:
                self.error("inconsistent dedent")
        return True


def lex(unit):
    """
    Tokenize a subject-language unit.

    Args:
        unit: SourceUnit (or a plain string)

    Returns:
        List of Token ending with an eof token
    """
    if isinstance(unit, str):
        text = unit
    else:
        if unit.language != SUBJECT_LANGUAGE:
            raise LexError(f"unit {unit.id} is not in the subject language")
        text = unit.text
    return _Lexer(text).run()


# ==================== Parser ====================

_COMPARE_OPS = ('==', '!=', '<', '>', '<=', '>=')
_PRECEDENCE = {'or': 1, 'and': 2, 'not': 3, 'compare': 4, '+': 5, '-': 5, '*': 6, '/': 6, '%': 6}


class _Parser:
    def __init__(self, tokens, text):
        self.tokens = tokens
        self.text = text
        self.i = 0
        self.last = None
        self.raw = []  # [kind, children, span, payload]

    # -- token helpers --

    def peek(self, offset=0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def at(self, kind, lexeme=None):
        tok = self.peek()
        return tok.kind == kind and (lexeme is None or tok.lexeme == lexeme)

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        if tok.kind not in (NEWLINE, INDENT, DEDENT, EOF):
            self.last = tok
        return tok

    def expect(self, kind, lexeme=None):
        if not self.at(kind, lexeme):
            self.fail(lexeme or kind)
        return self.advance()

    def accept(self, kind, lexeme=None):
        if self.at(kind, lexeme):
            return self.advance()
        return None

    def fail(self, *expected):
        tok = self.peek()
        shown = tok.lexeme or tok.kind
        raise ParseError(f"unexpected {shown!r}", line=tok.line, col=tok.col, expected=expected)

    def node(self, kind, children, start, payload=''):
        """start is a (line, col) pair; the node ends at the last consumed token."""
        end = self.last.end if self.last is not None else start
        self.raw.append([kind, list(children), (start[0], start[1], end[0], end[1]), payload])
        return len(self.raw) - 1

    def start_of(self, tok):
        return (tok.line, tok.col)

    # -- statements --

    def module(self):
        stmts = []
        while not self.at(EOF):
            if self.accept(NEWLINE):
                continue
            if self.at(INDENT):
                self.fail('statement')
            stmts.append(self.statement())
        lines = self.text.split('\n')
        end = (len(lines), len(lines[-1]) + 1)
        self.raw.append(['Module', stmts, (1, 1, end[0], end[1]), ''])
        return len(self.raw) - 1

    def statement(self):
        tok = self.peek()
        if tok.kind == KEYWORD:
            handler = {
                'def': self.funcdef, 'if': self.if_stmt, 'while': self.while_stmt,
                'for': self.for_stmt, 'try': self.try_stmt, 'with': self.with_stmt,
            }.get(tok.lexeme)
            if handler:
                return handler()
        index = self.simple_statement()
        self.expect(NEWLINE)
        return index

    def simple_statement(self):
        tok = self.peek()
        start = self.start_of(tok)
        if self.accept(KEYWORD, 'pass'):
            return self.node('Pass', [], start)
        if self.accept(KEYWORD, 'return'):
            if self.at(NEWLINE):
                return self.node('Return', [], start)
            return self.node('Return', [self.expression()], start)
        if self.accept(KEYWORD, 'import'):
            aliases = [self.alias(dotted=True)]
            while self.accept(PUNCT, ','):
                aliases.append(self.alias(dotted=True))
            return self.node('Import', aliases, start)
        if self.accept(KEYWORD, 'from'):
            module = self.dotted_name()
            self.expect(KEYWORD, 'import')
            aliases = [self.alias(dotted=False)]
            while self.accept(PUNCT, ','):
                aliases.append(self.alias(dotted=False))
            return self.node('ImportFrom', aliases, start, module)
        expr = self.expression()
        if self.accept(OPERATOR, '='):
            if self.raw[expr][0] not in ('Name', 'Attribute', 'Subscript'):
                raise ParseError("invalid assignment target", line=tok.line, col=tok.col)
            value = self.expression()
            return self.node('Assign', [expr, value], start)
        return self.node('ExprStmt', [expr], start)

    def dotted_name(self):
        parts = [self.expect(IDENT).lexeme]
        while self.accept(PUNCT, '.'):
            parts.append(self.expect(IDENT).lexeme)
        return '.'.join(parts)

    def alias(self, dotted):
        start = self.start_of(self.peek())
        name = self.dotted_name() if dotted else self.expect(IDENT).lexeme
        if self.accept(KEYWORD, 'as'):
            name = f"{name} as {self.expect(IDENT).lexeme}"
        return self.node('Alias', [], start, name)

    def suite(self):
        self.expect(PUNCT, ':')
        self.expect(NEWLINE)
        self.expect(INDENT)
        start = self.start_of(self.peek())
        stmts = []
        while not self.at(DEDENT):
            if self.at(EOF):
                self.fail('dedent')
            stmts.append(self.statement())
        self.advance()
        return self.node('Suite', stmts, start)

    def funcdef(self):
        start = self.start_of(self.advance())
        name = self.expect(IDENT).lexeme
        args_start = self.start_of(self.expect(PUNCT, '('))
        params = []
        while not self.at(PUNCT, ')'):
            tok = self.expect(IDENT)
            params.append(self.node('Arg', [], self.start_of(tok), tok.lexeme))
            if not self.accept(PUNCT, ','):
                break
        self.expect(PUNCT, ')')
        arguments = self.node('Arguments', params, args_start)
        body = self.suite()
        return self.node('FunctionDef', [arguments, body], start, name)

    def if_stmt(self, keyword='if'):
        start = self.start_of(self.advance())
        test = self.expression()
        body = self.suite()
        children = [test, body]
        if self.at(KEYWORD, 'elif'):
            elif_start = self.start_of(self.peek())
            nested = self.if_stmt('elif')
            children.append(self.node('Suite', [nested], elif_start))
        elif self.accept(KEYWORD, 'else'):
            children.append(self.suite())
        return self.node('If', children, start, 'elif' if keyword == 'elif' else '')

    def while_stmt(self):
        start = self.start_of(self.advance())
        test = self.expression()
        return self.node('While', [test, self.suite()], start)

    def for_stmt(self):
        start = self.start_of(self.advance())
        tok = self.expect(IDENT)
        target = self.node('Name', [], self.start_of(tok), tok.lexeme)
        self.expect(KEYWORD, 'in')
        iterable = self.expression()
        return self.node('For', [target, iterable, self.suite()], start)

    def try_stmt(self):
        start = self.start_of(self.advance())
        children = [self.suite()]
        while self.at(KEYWORD, 'except'):
            h_start = self.start_of(self.advance())
            h_children = []
            name = ''
            if not self.at(PUNCT, ':'):
                h_children.append(self.expression())
                if self.accept(KEYWORD, 'as'):
                    name = self.expect(IDENT).lexeme
            h_children.append(self.suite())
            children.append(self.node('ExceptHandler', h_children, h_start, name))
        if len(children) == 1:
            self.fail('except')
        return self.node('Try', children, start)

    def with_stmt(self):
        start = self.start_of(self.advance())
        items = []
        while True:
            i_start = self.start_of(self.peek())
            expr = self.expression()
            name = ''
            if self.accept(KEYWORD, 'as'):
                name = self.expect(IDENT).lexeme
            items.append(self.node('WithItem', [expr], i_start, name))
            if not self.accept(PUNCT, ','):
                break
        return self.node('With', items + [self.suite()], start)

    # -- expressions --

    def expression(self):
        return self.or_expr()

    def or_expr(self):
        start = self.start_of(self.peek())
        left = self.and_expr()
        while self.accept(KEYWORD, 'or'):
            left = self.node('BoolOp', [left, self.and_expr()], start, 'or')
        return left

    def and_expr(self):
        start = self.start_of(self.peek())
        left = self.not_expr()
        while self.accept(KEYWORD, 'and'):
            left = self.node('BoolOp', [left, self.not_expr()], start, 'and')
        return left

    def not_expr(self):
        start = self.start_of(self.peek())
        if self.accept(KEYWORD, 'not'):
            return self.node('UnaryOp', [self.not_expr()], start, 'not')
        return self.comparison()

    def comparison(self):
        start = self.start_of(self.peek())
        left = self.arith()
        while True:
            tok = self.peek()
            if tok.kind == OPERATOR and tok.lexeme in _COMPARE_OPS:
                op = self.advance().lexeme
            elif tok.kind == KEYWORD and tok.lexeme == 'in':
                op = self.advance().lexeme
            else:
                return left
            left = self.node('Compare', [left, self.arith()], start, op)

    def arith(self):
        start = self.start_of(self.peek())
        left = self.term()
        while self.peek().kind == OPERATOR and self.peek().lexeme in ('+', '-'):
            op = self.advance().lexeme
            left = self.node('BinOp', [left, self.term()], start, op)
        return left

    def term(self):
        start = self.start_of(self.peek())
        left = self.unary()
        while self.peek().kind == OPERATOR and self.peek().lexeme in ('*', '/', '%'):
            op = self.advance().lexeme
            left = self.node('BinOp', [left, self.unary()], start, op)
        return left

    def unary(self):
        start = self.start_of(self.peek())
        if self.accept(OPERATOR, '-'):
            return self.node('UnaryOp', [self.unary()], start, '-')
        return self.postfix()

    def postfix(self):
        start = self.start_of(self.peek())
        expr = self.atom()
        while True:
            if self.accept(PUNCT, '('):
                expr = self.call_args(expr, start)
            elif self.accept(PUNCT, '.'):
                attr = self.expect(IDENT).lexeme
                expr = self.node('Attribute', [expr], start, attr)
            elif self.accept(PUNCT, '['):
                index = self.expression()
                self.expect(PUNCT, ']')
                expr = self.node('Subscript', [expr, index], start)
            else:
                return expr

    def call_args(self, func, start):
        args, keywords = [], []
        while not self.at(PUNCT, ')'):
            if self.at(IDENT) and self.peek(1).kind == OPERATOR and self.peek(1).lexeme == '=':
                tok = self.advance()
                self.advance()
                value = self.expression()
                keywords.append(self.node('Keyword', [value], self.start_of(tok), tok.lexeme))
            else:
                if keywords:
                    self.fail('keyword argument')
                args.append(self.expression())
            if not self.accept(PUNCT, ','):
                break
        self.expect(PUNCT, ')')
        return self.node('Call', [func] + args + keywords, start)

    def atom(self):
        tok = self.peek()
        start = self.start_of(tok)
        if tok.kind == IDENT:
            self.advance()
            return self.node('Name', [], start, tok.lexeme)
        if tok.kind == NUMBER:
            self.advance()
            return self.node('Num', [], start, tok.lexeme)
        if tok.kind == STRING:
            self.advance()
            return self.node('Str', [], start, tok.lexeme)
        if tok.kind == KEYWORD and tok.lexeme in ('True', 'False'):
            self.advance()
            return self.node('Bool', [], start, tok.lexeme)
        if tok.kind == KEYWORD and tok.lexeme == 'None':
            self.advance()
            return self.node('NoneLit', [], start, 'None')
        if self.accept(PUNCT, '('):
            inner = self.expression()
            self.expect(PUNCT, ')')
            return inner
        if self.accept(PUNCT, '['):
            items = []
            while not self.at(PUNCT, ']'):
                items.append(self.expression())
                if not self.accept(PUNCT, ','):
                    break
            self.expect(PUNCT, ']')
            return self.node('List', items, start)
        self.fail('identifier', 'literal', '(', '[')


def _renumber(raw, root, text):
    """Rebuild the raw node table in pre-order so the root is node 0."""
    order = []
    stack = [root]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(reversed(raw[i][1]))
    new_index = {old: new for new, old in enumerate(order)}
    nodes = tuple(
        SyntaxNode(kind=raw[old][0], children=tuple(new_index[c] for c in raw[old][1]),
                   span=raw[old][2], payload=raw[old][3])
        for old in order
    )
    return SyntaxTree(nodes=nodes, root=0, text=text)


def parse(tokens):
    """
    Parse a token stream produced by lex.

    Returns:
        SyntaxTree in pre-order with a Module root spanning the whole unit

    Raises:
        ParseError with the expected-token set and location
    """
    text = ''.join(t.prefix + t.lexeme for t in tokens)
    parser = _Parser(tokens, text)
    root = parser.module()
    return _renumber(parser.raw, root, text)


def parse_text(text):
    return parse(lex(text))


# ==================== Unparser ====================

def check_arity(kind, count):
    if kind not in ARITY:
        raise MalformedAst(f"unknown node kind {kind!r}")
    low, high = ARITY[kind]
    if count < low or (high is not None and count > high):
        raise MalformedAst(f"{kind} node has {count} children")


def _expr_precedence(kind, payload):
    if kind in ('Name', 'Str', 'Num', 'Bool', 'NoneLit', 'List'):
        return 9
    if kind in ('Call', 'Attribute', 'Subscript'):
        return 8
    if kind == 'UnaryOp':
        return 7 if payload == '-' else 3
    if kind == 'BinOp':
        return _PRECEDENCE[payload]
    if kind == 'Compare':
        return 4
    if kind == 'BoolOp':
        return _PRECEDENCE[payload]
    raise MalformedAst(f"{kind} is not an expression")


class _Unparser:
    def __init__(self, kinds, children, payloads):
        self.kinds = kinds
        self.children = children
        self.payloads = payloads

    def kids(self, i):
        kids = self.children[i]
        check_arity(self.kinds[i], len(kids))
        return kids

    def expr(self, i, min_prec=0):
        kind, payload = self.kinds[i], self.payloads[i]
        kids = self.kids(i)
        prec = _expr_precedence(kind, payload)
        if kind in ('Name', 'Str', 'Num', 'Bool'):
            out = payload
        elif kind == 'NoneLit':
            out = 'None'
        elif kind == 'List':
            out = '[' + ', '.join(self.expr(c) for c in kids) + ']'
        elif kind == 'Call':
            parts = []
            for c in kids[1:]:
                if self.kinds[c] == 'Keyword':
                    parts.append(f"{self.payloads[c]}={self.expr(self.kids(c)[0])}")
                else:
                    parts.append(self.expr(c))
            out = f"{self.expr(kids[0], 8)}({', '.join(parts)})"
        elif kind == 'Attribute':
            out = f"{self.expr(kids[0], 8)}.{payload}"
        elif kind == 'Subscript':
            out = f"{self.expr(kids[0], 8)}[{self.expr(kids[1])}]"
        elif kind == 'UnaryOp':
            sep = ' ' if payload == 'not' else ''
            out = f"{payload}{sep}{self.expr(kids[0], prec)}"
        elif kind == 'Compare':
            out = f"{self.expr(kids[0], 5)} {payload} {self.expr(kids[1], 5)}"
        else:
            out = f"{self.expr(kids[0], prec)} {payload} {self.expr(kids[1], prec + 1)}"
        return f"({out})" if prec < min_prec else out

    def suite(self, i, depth):
        if self.kinds[i] != 'Suite':
            raise MalformedAst(f"expected Suite, found {self.kinds[i]}")
        lines = []
        for c in self.kids(i):
            lines.extend(self.stmt(c, depth))
        return lines

    def stmt(self, i, depth):
        pad = '    ' * depth
        kind, payload = self.kinds[i], self.payloads[i]
        kids = self.kids(i)
        if kind == 'Pass':
            return [pad + 'pass']
        if kind == 'Return':
            return [pad + ('return ' + self.expr(kids[0]) if kids else 'return')]
        if kind == 'ExprStmt':
            return [pad + self.expr(kids[0])]
        if kind == 'Assign':
            return [f"{pad}{self.expr(kids[0])} = {self.expr(kids[1])}"]
        if kind == 'Import':
            return [pad + 'import ' + ', '.join(self.payloads[c] for c in kids)]
        if kind == 'ImportFrom':
            return [f"{pad}from {payload} import " + ', '.join(self.payloads[c] for c in kids)]
        if kind == 'FunctionDef':
            params = ', '.join(self.payloads[c] for c in self.kids(kids[0]))
            return [f"{pad}def {payload}({params}):"] + self.suite(kids[1], depth + 1)
        if kind == 'If':
            return self.if_chain(i, depth, 'if')
        if kind == 'While':
            return [f"{pad}while {self.expr(kids[0])}:"] + self.suite(kids[1], depth + 1)
        if kind == 'For':
            return ([f"{pad}for {self.expr(kids[0])} in {self.expr(kids[1])}:"]
                    + self.suite(kids[2], depth + 1))
        if kind == 'Try':
            lines = [pad + 'try:'] + self.suite(kids[0], depth + 1)
            for h in kids[1:]:
                h_kids = self.kids(h)
                header = 'except'
                if len(h_kids) == 2:
                    header += ' ' + self.expr(h_kids[0])
                    if self.payloads[h]:
                        header += ' as ' + self.payloads[h]
                lines.append(f"{pad}{header}:")
                lines.extend(self.suite(h_kids[-1], depth + 1))
            return lines
        if kind == 'With':
            items = []
            for item in kids[:-1]:
                text = self.expr(self.kids(item)[0])
                if self.payloads[item]:
                    text += ' as ' + self.payloads[item]
                items.append(text)
            return [f"{pad}with {', '.join(items)}:"] + self.suite(kids[-1], depth + 1)
        raise MalformedAst(f"{kind} is not a statement")

    def if_chain(self, i, depth, keyword):
        pad = '    ' * depth
        kids = self.kids(i)
        lines = [f"{pad}{keyword} {self.expr(kids[0])}:"] + self.suite(kids[1], depth + 1)
        if len(kids) == 3:
            orelse = kids[2]
            inner = self.kids(orelse)
            if len(inner) == 1 and self.kinds[inner[0]] == 'If' and self.payloads[inner[0]] == 'elif':
                lines.extend(self.if_chain(inner[0], depth, 'elif'))
            else:
                lines.append(pad + 'else:')
                lines.extend(self.suite(orelse, depth + 1))
        return lines

    def module(self, root):
        if self.kinds[root] != 'Module':
            raise MalformedAst(f"root must be Module, found {self.kinds[root]}")
        lines = []
        for c in self.kids(root):
            lines.extend(self.stmt(c, 0))
        return '\n'.join(lines) + '\n' if lines else ''


def unparse_nodes(kinds, children, payloads, root=0):
    """Emit source text for a node table given as parallel lists."""
    return _Unparser(kinds, children, payloads).module(root)


def unparse_tree(tree):
    return unparse_nodes(
        [n.kind for n in tree.nodes], [n.children for n in tree.nodes],
        [n.payload for n in tree.nodes], tree.root,
    )


def unparse_statement(tree, index, depth=0):
    """Source lines for a single statement subtree"""
    u = _Unparser([n.kind for n in tree.nodes], [n.children for n in tree.nodes],
                  [n.payload for n in tree.nodes])
    return u.stmt(index, depth)


def string_value(lexeme):
    """Decoded value of a Str payload"""
    body = lexeme[1:-1]
    return re.sub(r'\\(.)', lambda m: {'n': '\n', 't': '\t'}.get(m.group(1), m.group(1)), body)


def unparse_expression(tree, index, payload_overrides=None):
    """Source text of one expression subtree; payload_overrides maps node index -> payload"""
    payloads = [n.payload for n in tree.nodes]
    for i, value in (payload_overrides or {}).items():
        payloads[i] = value
    u = _Unparser([n.kind for n in tree.nodes], [n.children for n in tree.nodes], payloads)
    return u.expr(index)
