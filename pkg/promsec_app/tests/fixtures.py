"""
Shared sample programs for the promsec_app test suite
"""
from functools import lru_cache

from promsec_app.code_graphs import CFG, graph_from_source
from promsec_app.code_parser import SourceUnit
from promsec_app.corpus import CorpusSpec, generate_corpus
from promsec_app.ggan import GganModel, train
from promsec_app.neural_kernel import TrainConfig
from promsec_app.optimizer_loop import mask_cwe
from promsec_app.security_analyzer import Analyzer, AnalyzerConfig


# CWE-89 on line 6, CWE-78 on line 7; both reach the function argument
VULNERABLE_LOOKUP = (
    'import os\n'
    'import sqlite3\n'
    'def lookup(name):\n'
    '    conn = sqlite3.connect("app.db")\n'
    '    cursor = conn.cursor()\n'
    '    cursor.execute("SELECT * FROM users WHERE name = \'" + name + "\'")\n'
    '    os.system("echo " + name)\n'
    '    return cursor.fetchall()\n'
)

SECURE_LOOKUP = (
    'import os\n'
    'import shlex\n'
    'import sqlite3\n'
    'def lookup(name):\n'
    '    conn = sqlite3.connect("app.db")\n'
    '    cursor = conn.cursor()\n'
    '    cursor.execute("SELECT * FROM users WHERE name = ?", params=[name])\n'
    '    os.system("echo " + shlex.quote(name))\n'
    '    return cursor.fetchall()\n'
)

HARDCODED_SECRETS = (
    'import hashlib\n'
    'import random\n'
    'password = "hunter2"\n'
    'api_key = "sk-live-1234"\n'
    'token = random.randint(0, 999999)\n'
    'digest = hashlib.md5(password.encode()).hexdigest()\n'
)

# Canonical layout: unparse_tree(parse_text(x)) == x
CANONICAL = (
    'import os\n'
    'from os import path as p\n'
    'def handler(name, count):\n'
    '    total = 0\n'
    '    for item in items:\n'
    '        total = total + item * 2\n'
    '    if not name:\n'
    '        return None\n'
    '    elif name in ["a", "b"]:\n'
    '        total = -total\n'
    '    else:\n'
    '        pass\n'
    '    while total > 10 and count != 0:\n'
    '        total = total - 1\n'
    '    try:\n'
    '        os.system("ls " + name)\n'
    '    except OSError as e:\n'
    '        print(e)\n'
    '    with open(name) as fh:\n'
    '        data = fh.read()\n'
    '    cursor.execute("SELECT ?", params=[name])\n'
    '    return data[0]\n'
)


def unit(text, id='sample'):
    return SourceUnit.from_text(text, id=id)


def tree_shape(tree):
    """Structure of a SyntaxTree without source spans"""
    return [(n.kind, n.children, n.payload) for n in tree.nodes]


def corpus_graphs(units, kind=CFG):
    return [graph_from_source(u.text, kind, unit_id=u.id) for u in units]


@lru_cache(maxsize=None)
def desk_scale_training(masked_cwe=None):
    """
    (model, history) of the default TrainConfig on the 50-program corpus,
    trained once per process; ``masked_cwe`` leaves out units flagged with it
    """
    analyzer = Analyzer(AnalyzerConfig())
    units = [p.unit for p in generate_corpus(CorpusSpec(count=50, seed=7))]
    if masked_cwe is not None:
        units = mask_cwe(units, masked_cwe, analyzer)
    cfg = TrainConfig()
    return train(GganModel.from_config(cfg), corpus_graphs(units), cfg, analyzer=analyzer)
