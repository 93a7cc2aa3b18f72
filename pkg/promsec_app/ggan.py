"""
Graph GAN that proposes security fixes as per-node edit actions.

The generator encodes a GraphDoc with two GraphConv layers and emits, for every
node, a distribution over an action vocabulary derived from the fix template
bank (KEEP, DELETE, RELABEL(template), INSERT_AFTER(template)). The argmax of
that distribution is decoded into an edited graph; the distribution itself
mixes per-action feature rows into a soft graph through which gradients reach
the generator. The discriminator scores graphs with two GraphConv layers, mean
pooling and a sigmoid readout.

A fixed template-affinity prior is added to the action logits so that an
untrained model already prefers admissible template fixes over KEEP.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .code_graphs import (
    AST, DELETE, INSERT_AFTER, KEEP, RELABEL, EditAction, GraphInvariantError, action_admissible,
    default_vocab, edit_graph, featurize, node_label, parse_graph_kind,
)
from .code_parser import STATEMENT_KINDS, SourceUnit
from .code_reconstruction import reconstruct
from .fix_templates import TemplateBank, TemplateMismatch
from .neural_kernel import (
    CorruptCheckpoint, GraphBatch, Mat, NeuralError, NonFiniteGradient, TrainConfig, VersionMismatch,
    ZeroVector, add, add_scalar, adv_loss, concat_rows, contrastive_loss, cosine, disc_loss,
    graph_conv, load_params, matmul, mean, mean_pool, mixture, mul_scalar, save_params, sgd_step,
    sigmoid, softmax_rows, undirected_neighbors,
)
from .security_analyzer import Analyzer
from .utils import PipelineError, ensure_dir, read_text, write_text

logger = logging.getLogger(__name__)

SIDECAR_SUFFIX = '.json'
SIDECAR_FORMAT = 'promsec-ggan'
MASKED = -1e9

GENERATOR_PARAMS = ('self1', 'neigh1', 'self2', 'neigh2', 'head', 'bias')
DISCRIMINATOR_PARAMS = ('self1', 'neigh1', 'self2', 'neigh2', 'readout', 'bias')


class GganError(PipelineError):
    pass


class NonFiniteLoss(NeuralError):
    pass


def source_unit(g):
    """SourceUnit a graph was built from"""
    if g.tree is None:
        raise GganError(f"{g.kind} graph {g.unit_id} carries no syntax tree")
    return SourceUnit.from_text(g.tree.text, id=g.unit_id)


def _glorot(rng, rows, cols, gain=1.0):
    scale = gain * np.sqrt(2.0 / (rows + cols))
    return Mat.param(rng.normal(0.0, scale, size=(rows, cols)))


class GganModel:
    """Generator and discriminator weights plus the action vocabulary they score"""

    PRIOR_KEEP = 2.0
    PRIOR_TEMPLATE = 4.0
    # first generator layer gain; steps on the cosine-only contrastive loss scale with 1/gain**2
    ENCODER_GAIN = 0.1

    def __init__(self, vocab=None, bank=None, graph_kind='cfg', hidden_dim=64, seed=7,
                 prior_keep=None, prior_template=None):
        self.vocab = vocab or default_vocab()
        self.bank = bank or TemplateBank.default()
        self.graph_kind = parse_graph_kind(graph_kind)
        self.hidden_dim = int(hidden_dim)
        self.seed = int(seed)
        self.prior_keep = self.PRIOR_KEEP if prior_keep is None else float(prior_keep)
        self.prior_template = self.PRIOR_TEMPLATE if prior_template is None else float(prior_template)
        self.actions = [EditAction(KEEP), EditAction(DELETE)]
        self.actions += [EditAction(RELABEL, template=t.id) for t in self.bank if t.action == 'rewrite']
        self.actions += [EditAction(INSERT_AFTER, template=t.id) for t in self.bank if t.action == 'insert']

        rng = np.random.default_rng(self.seed)
        dim, h, a = self.vocab.dim, self.hidden_dim, len(self.actions)
        self.generator = {
            'self1': _glorot(rng, dim, h, self.ENCODER_GAIN),
            'neigh1': _glorot(rng, dim, h, self.ENCODER_GAIN),
            'self2': _glorot(rng, h, h),
            'neigh2': _glorot(rng, h, h),
            'head': _glorot(rng, h, a),
            'bias': Mat.param(np.zeros((1, a))),
        }
        self.discriminator = {
            'self1': _glorot(rng, dim, h),
            'neigh1': _glorot(rng, dim, h),
            'self2': _glorot(rng, h, h),
            'neigh2': _glorot(rng, h, h),
            'readout': _glorot(rng, h, 1),
            'bias': Mat.param(np.zeros((1, 1))),
        }

    @classmethod
    def from_config(cls, cfg, graph_kind='cfg', vocab=None, bank=None):
        return cls(vocab, bank, graph_kind, cfg.hidden_dim, cfg.seed)

    def __repr__(self):
        return f"GganModel({self.graph_kind}, hidden={self.hidden_dim}, actions={len(self.actions)})"

    def generator_params(self):
        return [self.generator[name] for name in GENERATOR_PARAMS]

    def discriminator_params(self):
        return [self.discriminator[name] for name in DISCRIMINATOR_PARAMS]

    def parameters(self):
        return self.generator_params() + self.discriminator_params()

    def snapshot(self):
        return [p.values.copy() for p in self.parameters()]

    def restore(self, snapshot):
        for p, values in zip(self.parameters(), snapshot):
            p.values = values.copy()
            p.zero_grad()

    def is_finite(self):
        return all(p.is_finite() for p in self.parameters())

    def graph_batch(self, g):
        if not g.nodes:
            raise GganError(f"{g.kind} graph {g.unit_id} has no nodes")
        features = Mat.const(featurize(g, self.vocab))
        neighbors = undirected_neighbors(len(g.nodes), [(e.src, e.dst) for e in g.edges])
        return GraphBatch(features, neighbors, [(0, len(g.nodes))])

    def action_prior(self, g):
        """
        n x A additive prior: MASKED for inadmissible actions, PRIOR_KEEP for KEEP,
        PRIOR_TEMPLATE for admissible template actions, 0 for DELETE
        """
        prior = np.full((len(g.nodes), len(self.actions)), MASKED)
        prior[:, 0] = self.prior_keep
        siblings = _next_statement(g.tree) if g.tree is not None else {}
        for node in g.nodes:
            if node.kind not in STATEMENT_KINDS:
                continue
            for a, action in enumerate(self.actions[1:], start=1):
                tmpl = self.bank[action.template] if action.template else None
                if not action_admissible(g, node, action, tmpl):
                    continue
                if tmpl is not None and not _bindable(g.tree, node.syn_node, tmpl):
                    continue
                if action.op == INSERT_AFTER:
                    follower = siblings.get(node.syn_node)
                    if follower is not None and node_label(g.tree, follower) == tmpl.insert_label:
                        continue
                prior[node.id, a] = 0.0 if action.op == DELETE else self.prior_template
        return prior

    def action_bases(self, g, features):
        """A x n x dim feature rows each node would carry under each action"""
        n = len(g.nodes)
        bases = np.zeros((len(self.actions), n, self.vocab.dim))
        bases[0] = features
        for a, action in enumerate(self.actions):
            if action.op == KEEP or action.op == DELETE:
                continue
            tmpl = self.bank[action.template]
            bases[a] = features
            for node in g.nodes:
                if node.kind not in STATEMENT_KINDS or not tmpl.matches(node.name):
                    continue
                if action.op == RELABEL:
                    bases[a, node.id] = 0.0
                    bases[a, node.id, self.vocab.index(_relabel_target(g, node, tmpl))] = 1.0
                else:
                    bases[a, node.id] *= 0.5
                    bases[a, node.id, self.vocab.index(tmpl.insert_label)] += 0.5
        return bases


def _next_statement(tree):
    following = {}
    for node in tree.nodes:
        kids = node.children
        for a, b in zip(kids, kids[1:]):
            following[a] = b
    return following


def _bindable(tree, syn_node, tmpl):
    try:
        tmpl.render_tree(tree, syn_node)
    except TemplateMismatch:
        return False
    return True


def _relabel_target(g, node, tmpl):
    if g.kind == AST:
        try:
            rendered = tmpl.render_tree(g.tree, node.syn_node)
            return node_label(rendered, rendered.nodes[rendered.root].children[0])
        except TemplateMismatch:
            return node.name
    return tmpl.target_label(node.name)


@dataclass
class ActionPlan:
    """Soft per-node action distribution and its hard decode"""
    graph_id: str
    actions: list
    probs: Mat
    soft_features: Mat
    batch: GraphBatch
    decoded: dict = field(default_factory=dict)
    realized: dict = field(default_factory=dict)

    def distribution(self, node_id):
        return self.probs.values[node_id]

    def hard_actions(self):
        return [self.actions[int(i)] for i in np.argmax(self.probs.values, axis=1)]

    def is_identity(self):
        return not self.realized

    def to_dict(self):
        return {
            'graph_id': self.graph_id,
            'decoded': {str(k): str(v) for k, v in sorted(self.decoded.items())},
            'realized': {str(k): str(v) for k, v in sorted(self.realized.items())},
        }


@dataclass(frozen=True)
class ScorePair:
    """s = alpha * delta_k + beta * S; S may be a Mat so that the composite keeps its gradient"""
    delta_k: int
    similarity: object
    alpha: float = 1.0
    beta: float = 1.0

    @property
    def composite(self):
        if isinstance(self.similarity, Mat):
            return add_scalar(mul_scalar(self.similarity, self.beta), self.alpha * self.delta_k)
        return self.alpha * self.delta_k + self.beta * float(self.similarity)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss_g: float
    loss_d: float
    mean_delta_k: float

    def to_dict(self):
        return {'epoch': self.epoch, 'loss_g': self.loss_g, 'loss_d': self.loss_d,
                'mean_delta_k': self.mean_delta_k}


def _encode(params, batch, features):
    h1 = graph_conv(params['self1'], params['neigh1'], batch, features)
    return graph_conv(params['self2'], params['neigh2'], batch, h1)


def _plan(model, g):
    if parse_graph_kind(g.kind) != model.graph_kind:
        raise GganError(f"model works on {model.graph_kind} graphs, got {g.kind}")
    batch = model.graph_batch(g)
    p = model.generator
    logits = add(matmul(_encode(p, batch, batch.features), p['head']), p['bias'])
    probs = softmax_rows(add(logits, Mat.const(model.action_prior(g))))
    soft = mixture(probs, model.action_bases(g, batch.features.values))
    return ActionPlan(g.unit_id, model.actions, probs, soft, batch)


def _decode(model, g, plan):
    decoded = {}
    for node_id, a in enumerate(np.argmax(plan.probs.values, axis=1)):
        action = model.actions[int(a)]
        if action.op == KEEP:
            continue
        if action.op == RELABEL:
            node = g.nodes[node_id]
            action = EditAction(RELABEL, target=_relabel_target(g, node, model.bank[action.template]),
                                template=action.template)
        decoded[node_id] = action
    return decoded


def generate(model, g):
    """
    Propose an edited graph.

    Returns:
        (ActionPlan, edited GraphDoc); actions that cannot be applied are
        demoted to KEEP and absent from ``plan.realized``
    """
    plan = _plan(model, g)
    plan.decoded = _decode(model, g, plan)
    g_hat, plan.realized = edit_graph(g, plan.decoded, model.bank)
    try:
        g_hat.validate()
    except GraphInvariantError as e:
        logger.warning("Edited graph for %s breaks an invariant, keeping the original: %s", g.unit_id, e)
        g_hat, plan.realized = edit_graph(g, {}, model.bank)
    return plan, g_hat


def discriminate_mat(model, batch, features=None):
    """Discriminator scores as an m x 1 Mat, one row per graph in the batch"""
    p = model.discriminator
    h = _encode(p, batch, batch.features if features is None else features)
    return sigmoid(add(matmul(mean_pool(h, batch.boundaries), p['readout']), p['bias']))


def discriminate(model, g):
    """Probability in (0, 1) that g is a real graph"""
    return discriminate_mat(model, model.graph_batch(g)).item()


def embed(model, source):
    """
    Mean-pooled first encoder layer, as a 1 x hidden Mat.

    ``source`` is a GraphDoc or an ActionPlan; for a plan the soft action
    mixture is embedded and gradients flow back to the generator.
    """
    if isinstance(source, ActionPlan):
        batch, features = source.batch, source.soft_features
    else:
        batch = model.graph_batch(source)
        features = batch.features
    p = model.generator
    return mean_pool(graph_conv(p['self1'], p['neigh1'], batch, features), batch.boundaries)


def similarity(model, a, b):
    """Cosine of two embeddings as a 1x1 Mat; 0 when either embedding vanishes"""
    try:
        return cosine(a if isinstance(a, Mat) else embed(model, a), b if isinstance(b, Mat) else embed(model, b))
    except ZeroVector:
        return Mat.const(0.0)


def delta_k(g, g_hat, reconstructor=None, analyzer=None, bank=None):
    """
    k(c) - k(c_hat) for the code of g and the code reconstructed from g_hat.

    The result is a plain integer and never carries gradient. Reconstruction
    failures count as no improvement.
    """
    analyzer = analyzer or Analyzer.from_settings()
    reconstructor = reconstructor or partial(reconstruct, bank=bank or TemplateBank.default())
    unit = source_unit(g)
    try:
        result = reconstructor(unit, g, g_hat)
    except PipelineError as e:
        logger.warning("Reconstruction of %s failed, counting no improvement: %s", unit.id, e)
        return 0
    if not result.changed:
        return 0
    return analyzer.analyze(unit).k - analyzer.analyze(result.unit).k


def _score(sim, dk, cfg):
    return ScorePair(dk, sim, cfg.alpha, cfg.beta).composite


def _mean_of(mats):
    return mean(concat_rows(mats))


def _train_step(model, graphs, k_orig, cfg, analyzer, reconstructor):
    plans, deltas = [], []
    for g in graphs:
        plan, g_hat = generate(model, g)
        plans.append(plan)
        deltas.append(delta_k(g, g_hat, reconstructor, analyzer, model.bank) if plan.realized else 0)

    real = GraphBatch.from_arrays([p.batch.features for p in plans], [p.batch.neighbors for p in plans])
    fake_features = concat_rows([p.soft_features for p in plans])

    # discriminator first, on detached fakes
    loss_d = disc_loss(discriminate_mat(model, real), discriminate_mat(model, real, fake_features.detach()))
    if not loss_d.is_finite():
        raise NonFiniteLoss(f"discriminator loss is {loss_d.item()}")
    loss_d.backward()
    sgd_step(model.discriminator_params(), cfg.learning_rate)

    anchors = [embed(model, g) for g in graphs]
    losses = []
    for i, plan in enumerate(plans):
        s_pos = _score(similarity(model, anchors[i], embed(model, plan)), deltas[i], cfg)
        s_neg = [_score(similarity(model, anchors[i], anchors[j]), k_orig[i] - k_orig[j], cfg)
                 for j in range(len(graphs)) if j != i]
        losses.append(contrastive_loss(s_pos, s_neg, cfg.contrastive_sign))
    loss_g = _mean_of(losses)
    if cfg.loss_mix:
        adversarial = adv_loss(discriminate_mat(model, real, fake_features))
        loss_g = add(loss_g, mul_scalar(adversarial, cfg.loss_mix))
    if not loss_g.is_finite():
        raise NonFiniteLoss(f"generator loss is {loss_g.item()}")
    loss_g.backward()
    sgd_step(model.generator_params(), cfg.learning_rate)
    for p in model.discriminator_params():
        p.zero_grad()
    return loss_g.item(), loss_d.item(), deltas


def _batches(order, size):
    batches = [list(order[i:i + size]) for i in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def train(model, graphs, cfg, analyzer=None, reconstructor=None, progress=None):
    """
    Alternate discriminator and generator updates over the corpus.

    Args:
        model: GganModel, updated in place
        graphs: GraphDocs of the model's graph kind, each carrying its syntax tree
        cfg: TrainConfig
        progress: optional callable receiving each EpochStats

    Returns:
        (model, list of EpochStats)

    Raises:
        NonFiniteLoss: a loss or gradient went non-finite; the model is
            restored to the last good parameters first
    """
    graphs = list(graphs)
    if cfg.epochs == 0:
        return model, []
    if len(graphs) < cfg.batch_size:
        raise GganError(f"training needs at least {cfg.batch_size} graphs, got {len(graphs)}")
    analyzer = analyzer or Analyzer.from_settings()
    reconstructor = reconstructor or partial(reconstruct, bank=model.bank)
    k_orig = [analyzer.analyze(source_unit(g)).k for g in graphs]
    rng = np.random.default_rng(cfg.seed)
    good = model.snapshot()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses_g, losses_d, deltas = [], [], []
        for batch in _batches(rng.permutation(len(graphs)), cfg.batch_size):
            try:
                loss_g, loss_d, batch_deltas = _train_step(
                    model, [graphs[i] for i in batch], [k_orig[i] for i in batch], cfg, analyzer, reconstructor)
            except (NonFiniteLoss, NonFiniteGradient) as e:
                model.restore(good)
                logger.error("Training stopped at epoch %d: %s", epoch, e)
                raise NonFiniteLoss(str(e), epoch=epoch)
            good = model.snapshot()
            losses_g.append(loss_g)
            losses_d.append(loss_d)
            deltas.extend(batch_deltas)
        stats = EpochStats(epoch, float(np.mean(losses_g)), float(np.mean(losses_d)), float(np.mean(deltas)))
        history.append(stats)
        logger.info("Epoch %d/%d: L_G=%.4f L_D=%.4f mean dk=%.3f",
                    epoch, cfg.epochs, stats.loss_g, stats.loss_d, stats.mean_delta_k)
        if progress is not None:
            progress(stats)
    return model, history


# ==================== Checkpoints ====================

def sidecar_path(path):
    return f"{path}{SIDECAR_SUFFIX}"


def save(model, path, train_config=None):
    """Write the binary weights to path and the JSON sidecar next to it"""
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    save_params(path, model.parameters())
    meta = {
        'format': SIDECAR_FORMAT,
        'vocab_digest': model.vocab.digest(),
        'graph_kind': model.graph_kind,
        'hidden_dim': model.hidden_dim,
        'seed': model.seed,
        'prior_keep': model.prior_keep,
        'prior_template': model.prior_template,
        'actions': [str(a) for a in model.actions],
        'train_config': train_config.to_dict() if train_config is not None else None,
    }
    write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + '\n')
    logger.info("Saved %r to %s", model, path)
    return path


def read_sidecar(path):
    try:
        meta = json.loads(read_text(sidecar_path(path)))
    except (OSError, PipelineError, ValueError) as e:
        raise CorruptCheckpoint(f"cannot read checkpoint sidecar for {path}: {e}")
    if meta.get('format') != SIDECAR_FORMAT:
        raise CorruptCheckpoint(f"{sidecar_path(path)} is not a model sidecar")
    return meta


def load(path, vocab=None, bank=None):
    """Rebuild a GganModel from save(); weights are restored bit-exactly"""
    meta = read_sidecar(path)
    vocab = vocab or default_vocab()
    if vocab.digest() != meta['vocab_digest']:
        raise VersionMismatch("checkpoint was trained against a different node vocabulary")
    model = GganModel(vocab, bank, meta['graph_kind'], meta['hidden_dim'], meta['seed'],
                      meta.get('prior_keep'), meta.get('prior_template'))
    if [str(a) for a in model.actions] != meta['actions']:
        raise VersionMismatch("checkpoint was trained against a different template bank")
    params = load_params(path)
    expected = model.parameters()
    if len(params) != len(expected):
        raise CorruptCheckpoint(f"checkpoint holds {len(params)} layers, model needs {len(expected)}")
    for target, loaded in zip(expected, params):
        if target.shape != loaded.shape:
            raise CorruptCheckpoint(f"layer shape {loaded.shape} does not match {target.shape}")
        target.values = loaded.values
    return model


def train_config_from_checkpoint(path):
    data = read_sidecar(path).get('train_config')
    return TrainConfig.from_dict(data) if data else None
