"""
Minimal differentiable kernel on numpy.

``Mat`` is a dense 2-D matrix that records the operations producing it;
``backward()`` on a 1x1 result walks that record in reverse topological order
and accumulates gradients into every ancestor with ``requires_grad``. Only the
operations needed by the graph GAN are provided: GraphConv message passing,
mean pooling, cosine similarity, the adversarial / contrastive /
discriminator losses, plain SGD and a finite-difference gradient checker.
"""
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from django.conf import settings

from .utils import PipelineError

LOG_CLAMP = 1e-7
CHECKPOINT_MAGIC = b'PSNK'
CHECKPOINT_VERSION = 1


class NeuralError(PipelineError):
    pass


class ShapeMismatch(NeuralError):
    pass


class EmptyGraph(NeuralError):
    pass


class ZeroVector(NeuralError):
    pass


class NonFiniteGradient(NeuralError):
    pass


class VersionMismatch(NeuralError):
    pass


class CorruptCheckpoint(NeuralError):
    pass


class Mat:
    """Dense matrix with reverse-mode gradient"""

    def __init__(self, values, requires_grad=False, parents=(), backward=None, op=''):
        values = np.array(values, dtype=np.float64)
        if values.ndim == 0:
            values = values.reshape(1, 1)
        elif values.ndim == 1:
            values = values.reshape(1, -1)
        if values.ndim != 2:
            raise ShapeMismatch(f"Mat needs a 2-D array, got {values.ndim} dimensions")
        self.values = values
        self.grad = np.zeros_like(values)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.op = op

    @classmethod
    def param(cls, values):
        return cls(values, requires_grad=True, op='param')

    @classmethod
    def const(cls, values):
        return cls(values, requires_grad=False, op='const')

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def item(self):
        if self.values.size != 1:
            raise ShapeMismatch(f"item() needs a 1x1 Mat, got {self.shape}")
        return float(self.values[0, 0])

    def detach(self):
        return Mat(self.values.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def __repr__(self):
        return f"Mat({self.rows}x{self.cols}, op={self.op or 'leaf'})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every ancestor's grad; self must be 1x1"""
        if self.values.size != 1:
            raise ShapeMismatch("backward() needs a scalar (1x1) Mat")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = self.grad + np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)


def _result(values, parents, backward, op):
    return Mat(values, parents=tuple(parents), backward=backward, op=op)


def _accumulate(mat, grad):
    if mat.requires_grad:
        mat.grad = mat.grad + grad


# ==================== Elementwise and linear ops ====================

def matmul(a, b):
    if a.cols != b.rows:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")

    def backward(grad):
        _accumulate(a, grad @ b.values.T)
        _accumulate(b, a.values.T @ grad)
    return _result(a.values @ b.values, (a, b), backward, 'matmul')


def add(a, b):
    """Elementwise sum; b may be a 1 x cols row broadcast over a's rows"""
    if a.shape != b.shape and not (b.rows == 1 and b.cols == a.cols):
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}")

    def backward(grad):
        _accumulate(a, grad)
        _accumulate(b, grad if b.shape == a.shape else grad.sum(axis=0, keepdims=True))
    return _result(a.values + b.values, (a, b), backward, 'add')


def sub(a, b):
    return add(a, mul_scalar(b, -1.0))


def mul_scalar(a, c):
    def backward(grad):
        _accumulate(a, grad * c)
    return _result(a.values * c, (a,), backward, 'mul_scalar')


def add_scalar(a, c):
    def backward(grad):
        _accumulate(a, grad)
    return _result(a.values + c, (a,), backward, 'add_scalar')


def mul(a, b):
    """Elementwise product of same-shape matrices"""
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot multiply elementwise {a.shape} and {b.shape}")

    def backward(grad):
        _accumulate(a, grad * b.values)
        _accumulate(b, grad * a.values)
    return _result(a.values * b.values, (a, b), backward, 'mul')


def relu(a):
    mask = (a.values > 0).astype(np.float64)

    def backward(grad):
        _accumulate(a, grad * mask)
    return _result(a.values * mask, (a,), backward, 'relu')


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-np.clip(a.values, -500, 500)))

    def backward(grad):
        _accumulate(a, grad * out * (1.0 - out))
    return _result(out, (a,), backward, 'sigmoid')


def identity(a):
    return a


ACTIVATIONS = {'relu': relu, 'sigmoid': sigmoid, 'linear': identity}


def log_clamped(a, eps=LOG_CLAMP):
    """log(max(a, eps)); no gradient flows where the clamp is active"""
    clipped = np.maximum(a.values, eps)
    active = (a.values > eps).astype(np.float64)

    def backward(grad):
        _accumulate(a, grad * active / clipped)
    return _result(np.log(clipped), (a,), backward, 'log')


def total(a):
    def backward(grad):
        _accumulate(a, np.full_like(a.values, grad[0, 0]))
    return _result(a.values.sum(), (a,), backward, 'sum')


def mean(a):
    return mul_scalar(total(a), 1.0 / a.values.size)


def concat_rows(mats):
    """Stack matrices with equal column counts"""
    cols = {m.cols for m in mats}
    if len(cols) != 1:
        raise ShapeMismatch("concat_rows needs equal column counts")
    offsets = np.cumsum([0] + [m.rows for m in mats])

    def backward(grad):
        for m, lo, hi in zip(mats, offsets, offsets[1:]):
            _accumulate(m, grad[lo:hi])
    return _result(np.vstack([m.values for m in mats]), mats, backward, 'concat')


def softmax_rows(a):
    """Row-wise softmax with a max shift"""
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(grad):
        inner = (grad * out).sum(axis=1, keepdims=True)
        _accumulate(a, out * (grad - inner))
    return _result(out, (a,), backward, 'softmax')


def mixture(weights, bases):
    """
    out[v] = sum_a weights[v, a] * bases[a][v]

    Args:
        weights: Mat, n x A
        bases: constant array, A x n x d
    """
    bases = np.asarray(bases, dtype=np.float64)
    if bases.ndim != 3 or bases.shape[0] != weights.cols or bases.shape[1] != weights.rows:
        raise ShapeMismatch(f"mixture bases {bases.shape} do not fit weights {weights.shape}")
    out = np.einsum('va,avd->vd', weights.values, bases)

    def backward(grad):
        _accumulate(weights, np.einsum('vd,avd->va', grad, bases))
    return _result(out, (weights,), backward, 'mixture')


def row(a, index):
    def backward(grad):
        g = np.zeros_like(a.values)
        g[index] = grad[0]
        _accumulate(a, g)
    return _result(a.values[index:index + 1], (a,), backward, 'row')


# ==================== Graph operations ====================

class GraphBatch:
    """
    Node features of several graphs stacked row-wise.

    Args:
        features: Mat, n_total x dim
        neighbors: per-node neighbor index lists (global indices)
        boundaries: list of (start, end) row ranges, one per graph
    """

    def __init__(self, features, neighbors, boundaries):
        n = features.rows
        if len(neighbors) != n:
            raise ShapeMismatch(f"{len(neighbors)} neighbor lists for {n} nodes")
        expected = 0
        for start, end in boundaries:
            if start != expected or end < start:
                raise ShapeMismatch(f"graph boundaries do not partition 0..{n}")
            for v in range(start, end):
                if any(not start <= u < end for u in neighbors[v]):
                    raise ShapeMismatch(f"node {v} has a neighbor outside its graph")
            expected = end
        if expected != n:
            raise ShapeMismatch(f"graph boundaries do not partition 0..{n}")
        self.features = features
        self.neighbors = [list(ns) for ns in neighbors]
        self.boundaries = list(boundaries)
        self._adjacency = None

    @classmethod
    def from_arrays(cls, feature_blocks, neighbor_blocks):
        """Batch from per-graph feature arrays and per-graph local neighbor lists"""
        neighbors, boundaries = [], []
        offset = 0
        for block, local in zip(feature_blocks, neighbor_blocks):
            rows = block.shape[0] if isinstance(block, np.ndarray) else block.rows
            neighbors.extend([offset + u for u in ns] for ns in local)
            boundaries.append((offset, offset + rows))
            offset += rows
        if feature_blocks and all(isinstance(b, Mat) for b in feature_blocks):
            features = concat_rows(list(feature_blocks))
        else:
            features = Mat.const(np.vstack(feature_blocks) if feature_blocks else np.zeros((0, 0)))
        return cls(features, neighbors, boundaries)

    def __len__(self):
        return len(self.boundaries)

    def with_features(self, features):
        return GraphBatch(features, self.neighbors, self.boundaries)

    def adjacency(self):
        if self._adjacency is None:
            n = len(self.neighbors)
            a = np.zeros((n, n), dtype=np.float64)
            for v, ns in enumerate(self.neighbors):
                for u in ns:
                    a[v, u] = 1.0
            self._adjacency = Mat.const(a)
        return self._adjacency


def undirected_neighbors(n, edges):
    """Neighbor lists from (src, dst) pairs, symmetric, without self loops or duplicates"""
    neighbors = [set() for _ in range(n)]
    for src, dst in edges:
        if src != dst:
            neighbors[src].add(dst)
            neighbors[dst].add(src)
    return [sorted(ns) for ns in neighbors]


def graph_conv(w_self, w_neigh, batch, features=None, activation='relu'):
    """h'_v = act(h_v W_self + (sum of neighbor h_u) W_neigh)"""
    h = batch.features if features is None else features
    if h.cols != w_self.rows or h.cols != w_neigh.rows:
        raise ShapeMismatch(f"features have {h.cols} columns, weights expect {w_self.rows}/{w_neigh.rows}")
    if w_self.cols != w_neigh.cols:
        raise ShapeMismatch("self and neighbor weights disagree on output width")
    pre = add(matmul(h, w_self), matmul(matmul(batch.adjacency(), h), w_neigh))
    try:
        return ACTIVATIONS[activation](pre)
    except KeyError:
        raise NeuralError(f"unknown activation {activation!r}")


def mean_pool(features, boundaries):
    """One row per graph: the mean of that graph's node rows"""
    pool = np.zeros((len(boundaries), features.rows), dtype=np.float64)
    for g, (start, end) in enumerate(boundaries):
        if end <= start:
            raise EmptyGraph(f"graph {g} has no nodes")
        pool[g, start:end] = 1.0 / (end - start)
    return matmul(Mat.const(pool), features)


def cosine(a, b):
    """Cosine similarity of two 1 x d rows as a 1x1 Mat"""
    if a.shape != b.shape or a.rows != 1:
        raise ShapeMismatch(f"cosine needs two equal 1 x d rows, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    c = float(np.dot(a.values[0], b.values[0]) / (na * nb))

    def backward(grad):
        g = grad[0, 0]
        _accumulate(a, g * (b.values / (na * nb) - c * a.values / (na * na)))
        _accumulate(b, g * (a.values / (na * nb) - c * b.values / (nb * nb)))
    return _result(min(1.0, max(-1.0, c)), (a, b), backward, 'cosine')


# ==================== Losses ====================

def adv_loss(d_fake):
    """-mean(log d_fake)"""
    return mul_scalar(mean(log_clamped(d_fake)), -1.0)


def disc_loss(d_real, d_fake):
    """-mean(log d_real) - mean(log(1 - d_fake))"""
    real = mean(log_clamped(d_real))
    fake = mean(log_clamped(add_scalar(mul_scalar(d_fake, -1.0), 1.0)))
    return mul_scalar(add(real, fake), -1.0)


def contrastive_loss(s_pos, s_neg=(), sign=1.0):
    """
    -log(exp(z_pos) / (exp(z_pos) + sum_j exp(z_neg_j))) with z = sign * s.

    ``sign=-1`` gives the exp(-s) variant. Computed with a max shift.

    Args:
        s_pos: 1x1 Mat
        s_neg: iterable of 1x1 Mats
    """
    scores = [s_pos] + list(s_neg)
    for s in scores:
        if s.values.size != 1:
            raise ShapeMismatch("contrastive scores must be 1x1")
    z = np.array([sign * s.item() for s in scores])
    shift = z.max()
    weights = np.exp(z - shift)
    denom = weights.sum()
    value = -(z[0] - shift - math.log(denom))
    probs = weights / denom

    def backward(grad):
        g = grad[0, 0]
        for j, s in enumerate(scores):
            dz = probs[j] - (1.0 if j == 0 else 0.0)
            _accumulate(s, np.full((1, 1), g * sign * dz))
    return _result(value, scores, backward, 'contrastive')


# ==================== Optimisation ====================

def sgd_step(params, lr):
    """theta <- theta - lr * grad, then zero the gradients"""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p!r}")
    for p in params:
        p.values = p.values - lr * p.grad
        p.zero_grad()
    return params


def grad_check(loss_fn, params, eps=1e-6):
    """
    Largest relative error between reverse-mode and central-difference gradients.

    Args:
        loss_fn: callable returning a 1x1 Mat built from params
        params: list of Mat leaves
        eps: perturbation, in [1e-7, 1e-3]
    """
    if not 1e-7 <= eps <= 1e-3:
        raise NeuralError(f"eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a_grad in zip(params, analytic):
        it = np.nditer(p.values, flags=['multi_index'])
        for _ in it:
            idx = it.multi_index
            saved = p.values[idx]
            p.values[idx] = saved + eps
            plus = loss_fn().item()
            p.values[idx] = saved - eps
            minus = loss_fn().item()
            p.values[idx] = saved
            numeric = (plus - minus) / (2 * eps)
            a = a_grad[idx]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ==================== Checkpoints ====================

def save_params(path, params):
    """Flat binary: magic, version, layer count, then per layer rows, cols and <f8 values"""
    with open(path, 'wb') as fh:
        fh.write(struct.pack('<4sHI', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params)))
        for p in params:
            fh.write(struct.pack('<II', p.rows, p.cols))
            fh.write(np.ascontiguousarray(p.values, dtype='<f8').tobytes())


def load_params(path):
    with open(path, 'rb') as fh:
        blob = fh.read()
    header = struct.calcsize('<4sHI')
    if len(blob) < header:
        raise CorruptCheckpoint(f"{path} is too short to be a checkpoint")
    magic, version, count = struct.unpack_from('<4sHI', blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path} is not a parameter checkpoint")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = header
    params = []
    for _ in range(count):
        if offset + 8 > len(blob):
            raise CorruptCheckpoint(f"{path} is truncated")
        rows, cols = struct.unpack_from('<II', blob, offset)
        offset += 8
        size = rows * cols * 8
        if offset + size > len(blob):
            raise CorruptCheckpoint(f"{path} is truncated")
        values = np.frombuffer(blob, dtype='<f8', count=rows * cols, offset=offset).reshape(rows, cols)
        params.append(Mat.param(values.astype(np.float64)))
        offset += size
    if offset != len(blob):
        raise CorruptCheckpoint(f"{path} has trailing bytes")
    return params


# ==================== Training configuration ====================

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    loss_mix: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 7
    hidden_dim: int = 64
    contrastive_sign: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise NeuralError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise NeuralError(f"batch size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise NeuralError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.loss_mix < 0:
            raise NeuralError(f"loss mix must be >= 0, got {self.loss_mix}")
        if self.hidden_dim < 1:
            raise NeuralError(f"hidden dim must be >= 1, got {self.hidden_dim}")
        if self.contrastive_sign not in (1.0, -1.0):
            raise NeuralError("contrastive sign must be +1 or -1")

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'epochs': settings.PROMSEC_TRAIN_EPOCHS,
            'batch_size': settings.PROMSEC_TRAIN_BATCH_SIZE,
            'learning_rate': settings.PROMSEC_TRAIN_LEARNING_RATE,
            'loss_mix': settings.PROMSEC_TRAIN_LOSS_MIX,
            'alpha': settings.PROMSEC_TRAIN_ALPHA,
            'beta': settings.PROMSEC_TRAIN_BETA,
            'seed': settings.PROMSEC_TRAIN_SEED,
            'hidden_dim': settings.PROMSEC_TRAIN_HIDDEN_DIM,
            'contrastive_sign': settings.PROMSEC_TRAIN_CONTRASTIVE_SIGN,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_dict(cls, data):
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)

    def to_dict(self):
        return asdict(self)
