"""Graph layers: GCN embedding, attention aggregation, classifier head, loss.

The attention layer supports substituting or appending per-node embedding
overrides before aggregation, which is how generated neighbor embeddings
enter the second layer of the encoder. Aggregation can be attention-based
or plain mean (for ablations).
"""

import logging
import weakref

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

MASK_OFF = -1e30  # additive bias that zeroes non-neighbors in the row softmax

_adj_cache = weakref.WeakKeyDictionary()
_structure_cache = weakref.WeakKeyDictionary()


def normalized_adjacency(g):
    """Dense symmetric-normalized adjacency with self-loops."""
    cached = _adj_cache.get(g)
    if cached is not None:
        return cached
    a = np.zeros((g.n, g.n))
    if g.num_edges:
        a[g.edges[:, 0], g.edges[:, 1]] = 1.0
        a[g.edges[:, 1], g.edges[:, 0]] = 1.0
    a[np.diag_indices(g.n)] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    norm = a * dinv[:, None] * dinv[None, :]
    _adj_cache[g] = norm
    return norm


class GcnLayer:
    """Single graph-convolution layer over the normalized adjacency."""

    def __init__(self, in_dim, out_dim, rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = T.glorot((in_dim, out_dim), rng)

    def parameters(self):
        return {"W": self.weight}


def gcn_forward(g, x, layer, activation="relu"):
    """ReLU(norm_adj @ x @ W); activation=None gives the linear output."""
    x = T.as_tensor(x)
    if x.shape != (g.n, layer.in_dim):
        raise T.ShapeError(f"gcn_forward: features {x.shape} vs layer input "
                           f"({g.n}, {layer.in_dim})")
    out = T.matmul(Tensor(normalized_adjacency(g)), T.matmul(x, layer.weight))
    if activation == "relu":
        out = T.relu(out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    return out


class GatLayer:
    """Attention aggregation layer; multiple heads concatenate."""

    def __init__(self, in_dim, out_dim, rng, heads=1):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.weights = [T.glorot((in_dim, out_dim), rng) for _ in range(heads)]
        self.att = [T.glorot((2 * out_dim, 1), rng) for _ in range(heads)]

    @property
    def width(self):
        return self.out_dim * self.heads

    def parameters(self):
        params = {}
        for h in range(self.heads):
            suffix = str(h) if self.heads > 1 else ""
            params[f"W{suffix}"] = self.weights[h]
            params[f"a{suffix}"] = self.att[h]
        return params


def _split_attention(layer, head):
    """First/second halves of the attention vector as (out_dim, 1) tensors."""
    d = layer.out_dim
    top = np.zeros((d, 2 * d))
    top[:, :d] = np.eye(d)
    bot = np.zeros((d, 2 * d))
    bot[:, d:] = np.eye(d)
    a = layer.att[head]
    return T.matmul(Tensor(top), a), T.matmul(Tensor(bot), a)


def gat_attention(h_target, members, layer, head=0):
    """Attention coefficients of one node over its aggregation set.

    `members` must include the node itself; returns softmax weights that
    sum to 1 over the set.
    """
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 2 or members.shape[0] == 0:
        raise ValueError("gat_attention needs a non-empty member matrix")
    with T.no_grad():
        w = layer.weights[head].data
        a = layer.att[head].data.ravel()
        wt = np.asarray(h_target, dtype=np.float64).reshape(1, -1) @ w
        wm = members @ w
        logits = np.concatenate(
            [np.repeat(wt, len(members), axis=0), wm], axis=1) @ a
        logits = np.where(logits >= 0, logits, T.LEAKY_SLOPE * logits)
        logits -= logits.max()
        e = np.exp(logits)
        return e / e.sum()


def _base_allowed(g, extra):
    size = g.n + extra
    allowed = np.zeros((size, size), dtype=bool)
    allowed[np.diag_indices(size)] = True
    if g.num_edges:
        allowed[g.edges[:, 0], g.edges[:, 1]] = True
        allowed[g.edges[:, 1], g.edges[:, 0]] = True
    return allowed


def _aggregation_structure(g, virtual_ids, plan, append):
    """Mask bias and mean matrix over neighbor-plus-self aggregation sets.

    One virtual row per overridden id sits after the real nodes and
    aggregates only itself. Without a plan, every aggregation set that
    contains an overridden id sees the virtual copy (and loses the
    original unless appending). With a plan, only the planning target's
    set is rewired, and only for its own selected sources.
    """
    key = (tuple(virtual_ids), append,
           None if plan is None else tuple(sorted((t, tuple(s)) for t, s in plan.items())))
    per_graph = _structure_cache.setdefault(g, {})
    if key in per_graph:
        return per_graph[key]
    slot = {node: g.n + i for i, node in enumerate(virtual_ids)}
    allowed = _base_allowed(g, len(virtual_ids))
    if plan is None:
        for node, col in slot.items():
            watchers = list(g.neighbor_lists[node]) + [node]
            allowed[watchers, col] = True
            if not append:
                allowed[watchers, node] = False
    else:
        for target, sources in plan.items():
            for s in sources:
                allowed[target, slot[s]] = True
                if not append:
                    allowed[target, s] = False
    for col in slot.values():
        allowed[col, :] = False
        allowed[col, col] = True
    bias = np.where(allowed, 0.0, MASK_OFF)
    mean_mat = allowed / allowed.sum(axis=1, keepdims=True)
    per_graph[key] = (bias, mean_mat)
    return per_graph[key]


def _check_overrides(g, overrides, width, plan):
    for i in overrides:
        if not 0 <= i < g.n:
            raise ValueError(f"override references unknown node {i}")
        if np.asarray(overrides[i]).shape != (width,):
            raise T.ShapeError(f"override for node {i} has width "
                               f"{np.asarray(overrides[i]).shape}, expected ({width},)")
    if plan is not None:
        for target, sources in plan.items():
            if not 0 <= target < g.n:
                raise ValueError(f"plan references unknown node {target}")
            missing = [s for s in sources if s not in overrides]
            if missing:
                raise ValueError(f"plan for node {target} references sources "
                                 f"{missing} with no override embedding")


def gat_forward(g, h, layer, overrides=None, plan=None, append=False,
                attention=True, activation=None):
    """One aggregation layer over neighbor-plus-self sets.

    `overrides` maps node ids to detached replacement embeddings. Without
    a plan they substitute the node's row in every aggregation that sees
    it; with `plan` ({target: selected source ids}) only each target's own
    aggregation set swaps (or, with `append`, gains) the generated
    members, and every other node aggregates exactly as the vanilla layer.
    With no overrides this is a vanilla attention (or mean) layer.
    """
    h = T.as_tensor(h)
    if h.shape != (g.n, layer.in_dim):
        raise T.ShapeError(f"gat_forward: embeddings {h.shape} vs layer input "
                           f"({g.n}, {layer.in_dim})")
    overrides = overrides or {}
    _check_overrides(g, overrides, layer.in_dim, plan)
    virtual_ids = tuple(sorted(overrides))
    if virtual_ids:
        repl = np.stack([np.asarray(overrides[i], dtype=np.float64)
                         for i in virtual_ids])
        h_in = T.concat_rows([h, Tensor(repl)])
    else:
        h_in = h
    bias, mean_mat = _aggregation_structure(g, virtual_ids, plan, append)

    outputs = []
    for head in range(layer.heads):
        wh = T.matmul(h_in, layer.weights[head])
        if attention:
            a1, a2 = _split_attention(layer, head)
            s1 = T.matmul(wh, a1)
            s2 = T.matmul(wh, a2)
            size = h_in.shape[0]
            ones_row = Tensor(np.ones((1, size)))
            ones_col = Tensor(np.ones((size, 1)))
            logits = T.leaky_relu(T.add(T.matmul(s1, ones_row),
                                        T.matmul(ones_col, T.transpose(s2))))
            coeff = T.softmax_rows(T.add(logits, Tensor(bias)))
            outputs.append(T.matmul(coeff, wh))
        else:
            outputs.append(T.matmul(Tensor(mean_mat), wh))
    out = outputs[0] if layer.heads == 1 else T.concat_cols(outputs)
    if virtual_ids:
        out = T.take_rows(out, np.arange(g.n))
    if activation == "relu":
        out = T.relu(out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    return out


class ClassifierHead:
    """Two-layer MLP ending in a sigmoid anomaly probability."""

    def __init__(self, in_dim, hidden, rng):
        self.in_dim = in_dim
        self.hidden = hidden
        self.w1 = T.glorot((in_dim, hidden), rng)
        self.b1 = T.zeros((hidden,), requires_grad=True)
        self.w2 = T.glorot((hidden, 1), rng)
        self.b2 = T.zeros((1,), requires_grad=True)

    def parameters(self):
        return {"W1": self.w1, "b1": self.b1, "W2": self.w2, "b2": self.b2}

    def forward(self, z):
        z = T.as_tensor(z)
        hid = T.relu(T.add_rowvec(T.matmul(z, self.w1), self.b1))
        return T.sigmoid(T.add_rowvec(T.matmul(hid, self.w2), self.b2))


P_CLAMP = 1e-12


def weighted_ce_loss(p, y, phi):
    """Weighted cross-entropy: -sum(phi*y*log p + (1-y)*log(1-p)).

    Probabilities at 0 or 1 are clamped to [1e-12, 1-1e-12] with a warning.
    """
    if phi <= 0:
        raise ValueError(f"class weight must be positive, got {phi}")
    p = T.as_tensor(p)
    yv = np.asarray(y, dtype=np.float64).reshape(p.shape)
    if not np.isin(yv, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    if np.any(p.data <= P_CLAMP) or np.any(p.data >= 1.0 - P_CLAMP):
        log.warning("probabilities clamped away from {0,1} in the loss")
        p = T.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
    y_t = Tensor(yv)
    pos = T.mul(y_t, T.log(p))
    neg = T.mul(Tensor(1.0 - yv), T.log(T.add(T.scale(p, -1.0), 1.0)))
    return T.scale(T.add(T.sum_all(T.scale(pos, phi)), T.sum_all(neg)), -1.0)


def anomaly_weight(labels, mask):
    """Anomaly-to-normal label ratio on the masked nodes."""
    sub = np.asarray(labels)[np.asarray(mask, dtype=bool)]
    n_anom = int((sub == 1).sum())
    n_norm = int((sub == 0).sum())
    if n_anom == 0 or n_norm == 0:
        raise ValueError("class weight needs both classes in the mask")
    return n_anom / n_norm
