"""Staged training: detect heterophilic nodes, translate their low-scoring
neighbors into anomaly-like embeddings, aggregate counterfactually.

Stages are sequential and individually seeded: (1) local GCN embeddings
feed the pointer detector, (2) the detector flags heterophilic nodes and
plans which neighbors to translate, (3) the diffusion generator is trained
on first-layer embeddings and translates the planned ones, (4) the
two-layer attention encoder plus classifier head trains with the
translated embeddings substituted into second-layer aggregation. The
checkpoint keeps the epoch with the best validation macro-F1; reported
metrics re-run detection and translation with the final weights, which is
also exactly what evaluate() does from a loaded checkpoint.
"""

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .graph import sequence_length
from .layers import (ClassifierHead, GatLayer, GcnLayer, anomaly_weight,
                     gat_forward, gcn_forward, weighted_ce_loss)
from .pointer import (CounterfactualPlan, DetectionReport, NodeReport,
                      PointerNet, attention_scores, calibrate_eta,
                      select_sources, train_pointer)
from .diffusion import (DiffusionSchedule, NoisePredictor, make_schedule,
                        node_streams, train_ddpm, translate_batch)
from .metrics import auc_pr, auc_roc, macro_f1
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# ablation -> (build a plan, attention aggregation, append instead of replace)
ABLATIONS = {
    "full": (True, True, False),
    "two": (False, False, False),
    "ano": (False, True, False),
    "att": (True, False, False),
    "ori": (True, True, True),
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a single run needs besides the graph itself."""

    alpha: float = 0.6
    eta: float | str = "auto"
    gamma: float = 1.1
    translate_fraction: float = 0.7
    hetero_fraction: float = 1.0
    seq_len: int | str = "auto"
    diffusion_steps: int = 1000
    epochs: int = 100
    lr: float = 0.01
    seed: int = 0
    ablation: str = "full"
    gcn_hidden: int = 32
    gat_hidden: int = 64
    heads: int = 1
    head_hidden: int = 32
    pointer_hidden: int = 32
    pointer_epochs: int = 150
    pointer_lr: float = 0.01
    pointer_cell: str = "tanh"
    pointer_anchor: float = 1.0
    ddpm_epochs: int = 1500
    ddpm_lr: float = 1e-3
    ddpm_hidden: int = 128
    time_width: int = 32
    beta_start: float = 1e-4
    beta_end: float = 0.02
    prior_steps: int | str = "auto"
    high_pass_mode: str = "mean"
    hops: int = 1
    truncation: str = "ascending"
    threshold: float | str = 0.5
    phi: float | str = "auto"
    regenerate_every: int = 0
    ddpm_retrain: bool = False

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; "
                             f"expected one of {sorted(ABLATIONS)}")
        for name in ("translate_fraction", "hetero_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.truncation not in ("ascending", "random"):
            raise ValueError(f"unknown truncation {self.truncation!r}")
        if self.high_pass_mode not in ("mean", "sym"):
            raise ValueError(f"unknown high_pass_mode {self.high_pass_mode!r}")
        return self

    def hash(self):
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    metrics: dict
    loss_trace: list
    val_trace: list
    heterophilic_count: int
    planned_count: int
    translated_count: int
    best_epoch: int
    eta: float | None
    phi: float
    threshold: float
    wall_clock: float

    def to_json(self):
        return json.dumps({
            "metrics": self.metrics,
            "loss_trace": self.loss_trace,
            "val_trace": self.val_trace,
            "heterophilic_count": self.heterophilic_count,
            "planned_count": self.planned_count,
            "translated_count": self.translated_count,
            "best_epoch": self.best_epoch,
            "eta": self.eta,
            "phi": self.phi,
            "threshold": self.threshold,
            "wall_clock": self.wall_clock,
        }, indent=2)


@dataclass
class PipelineState:
    """Trained modules plus the calibrated scalars needed at inference."""

    config: PipelineConfig
    feature_dim: int
    seq_len: int
    gcn: GcnLayer
    gat1: GatLayer
    gat2: GatLayer
    head: ClassifierHead
    phi: float
    threshold: float
    pointer: PointerNet | None = None
    eta: float | None = None
    sched: DiffusionSchedule | None = None
    predictor: NoisePredictor | None = None
    scaler: tuple | None = None  # (mu, sd) whitening the diffusion space

    def modules(self):
        mods = {"gcn": self.gcn, "gat1": self.gat1, "gat2": self.gat2,
                "head": self.head}
        if self.pointer is not None:
            mods["pointer"] = self.pointer
        if self.predictor is not None:
            mods["ddpm"] = self.predictor
        return mods

    def trainable(self):
        # layer 1 stays frozen: the generator and its translated embeddings
        # live in its output space, and updating it would silently
        # invalidate them (and break translate reproducibility at evaluate)
        params = []
        for mod in (self.gat2, self.head):
            params.extend(mod.parameters().values())
        return params


def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag,)))


def _build_state(g, config):
    feat = g.feature_dim
    gcn = GcnLayer(feat, config.gcn_hidden, _rng(config.seed, 1))
    gat1 = GatLayer(feat, config.gat_hidden, _rng(config.seed, 2), heads=config.heads)
    gat2 = GatLayer(gat1.width, config.gat_hidden, _rng(config.seed, 3),
                    heads=config.heads)
    head = ClassifierHead(gat2.width, config.head_hidden, _rng(config.seed, 4))
    seq_len = sequence_length(g) if config.seq_len == "auto" else int(config.seq_len)
    thr = 0.5 if config.threshold == "val" else float(config.threshold)
    return PipelineState(config=config, feature_dim=feat, seq_len=seq_len,
                         gcn=gcn, gat1=gat1, gat2=gat2, head=head,
                         phi=1.0, threshold=thr)


def counterfactual_forward(g, state, overrides=None, plan=None, append=False,
                           attention=True):
    """Full representation pass: (H1, Z, P) with overrides in layer 2.

    With `plan` ({heterophilic node: its selected sources}) the generated
    embeddings only enter the planning nodes' own aggregation sets; all
    other nodes keep vanilla aggregation.
    """
    h1 = gat_forward(g, g.features, state.gat1, attention=attention,
                     activation="relu")
    z = gat_forward(g, h1, state.gat2, overrides=overrides, plan=plan,
                    append=append, attention=attention, activation=None)
    p = state.head.forward(z)
    return h1, z, p


def _detector_inputs(g, state):
    """Pointer inputs: raw features concatenated with GCN embeddings.

    The smoothed embeddings alone lose the target's own identity on dense
    graphs, which is exactly the signal heterophily scoring needs; the raw
    columns keep it available.
    """
    with T.no_grad():
        x_hat = gcn_forward(g, g.features, state.gcn).data
    return np.concatenate([g.features.data, x_hat], axis=1)


def _detection(g, state, x_hat):
    """Pointer scores -> eta -> heterophily report, shared by train/evaluate."""
    config = state.config
    trunc_rng = _rng(config.seed, 12) if config.truncation == "random" else None
    per_node, skipped = attention_scores(
        state.pointer, g, x_hat, length=state.seq_len,
        order=config.truncation, rng=trunc_rng, hops=config.hops)
    if state.eta is None:
        eta = (calibrate_eta(g, per_node, config.alpha, g.splits.train, g.labels)
               if config.eta == "auto" else float(config.eta))
    else:
        eta = state.eta
    nodes = {}
    flagged = []
    for v in sorted(per_node):
        ids, scores = per_node[v]
        arr = np.asarray(scores)
        h_d = float((arr < eta).sum() / len(arr))
        nodes[v] = NodeReport(node=v, neighbor_ids=ids, scores=scores,
                              heterophily_degree=h_d,
                              is_heterophilic=h_d > config.alpha)
        if h_d > config.alpha:
            flagged.append(v)
    return DetectionReport(eta=eta, alpha=config.alpha, nodes=nodes,
                           heterophilic=tuple(flagged), skipped=skipped)


def _plan_from_report(report, config):
    """Keep the top fraction of flagged nodes by heterophily degree."""
    flagged = sorted(report.heterophilic,
                     key=lambda v: (-report.nodes[v].heterophily_degree, v))
    keep = flagged[:math.ceil(config.hetero_fraction * len(flagged))]
    kept_report = replace(report, heterophilic=tuple(sorted(keep)))
    return select_sources(kept_report, fraction=config.translate_fraction)


def _neighborhood_context(g, z, v, mode):
    """Clean high-pass context of node v: (vector, effective member count)."""
    nbrs = list(g.neighbor_lists[v])
    if mode == "mean":
        return z[nbrs].mean(axis=0), float(len(nbrs))
    dv = len(nbrs)
    ctx = np.zeros(z.shape[1])
    inv = 0.0
    for u in nbrs:
        w = 1.0 / np.sqrt(dv * len(g.neighbor_lists[u]))
        ctx += w * z[u]
        inv += w * w
    return ctx, 1.0 / inv


def _reference(g, h1, state):
    """Anomaly reference embedding and its neighborhood context.

    The reference is the mean of labeled train anomalies' embeddings; its
    context is the mean over those anomalies' neighbor embeddings (global
    mean when none of them has a neighbor).
    """
    labels = g.labels
    anoms = np.flatnonzero(g.splits.train & (labels == 1))
    if len(anoms) == 0:
        raise ValueError("translation needs at least one labeled train anomaly")
    z_ref = h1[anoms].mean(axis=0)
    members = [u for a in anoms for u in g.neighbor_lists[a]]
    if members:
        ref_ctx = h1[members].mean(axis=0)
        ref_size = float(len(members))
    else:
        log.warning("labeled anomalies are all isolated; using the global "
                    "mean as reference context")
        ref_ctx = h1.mean(axis=0)
        ref_size = float(len(h1))
    return z_ref, ref_ctx, ref_size


def _translate_plan(g, state, plan, h1):
    """Translate every unique planned source embedding once.

    Translation runs in the whitened space the predictor was trained in;
    outputs are mapped back to the embedding scale.
    """
    config = state.config
    srcs = list(plan.all_sources())
    if not srcs:
        return {}
    mu, sd = state.scaler
    white = (h1 - mu) / sd
    z_ref, ref_ctx, ref_size = _reference(g, white, state)
    contexts = np.zeros((len(srcs), h1.shape[1]))
    sizes = np.zeros(len(srcs))
    for i, s in enumerate(srcs):
        contexts[i], sizes[i] = _neighborhood_context(g, white, s,
                                                      config.high_pass_mode)
    prior = (None if config.prior_steps == "auto" else int(config.prior_steps))
    translated = translate_batch(
        white[srcs], z_ref, state.predictor, state.sched, config.gamma,
        src_contexts=contexts, ref_context=ref_ctx,
        src_context_sizes=sizes, ref_context_size=ref_size,
        rng_triples=[node_streams(config.seed, s) for s in srcs],
        prior_steps=prior)
    translated = translated * sd + mu
    return {s: translated[i] for i, s in enumerate(srcs)}


def _metrics_on_mask(probs, labels, mask, threshold):
    mask = np.asarray(mask, dtype=bool)
    truth = labels[mask]
    if len(np.unique(truth)) < 2:
        raise ValueError("metrics are undefined on a single-class mask "
                         "(AUC needs both an anomaly and a normal node)")
    scores = probs[mask]
    return {
        "macro_f1": macro_f1((scores >= threshold).astype(int), truth),
        "auc_roc": auc_roc(scores, truth),
        "auc_pr": auc_pr(scores, truth),
    }


def _inference(g, state):
    """Re-run detection and translation, then the forward pass.

    Returns (probs, report, plan, overrides); this is the evaluate path
    and uses the state's current weights everywhere.
    """
    config = state.config
    use_plan, attention, append = ABLATIONS[config.ablation]
    overrides, report, plan = {}, None, CounterfactualPlan()
    with T.no_grad():
        if use_plan and state.pointer is not None:
            report = _detection(g, state, _detector_inputs(g, state))
            plan = _plan_from_report(report, config)
            if len(plan):
                h1 = gat_forward(g, g.features, state.gat1, attention=attention,
                                 activation="relu").data
                overrides = _translate_plan(g, state, plan, h1)
        _, _, p = counterfactual_forward(g, state, overrides=overrides,
                                         plan=plan.sources if overrides else None,
                                         append=append, attention=attention)
    return p.data.ravel(), report, plan, overrides


def evaluate(g, state, mask):
    """Metrics on a node mask, re-running detection and translation."""
    if g.splits is None:
        raise ValueError("graph needs splits before evaluation")
    probs, _, _, _ = _inference(g, state)
    return _metrics_on_mask(probs, g.labels, np.asarray(mask, dtype=bool),
                            state.threshold)


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data = s.copy()


def _tune_threshold(probs, labels, mask):
    """Pick the best macro-F1 threshold from validation score quantiles.

    A coarse quantile grid rather than every distinct score: razor-thin
    cuts overfit small validation sets.
    """
    mask = np.asarray(mask, dtype=bool)
    truth = labels[mask]
    scores = probs[mask]
    grid = np.unique(np.concatenate(
        [[0.5], np.quantile(scores, np.linspace(0.05, 0.95, 19))]))
    best_thr, best_f1 = 0.5, -1.0
    for thr in grid:
        f1 = macro_f1((scores >= thr).astype(int), truth)
        if f1 > best_f1:
            best_f1, best_thr = f1, float(thr)
    return best_thr, best_f1


def train(g, config):
    """Run all stages on a graph with splits; returns (RunResult, state)."""
    t0 = time.perf_counter()
    config.validate()
    if g.splits is None:
        raise ValueError("build splits before training")
    labels = g.labels
    for name, mask in (("train", g.splits.train), ("val", g.splits.val),
                       ("test", g.splits.test)):
        if len(np.unique(labels[mask])) < 2:
            raise ValueError(f"the {name} mask holds a single class; "
                             "macro-F1 and AUC need both")
    use_plan, attention, append = ABLATIONS[config.ablation]
    state = _build_state(g, config)
    state.phi = (anomaly_weight(labels, g.splits.train)
                 if config.phi == "auto" else float(config.phi))

    report = None
    plan = CounterfactualPlan()
    if use_plan:
        det_in = _detector_inputs(g, state)
        state.pointer, _ = train_pointer(
            g, det_in, teacher_features=g.features.data,
            hidden=config.pointer_hidden, epochs=config.pointer_epochs,
            lr=config.pointer_lr, seed=config.seed, length=state.seq_len,
            order=config.truncation, hops=config.hops, cell=config.pointer_cell,
            anchor=config.pointer_anchor)
        report = _detection(g, state, det_in)
        state.eta = report.eta
        plan = _plan_from_report(report, config)
        if not len(plan):
            log.warning("no heterophilic nodes found; training the vanilla stack")

    overrides = {}
    if len(plan):
        state.sched = make_schedule(config.diffusion_steps, config.beta_start,
                                    config.beta_end)
        with T.no_grad():
            h1_init = gat_forward(g, g.features, state.gat1, attention=attention,
                                  activation="relu").data
        mu = h1_init.mean(axis=0)
        sd = np.maximum(h1_init.std(axis=0), 1e-3)
        state.scaler = (mu, sd)
        state.predictor, _ = train_ddpm(
            (h1_init - mu) / sd, state.sched, config.ddpm_epochs,
            lr=config.ddpm_lr, seed=config.seed, hidden=config.ddpm_hidden,
            t_width=config.time_width)
        overrides = _translate_plan(g, state, plan, h1_init)

    params = state.trainable()
    opt = T.Adam(params, lr=config.lr)
    train_idx = np.flatnonzero(g.splits.train)
    y_train = labels[train_idx].astype(np.float64).reshape(-1, 1)
    losses, val_trace = [], []
    best_f1, best_epoch, best_weights = -1.0, -1, _snapshot(params)

    for epoch in range(config.epochs):
        if (config.regenerate_every and len(plan)
                and epoch > 0 and epoch % config.regenerate_every == 0):
            with T.no_grad():
                h1_now = gat_forward(g, g.features, state.gat1,
                                     attention=attention, activation="relu").data
            if config.ddpm_retrain:
                mu = h1_now.mean(axis=0)
                sd = np.maximum(h1_now.std(axis=0), 1e-3)
                state.scaler = (mu, sd)
                state.predictor, _ = train_ddpm(
                    (h1_now - mu) / sd, state.sched, config.ddpm_epochs,
                    lr=config.ddpm_lr, seed=config.seed,
                    hidden=config.ddpm_hidden, t_width=config.time_width)
            overrides = _translate_plan(g, state, plan, h1_now)
        _, _, p = counterfactual_forward(g, state, overrides=overrides,
                                         plan=plan.sources if overrides else None,
                                         append=append, attention=attention)
        loss = weighted_ce_loss(T.take_rows(p, train_idx), y_train, state.phi)
        losses.append(float(loss.data.item()))
        if config.threshold == "val":
            _, val_f1 = _tune_threshold(p.data.ravel(), labels, g.splits.val)
        else:
            val_pred = (p.data.ravel()[g.splits.val] >= state.threshold).astype(int)
            val_f1 = macro_f1(val_pred, labels[g.splits.val])
        val_trace.append(val_f1)
        if val_f1 > best_f1:
            best_f1, best_epoch = val_f1, epoch
            best_weights = _snapshot(params)
        opt.zero_grad()
        loss.backward()
        opt.step()

    _restore(params, best_weights)

    probs, final_report, final_plan, final_overrides = _inference(g, state)
    if config.threshold == "val":
        state.threshold, _ = _tune_threshold(probs, labels, g.splits.val)
    metrics = {split: _metrics_on_mask(probs, labels, mask, state.threshold)
               for split, mask in (("train", g.splits.train),
                                   ("val", g.splits.val),
                                   ("test", g.splits.test))}
    result = RunResult(
        metrics=metrics,
        loss_trace=losses,
        val_trace=val_trace,
        heterophilic_count=len(final_report.heterophilic) if final_report else 0,
        planned_count=len(final_plan),
        translated_count=len(final_overrides),
        best_epoch=best_epoch,
        eta=state.eta,
        phi=state.phi,
        threshold=state.threshold,
        wall_clock=time.perf_counter() - t0,
    )
    return result, state


# -- checkpoint bundle ----------------------------------------------------


def save_state(state, path):
    """All module weights + schedule + config hash into one container."""
    arrays = {}
    for mod_name, mod in state.modules().items():
        for p_name, p in mod.parameters().items():
            arrays[f"{mod_name}.{p_name}"] = p.data
    if state.sched is not None:
        arrays["sched.beta"] = state.sched.beta
    if state.scaler is not None:
        arrays["scaler.mu"], arrays["scaler.sd"] = state.scaler
    meta = {
        "version": 1,
        "config": asdict(state.config),
        "config_hash": state.config.hash(),
        "feature_dim": state.feature_dim,
        "seq_len": state.seq_len,
        "phi": state.phi,
        "threshold": state.threshold,
        "eta": state.eta,
        "has_pointer": state.pointer is not None,
        "has_predictor": state.predictor is not None,
    }
    save_checkpoint(path, arrays, meta)


def load_state(path, g=None):
    """Rebuild a PipelineState from a checkpoint bundle."""
    arrays, meta = load_checkpoint(path)
    config = PipelineConfig(**meta["config"])
    feat = int(meta["feature_dim"])
    if g is not None and g.feature_dim != feat:
        raise ValueError(f"checkpoint expects {feat}-dim features, "
                         f"graph has {g.feature_dim}")
    rng = np.random.default_rng(0)  # shapes only; weights are overwritten
    state = PipelineState(
        config=config, feature_dim=feat, seq_len=int(meta["seq_len"]),
        gcn=GcnLayer(feat, config.gcn_hidden, rng),
        gat1=GatLayer(feat, config.gat_hidden, rng, heads=config.heads),
        gat2=GatLayer(config.gat_hidden * config.heads, config.gat_hidden, rng,
                      heads=config.heads),
        head=ClassifierHead(config.gat_hidden * config.heads,
                            config.head_hidden, rng),
        phi=float(meta["phi"]),
        threshold=float(meta["threshold"]),
        eta=meta["eta"],
    )
    if meta["has_pointer"]:
        state.pointer = PointerNet(feat + config.gcn_hidden,
                                   config.pointer_hidden, rng,
                                   cell=config.pointer_cell)
    if meta["has_predictor"]:
        state.predictor = NoisePredictor(config.gat_hidden * config.heads, rng,
                                         hidden=config.ddpm_hidden,
                                         t_width=config.time_width)
    if "sched.beta" in arrays:
        beta = arrays["sched.beta"]
        state.sched = make_schedule(len(beta), float(beta[0]), float(beta[-1]))
    if "scaler.mu" in arrays:
        state.scaler = (arrays["scaler.mu"], arrays["scaler.sd"])
    for mod_name, mod in state.modules().items():
        for p_name, p in mod.parameters().items():
            key = f"{mod_name}.{p_name}"
            if key not in arrays:
                raise ValueError(f"checkpoint missing record {key}")
            if arrays[key].shape != p.data.shape:
                raise ValueError(f"checkpoint record {key} has shape "
                                 f"{arrays[key].shape}, expected {p.data.shape}")
            p.data = arrays[key].copy()
    return state
