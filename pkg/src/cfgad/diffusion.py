"""Denoising diffusion over node embeddings, plus guided translation.

A linear variance schedule, the closed-form forward noising, the
stochastic reverse step with fixed variance sigma_t^2 = beta_t, a small
MLP noise predictor trained with the simple epsilon-matching objective,
and the translation loop that steers reverse diffusion with a high-pass
guidance signal so a source embedding lands in the anomalous region.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with derived alpha products.

    Arrays are indexed [t-1] for t in 1..steps; alpha_bar_at(0) == 1.
    """

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def alpha_bar_at(self, t):
        if not 0 <= t <= self.steps:
            raise ValueError(f"t={t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else self.alpha_bar[t - 1]


def make_schedule(steps=1000, beta_start=1e-4, beta_end=0.02):
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"invalid beta endpoints ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    return DiffusionSchedule(steps=steps, beta=beta, alpha=alpha,
                             alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))


def forward_sample(z0, t, eps, sched):
    """Closed-form noising: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= sched.steps:
        raise ValueError(f"t={t} outside [1, {sched.steps}]")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64) if not np.isscalar(eps) else eps
    abar = sched.alpha_bar[t - 1]
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def timestep_embedding(t, width=32):
    """Sinusoidal embedding of integer timesteps, shape (len(t), width)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class NoisePredictor:
    """MLP epsilon predictor on [z_t, timestep embedding].

    Input and output widths both equal the embedding dimension; the output
    layer starts at zero so an untrained predictor returns zeros.
    """

    def __init__(self, dim, rng, hidden=128, t_width=32):
        self.dim = dim
        self.hidden = hidden
        self.t_width = t_width
        self.w1 = T.glorot((dim + t_width, hidden), rng)
        self.b1 = T.zeros((hidden,), requires_grad=True)
        self.w2 = T.glorot((hidden, hidden), rng)
        self.b2 = T.zeros((hidden,), requires_grad=True)
        self.w3 = T.zeros((hidden, dim), requires_grad=True)
        self.b3 = T.zeros((dim,), requires_grad=True)

    def parameters(self):
        return {"W1": self.w1, "b1": self.b1, "W2": self.w2, "b2": self.b2,
                "W3": self.w3, "b3": self.b3}

    def forward(self, z_t, t):
        """Predicted noise for a batch: z_t (m, dim), t integer or (m,)."""
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        x = Tensor(np.concatenate([z_t, timestep_embedding(t, self.t_width)], axis=1))
        h = T.relu(T.add_rowvec(T.matmul(x, self.w1), self.b1))
        h = T.relu(T.add_rowvec(T.matmul(h, self.w2), self.b2))
        return T.add_rowvec(T.matmul(h, self.w3), self.b3)

    def predict(self, z_t, t):
        """forward() without tape recording, returning an ndarray."""
        with T.no_grad():
            return self.forward(z_t, t).data


def reverse_step(z_t, t, net, sched, noise):
    """One stochastic denoising transition from level t to t-1.

    Callers pass noise=0 at t=1 so the final step is deterministic.
    """
    if not 1 <= t <= sched.steps:
        raise ValueError(f"t={t} outside [1, {sched.steps}]")
    z_t = np.asarray(z_t, dtype=np.float64)
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    eps_hat = net.predict(z_t, t)
    eps_hat = eps_hat.reshape(z_t.shape)
    mean = (z_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    return mean + sched.sigma[t - 1] * noise


def train_ddpm(embeddings, sched, epochs, lr=1e-3, seed=0, hidden=128,
               t_width=32, net=None):
    """Fit the noise predictor with the epsilon-matching objective.

    Per epoch one uniform timestep per row, full batch; returns
    (net, per-epoch loss trace). Loss is the mean squared noise-residual
    norm, so an untrained predictor sits near the embedding dimension.
    """
    z0 = np.atleast_2d(np.asarray(
        embeddings.data if isinstance(embeddings, Tensor) else embeddings,
        dtype=np.float64))
    m, dim = z0.shape
    if m < 1:
        raise ValueError("need at least one embedding to train on")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(21,)))
    if net is None:
        net = NoisePredictor(dim, rng, hidden=hidden, t_width=t_width)
    opt = T.Adam(net.parameters().values(), lr=lr)
    losses = []
    for epoch in range(epochs):
        t = rng.integers(1, sched.steps + 1, size=m)
        eps = rng.standard_normal((m, dim))
        abar = sched.alpha_bar[t - 1][:, None]
        z_t = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
        pred = net.forward(z_t, t)
        resid = T.sub(pred, Tensor(eps))
        loss = T.scale(T.sum_all(T.mul(resid, resid)), 1.0 / m)
        if not np.isfinite(loss.data).all():
            raise RuntimeError(
                f"diffusion training diverged at epoch {epoch} "
                f"(m={m}, dim={dim}, lr={lr}, steps={sched.steps})")
        losses.append(float(loss.data.item()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net, losses


def reverse_chain(prior, net, sched, rng, start_t=None):
    """Unconditional reverse diffusion from a prior sample down to z0."""
    z = np.atleast_2d(np.asarray(prior, dtype=np.float64)).copy()
    start_t = start_t or sched.steps
    for t in range(start_t, 0, -1):
        noise = rng.standard_normal(z.shape) if t > 1 else 0.0
        z = reverse_step(z, t, net, sched, noise)
    return z


def sample(net, sched, count, rng):
    """Unconditional samples from the learned distribution, shape (count, dim)."""
    prior = rng.standard_normal((count, net.dim))
    return reverse_chain(prior, net, sched, rng)


def high_pass(embeddings, g, v, mode="mean"):
    """A node embedding's deviation from its neighborhood.

    mode="mean": embedding minus the neighbor mean (zero vector for
    isolated nodes). mode="sym": identity minus symmetric-normalized
    smoothing.
    """
    z = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings,
                   dtype=np.float64)
    nbrs = g.neighbor_lists[v]
    if mode == "mean":
        if not nbrs:
            return np.zeros(z.shape[1])
        return z[v] - z[list(nbrs)].mean(axis=0)
    if mode == "sym":
        if not nbrs:
            return z[v].copy()
        dv = len(nbrs)
        smooth = sum(z[u] / np.sqrt(dv * len(g.neighbor_lists[u])) for u in nbrs)
        return z[v] - smooth
    raise ValueError(f"unknown high-pass mode {mode!r}")


def node_streams(seed, node):
    """Per-translation random streams derived from (seed, node id).

    Returns (prior, reverse, guidance) generators; the reverse stream
    alone reproduces the unconditional trajectory.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(101, node))
    child = ss.spawn(3)
    return tuple(np.random.default_rng(c) for c in child)


def translate(z_src, z_ref, net, sched, gamma=1.1, *, src_context,
              ref_context, src_context_size=1, ref_context_size=1,
              rngs, prior_steps=None, trace=None):
    """Translate one source embedding toward the reference class.

    The source is noised to the prior level, then denoised; at every step
    the latent's high-pass residual (against the source's noised
    neighborhood mean) is pulled toward the reference's (against the
    noised reference context) with weight gamma. Contexts are the clean
    neighborhood means; their noise shrinks with the member count, as a
    mean of independently noised members would.
    """
    z_src = np.asarray(z_src, dtype=np.float64)
    z_ref = np.asarray(z_ref, dtype=np.float64)
    if z_src.shape != z_ref.shape:
        raise T.ShapeError(f"translate: source width {z_src.shape} vs "
                           f"reference width {z_ref.shape}")
    src_context = np.asarray(src_context, dtype=np.float64)
    ref_context = np.asarray(ref_context, dtype=np.float64)
    rng_prior, rng_rev, rng_guid = rngs
    start_t = prior_steps or sched.steps
    if not 1 <= start_t <= sched.steps:
        raise ValueError(f"prior steps {start_t} outside [1, {sched.steps}]")

    abar_T = sched.alpha_bar_at(start_t)
    z = np.sqrt(abar_T) * z_src + np.sqrt(1.0 - abar_T) * rng_prior.standard_normal(z_src.shape)
    src_scale = 1.0 / np.sqrt(src_context_size)
    ref_scale = 1.0 / np.sqrt(ref_context_size)
    for t in range(start_t, 0, -1):
        noise = rng_rev.standard_normal(z.shape) if t > 1 else 0.0
        z_hat = reverse_step(z, t, net, sched, noise)
        abar_prev = sched.alpha_bar_at(t - 1)
        root_a = np.sqrt(abar_prev)
        root_1ma = np.sqrt(1.0 - abar_prev)
        ref_t = root_a * z_ref + root_1ma * rng_guid.standard_normal(z_ref.shape)
        ref_ctx_t = root_a * ref_context + root_1ma * ref_scale * rng_guid.standard_normal(z_ref.shape)
        src_ctx_t = root_a * src_context + root_1ma * src_scale * rng_guid.standard_normal(z_ref.shape)
        z = z_hat + gamma * ((ref_t - ref_ctx_t) - (z_hat - src_ctx_t))
        if trace is not None:
            trace.append((t - 1, float(np.linalg.norm(z))))
    return z


def translate_batch(z_src, z_ref, net, sched, gamma=1.1, *, src_contexts,
                    ref_context, src_context_sizes, ref_context_size=1,
                    rng_triples, prior_steps=None):
    """Translate several sources at once, one predictor call per step.

    Per-row noise comes from that row's own (prior, reverse, guidance)
    streams in the same order as translate(), so each output row is
    bitwise identical to a single-row translate() with the same streams.
    """
    z_src = np.atleast_2d(np.asarray(z_src, dtype=np.float64))
    k, dim = z_src.shape
    z_ref = np.asarray(z_ref, dtype=np.float64)
    src_contexts = np.atleast_2d(np.asarray(src_contexts, dtype=np.float64))
    ref_context = np.asarray(ref_context, dtype=np.float64)
    src_scales = 1.0 / np.sqrt(np.asarray(src_context_sizes, dtype=np.float64))
    ref_scale = 1.0 / np.sqrt(ref_context_size)
    if len(rng_triples) != k:
        raise ValueError(f"{k} rows but {len(rng_triples)} stream triples")
    start_t = prior_steps or sched.steps
    if not 1 <= start_t <= sched.steps:
        raise ValueError(f"prior steps {start_t} outside [1, {sched.steps}]")

    abar_T = sched.alpha_bar_at(start_t)
    prior_noise = np.stack([rngs[0].standard_normal(dim) for rngs in rng_triples])
    z = np.sqrt(abar_T) * z_src + np.sqrt(1.0 - abar_T) * prior_noise
    for t in range(start_t, 0, -1):
        if t > 1:
            noise = np.stack([rngs[1].standard_normal(dim) for rngs in rng_triples])
        else:
            noise = 0.0
        z_hat = reverse_step(z, t, net, sched, noise)
        abar_prev = sched.alpha_bar_at(t - 1)
        root_a = np.sqrt(abar_prev)
        root_1ma = np.sqrt(1.0 - abar_prev)
        ref_eps = np.empty((k, dim))
        refctx_eps = np.empty((k, dim))
        srcctx_eps = np.empty((k, dim))
        for row, rngs in enumerate(rng_triples):
            ref_eps[row] = rngs[2].standard_normal(dim)
            refctx_eps[row] = rngs[2].standard_normal(dim)
            srcctx_eps[row] = rngs[2].standard_normal(dim)
        ref_t = root_a * z_ref + root_1ma * ref_eps
        ref_ctx_t = root_a * ref_context + root_1ma * ref_scale * refctx_eps
        src_ctx_t = root_a * src_contexts + root_1ma * src_scales[:, None] * srcctx_eps
        z = z_hat + gamma * ((ref_t - ref_ctx_t) - (z_hat - src_ctx_t))
    return z
