"""Domain critic and the Wasserstein-1 terms used for feature alignment.

The critic scores a feature vector with a one-hidden-layer ReLU network.
Its score gap between source and target batches estimates the
Wasserstein-1 distance (Kantorovich-Rubinstein dual). A gradient penalty
at real and interpolated features keeps the critic close to 1-Lipschitz.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import glorot_uniform
from .tensor import DimensionError, Tensor

FEATURE_DIM = 896
CRITIC_HIDDEN = 128
DEFAULT_RHO = 10.0


class Critic:
    """r_c(h) = w2 . relu(W1 h + b1) + b2."""

    def __init__(self, in_features=FEATURE_DIM, hidden=CRITIC_HIDDEN, rng=None,
                 dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.hidden = in_features, hidden
        self.w1 = Tensor(glorot_uniform(rng, (hidden, in_features), in_features, hidden, dtype),
                         requires_grad=True, name="critic.w1")
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True, name="critic.b1")
        self.w2 = Tensor(glorot_uniform(rng, (1, hidden), hidden, 1, dtype),
                         requires_grad=True, name="critic.w2")
        self.b2 = Tensor(np.zeros(1, dtype=dtype), requires_grad=True, name="critic.b2")

    def params(self):
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2)}

    def __call__(self, h):
        return critic_forward(h, self)


def _as_tensor(h) -> Tensor:
    return h if isinstance(h, Tensor) else Tensor(h)


def critic_forward(h, critic: Critic) -> Tensor:
    """Scores, shape [batch]."""
    h = _as_tensor(h)
    if h.data.ndim != 2 or h.shape[1] != critic.in_features:
        raise DimensionError(f"critic expects [batch, {critic.in_features}], got {h.shape}")
    hidden = T.relu(T.linear(h, critic.w1, critic.b1))
    score = T.linear(hidden, critic.w2, critic.b2)
    return score.reshape(score.shape[0])


def empirical_wasserstein(h_s, h_t, critic: Critic) -> Tensor:
    """mean r_c(h_s) - mean r_c(h_t) over the two minibatches."""
    h_s, h_t = _as_tensor(h_s), _as_tensor(h_t)
    if h_s.shape[0] == 0 or h_t.shape[0] == 0:
        raise ValueError("empirical_wasserstein needs nonempty batches")
    return critic(h_s).mean() - critic(h_t).mean()


def interpolates(h_s, h_t, rng: np.random.Generator | int, eps=None) -> np.ndarray:
    """One random point on the segment between each (source, target) pair.

    ``eps`` overrides the Uniform(0, 1) draws (scalar or one value per pair).
    """
    hs = h_s.data if isinstance(h_s, Tensor) else np.asarray(h_s)
    ht = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t)
    if hs.shape != ht.shape:
        raise DimensionError(f"interpolates needs paired batches, got {hs.shape} and {ht.shape}")
    if eps is None:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        eps = rng.uniform(0.0, 1.0, size=(hs.shape[0], 1))
    eps = np.broadcast_to(np.asarray(eps, dtype=hs.dtype).reshape(-1, 1), (hs.shape[0], 1))
    return eps * hs + (1 - eps) * ht


def assemble_h(h_s, h_t, h_r) -> np.ndarray:
    parts = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in (h_s, h_t, h_r)]
    return np.concatenate(parts, axis=0)


def gradient_penalty(h, critic: Critic) -> Tensor:
    h = _as_tensor(h)
    if h.shape[0] == 0:
        raise ValueError("gradient_penalty needs at least one row")
    return T.relu_mlp_gradient_penalty(h, critic.w1, critic.b1, critic.w2)


def critic_objective(h_s, h_t, critic: Critic, rho=DEFAULT_RHO, rng=None, h=None):
    """Return (l_wd - rho * l_grad, l_wd, l_grad); the first is maximized over the critic.

    The penalty is evaluated on {h_s, h_t, h_r} unless ``h`` is given.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    hs = h_s.data if isinstance(h_s, Tensor) else np.asarray(h_s)
    ht = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t)
    l_wd = empirical_wasserstein(hs, ht, critic)
    if h is None:
        h = assemble_h(hs, ht, interpolates(hs, ht, rng if rng is not None else 0))
    l_grad = gradient_penalty(h, critic)
    return l_wd - rho * l_grad, l_wd, l_grad


def critic_objective_grads(h_s, h_t, h_r, critic: Critic, rho=DEFAULT_RHO):
    """Value and critic-parameter gradients of ``critic_objective`` in closed form.

    Same quantities as the taped path, but the hidden pre-activations of the
    stacked {h_s, h_t, h_r} batch are computed once and reused by both terms.
    The input gradient of row i is g_i = u_i W1 with u_i = mask_i * w2, so every
    product involving g goes through the [H, H] Gram matrix K = W1 W1^T and
    no [N, D] intermediate is formed.
    Returns (objective, l_wd, l_grad, grads) with plain floats and arrays.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    h = assemble_h(h_s, h_t, h_r)
    ns, nt = len(h_s), len(h_t)
    if ns == 0 or nt == 0:
        raise ValueError("critic objective needs nonempty batches")
    n, npair = len(h), ns + nt
    w1, b1, w2 = critic.w1.data, critic.b1.data, critic.w2.data.reshape(-1)
    z = h @ w1.T
    z += b1
    mask = z > 0
    a = np.maximum(z, 0)
    diff = a[:ns].mean(axis=0) - a[ns:npair].mean(axis=0)
    l_wd = float(diff @ w2)

    u = mask * w2                                   # [N, H]
    uk = u @ (w1 @ w1.T)                            # rows: g_i W1^T
    norms = np.sqrt(np.maximum(np.einsum("ij,ij->i", uk, u), 0))
    l_grad = float(np.mean((norms - 1.0) ** 2))
    # d l_grad / d g_i = c_i g_i
    c = ((2.0 / n) * (norms - 1.0) / np.where(norms > 0, norms, 1.0)).astype(h.dtype)

    # d l_wd / d z: rows of h_s weigh +1/ns, rows of h_t -1/nt
    coef = np.concatenate([np.full(ns, 1.0 / ns), np.full(nt, -1.0 / nt)]).astype(h.dtype)
    dz = coef[:, None] * u[:npair]
    # gw1 = dz^T h - rho * sum_i c_i u_i^T g_i, as a single product
    left = np.concatenate([dz, -rho * ((u * c[:, None]).T @ u)], axis=0)
    gw1 = left.T @ np.concatenate([h[:npair], w1], axis=0)
    gb1 = dz.sum(axis=0)
    gw2 = diff - rho * (mask * (c[:, None] * uk)).sum(axis=0)
    grads = {critic.w1.name: gw1, critic.b1.name: gb1,
             critic.w2.name: gw2.reshape(critic.w2.shape),
             critic.b2.name: np.zeros_like(critic.b2.data)}
    return l_wd - rho * l_grad, l_wd, l_grad, grads


def combined_loss(l_c: Tensor, l_wd: Tensor, lam) -> Tensor:
    """l_c + lam * l_wd; the penalty is left out of the extractor's objective."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return l_c + lam * l_wd


def w1_empirical_1d(xs, ys) -> float:
    """Exact W1 between two equal-size empirical distributions on the line."""
    xs, ys = np.ravel(xs), np.ravel(ys)
    if xs.size != ys.size:
        raise ValueError(f"w1_empirical_1d needs equal counts, got {xs.size} and {ys.size}")
    if xs.size == 0:
        raise ValueError("w1_empirical_1d needs at least one sample")
    return float(np.mean(np.abs(np.sort(xs) - np.sort(ys))))
