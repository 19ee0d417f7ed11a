"""Gradient oracles and source pretraining.

Nothing here runs during forward-only adaptation. The reverse-mode and
central-difference gradients exist to validate each other, to pretrain the
source model, and to serve as the reference direction in alignment probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from .errors import CapabilityError, ConfigError, NumericalError, ShapeError
from .net import (
    LN_EPS_DEFAULT,
    Layer,
    Network,
    apply_params,
    forward,
    input_width,
    make_layout,
    pack_params,
)

LOSS_KINDS = ("cross-entropy", "entropy", "si-entropy")


@dataclass
class SiLossContext:
    """Constants for the scale-invariant objective when used as a BP loss.

    rbar (the shared reference norm) and the center are held fixed: the
    symmetric two-sided probe sees no first-order variation of the shared
    norm, so the comparable exact gradient treats it as a constant. If rbar
    is None the clean logit norm of each row is used.
    """

    center: np.ndarray | None = None
    rbar: np.ndarray | None = None
    moments: obj.TargetMoments | None = None
    src: obj.SourceStats | None = None
    rho: float = 0.999
    lam: float = 0.0


def _loss_value_and_grads(o, h, labels, loss_kind, ctx: SiLossContext | None):
    """Mean loss over the batch plus gradients w.r.t. logits and features."""
    B = o.shape[0]
    if loss_kind == "cross-entropy":
        if labels is None:
            raise ConfigError("cross-entropy needs labels")
        p = obj.softmax(o)
        picked = p[np.arange(B), labels]
        loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
        do = p.copy()
        do[np.arange(B), labels] -= 1.0
        return loss, do / B, None
    if loss_kind == "entropy":
        loss = float(obj.entropy_batch(o).mean())
        do = obj.entropy_grad_batch(o) / B
        dh = None
        if ctx is not None and ctx.lam > 0.0:
            if ctx.src is None or ctx.moments is None:
                raise ConfigError("entropy with lam > 0 needs moments and source stats")
            loss += ctx.lam * float(
                obj.moment_alignment_loss_batch(h, ctx.moments, ctx.src, ctx.rho).mean()
            )
            dh = ctx.lam * obj.moment_alignment_grad_batch(h, ctx.moments, ctx.src, ctx.rho) / B
        return loss, do, dh
    if loss_kind == "si-entropy":
        ctx = ctx or SiLossContext()
        rbar = ctx.rbar
        if rbar is None:
            rbar = np.linalg.norm(o, axis=-1)
        s = (rbar[:, None] / (np.linalg.norm(o, axis=-1, keepdims=True) + obj.NORM_EPS)) * o
        if ctx.center is not None:
            s = s - ctx.center
        loss = float(obj.entropy_batch(s).mean())
        do = obj.scale_invariant_entropy_grad_batch(o, rbar, ctx.center) / B
        dh = None
        if ctx.lam > 0.0:
            if ctx.src is None or ctx.moments is None:
                raise ConfigError("si-entropy with lam > 0 needs moments and source stats")
            loss += ctx.lam * float(
                obj.moment_alignment_loss_batch(h, ctx.moments, ctx.src, ctx.rho).mean()
            )
            dh = ctx.lam * obj.moment_alignment_grad_batch(h, ctx.moments, ctx.src, ctx.rho) / B
        return loss, do, dh
    raise ConfigError(f"unknown loss kind {loss_kind!r}")


def batch_loss(net, x, labels=None, loss_kind="cross-entropy", ctx=None) -> float:
    o, h = forward(net, x)
    loss, _, _ = _loss_value_and_grads(o, h, labels, loss_kind, ctx)
    return loss


def _forward_cached(net: Network, x: np.ndarray):
    acts = [np.asarray(x, dtype=np.float64)]
    caches = []
    out = acts[0]
    for layer in net.layers:
        kind = layer.kind
        if kind == "relu":
            caches.append(out > 0.0)
            out = np.maximum(out, 0.0)
        elif kind == "tanh":
            out = np.tanh(out)
            caches.append(out)
        elif kind == "input-offset":
            caches.append(None)
            out = out + layer.params["offset"]
        elif kind == "linear":
            caches.append(out)
            out = out @ layer.params["weight"].T + layer.params["bias"]
        elif kind == "layernorm":
            eps = layer.hyper.get("epsilon", LN_EPS_DEFAULT)
            mu = out.mean(axis=1, keepdims=True)
            xc = out - mu
            var = (xc * xc).mean(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            xn = xc * inv
            caches.append((xn, inv))
            out = xn * layer.params["gain"] + layer.params["shift"]
        else:
            raise CapabilityError(f"no reverse rule for layer kind {kind!r}")
        acts.append(out)
    return acts, caches


def _layer_backward(layer: Layer, cache, dy: np.ndarray):
    kind = layer.kind
    grads = {}
    if kind == "relu":
        return grads, dy * cache
    if kind == "tanh":
        return grads, dy * (1.0 - cache * cache)
    if kind == "input-offset":
        grads["offset"] = dy.sum(axis=0)
        return grads, dy
    if kind == "linear":
        x = cache
        grads["weight"] = dy.T @ x
        grads["bias"] = dy.sum(axis=0)
        return grads, dy @ layer.params["weight"]
    if kind == "layernorm":
        xn, inv = cache
        grads["gain"] = (dy * xn).sum(axis=0)
        grads["shift"] = dy.sum(axis=0)
        dxn = dy * layer.params["gain"]
        dx = inv * (
            dxn
            - dxn.mean(axis=1, keepdims=True)
            - xn * (dxn * xn).mean(axis=1, keepdims=True)
        )
        return grads, dx
    raise CapabilityError(f"no reverse rule for layer kind {kind!r}")


def grad_backprop(
    net: Network,
    x: np.ndarray,
    labels=None,
    loss_kind: str = "cross-entropy",
    *,
    ctx: SiLossContext | None = None,
    subset: str = "all",
) -> np.ndarray:
    """Exact gradient of the mean batch loss, flattened over `subset`."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != input_width(net):
        raise ShapeError("input width mismatch")
    acts, caches = _forward_cached(net, x)
    o = acts[-1]
    h = acts[net.feature_tap + 1]
    _, dy, dh = _loss_value_and_grads(o, h, labels, loss_kind, ctx)

    per_layer = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        if dh is not None and i == net.feature_tap:
            dy = dy + dh
        per_layer[i], dy = _layer_backward(net.layers[i], caches[i], dy)

    layout = make_layout(net, subset)
    out = np.zeros(layout.size)
    for e in layout.entries:
        out[e.offset:e.offset + e.size] = per_layer[e.layer][e.name].ravel()
    return out


FD_PARAM_GUARD = 10_000


def grad_finite_diff(net: Network, x: np.ndarray, loss_fn, subset: str = "all") -> np.ndarray:
    """Central differences per coordinate, h = 1e-5 * max(1, |theta_i|).

    loss_fn(net, x) -> float is re-evaluated at each probe point; a
    non-finite loss reports the offending coordinate.
    """
    layout = make_layout(net, subset)
    if layout.size > FD_PARAM_GUARD:
        raise ConfigError(
            f"finite differences limited to {FD_PARAM_GUARD} parameters, got {layout.size}"
        )
    theta = pack_params(net, subset)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        h = 1e-5 * max(1.0, abs(theta[i]))
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        lu = loss_fn(apply_params(net, up, subset), x)
        ld = loss_fn(apply_params(net, down, subset), x)
        if not (np.isfinite(lu) and np.isfinite(ld)):
            raise NumericalError(f"non-finite loss at probe of coordinate {i}")
        grad[i] = (lu - ld) / (2.0 * h)
    return grad


@dataclass
class PretrainResult:
    net: Network
    stats: obj.SourceStats | None
    losses: list = field(default_factory=list)


def pretrain_source(
    net: Network,
    dataset,
    steps: int,
    lr: float,
    batch: int = 0,
    seed: int = 0,
    compute_stats: bool = True,
) -> PretrainResult:
    """Cross-entropy SGD on labeled source data; records feature statistics
    (per-dimension mean and population std at the feature tap) over the full
    training set. Aborts with the step index if the loss goes non-finite."""
    if dataset.x.shape[0] == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    rng = np.random.default_rng(seed)
    losses = []
    n = dataset.x.shape[0]
    for step in range(steps):
        if batch and batch < n:
            idx = rng.choice(n, size=batch, replace=False)
            xb, yb = dataset.x[idx], dataset.y[idx]
        else:
            xb, yb = dataset.x, dataset.y
        loss = batch_loss(net, xb, yb, "cross-entropy")
        if not np.isfinite(loss):
            raise NumericalError(f"pretraining diverged at step {step}")
        losses.append(loss)
        if lr != 0.0:
            g = grad_backprop(net, xb, yb, "cross-entropy", subset="all")
            net = apply_params(net, pack_params(net, "all") - lr * g, "all")
    stats = None
    if compute_stats:
        _, feats = forward(net, dataset.x)
        stats = obj.SourceStats(feats.mean(axis=0), feats.std(axis=0))
    return PretrainResult(net, stats, losses)
