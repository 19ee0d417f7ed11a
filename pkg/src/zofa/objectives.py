"""Unsupervised test-time objectives and the online statistics they track.

The entropy term is made scale-invariant by rescaling each logit vector to a
shared reference norm and subtracting a slowly moving output center before
the softmax, which blocks the degenerate "reduce entropy by inflating logit
norms" solution. The alignment term scores a single sample by the moments a
streaming EMA *would* have after absorbing it, so it stays well defined even
at batch size 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass(frozen=True)
class OnlineCenter:
    """EMA of the averaged output logits; c is None until first update."""

    c: np.ndarray | None = None
    ema_factor: float = 0.9


@dataclass(frozen=True)
class TargetMoments:
    """Streaming first/second feature moments; None until first update."""

    m: np.ndarray | None = None
    q: np.ndarray | None = None
    ema_factor: float = 0.9


@dataclass(frozen=True)
class SourceStats:
    """Per-dimension feature mean and standard deviation from source data."""

    mean: np.ndarray
    std: np.ndarray


def softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_batch(o: np.ndarray) -> np.ndarray:
    """Shannon entropy of softmax(o) per row."""
    p = softmax(np.atleast_2d(o))
    plogp = p * np.log(np.maximum(p, 1e-300))  # p log p -> 0 as p -> 0
    return -plogp.sum(axis=-1)


def entropy(o: np.ndarray) -> float:
    return float(entropy_batch(o)[0])


def rescaled_logits(o: np.ndarray, o_bar: np.ndarray, c: np.ndarray | None) -> np.ndarray:
    """Map o to the shared reference norm ||o_bar|| and subtract the center."""
    o = np.atleast_2d(o)
    o_bar = np.atleast_2d(o_bar)
    rbar = np.linalg.norm(o_bar, axis=-1, keepdims=True)
    s = (rbar / (np.linalg.norm(o, axis=-1, keepdims=True) + NORM_EPS)) * o
    if c is not None:
        s = s - c
    return s


def scale_invariant_entropy_batch(
    o: np.ndarray, o_bar: np.ndarray, center: OnlineCenter | None
) -> np.ndarray:
    o = np.atleast_2d(o)
    if o.shape[-1] < 2:
        raise ShapeError("entropy needs at least 2 classes")
    c = None if center is None else center.c
    return entropy_batch(rescaled_logits(o, o_bar, c))


def scale_invariant_entropy(
    o: np.ndarray, o_bar: np.ndarray, center: OnlineCenter | None
) -> float:
    """Entropy of the rescaled, decentered softmax; in [0, ln C] and invariant
    to any positive rescaling applied jointly to o and o_bar."""
    return float(scale_invariant_entropy_batch(o, o_bar, center)[0])


def update_center(center: OnlineCenter, o_bar_batch: np.ndarray) -> OnlineCenter:
    """EMA step with the batch mean of averaged logits; first call replaces."""
    mean = np.atleast_2d(o_bar_batch).mean(axis=0)
    if center.c is None:
        return OnlineCenter(mean, center.ema_factor)
    f = center.ema_factor
    return OnlineCenter(f * center.c + (1.0 - f) * mean, center.ema_factor)


def update_moments(
    moments: TargetMoments, h_bar: np.ndarray, h_sq_bar: np.ndarray
) -> TargetMoments:
    """EMA step with batch means of the averaged feature and averaged squared
    feature; first call replaces. ema_factor 0 means replace every step."""
    h_bar = np.asarray(h_bar, dtype=np.float64)
    h_sq_bar = np.asarray(h_sq_bar, dtype=np.float64)
    if moments.m is None:
        return TargetMoments(h_bar.copy(), h_sq_bar.copy(), moments.ema_factor)
    f = moments.ema_factor
    return TargetMoments(
        f * moments.m + (1.0 - f) * h_bar,
        f * moments.q + (1.0 - f) * h_sq_bar,
        moments.ema_factor,
    )


def hypothetical_moments(
    h: np.ndarray, moments: TargetMoments, rho: float
) -> tuple[np.ndarray, np.ndarray]:
    """Moments the tracker would hold after absorbing h with weight rho.

    Returns (m_hat, sigma_hat) per row; the variance reconstruction
    q_hat - m_hat^2 is clamped at zero before the square root.
    """
    h = np.atleast_2d(h)
    m_hat = (1.0 - rho) * moments.m + rho * h
    q_hat = (1.0 - rho) * moments.q + rho * h * h
    var = q_hat - m_hat * m_hat
    if np.any(var < 0.0):
        log.debug("clamped %d negative variance cells", int(np.sum(var < 0.0)))
        var = np.maximum(var, 0.0)
    return m_hat, np.sqrt(var)


def moment_alignment_loss_batch(
    h: np.ndarray, moments: TargetMoments, src: SourceStats, rho: float
) -> np.ndarray:
    h = np.atleast_2d(h)
    if moments.m is None:
        raise ConfigError("moments must be initialized before alignment loss")
    if h.shape[-1] != src.mean.shape[0]:
        raise ShapeError(
            f"feature width {h.shape[-1]} does not match source stats {src.mean.shape[0]}"
        )
    m_hat, s_hat = hypothetical_moments(h, moments, rho)
    dm = m_hat - src.mean
    ds = s_hat - src.std
    return (dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1)


def moment_alignment_loss(
    h: np.ndarray, moments: TargetMoments, src: SourceStats, rho: float
) -> float:
    """Squared distance of the hypothetical updated moments to source stats."""
    return float(moment_alignment_loss_batch(h, moments, src, rho)[0])


def combined_loss_batch(
    o: np.ndarray,
    o_bar: np.ndarray,
    h: np.ndarray,
    center: OnlineCenter | None,
    moments: TargetMoments | None,
    src: SourceStats | None,
    rho: float,
    lam: float,
) -> np.ndarray:
    if lam < 0.0:
        raise ConfigError("lambda must be nonnegative")
    loss = scale_invariant_entropy_batch(o, o_bar, center)
    if lam > 0.0:
        if src is None:
            raise ConfigError("lambda > 0 requires source statistics")
        loss = loss + lam * moment_alignment_loss_batch(h, moments, src, rho)
    return loss


def combined_loss(o, o_bar, h, center, moments, src, rho: float, lam: float) -> float:
    """Scale-invariant entropy plus lam times the moment alignment term."""
    return float(combined_loss_batch(o, o_bar, h, center, moments, src, rho, lam)[0])


# gradients of the loss terms w.r.t. their direct inputs; used by the
# backprop oracle, never by the forward-only adaptation path

def entropy_grad_batch(o: np.ndarray) -> np.ndarray:
    """d entropy(softmax(o)) / d o, per row."""
    o = np.atleast_2d(o)
    p = softmax(o)
    logp = np.log(np.maximum(p, 1e-300))
    ent = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + ent)


def scale_invariant_entropy_grad_batch(
    o: np.ndarray, rbar: np.ndarray, c: np.ndarray | None
) -> np.ndarray:
    """Gradient w.r.t. o with the reference norm rbar held constant."""
    o = np.atleast_2d(o)
    rbar = np.atleast_1d(rbar).reshape(-1, 1)
    norm = np.linalg.norm(o, axis=-1, keepdims=True)
    s = (rbar / (norm + NORM_EPS)) * o
    if c is not None:
        s = s - c
    a = entropy_grad_batch(s)
    denom = norm + NORM_EPS
    radial = (a * o).sum(axis=-1, keepdims=True) / (norm * denom)
    return rbar * (a / denom - o * radial / denom)


def moment_alignment_grad_batch(
    h: np.ndarray, moments: TargetMoments, src: SourceStats, rho: float
) -> np.ndarray:
    """d alignment(h) / d h per row; zero where the variance clamp is active."""
    h = np.atleast_2d(h)
    m_hat = (1.0 - rho) * moments.m + rho * h
    q_hat = (1.0 - rho) * moments.q + rho * h * h
    var = q_hat - m_hat * m_hat
    s_hat = np.sqrt(np.maximum(var, 0.0))
    g = 2.0 * rho * (m_hat - src.mean)
    active = var > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        dsig = np.where(active, rho * (h - m_hat) / np.where(active, s_hat, 1.0), 0.0)
    return g + 2.0 * (s_hat - src.std) * dsig
