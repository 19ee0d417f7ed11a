"""Zeroth-order direction estimators and anchor-based trajectory control.

Estimators turn scalar loss differences along random directions into
parameter-space updates. The anchor machinery keeps the online parameters in
a stable neighborhood: guided perturbations point a few probes per batch
along the pull-back direction, a weak convex relaxation smooths the
trajectory, and an optional balancer damps updates that move away from the
anchor faster than recent updates have moved toward it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import ConfigError, NumericalError
from .perturb import ANCHOR_GUIDED, GAUSSIAN, accumulate_update


@dataclass(frozen=True)
class AnchorState:
    """Reference parameters plus the rates that govern their influence.

    ema_rate 0 keeps the anchor fixed forever; relax is the per-step convex
    pull toward the anchor applied after each update.
    """

    theta: np.ndarray
    ema_rate: float = 0.0
    relax: float = 0.001
    delta: float = 1e-8


@dataclass(frozen=True)
class BalanceState:
    a_in: float = 0.0
    a_out: float = 0.0
    beta: float = 0.9
    eps: float = 1e-8


def spsa_one_sided(loss_plus: float, loss_base: float, mu: float, z: np.ndarray) -> np.ndarray:
    """((l+ - l0) / mu) * z."""
    if mu <= 0.0:
        raise ConfigError("mu must be positive")
    if not (np.isfinite(loss_plus) and np.isfinite(loss_base)):
        raise NumericalError("non-finite loss fed to one-sided estimator")
    return ((loss_plus - loss_base) / mu) * z


def spsa_two_sided(loss_plus: float, loss_minus: float, mu: float, z: np.ndarray) -> np.ndarray:
    """((l+ - l-) / (2 mu)) * z."""
    if mu <= 0.0:
        raise ConfigError("mu must be positive")
    if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
        raise NumericalError("non-finite loss fed to two-sided estimator")
    return ((loss_plus - loss_minus) / (2.0 * mu)) * z


def two_sided_scalars(loss_plus, loss_minus, mu: float) -> np.ndarray:
    return (np.asarray(loss_plus) - np.asarray(loss_minus)) / (2.0 * mu)


def batch_direction_estimate(specs, loss_plus, loss_minus, layout, probe=None) -> np.ndarray:
    """Batch mean of per-sample two-sided estimates with independent
    directions; B=1 reduces to the plain two-sided estimator."""
    if len(specs) < 1:
        raise ConfigError("need at least one perturbation spec")
    scalars = np.empty(len(specs))
    for i, spec in enumerate(specs):
        lp, lm = float(loss_plus[i]), float(loss_minus[i])
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericalError(f"non-finite loss for sample {i}")
        scalars[i] = (lp - lm) / (2.0 * spec.scale)
    return accumulate_update(specs, scalars, layout, probe)


def sample_perturbation_kinds(batch: int, k: int, step_seed: int) -> list:
    """Assign exactly k anchor-guided slots per batch, deterministically.

    Positions are the first k indices of a step-seeded shuffle so a run can
    be replayed from its seeds alone.
    """
    if not (0 <= k <= batch):
        raise ConfigError("k must lie in [0, batch]")
    kinds = [GAUSSIAN] * batch
    if k == 0:
        return kinds
    u = rng.uniforms(rng.derive_key(step_seed, 0x6B696E64), batch)
    for i in np.argsort(u, kind="stable")[:k]:
        kinds[int(i)] = ANCHOR_GUIDED
    return kinds


_SQRTN_SWITCH = 350


def expected_normal_norm(n: int) -> float:
    """E||u||_2 for u ~ N(0, I_n): sqrt(2) Gamma((n+1)/2) / Gamma(n/2),
    with the sqrt(n) approximation above n = 350."""
    if n < 1:
        raise ConfigError("dimension must be positive")
    if n > _SQRTN_SWITCH:
        return math.sqrt(n)
    return math.sqrt(2.0) * math.exp(math.lgamma((n + 1) / 2.0) - math.lgamma(n / 2.0))


def anchor_direction(theta: np.ndarray, anchor: AnchorState) -> np.ndarray:
    """Pull-back direction rescaled to the expected norm of a Gaussian draw."""
    d = anchor.theta - theta
    scale = expected_normal_norm(d.size) / (float(np.linalg.norm(d)) + anchor.delta)
    return scale * d


def sgd_step(theta: np.ndarray, g_hat: np.ndarray, eta: float) -> np.ndarray:
    if eta < 0.0:
        raise ConfigError("learning rate must be nonnegative")
    return theta - eta * g_hat


def relax_weights(theta_prime: np.ndarray, anchor: AnchorState) -> np.ndarray:
    """Convex pull (1 - relax) * theta' + relax * anchor."""
    if not (0.0 <= anchor.relax <= 1.0):
        raise ConfigError("relax must lie in [0, 1]")
    return (1.0 - anchor.relax) * theta_prime + anchor.relax * anchor.theta


def update_anchor(anchor: AnchorState, theta: np.ndarray) -> AnchorState:
    if anchor.ema_rate == 0.0:
        return anchor
    m = anchor.ema_rate
    return replace(anchor, theta=m * theta + (1.0 - m) * anchor.theta)


def balance_update(
    delta: np.ndarray, theta: np.ndarray, anchor: AnchorState, state: BalanceState
) -> tuple[np.ndarray, BalanceState]:
    """Damp the anchor-parallel component of outward updates.

    Inward updates (positive projection on the unit pull direction) pass
    through; outward ones have that component scaled by
    min(1, a_in / (a_out + eps)), where a_in / a_out are EMAs of recent
    inward / outward magnitudes.
    """
    d = anchor.theta - theta
    e = d / (float(np.linalg.norm(d)) + state.eps)
    proj_in = float(delta @ e)
    a_in = state.beta * state.a_in + (1.0 - state.beta) * max(proj_in, 0.0)
    a_out = state.beta * state.a_out + (1.0 - state.beta) * max(-proj_in, 0.0)
    new_state = replace(state, a_in=a_in, a_out=a_out)
    if proj_in >= 0.0:
        return delta, new_state
    alpha = min(1.0, a_in / (a_out + state.eps))
    return delta + (alpha - 1.0) * proj_in * e, new_state


def shortcut_variance_probe(
    amplitude: float,
    g_meaningful: np.ndarray,
    v: np.ndarray,
    trials: int,
    noise_std: float = 0.0,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo moments of v' ghat for ghat = (g'z + xi) z, z ~ N(0, I).

    g = amplitude * e_0 + g_meaningful with g_meaningful orthogonal to the
    first coordinate axis, and v a unit vector also orthogonal to it. A large
    amplitude on that single axis leaves the mean projection untouched but
    floods orthogonal directions with variance >= amplitude^2.
    """
    if trials < 1_000:
        raise ConfigError("probe needs at least 1000 trials for stable moments")
    v = np.asarray(v, dtype=np.float64)
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-9:
        raise ConfigError("v must be a unit vector")
    if abs(float(v[0])) > 1e-12 or abs(float(g_meaningful[0])) > 1e-12:
        raise ConfigError("v and g_meaningful must be orthogonal to the first axis")
    n = v.size
    g = g_meaningful.astype(np.float64).copy()
    g[0] += amplitude
    gen = np.random.default_rng(seed)
    proj = np.empty(trials)
    chunk = 20_000
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        z = gen.standard_normal((m, n))
        noise = gen.normal(0.0, noise_std, m) if noise_std > 0.0 else 0.0
        proj[start:start + m] = (z @ g + noise) * (z @ v)
    return float(proj.mean()), float(proj.var())
