"""Seed-addressed perturbation engine.

A perturbation is never stored: it is regenerated on demand from
(step seed, sample index, tensor id), so the +mu and -mu forwards and the
later update accumulation all see bit-identical noise. The sign is applied
outside the generator, which makes the two probe sides exactly symmetric.
Batched blocks exist only while the layer that needs them is executing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, ShapeError
from .net import ForwardTally, Layout, Network, forward

GAUSSIAN = "gaussian"
ANCHOR_GUIDED = "anchor-guided"


@dataclass
class PerturbationSpec:
    """Addresses one sample's perturbation direction without materializing it.

    anchor_direction is the normalized pull vector over the adapted
    coordinates, required for the anchor-guided kind; the same keyed stream
    then supplies the per-coordinate Uniform(0, 2) factors.
    """

    step_seed: int
    sample_index: int
    scale: float
    kind: str = GAUSSIAN
    anchor_direction: np.ndarray | None = None

    def key(self, tensor_id: int) -> int:
        return rng.derive_key(self.step_seed, self.sample_index, tensor_id)


class AllocProbe:
    """Tracks live perturbation elements to assert the regeneration memory bound."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, n: int) -> None:
        self.live += n
        self.peak = max(self.peak, self.live)

    def free(self, n: int) -> None:
        self.live -= n


def draw_layer_perturbation(
    spec: PerturbationSpec, layout: Layout, tensor_id: int
) -> np.ndarray:
    """Regenerate the perturbation for one adapted tensor, flat float64."""
    entry = layout.entry(tensor_id)
    key = spec.key(tensor_id)
    if spec.kind == GAUSSIAN:
        return rng.normals(key, entry.size)
    if spec.kind == ANCHOR_GUIDED:
        if spec.anchor_direction is None:
            raise ConfigError("anchor-guided spec needs an anchor direction")
        if spec.anchor_direction.shape != (layout.size,):
            raise ShapeError("anchor direction length does not match adapted layout")
        r = rng.uniform_open(key, entry.size, 0.0, 2.0)
        return spec.anchor_direction[layout.slice_of(tensor_id)] * r
    raise ConfigError(f"unknown perturbation kind {spec.kind!r}")


def _batch_blocks(specs, layout: Layout, tensor_id: int) -> np.ndarray:
    """Rows of per-sample perturbations for one tensor, shape [B, size].

    Rows are generated per kind group but each row depends only on its own
    key, so the result is identical to stacking single-spec draws.
    """
    entry = layout.entry(tensor_id)
    out = np.empty((len(specs), entry.size))
    gauss = [i for i, s in enumerate(specs) if s.kind == GAUSSIAN]
    anchor = [i for i, s in enumerate(specs) if s.kind == ANCHOR_GUIDED]
    if len(gauss) + len(anchor) != len(specs):
        bad = next(s.kind for s in specs if s.kind not in (GAUSSIAN, ANCHOR_GUIDED))
        raise ConfigError(f"unknown perturbation kind {bad!r}")

    def group_keys(rows):
        return rng.derive_keys(
            np.array([specs[i].step_seed for i in rows]),
            np.array([specs[i].sample_index for i in rows]),
            np.uint64(tensor_id),
        )

    if gauss:
        out[gauss] = rng.normals(group_keys(gauss), entry.size)
    if anchor:
        r = rng.uniform_open(group_keys(anchor), entry.size, 0.0, 2.0)
        sl = layout.slice_of(tensor_id)
        for row, i in enumerate(anchor):
            d = specs[i].anchor_direction
            if d is None:
                raise ConfigError("anchor-guided spec needs an anchor direction")
            out[i] = d[sl] * r[row]
    return out


def perturbed_forward(
    net: Network,
    x: np.ndarray,
    specs,
    layout: Layout,
    sign: float,
    tally: ForwardTally | None = None,
):
    """One forward pass at theta + sign * mu_i * z_i, one spec per row.

    Frozen layers run as ordinary batched inference; adapted tensors get a
    per-sample offset block that is built when the layer executes and dropped
    right after. Parameters are never mutated.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != len(specs):
        raise ShapeError("one perturbation spec per input row required")
    for s in specs:
        if s.scale <= 0.0:
            raise ConfigError("perturbation scale must be positive")
    scales = np.array([s.scale for s in specs])

    def provider(tensor_id: int):
        entry = layout.entry(tensor_id)

        def build():
            block = _batch_blocks(specs, layout, tensor_id)
            block *= sign * scales[:, None]
            return block.reshape((len(specs),) + entry.shape)

        return build

    deltas = {(e.layer, e.name): provider(e.tensor_id) for e in layout.entries}
    return forward(net, x, deltas=deltas, tally=tally)


def symmetric_forward(
    net: Network,
    x: np.ndarray,
    specs,
    layout: Layout,
    tally: ForwardTally | None = None,
):
    """Evaluate the two symmetric perturbed models for every sample.

    x is [B, in_dim] with one spec per row (a single spec and a 1-D x are
    promoted to a batch of one). Returns (o_plus, h_plus, o_minus, h_minus);
    both sides regenerate the same directions, only the sign differs.
    """
    single = isinstance(specs, PerturbationSpec)
    if single:
        specs = [specs]
        x = np.atleast_2d(x)
    o_p, h_p = perturbed_forward(net, x, specs, layout, 1.0, tally)
    o_m, h_m = perturbed_forward(net, x, specs, layout, -1.0, tally)
    if single:
        return o_p[0], h_p[0], o_m[0], h_m[0]
    return o_p, h_p, o_m, h_m


def accumulate_update(
    specs, scalars, layout: Layout, probe: AllocProbe | None = None
) -> np.ndarray:
    """(1/B) sum_i scalar_i * z_i over the adapted coordinates.

    Perturbations are regenerated one tensor at a time and disposed before
    the next tensor, so peak extra memory is O(B * largest tensor) rather
    than O(B * total adapted size). The reduction runs in sample-index order
    per coordinate, which makes the result bit-identical to a naive fully
    materialized implementation.
    """
    scalars = np.asarray(scalars, dtype=np.float64)
    if scalars.shape != (len(specs),):
        raise ShapeError("one scalar per perturbation spec required")
    out = np.zeros(layout.size)
    for entry in layout.entries:
        block = _batch_blocks(specs, layout, entry.tensor_id)
        if probe is not None:
            probe.alloc(block.size)
        acc = out[layout.slice_of(entry.tensor_id)]
        for i in range(len(specs)):
            acc += scalars[i] * block[i]
        if probe is not None:
            probe.free(block.size)
        del block
    out /= len(specs)
    return out
