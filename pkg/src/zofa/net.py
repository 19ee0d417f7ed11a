"""Forward-only networks: dense layers, layer norm, simulated fixed-point
quantization, canonical parameter packing, and the ZOFA1 model file format.

A parameter tensor is addressed by (layer index, name). The canonical flat
order is layer-major: layers in order, and within a layer the names in
PARAM_ORDER for its kind. Arrays held by a Network are treated as immutable;
every mutating operation returns a new Network.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError, ShapeError

LAYER_KINDS = ("linear", "relu", "tanh", "layernorm", "input-offset")

PARAM_ORDER = {
    "linear": ("weight", "bias"),
    "relu": (),
    "tanh": (),
    "layernorm": ("gain", "shift"),
    "input-offset": ("offset",),
}

LN_EPS_DEFAULT = 1e-5

MODEL_MAGIC = b"ZOFA1"


@dataclass
class Layer:
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    hyper: dict[str, float] = field(default_factory=dict)


@dataclass
class Network:
    layers: list[Layer]
    adapted: frozenset  # of (layer index, param name)
    feature_tap: int


class ForwardTally:
    """Counts sample-forward evaluations: one batched call of B rows adds B."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n


def check_network(net: Network) -> None:
    width = None
    for i, layer in enumerate(net.layers):
        if layer.kind not in LAYER_KINDS:
            raise CapabilityError(f"unknown layer kind {layer.kind!r}")
        if layer.kind == "input-offset" and i != 0:
            raise ConfigError("input-offset may appear only as the first layer")
        for name in PARAM_ORDER[layer.kind]:
            if name not in layer.params:
                raise ConfigError(f"layer {i} ({layer.kind}) missing param {name!r}")
        if layer.kind == "linear":
            w = layer.params["weight"]
            if w.ndim != 2:
                raise ShapeError(f"layer {i} weight must be 2-D")
            if width is not None and w.shape[1] != width:
                raise ShapeError(f"layer {i} expects width {w.shape[1]}, got {width}")
            if layer.params["bias"].shape != (w.shape[0],):
                raise ShapeError(f"layer {i} bias width mismatch")
            width = w.shape[0]
        elif layer.kind == "layernorm":
            g = layer.params["gain"]
            if width is not None and g.shape != (width,):
                raise ShapeError(f"layer {i} layernorm width mismatch")
            if layer.params["shift"].shape != g.shape:
                raise ShapeError(f"layer {i} gain/shift width mismatch")
            width = g.shape[0]
        elif layer.kind == "input-offset":
            width = layer.params["offset"].shape[0]
    if not (0 <= net.feature_tap < len(net.layers)):
        raise ConfigError("feature_tap must index an existing layer")
    for key in net.adapted:
        i, name = key
        if not (0 <= i < len(net.layers)) or name not in net.layers[i].params:
            raise ConfigError(f"adapted entry {key} does not address a parameter")


def input_width(net: Network) -> int:
    for layer in net.layers:
        if layer.kind == "input-offset":
            return layer.params["offset"].shape[0]
        if layer.kind == "layernorm":
            return layer.params["gain"].shape[0]
        if layer.kind == "linear":
            return layer.params["weight"].shape[1]
    raise ConfigError("network has no shaped layer")


def _resolve_delta(deltas, key):
    if deltas is None:
        return None
    d = deltas.get(key)
    if callable(d):
        d = d()
    return d


def forward(
    net: Network,
    x: np.ndarray,
    *,
    deltas=None,
    tally: ForwardTally | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the network on a batch.

    x has shape [B, in_dim]. Returns (logits, features) where features is the
    output of the feature_tap layer. `deltas` optionally maps
    (layer index, param name) to an additive offset (or a zero-argument
    callable producing one) of the parameter's shape, or of [B, *shape] for
    per-sample offsets; offsets are applied on the fly and the Network is
    never mutated.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D [batch, dim], got {x.shape}")
    if x.shape[1] != input_width(net):
        raise ShapeError(
            f"input width {x.shape[1]} does not match first layer width {input_width(net)}"
        )
    if tally is not None:
        tally.add(x.shape[0])

    features = None
    out = x
    for i, layer in enumerate(net.layers):
        out = _layer_forward(layer, out, i, deltas)
        if i == net.feature_tap:
            features = out
    return out, features


def _layer_forward(layer: Layer, x: np.ndarray, i: int, deltas) -> np.ndarray:
    kind = layer.kind
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "input-offset":
        off = layer.params["offset"]
        d = _resolve_delta(deltas, (i, "offset"))
        if d is not None:
            off = off + d
        return x + off
    if kind == "linear":
        w = layer.params["weight"]
        b = layer.params["bias"]
        dw = _resolve_delta(deltas, (i, "weight"))
        db = _resolve_delta(deltas, (i, "bias"))
        if db is not None:
            b = b + db
        if dw is not None and dw.ndim == 3:
            return np.einsum("boj,bj->bo", w + dw, x) + b
        if dw is not None:
            w = w + dw
        return x @ w.T + b
    if kind == "layernorm":
        eps = layer.hyper.get("epsilon", LN_EPS_DEFAULT)
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        denom = np.sqrt(var + eps)
        if eps <= 0.0:
            # zero-variance rows centre to exactly zero rather than 0/0
            denom = np.where(denom > 0.0, denom, 1.0)
        xn = xc / denom
        gain = layer.params["gain"]
        shift = layer.params["shift"]
        dg = _resolve_delta(deltas, (i, "gain"))
        ds = _resolve_delta(deltas, (i, "shift"))
        if dg is not None:
            gain = gain + dg
        if ds is not None:
            shift = shift + ds
        return xn * gain + shift
    raise CapabilityError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter layout / packing

@dataclass(frozen=True)
class LayoutEntry:
    tensor_id: int
    layer: int
    name: str
    shape: tuple
    offset: int
    size: int


@dataclass(frozen=True)
class Layout:
    entries: tuple
    size: int

    def entry(self, tensor_id: int) -> LayoutEntry:
        if not (0 <= tensor_id < len(self.entries)):
            raise ShapeError(f"tensor id {tensor_id} not in layout")
        return self.entries[tensor_id]

    def slice_of(self, tensor_id: int) -> slice:
        e = self.entry(tensor_id)
        return slice(e.offset, e.offset + e.size)


def _iter_param_keys(net: Network):
    for i, layer in enumerate(net.layers):
        for name in PARAM_ORDER[layer.kind]:
            yield i, name


def make_layout(net: Network, subset: str = "adapted") -> Layout:
    """Canonical layer-major layout over `subset` in {"adapted", "all"}."""
    entries = []
    offset = 0
    tid = 0
    for i, name in _iter_param_keys(net):
        if subset == "adapted" and (i, name) not in net.adapted:
            continue
        arr = net.layers[i].params[name]
        entries.append(LayoutEntry(tid, i, name, arr.shape, offset, arr.size))
        offset += arr.size
        tid += 1
    return Layout(tuple(entries), offset)


def pack_params(net: Network, subset: str = "adapted") -> np.ndarray:
    layout = make_layout(net, subset)
    out = np.empty(layout.size, dtype=np.float64)
    for e in layout.entries:
        out[e.offset:e.offset + e.size] = net.layers[e.layer].params[e.name].ravel()
    return out


def apply_params(net: Network, vec: np.ndarray, subset: str = "adapted") -> Network:
    """Return a new Network whose `subset` tensors are taken from `vec`."""
    layout = make_layout(net, subset)
    if vec.shape != (layout.size,):
        raise ShapeError(f"expected vector of length {layout.size}, got {vec.shape}")
    layers = [Layer(l.kind, dict(l.params), dict(l.hyper)) for l in net.layers]
    for e in layout.entries:
        layers[e.layer].params[e.name] = (
            vec[e.offset:e.offset + e.size].reshape(e.shape).copy()
        )
    return Network(layers, net.adapted, net.feature_tap)


def param_hash(net: Network) -> str:
    h = hashlib.sha256()
    for i, name in _iter_param_keys(net):
        arr = net.layers[i].params[name]
        h.update(f"{i}:{name}:{arr.shape}".encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# construction

def make_mlp(
    seed: int,
    d: int,
    classes: int,
    hidden=(32,),
    input_norm: bool = True,
    with_offset: bool = False,
    tap: str = "first-norm",
) -> Network:
    """Small tanh MLP with layer norms.

    Layout: [input-offset?] [layernorm(d)?] then per hidden width h:
    linear -> tanh -> layernorm(h), and a final linear to `classes`.
    The alignment feature is tapped at the first or last layer norm
    (falling back to the last pre-classifier activation when there is
    none). Adapted set defaults to all layer-norm affine parameters.
    """
    if tap not in ("first-norm", "last-norm"):
        raise ConfigError(f"unknown tap {tap!r}; expected first-norm or last-norm")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    if with_offset:
        layers.append(Layer("input-offset", {"offset": np.zeros(d)}))
    if input_norm:
        layers.append(Layer("layernorm", {"gain": np.ones(d), "shift": np.zeros(d)}))
    width = d
    for h in hidden:
        std = np.sqrt(2.0 / (width + h))
        layers.append(
            Layer("linear", {"weight": rng.normal(0.0, std, (h, width)), "bias": np.zeros(h)})
        )
        layers.append(Layer("tanh"))
        layers.append(Layer("layernorm", {"gain": np.ones(h), "shift": np.zeros(h)}))
        width = h
    std = np.sqrt(2.0 / (width + classes))
    layers.append(
        Layer("linear", {"weight": rng.normal(0.0, std, (classes, width)), "bias": np.zeros(classes)})
    )
    norms = [i for i, l in enumerate(layers) if l.kind == "layernorm"]
    if norms:
        tap_idx = norms[0] if tap == "first-norm" else norms[-1]
    else:
        tap_idx = max(len(layers) - 2, 0)
    net = Network(layers, frozenset(), tap_idx)
    if norms:
        net = Network(layers, select_adapted(net, "norm"), tap_idx)
    check_network(net)
    return net


def select_adapted(net: Network, selector: str) -> frozenset:
    """Resolve a selector string into a set of adapted (layer, name) keys.

    "norm"      all layer-norm gain/shift tensors
    "norm:0,2"  gain/shift of the given layer-norm ordinals only
    "offset"    the input-offset tensor
    "all"       every parameter tensor
    "none"      empty set
    """
    if selector == "none":
        return frozenset()
    if selector == "all":
        return frozenset(_iter_param_keys(net))
    if selector == "offset":
        keys = [
            (i, "offset") for i, l in enumerate(net.layers) if l.kind == "input-offset"
        ]
        if not keys:
            raise ConfigError("selector 'offset' but network has no input-offset layer")
        return frozenset(keys)
    if selector == "norm" or selector.startswith("norm:"):
        norm_layers = [i for i, l in enumerate(net.layers) if l.kind == "layernorm"]
        if not norm_layers:
            raise ConfigError("selector 'norm' but network has no layernorm layer")
        if selector != "norm":
            try:
                ordinals = [int(s) for s in selector[5:].split(",")]
                norm_layers = [norm_layers[o] for o in ordinals]
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"bad norm selector {selector!r}") from exc
        keys = []
        for i in norm_layers:
            keys += [(i, "gain"), (i, "shift")]
        return frozenset(keys)
    raise ConfigError(f"unknown adapted-parameter selector {selector!r}")


def with_adapted(net: Network, selector: str) -> Network:
    return Network(net.layers, select_adapted(net, selector), net.feature_tap)


# ---------------------------------------------------------------------------
# simulated quantization

def _quantize_tensor(w: np.ndarray, bits: int) -> np.ndarray:
    qmax = float(2 ** (bits - 1) - 1)
    m = float(np.max(np.abs(w))) if w.size else 0.0
    if m == 0.0:
        return w
    s = m / qmax
    q = np.rint(w / s)
    out = q * s
    # pin saturated cells to the exact extremum so the per-tensor scale, and
    # therefore requantization, is bit-stable
    sat = np.abs(q) >= qmax
    out[sat] = np.sign(w[sat]) * m
    return out


def quantize_weights(net: Network, bits: int) -> Network:
    """Symmetric uniform rounding of every frozen tensor; adapted tensors and
    all-zero tensors are left untouched. Returns a new Network."""
    if bits < 2:
        raise ConfigError("quantization needs at least 2 bits")
    layers = []
    for i, layer in enumerate(net.layers):
        params = {}
        for name, arr in layer.params.items():
            if (i, name) in net.adapted:
                params[name] = arr
            else:
                params[name] = _quantize_tensor(arr, bits)
        layers.append(Layer(layer.kind, params, dict(layer.hyper)))
    return Network(layers, net.adapted, net.feature_tap)


# ---------------------------------------------------------------------------
# ZOFA1 model files

def save_model(net: Network, path, stats=None) -> None:
    """Write magic, length-prefixed JSON topology, raw little-endian float64
    parameters in canonical order, then optional source-stat blocks."""
    desc = {
        "layers": [
            {
                "kind": l.kind,
                "shapes": {n: list(l.params[n].shape) for n in PARAM_ORDER[l.kind]},
                "hyper": l.hyper,
            }
            for l in net.layers
        ],
        "adapted": sorted([i, n] for i, n in net.adapted),
        "feature_tap": net.feature_tap,
        "stats_dim": 0 if stats is None else int(stats.mean.shape[0]),
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(pack_params(net, "all"), dtype="<f8").tobytes())
        if stats is not None:
            f.write(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(stats.std, dtype="<f8").tobytes())


def load_model(path):
    """Read a ZOFA1 file; returns (Network, SourceStats or None)."""
    from .objectives import SourceStats

    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MODEL_MAGIC:
            raise ConfigError(f"not a ZOFA1 model file: magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        desc = json.loads(f.read(n).decode("utf-8"))
        layers = []
        total = 0
        for ld in desc["layers"]:
            params = {}
            for name in PARAM_ORDER[ld["kind"]]:
                shape = tuple(ld["shapes"][name])
                params[name] = np.zeros(shape)
                total += int(np.prod(shape)) if shape else 1
            layers.append(Layer(ld["kind"], params, dict(ld["hyper"])))
        raw = np.frombuffer(f.read(8 * total), dtype="<f8").astype(np.float64)
        net = Network(
            layers,
            frozenset((int(i), str(nm)) for i, nm in desc["adapted"]),
            int(desc["feature_tap"]),
        )
        net = apply_params(net, raw, "all")
        stats = None
        fdim = int(desc["stats_dim"])
        if fdim:
            m = np.frombuffer(f.read(8 * fdim), dtype="<f8").astype(np.float64)
            s = np.frombuffer(f.read(8 * fdim), dtype="<f8").astype(np.float64)
            stats = SourceStats(m, s)
    check_network(net)
    return net, stats
