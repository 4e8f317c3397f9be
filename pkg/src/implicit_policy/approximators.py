"""MLPs, parameter sets, checkpoints, target copies and Adam."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Graph, Tensor, dropout_mask_mul, layer_norm

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_FORMAT = "implicit-policy-checkpoint/1"


class CheckpointError(Exception):
    pass


class HashMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    layer_norm: bool = False
    dropout_p: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"hidden activation must be relu or tanh, got {self.hidden_activation}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"output activation must be identity or tanh, got {self.output_activation}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def last_hidden(self) -> int:
        return self.widths[-2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def digest(self) -> str:
        return spec_digest(self.to_dict())

    def shapes(self, prefix: str = "") -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            out[f"{prefix}W{i}"] = (fan_in, fan_out)
            out[f"{prefix}b{i}"] = (fan_out,)
            if self.layer_norm and i < self.n_layers - 1:
                out[f"{prefix}ln_g{i}"] = (fan_out,)
                out[f"{prefix}ln_b{i}"] = (fan_out,)
        return out


def spec_digest(document) -> str:
    blob = json.dumps(document, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ParamSet:
    """Named float64 arrays plus the description that generated them."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    spec: dict = field(default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return spec_digest(self.spec)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def items(self):
        return self.values.items()

    def num_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.values.items()}, json.loads(json.dumps(self.spec)))

    def equals(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self.values)


def merge_params(parts: Mapping[str, ParamSet], spec: dict | None = None) -> ParamSet:
    """Combine sub-networks under ``prefix/`` names."""
    values = {}
    for prefix, ps in parts.items():
        for name, v in ps.items():
            values[f"{prefix}/{name}"] = v
    if spec is None:
        spec = {prefix: ps.spec for prefix, ps in parts.items()}
    return ParamSet(values, spec)


def subset(bound: Mapping[str, Tensor | np.ndarray], prefix: str) -> dict:
    """Strip ``prefix/`` from matching names."""
    p = prefix + "/"
    return {k[len(p):]: v for k, v in bound.items() if k.startswith(p)}


def init_params(spec: MlpSpec, seed: int | np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = {}
    for name, shape in spec.shapes().items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            values[name] = rng.uniform(-limit, limit, size=shape)
        elif name.startswith("ln_g"):
            values[name] = np.ones(shape)
        else:
            values[name] = np.zeros(shape)
    return ParamSet(values, {"mlp": spec.to_dict()})


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "tanh":
        return x.tanh()
    return x


def _affine(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if w.ndim == 3:
        # per-sample weights (batch, fan_in, fan_out)
        batch, fan_in = h.shape
        out = (h.reshape(batch, 1, fan_in) @ w).reshape(batch, w.shape[-1])
        return out + b
    return h @ w + b


def mlp_forward(
    params: Mapping[str, Tensor],
    spec: MlpSpec,
    x: Tensor,
    dropout_mask=None,
    graph: Graph | None = None,
) -> Tensor:
    """Affine/activation stack; optional binary mask on the last hidden layer.

    ``params`` maps names from :meth:`MlpSpec.shapes` to tensors in the same
    graph as ``x``. Weights may carry a leading batch axis (one weight draw per
    row of ``x``).
    """
    graph = graph or x.graph
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != spec input width {spec.widths[0]}")
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        if i == last and dropout_mask is not None:
            mask = np.asarray(dropout_mask.data if isinstance(dropout_mask, Tensor) else dropout_mask, dtype=np.float64)
            if mask.shape[-1] != spec.last_hidden:
                raise ValueError(f"mask width {mask.shape[-1]} != last hidden width {spec.last_hidden}")
            h = dropout_mask_mul(h, mask)
        h = _affine(h, params[f"W{i}"], params[f"b{i}"])
        if i < last:
            if spec.layer_norm:
                h = layer_norm(h) * params[f"ln_g{i}"] + params[f"ln_b{i}"]
            h = _activate(h, spec.hidden_activation)
        else:
            h = _activate(h, spec.output_activation)
    return h


def mlp_apply(params: ParamSet | Mapping[str, np.ndarray], spec: MlpSpec, x, dropout_mask=None) -> np.ndarray:
    """Convenience forward pass on plain arrays (no gradients kept)."""
    g = Graph()
    values = params.values if isinstance(params, ParamSet) else params
    bound = g.bind(values, trainable=False)
    return mlp_forward(bound, spec, g.constant(np.atleast_2d(x)), dropout_mask).numpy()


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is one JSON document:
#   {"format": "implicit-policy-checkpoint/1",
#    "spec": <generating description>,
#    "spec_hash": sha256 of the canonical spec JSON,
#    "params": {name: {"shape": [...], "data": base64(little-endian float64)}}}


def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])


def checkpoint_document(params: ParamSet) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "spec": params.spec,
        "spec_hash": params.spec_hash,
        "params": {name: _encode(v) for name, v in params.items()},
    }


def params_from_document(doc: dict, expected_hash: str | None = None) -> ParamSet:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognised checkpoint format {doc.get('format')!r}")
    spec = doc.get("spec", {})
    stored = doc.get("spec_hash")
    actual = spec_digest(spec)
    if stored != actual:
        raise HashMismatchError(f"spec hash mismatch: file says {stored}, spec digests to {actual}")
    if expected_hash is not None and expected_hash != actual:
        raise HashMismatchError(f"checkpoint spec hash {actual} != expected {expected_hash}")
    values = {name: _decode(e) for name, e in doc.get("params", {}).items()}
    return ParamSet(values, spec)


def save_checkpoint(params: ParamSet, path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(checkpoint_document(params), indent=1))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_hash: str | None = None) -> ParamSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return params_from_document(doc, expected_hash)


def hard_sync(target: ParamSet, source: ParamSet) -> ParamSet:
    """Overwrite target values with copies of the source values."""
    if set(target.names()) != set(source.names()):
        missing = set(target.names()) ^ set(source.names())
        raise KeyError(f"parameter names differ: {sorted(missing)}")
    for name, v in source.items():
        if target[name].shape != v.shape:
            raise ValueError(f"shape mismatch for {name}: {target[name].shape} vs {v.shape}")
        target.values[name] = v.copy()
    return target


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One in-place Adam descent step; returns (params, state) for chaining."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    missing = [n for n in params.names() if n not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters {missing}")
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name in params.names():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        params.values[name] = params.values[name] - step
    return params, state


class Adam:
    """Small stateful wrapper so training loops read naturally."""

    def __init__(self, lr: float):
        self.lr = lr
        self.state = AdamState()

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray], ascent: bool = False) -> None:
        if ascent:
            grads = {k: -v for k, v in grads.items()}
        adam_step(params, grads, self.state, self.lr)
