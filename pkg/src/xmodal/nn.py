"""Small fully-connected networks with hand-written reverse mode and Adam.

Layer indexing: a network with ``L`` affine layers has activations
``acts[0..L]`` where ``acts[0]`` is the input and ``acts[k]`` the output of
affine layer ``k-1`` after its nonlinearity. Running "from layer l" means
setting ``acts[l]`` and applying affine layers ``l..L-1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numcore import RandomStream, ShapeError, as_matrix, softmax_rows

ACTIVATIONS = ("tanh", "relu", "identity")
FINAL_ACTIVATIONS = ("identity", "softmax", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activations: tuple  # one per hidden layer
    final_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(sizes) < 2:
            raise ValueError("MlpSpec needs at least one affine layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive: {sizes}")
        if len(self.activations) != len(sizes) - 2:
            raise ValueError("need one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {self.final_activation!r}")

    @classmethod
    def build(cls, sizes, activation="tanh", final_activation="identity"):
        return cls(tuple(sizes), (activation,) * (len(sizes) - 2), final_activation)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def activation_of(self, k: int) -> str:
        return self.activations[k] if k < self.n_layers - 1 else self.final_activation

    def to_dict(self):
        return {"layer_sizes": list(self.layer_sizes),
                "activations": list(self.activations),
                "final_activation": self.final_activation}


@dataclass
class MlpParams:
    weights: list  # weights[k] has shape (in_k, out_k)
    biases: list

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        return list(self.weights) + list(self.biases)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        n = len(self.weights)
        return MlpParams(out[:n], out[n:])

    def equals(self, other: "MlpParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class ForwardTrace:
    start: int
    pre: list  # pre[k]: affine output of layer k (None for k < start)
    acts: list  # acts[k]: input of layer k / output of layer k-1

    @property
    def final(self) -> np.ndarray:
        return self.acts[-1]

    def activation(self, k: int) -> np.ndarray:
        if self.acts[k] is None:
            raise IndexError(f"layer {k} precedes the injection point {self.start}")
        return self.acts[k]


@dataclass
class Gradients:
    weights: list
    biases: list
    input: np.ndarray  # gradient w.r.t. acts[trace.start]

    def as_params(self) -> MlpParams:
        return MlpParams(self.weights, self.biases)


def init_params(spec: MlpSpec, stream: RandomStream) -> MlpParams:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    ws, bs = [], []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        ws.append(stream.normal((n_in, n_out), scale=1.0 / np.sqrt(n_in)))
        bs.append(np.zeros(n_out))
    return MlpParams(ws, bs)


def _activate(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softmax":
        return softmax_rows(z)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _activate_backward(kind, z, a, g):
    if kind == "tanh":
        return g * (1.0 - a * a)
    if kind == "relu":
        return g * (z > 0)
    if kind == "softmax":
        return a * (g - np.sum(a * g, axis=1, keepdims=True))
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    return g


def _check_params(spec: MlpSpec, params: MlpParams):
    if len(params.weights) != spec.n_layers or len(params.biases) != spec.n_layers:
        raise ShapeError("parameter count does not match spec")
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        want = (spec.layer_sizes[k], spec.layer_sizes[k + 1])
        if w.shape != want or b.shape != (want[1],):
            raise ShapeError(f"layer {k}: weight {w.shape}, bias {b.shape}, expected {want}")


def forward_from_layer(spec: MlpSpec, params: MlpParams, l: int, f) -> ForwardTrace:
    if not 0 <= l < spec.n_layers:
        raise IndexError(f"injection layer {l} outside [0, {spec.n_layers})")
    _check_params(spec, params)
    f = as_matrix(f, "f")
    if f.shape[1] != spec.layer_sizes[l]:
        raise ShapeError(f"layer {l} expects width {spec.layer_sizes[l]}, got {f.shape[1]}")
    pre = [None] * spec.n_layers
    acts = [None] * (spec.n_layers + 1)
    acts[l] = f
    a = f
    for k in range(l, spec.n_layers):
        z = a @ params.weights[k] + params.biases[k]
        a = _activate(spec.activation_of(k), z)
        pre[k], acts[k + 1] = z, a
    return ForwardTrace(l, pre, acts)


def forward(spec: MlpSpec, params: MlpParams, x) -> ForwardTrace:
    return forward_from_layer(spec, params, 0, x)


def backward(spec: MlpSpec, params: MlpParams, trace: ForwardTrace, grad_out,
             grad_acts=None) -> Gradients:
    """Reverse-mode gradients of a scalar whose cotangent on the output is ``grad_out``.

    ``grad_acts`` maps an activation index to an additional cotangent on that
    intermediate activation, for losses that read hidden features directly.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != trace.final.shape:
        raise ShapeError(f"grad_out {g.shape} vs output {trace.final.shape}")
    grad_acts = grad_acts or {}
    for k, extra in grad_acts.items():
        # the output cotangent belongs in grad_out
        if not trace.start < k < spec.n_layers or np.shape(extra) != trace.acts[k].shape:
            raise ShapeError(f"bad extra cotangent at activation {k}")
    dws = [np.zeros_like(w) for w in params.weights]
    dbs = [np.zeros_like(b) for b in params.biases]
    for k in range(spec.n_layers - 1, trace.start - 1, -1):
        if k + 1 in grad_acts and k + 1 < spec.n_layers:
            g = g + grad_acts[k + 1]
        dz = _activate_backward(spec.activation_of(k), trace.pre[k], trace.acts[k + 1], g)
        dws[k] = trace.acts[k].T @ dz
        dbs[k] = dz.sum(axis=0)
        g = dz @ params.weights[k].T
    return Gradients(dws, dbs, g)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(state: AdamState, params: MlpParams, grads, lr=None):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if isinstance(grads, Gradients):
        grads = grads.as_params()
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    n = len(params.weights)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return MlpParams(new_p[:n], new_p[n:]), new_state


def checkpoint_to_json(spec: MlpSpec, params: MlpParams) -> str:
    """Serialise with hex-float strings so the round trip is bit-exact."""
    doc = {
        "spec": spec.to_dict(),
        "weights": [[float(v).hex() for v in w.ravel()] for w in params.weights],
        "biases": [[float(v).hex() for v in b] for b in params.biases],
    }
    return json.dumps(doc, indent=1)


def checkpoint_from_json(text: str):
    doc = json.loads(text)
    s = doc["spec"]
    spec = MlpSpec(tuple(s["layer_sizes"]), tuple(s["activations"]), s["final_activation"])
    sizes = spec.layer_sizes
    ws = [np.array([float.fromhex(v) for v in w]).reshape(sizes[k], sizes[k + 1])
          for k, w in enumerate(doc["weights"])]
    bs = [np.array([float.fromhex(v) for v in b]) for b in doc["biases"]]
    params = MlpParams(ws, bs)
    _check_params(spec, params)
    return spec, params


@dataclass
class Mlp:
    """A spec bundled with its parameters and optimizer state."""

    spec: MlpSpec
    params: MlpParams
    opt: AdamState = field(default=None)

    def __post_init__(self):
        if self.opt is None:
            self.opt = AdamState.zeros_like(self.params)

    @classmethod
    def create(cls, sizes, stream, activation="tanh", final_activation="identity"):
        spec = MlpSpec.build(sizes, activation, final_activation)
        return cls(spec, init_params(spec, stream))

    def forward(self, x) -> ForwardTrace:
        return forward(self.spec, self.params, x)

    def forward_from_layer(self, l, f) -> ForwardTrace:
        return forward_from_layer(self.spec, self.params, l, f)

    def backward(self, trace, grad_out, grad_acts=None) -> Gradients:
        return backward(self.spec, self.params, trace, grad_out, grad_acts)

    def step(self, grads, lr=None):
        self.params, self.opt = adam_step(self.opt, self.params, grads, lr)

    def copy(self) -> "Mlp":
        opt = AdamState([m.copy() for m in self.opt.m], [v.copy() for v in self.opt.v],
                        self.opt.step, self.opt.lr, self.opt.beta1, self.opt.beta2, self.opt.eps)
        return Mlp(self.spec, self.params.copy(), opt)
