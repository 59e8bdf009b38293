"""Minimal feed-forward network engine: deterministic init, forward,
manual backpropagation, Adam, and the two-step sharpness-aware variant.

Weights are ``out_dim x in_dim`` (y = x @ W.T + b), everything float64.
Initialization is Glorot-uniform, U(-a, a) with a = sqrt(6 / (in + out)),
drawn from numpy's default PCG64 generator seeded per model; biases start
at zero. The same seed always reproduces the same parameters bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid", "softmax")

GRAD_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class HeadModel:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        """Flat parameter list, [W0, b0, W1, b1, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        own = self.params()
        if len(own) != len(params):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape mismatch: {dst.shape} vs {src.shape}")
            dst[...] = src


def _validate_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("model needs at least one layer")
    for k in range(len(specs) - 1):
        if specs[k].out_dim != specs[k + 1].in_dim:
            raise ValueError(
                f"layer {k} out_dim {specs[k].out_dim} != layer {k + 1} in_dim {specs[k + 1].in_dim}")
        if specs[k].activation == "softmax":
            raise ValueError("softmax is only allowed as the final layer")


def init_model(specs: Sequence[LayerSpec], seed: int) -> HeadModel:
    """Glorot-uniform weights, zero biases; same seed, same parameters."""
    specs = list(specs)
    _validate_chain(specs)
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for spec in specs:
        a = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-a, a, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return HeadModel(layers=specs, weights=weights, biases=biases, seed=seed)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction for stability."""
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically symmetric sigmoid (never exponentiates a large argument)."""
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {kind!r}")


def forward(model: HeadModel, batch: np.ndarray) -> list[np.ndarray]:
    """Run the network; returns [input, layer1 output, ..., final output]."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.in_dim:
        raise ValueError(f"batch width {batch.shape} does not match input dim {model.in_dim}")
    if batch.size and not np.isfinite(batch).all():
        raise ValueError("non-finite values in input batch")
    acts = [batch]
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        z = acts[-1] @ w.T + b
        acts.append(_activate(z, spec.activation))
    return acts


def final_preactivation(model: HeadModel, acts: list[np.ndarray]) -> np.ndarray:
    """Pre-activation of the last layer, for losses fused with the final
    nonlinearity (softmax cross-entropy, sigmoid BCE)."""
    return acts[-2] @ model.weights[-1].T + model.biases[-1]


def _activation_backward(kind: str, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return grad
    if kind == "relu":
        return grad * (out > 0)
    if kind == "tanh":
        return grad * (1.0 - out ** 2)
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    if kind == "softmax":
        # Full Jacobian per row: dz = p * (g - sum(g * p)).
        dot = (grad * out).sum(axis=1, keepdims=True)
        return out * (grad - dot)
    raise ValueError(f"unknown activation {kind!r}")


def backward(model: HeadModel, acts: list[np.ndarray], grad_output: np.ndarray,
             at_preactivation: bool = False) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Backpropagate ``grad_output`` through the network.

    ``grad_output`` is the loss gradient w.r.t. the final output, or w.r.t.
    the final pre-activation when ``at_preactivation`` is set (the fused
    path used by softmax/sigmoid losses). Gradients are summed over the
    batch; any averaging belongs to the loss. Returns
    ``(weight_grads, bias_grads, input_grad)``.
    """
    if len(acts) != len(model.layers) + 1:
        raise ValueError("activations do not match model depth")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != acts[-1].shape:
        raise ValueError(f"grad_output shape {grad_output.shape} != output shape {acts[-1].shape}")
    n_layers = len(model.layers)
    wgrads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    bgrads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    grad = grad_output
    for k in range(n_layers - 1, -1, -1):
        if k == n_layers - 1 and at_preactivation:
            delta = grad
        else:
            delta = _activation_backward(model.layers[k].activation, acts[k + 1], grad)
        wgrads[k] = delta.T @ acts[k]
        bgrads[k] = delta.sum(axis=0)
        grad = delta @ model.weights[k]
    return wgrads, bgrads, grad


def flatten_grads(wgrads: list[np.ndarray], bgrads: list[np.ndarray]) -> list[np.ndarray]:
    """Interleave to the [W0, b0, W1, b1, ...] parameter order."""
    out: list[np.ndarray] = []
    for w, b in zip(wgrads, bgrads):
        out.append(w)
        out.append(b)
    return out


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" | "adam_sam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rho: float = 0.05
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optimizer(params: Sequence[np.ndarray], kind: str = "adam",
                   learning_rate: float = 0.001, rho: float = 0.05) -> OptimizerState:
    if kind not in ("adam", "adam_sam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    return OptimizerState(
        kind=kind, learning_rate=learning_rate, rho=rho,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state: OptimizerState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]) -> tuple[Sequence[np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; mutates ``params`` and ``state``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient count mismatch")
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g ** 2
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    state.step_count = t
    return params, state


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float((g ** 2).sum())
    return float(np.sqrt(total))


def sam_step(state: OptimizerState, model: HeadModel, batch,
             loss_gradient_fn: Callable[[HeadModel, object], tuple[float, list[np.ndarray]]],
             ) -> tuple[HeadModel, OptimizerState, float]:
    """Two-step sharpness-aware update.

    Computes the gradient g at the current parameters, climbs to
    ``w + rho * g / ||g||`` (single global l2 norm over all parameters),
    recomputes the gradient there, restores the parameters, and applies an
    Adam step with the perturbed-point gradient. A gradient norm below
    ``GRAD_NORM_EPS`` falls back to a plain Adam step. Returns the loss at
    the unperturbed point.
    """
    loss, grads = loss_gradient_fn(model, batch)
    params = model.params()
    norm = global_grad_norm(grads)
    if norm < GRAD_NORM_EPS:
        adam_step(state, params, grads)
        return model, state, loss
    scale = state.rho / norm
    saved = [p.copy() for p in params]
    for p, g in zip(params, grads):
        p += scale * g
    _, grads2 = loss_gradient_fn(model, batch)
    # Snapshot restore: subtracting the climb back out would leave 1-ulp
    # drift on the original parameters.
    for p, s in zip(params, saved):
        p[...] = s
    adam_step(state, params, grads2)
    return model, state, loss


# --- checkpoint i/o ---------------------------------------------------------

CHECKPOINT_FORMAT = "affecthead-model"


def save_model(model: HeadModel, path, step_count: int = 0) -> None:
    """Single-file JSON checkpoint; row-major parameter lists, lossless
    round trip via shortest-repr floats."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "seed": model.seed,
        "step_count": step_count,
        "layers": [
            {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation}
            for s in model.layers
        ],
        "weights": [w.reshape(-1).tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> tuple[HeadModel, int]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    specs = [LayerSpec(l["in_dim"], l["out_dim"], l["activation"]) for l in doc["layers"]]
    _validate_chain(specs)
    weights = []
    biases = []
    for spec, wflat, b in zip(specs, doc["weights"], doc["biases"]):
        w = np.asarray(wflat, dtype=np.float64).reshape(spec.out_dim, spec.in_dim)
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (spec.out_dim,):
            raise ValueError(f"{path}: bias shape mismatch")
        weights.append(w)
        biases.append(b)
    model = HeadModel(layers=specs, weights=weights, biases=biases,
                      seed=int(doc["seed"]))
    return model, int(doc["step_count"])
