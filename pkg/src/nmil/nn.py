"""Parameter initialisation and MLP graph building shared by the models."""

from __future__ import annotations

import numpy as np

from .autodiff import Ref, Tape


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


def init_mlp(rng: np.random.Generator, sizes: list[int], prefix: str) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases for a dense stack."""
    params: dict[str, np.ndarray] = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.w{i}"] = glorot_uniform(rng, a, b)
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def bind_params(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Ref]:
    """Declare one named input leaf per parameter, in sorted order."""
    return {name: tape.input(name) for name in sorted(params)}


def mlp_graph(
    tape: Tape,
    x: Ref,
    refs: dict[str, Ref],
    prefix: str,
    n_layers: int,
    final_activation: str | None = None,
    dropout_masks: list[np.ndarray] | None = None,
) -> Ref:
    """Dense stack: tanh between layers, optional final nonlinearity.

    ``dropout_masks`` (one pre-scaled mask per hidden layer, or None
    entries) are multiplied in after each hidden activation.
    """
    h = x
    for i in range(n_layers):
        h = tape.matmul(h, refs[f"{prefix}.w{i}"]) + refs[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = tape.tanh(h)
            if dropout_masks is not None and dropout_masks[i] is not None:
                h = h * tape.const(dropout_masks[i])
    if final_activation == "tanh":
        h = tape.tanh(h)
    elif final_activation == "sigmoid":
        h = tape.sigmoid(h)
    return h


def dropout_masks(rng: np.random.Generator, widths: list[int], rate: float, rows: int = 1) -> list[np.ndarray]:
    """Inverted-dropout masks, scaled by 1/(1-rate) so expectation is 1."""
    if rate <= 0.0:
        return [None] * len(widths)
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = 1.0 - rate
    return [(rng.random((rows, w)) < keep) / keep for w in widths]
