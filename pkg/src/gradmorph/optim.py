"""Adadelta and a small minibatch loop shared by both networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor_core import ContractViolation, Tape, Tensor, backward


@dataclass
class AdadeltaState:
    rho: float = 0.95
    epsilon: float = 1e-6
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)  # E[g^2]
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)  # E[dx^2]


def adadelta_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                  state: AdadeltaState) -> tuple[dict[str, np.ndarray], AdadeltaState]:
    """One Adadelta update (no learning-rate factor).

    ``E[g2] <- rho E[g2] + (1-rho) g^2``;
    ``dx = -sqrt(E[dx2] + eps) / sqrt(E[g2] + eps) * g``;
    ``E[dx2] <- rho E[dx2] + (1-rho) dx^2``; ``p <- p + dx``.

    Accumulators missing from ``state`` start at zero. ``state`` is updated in
    place; a new parameter dict is returned.
    """
    rho, eps = state.rho, state.epsilon
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ContractViolation(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        eg = state.sq_grad.get(name)
        ed = state.sq_delta.get(name)
        if eg is None:
            eg = np.zeros_like(p)
            ed = np.zeros_like(p)
        eg = rho * eg + (1.0 - rho) * g * g
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed = rho * ed + (1.0 - rho) * dx * dx
        state.sq_grad[name] = eg
        state.sq_delta[name] = ed
        out[name] = p + dx
    return out, state


LossFn = Callable[[dict[str, Tensor], np.ndarray], Tensor]


def minibatch_train(params: dict[str, np.ndarray], loss_fn: LossFn, n_samples: int,
                    epochs: int, batch_size: int, opt: AdadeltaState,
                    seed: int) -> tuple[dict[str, np.ndarray], list[float]]:
    """Shuffle-per-epoch Adadelta loop.

    ``loss_fn(param_tensors, batch_indices)`` builds a scalar loss on the tape
    the parameter tensors live on. Returns final params and the per-epoch mean
    of batch losses.
    """
    if batch_size < 1:
        raise ContractViolation("batch_size must be positive")
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(n_samples)
        losses = []
        for start in range(0, n_samples, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            loss = loss_fn(leaves, idx)
            g = backward(tape, loss)
            tape.release()
            params, opt = adadelta_step(params, {k: g[t.index] for k, t in leaves.items()}, opt)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return params, curve
