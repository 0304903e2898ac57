"""Named parameter store and the decoupled-weight-decay adaptive optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["ParamStore", "OptimizerError", "adamw_step", "AdamW", "param_checksum"]


class OptimizerError(RuntimeError):
    pass


class ParamStore:
    """Named parameter tensors plus per-parameter moment state.

    Names are unique; moment buffers always match their parameter's
    shape. The store is the unit of checkpointing.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}

    def register(self, name: str, tensor: Tensor) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self.params[name] = tensor
        self.state[name] = {
            "m": np.zeros_like(tensor.data),
            "v": np.zeros_like(tensor.data),
            "step": 0,
        }

    def register_all(self, named: dict[str, Tensor]) -> None:
        for name, tensor in named.items():
            self.register(name, tensor)

    def names(self):
        return list(self.params)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.params)


def param_checksum(params: dict[str, Tensor]) -> float:
    """Order-independent fingerprint used by the partition invariants."""
    total = 0.0
    for name in sorted(params):
        data = params[name].data
        total += float(np.sum(data * data)) + 0.001 * float(np.sum(data))
    return total


def adamw_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected adaptive-moment update with decoupled decay.

    Only parameters present in ``grads`` are touched. A NaN gradient
    aborts the whole step before any parameter is modified.
    """
    for name, g in grads.items():
        if name not in store.params:
            raise OptimizerError(f"gradient for unknown parameter {name!r}")
        if np.isnan(g).any():
            raise OptimizerError(f"NaN gradient for parameter {name!r}")
    for name, g in grads.items():
        p = store.params[name]
        st = store.state[name]
        st["step"] += 1
        t = st["step"]
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * (g * g)
        m_hat = st["m"] / (1.0 - beta1**t)
        v_hat = st["v"] / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data


class AdamW:
    """Convenience wrapper binding hyperparameters to a store."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-2):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self, names=None) -> None:
        """Apply one update using the ``.grad`` of each selected parameter."""
        grads = {}
        for name in (names if names is not None else self.store.names()):
            p = self.store.params[name]
            if p.grad is not None:
                grads[name] = p.grad
        adamw_step(self.store, grads, self.lr, self.beta1, self.beta2,
                   self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.store.params.values():
            p.grad = None
