"""Named parameter collections and momentum SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, NumericFault, ShapeError, Tensor


class ParamSet:
    """Ordered, named collection of parameter tensors.

    Cloning produces fresh leaf tensors so an adaptation run never
    mutates the base parameters it started from.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def _with_tensors(self, tensors: dict[str, Tensor]) -> "ParamSet":
        """Subclasses override to preserve extra fields."""
        return type(self)(tensors)

    def replace(self, tensors: dict[str, Tensor]) -> "ParamSet":
        if set(tensors) != set(self._tensors):
            raise ContractError("replace requires the same parameter names")
        return self._with_tensors(tensors)

    def clone(self, requires_grad: bool = True) -> "ParamSet":
        return self._with_tensors(
            {k: v.copy(requires_grad=requires_grad) for k, v in self._tensors.items()})

    def allclose(self, other: "ParamSet", rtol: float = 0.0, atol: float = 0.0) -> bool:
        return all(
            np.allclose(v.data, other[k].data, rtol=rtol, atol=atol)
            for k, v in self._tensors.items())


@dataclass
class OptimizerState:
    """Momentum SGD state; velocity buffers are created lazily."""

    learning_rate: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.learning_rate < 0.0:
            raise ContractError(f"learning rate must be >= 0, got {self.learning_rate}")


def sgd_step(params: ParamSet, grads: list[Tensor], state: OptimizerState) -> ParamSet:
    """One momentum SGD step: v <- momentum*v + g; p <- p - lr*v.

    Gradients align with the parameter order. The velocity buffers in
    `state` are updated in place; the returned ParamSet holds fresh
    leaf tensors.
    """
    names = params.names()
    if len(grads) != len(names):
        raise ShapeError(f"sgd_step: {len(grads)} gradients for {len(names)} parameters")
    new = {}
    for name, g in zip(names, grads):
        p = params[name]
        gd = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if gd.shape != p.shape:
            raise ShapeError(
                f"sgd_step: gradient shape {gd.shape} != parameter '{name}' shape {p.shape}")
        if not np.all(np.isfinite(gd)):
            raise NumericFault(f"non-finite gradient for parameter '{name}'")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        v = state.momentum * v + gd
        state.velocity[name] = v
        new[name] = Tensor(p.data - state.learning_rate * v, requires_grad=True)
    return params.replace(new)
