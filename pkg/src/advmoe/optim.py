"""SGD with momentum/weight-decay, cosine schedule, parameter groups."""

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, ShapeError, Tensor


@dataclass
class ParamGroup:
    """Named, freezable slice of the full parameter set.

    The model's parameters split into exactly two disjoint groups,
    "routers" and "backbone"; their union is everything the optimizer may
    touch.
    """

    name: str
    tensors: list[Tensor] = field(default_factory=list)
    frozen: bool = False

    def checksum(self) -> int:
        """Bit-level checksum of all tensors, for isolation assertions."""
        import zlib

        h = 0
        for t in self.tensors:
            h = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), h)
        return h


def sgd_step(group: ParamGroup, grads, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocities: dict | None = None) -> ParamGroup:
    """One in-place SGD update: v <- m*v + (g + wd*p); p <- p - lr*v.

    ``grads`` is aligned with ``group.tensors`` (a list, or a dict keyed by
    tensor as produced by backward()). ``velocities`` carries momentum
    state between calls; pass the same dict every step.
    """
    if group.frozen:
        raise ContractError(f"sgd_step on frozen group {group.name!r}")
    if isinstance(grads, dict):
        grads = [grads[t] for t in group.tensors]
    if len(grads) != len(group.tensors):
        raise ShapeError(f"got {len(grads)} grads for {len(group.tensors)} tensors")
    for p, g in zip(group.tensors, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} vs param {p.data.shape}")
        step = g
        if weight_decay != 0.0:
            step = step + weight_decay * p.data
        if momentum != 0.0:
            if velocities is None:
                raise ContractError("momentum > 0 requires a velocities dict")
            v = velocities.get(id(p))
            v = step if v is None else momentum * v + step
            velocities[id(p)] = v
            step = v
        p.data = p.data - lr * step
    return group


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Cosine decay from lr0 at epoch 0 towards 0 at total_epochs."""
    if total_epochs <= 0:
        raise ContractError("total_epochs must be positive")
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))
