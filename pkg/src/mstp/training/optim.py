"""AdamW with decoupled weight decay.

Moment buffers exist only for the tensors handed in, so freezing a group
before constructing the optimizer costs no memory for it. A non-finite
gradient stops the run immediately, naming the offending parameter —
continuing would silently poison every later step.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..autodiff import Tensor
from ..errors import OptimizerError


class AdamW:
    def __init__(self, params: Sequence[Tuple[str, Tensor]], lr: float = 5e-5,
                 betas: Tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 1e-2, eps: float = 1e-8):
        if not params:
            raise OptimizerError("optimizer constructed with no parameters")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise OptimizerError(f"betas must lie in [0, 1), got {betas}")
        if lr <= 0.0:
            raise OptimizerError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.t = 0
        self._m: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in self.params}
        self._v: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in self.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, tensor in self.params:
            g = tensor.grad
            if g is None:
                continue  # parameter unused by this step's graph
            if not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * tensor.data
            tensor.data -= self.lr * update

    def zero_grad(self) -> None:
        for _, tensor in self.params:
            tensor.grad = None
