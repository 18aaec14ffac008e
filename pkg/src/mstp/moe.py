"""Dynamic mixture of low-rank experts with two-stage sparse routing.

Tokens first pass through a *generalized* router over k2 generic experts;
the mixed result then passes through a *task-dependent* router whose
candidate pool is the task's k1 specific experts concatenated with the k2
generic ones, in that fixed order. Both routers score tokens with a linear
map followed by KeepTop-k and softmax, so every token mixes exactly k
experts with weights that sum to one.

Experts are residual low-rank maps E(X) = X + (alpha/r) * (X A^T) B^T with B
zero-initialised: the whole stack is the identity until fine-tuning moves B
away from zero, which is what lets a pretrained backbone adopt the layer
without behaviour change.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Sequence

import numpy as np

from . import rng as rng_mod
from .autodiff import Tensor, keep_top_k, matmul, scale_rows, softmax
from .errors import ContractError, RegistryError, ShapeError


class LowRankExpert:
    """Residual adapter: X + scale * (X @ A.T) @ B.T, with A (r, d), B (d, r)."""

    def __init__(self, a: Tensor, b: Tensor, alpha: float):
        r, d = a.shape
        if b.shape != (d, r):
            raise ShapeError(f"expert B must be {(d, r)}, got {b.shape}")
        if not (1 <= r < d):
            raise ContractError(f"expert rank must satisfy 1 <= r < d, got r={r}, d={d}")
        self.a = a
        self.b = b
        self.scale = float(alpha) / r

    @classmethod
    def create(cls, seed: int, name: str, d: int, r: int, alpha: float):
        stream = rng_mod.stream("init", seed, f"{name}.A")
        a = Tensor(stream.normal(0.0, 1.0 / np.sqrt(d), (r, d)).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros((d, r), np.float32), requires_grad=True)
        return cls(a, b, alpha)

    def apply(self, x: Tensor) -> Tensor:
        low = matmul(x, self.a.transpose())          # (m, r)
        return x + matmul(low, self.b.transpose()) * self.scale


@dataclasses.dataclass
class ExpertBank:
    generic: List[LowRankExpert]
    specific: Dict[int, List[LowRankExpert]]
    d: int

    @classmethod
    def create(cls, seed: int, prefix: str, d: int, r: int, alpha: float,
               k2: int, k1: int, tasks: Sequence[int]):
        generic = [
            LowRankExpert.create(seed, f"{prefix}.generic.{i}", d, r, alpha)
            for i in range(k2)
        ]
        specific = {
            t: [
                LowRankExpert.create(seed, f"{prefix}.task{t}.{i}", d, r, alpha)
                for i in range(k1)
            ]
            for t in tasks
        }
        return cls(generic, specific, d)

    def pool(self, task: int) -> List[LowRankExpert]:
        """Task-pass candidates: specific[task] first, then generic."""
        if task not in self.specific:
            raise RegistryError(f"task {task} is not registered in the expert bank")
        return list(self.specific[task]) + list(self.generic)


class RouterState:
    """Linear scorer W (d, n_candidates) plus the top-k count."""

    def __init__(self, w: Tensor, k: int, kind: str):
        if kind not in ("generalized", "task"):
            raise ContractError(f"router kind must be 'generalized' or 'task', got {kind!r}")
        n = w.shape[1]
        if not (1 <= k <= n):
            raise ContractError(f"router k must lie in [1, {n}], got {k}")
        self.w = w
        self.k = int(k)
        self.kind = kind

    @classmethod
    def create(cls, seed: int, name: str, d: int, n_candidates: int, k: int, kind: str):
        stream = rng_mod.stream("init", seed, f"{name}.W")
        w = Tensor(stream.normal(0.0, 0.02, (d, n_candidates)).astype(np.float32), requires_grad=True)
        return cls(w, k, kind)


def route(x: Tensor, router: RouterState) -> Tensor:
    """Routing weights for one token (d,) or a token matrix (m, d).

    softmax(keep_top_k(x W, k)): exactly k positive entries per token, which
    sum to 1; dropped candidates get exact zeros and no gradient.
    """
    single = x.ndim == 1
    tokens = x.reshape(1, -1) if single else x
    if tokens.shape[1] != router.w.shape[0]:
        raise ShapeError(f"token dim {tokens.shape[1]} != router dim {router.w.shape[0]}")
    logits = matmul(tokens, router.w)
    weights = softmax(keep_top_k(logits, router.k), axis=-1)
    return weights.reshape(-1) if single else weights


def _mix(tokens: Tensor, experts: Sequence[LowRankExpert], weights: Tensor) -> Tensor:
    out = None
    for i, expert in enumerate(experts):
        term = scale_rows(expert.apply(tokens), weights_column(weights, i))
        out = term if out is None else out + term
    return out


def weights_column(weights: Tensor, i: int) -> Tensor:
    col = weights.transpose()  # (n, m)
    from .autodiff import slice_rows  # local import to keep module surface tidy

    return slice_rows(col, i, i + 1).reshape(-1)


def moe_forward(x: Tensor, task: int, bank: ExpertBank, r_g: RouterState, r_t: RouterState) -> Tensor:
    """Two-stage mixture over a token matrix (m, d); see module docstring."""
    single = x.ndim == 1
    tokens = x.reshape(1, -1) if single else x
    if tokens.ndim != 2 or tokens.shape[1] != bank.d:
        raise ShapeError(f"tokens must be (m, {bank.d}), got {x.shape}")
    pool = bank.pool(task)  # raises RegistryError for unknown tasks
    if r_g.w.shape[1] != len(bank.generic):
        raise ShapeError("generalized router width disagrees with the generic expert count")
    if r_t.w.shape[1] != len(pool):
        raise ShapeError("task router width disagrees with the candidate pool size")

    w_g = route(tokens, r_g)
    mixed_g = _mix(tokens, bank.generic, w_g)
    w_t = route(mixed_g, r_t)
    out = _mix(mixed_g, pool, w_t)
    return out.reshape(-1) if single else out


def count_params(bank: ExpertBank, router_g: RouterState,
                 task_routers: Dict[int, RouterState]) -> Dict:
    """Exact parameter counts: total plus a per-group breakdown.

    Group keys mirror the serialized names: ``dmoe.generic.{i}``,
    ``dmoe.task{t}.{i}``, ``dmoe.router.g`` and ``dmoe.router.t``.
    """
    per_group: Dict[str, int] = {}
    for i, e in enumerate(bank.generic):
        per_group[f"dmoe.generic.{i}"] = e.a.size + e.b.size
    for t in sorted(bank.specific):
        for i, e in enumerate(bank.specific[t]):
            per_group[f"dmoe.task{t}.{i}"] = e.a.size + e.b.size
    per_group["dmoe.router.g"] = router_g.w.size
    per_group["dmoe.router.t"] = sum(r.w.size for r in task_routers.values())
    return {"total": sum(per_group.values()), "per_group": per_group}
