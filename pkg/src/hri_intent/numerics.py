"""
Tensor plumbing shared by every model: float64 torch tensors with autograd,
a seeded generator, guarded primitives, finite-difference gradient checking and Adam.

Primitives not wrapped here (add, mul, sigmoid, tanh, relu, exp, reductions, layer and
batch normalization) are used directly from torch.
"""
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor

DTYPE = torch.float64
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation"""


def _shape_error(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


class Rng:
    """Seeded random source, identical seeds give identical draw sequences"""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def spawn(self, offset: int) -> "Rng":
        """Independent generator for a sub-task (fold, model, ...)"""
        return Rng(self.seed + offset)

    def normal(self, *shape: int) -> Tensor:
        return torch.randn(shape, generator=self.generator, dtype=DTYPE)

    def uniform(self, *shape: int) -> Tensor:
        return torch.rand(shape, generator=self.generator, dtype=DTYPE)

    def bernoulli(self, p: float, *shape: int) -> Tensor:
        return torch.bernoulli(torch.full(shape, float(p), dtype=DTYPE), generator=self.generator)

    def randint(self, high: int, *shape: int) -> Tensor:
        return torch.randint(high, shape, generator=self.generator)

    def permutation(self, n: int) -> Tensor:
        return torch.randperm(n, generator=self.generator)

    def next_seed(self) -> int:
        """Draw a seed for torch's global generator (parameter initialisation)"""
        return int(torch.randint(2**31 - 1, (1,), generator=self.generator).item())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    first = tensors[0]
    for other in tensors[1:]:
        same_rank = other.dim() == first.dim()
        if not same_rank or any(
            i != dim % first.dim() and x != y
            for i, (x, y) in enumerate(zip(first.shape, other.shape))
        ):
            raise _shape_error("concat", first, other)
    return torch.cat(list(tensors), dim=dim)


def safe_log(x: Tensor) -> Tensor:
    """log(max(x, 1e-12))"""
    return torch.log(torch.clamp(x, min=LOG_FLOOR))


def softmax(x: Tensor) -> Tensor:
    return torch.softmax(x, dim=-1)


def dropout(x: Tensor, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout with an explicit Bernoulli keep-mask drawn from rng"""
    if not training or p == 0.0:
        return x
    assert rng is not None, "training-mode dropout needs an Rng"
    keep = rng.bernoulli(1.0 - p, *x.shape).to(x.dtype)
    return x * keep / (1.0 - p)


def check_width(x: Tensor, width: int, op: str) -> None:
    if x.shape[-1] != width:
        raise ShapeError(f"{op}: expected last dimension {width}, got shape {tuple(x.shape)}")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[Tensor | None]:
    """Accumulate d(loss)/d(param) into .grad, returns the gradients of params"""
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    return [p.grad for p in params] if params is not None else []


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    fd_step: float = 1e-5,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> float:
    """
    Max over checked entries of |analytic - fd| / max(1, |analytic|, |fd|) with central
    finite differences. fn must be deterministic, re-seed any Rng it uses inside fn.
    With max_entries set, a random subset of each parameter's entries is checked.
    """
    assert fd_step > 0
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    analytic = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params
    ]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.view(-1)
            if max_entries is not None and flat.numel() > max_entries:
                picker = rng if rng is not None else Rng(0)
                entries = picker.permutation(flat.numel())[:max_entries].tolist()
            else:
                entries = range(flat.numel())
            for i in entries:
                original = flat[i].item()
                flat[i] = original + fd_step
                f_plus = fn().item()
                flat[i] = original - fd_step
                f_minus = fn().item()
                flat[i] = original
                fd = (f_plus - f_minus) / (2 * fd_step)
                a = gflat[i].item()
                worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def make_adam(params: Iterable[Tensor], config: AdamConfig) -> torch.optim.Adam:
    """Classic Adam, the L2 term is added to the gradient before the moment updates"""
    return torch.optim.Adam(
        params,
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def adam_step(
    params: Sequence[Tensor], grads: Sequence[Tensor], state: torch.optim.Adam
) -> Sequence[Tensor]:
    """Apply one Adam update to params from explicitly supplied gradients"""
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise _shape_error("adam_step", p, g)
        p.grad = g.detach().clone()
    state.step()
    return params


def adam_steps_taken(state: torch.optim.Adam, param: Tensor) -> int:
    step = state.state.get(param, {}).get("step", 0)
    return int(step.item() if isinstance(step, Tensor) else step)


def is_finite(x: Tensor | float) -> bool:
    if isinstance(x, Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(x)
