"""Adam with decoupled weight decay, plus a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Parameter, Tensor, backward


@dataclass
class ParamGroup:
    params: list[Parameter]
    lr: float
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter).

    Frozen parameters (``trainable=False``) are skipped entirely, so neither
    their values nor their (always zero) gradients change.
    """

    def __init__(
        self,
        groups: Sequence[ParamGroup] | Sequence[Parameter],
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        groups = list(groups)
        if groups and isinstance(groups[0], Parameter):
            groups = [ParamGroup(list(groups), lr, weight_decay)]
        self.groups: list[ParamGroup] = groups
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState()

    def params(self) -> list[Parameter]:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def step(self) -> None:
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.betas
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for group in self.groups:
            lr, wd = group.lr, group.weight_decay
            for p in group.params:
                if not p.trainable:
                    continue
                key = id(p)
                g = p.grad
                m = self.state.exp_avg.get(key)
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                else:
                    v = self.state.exp_avg_sq[key]
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * g * g
                self.state.exp_avg[key] = m
                self.state.exp_avg_sq[key] = v
                if lr == 0.0:
                    continue
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = (p.data * (1.0 - lr * wd) - lr * update).astype(p.data.dtype)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central finite differences.

    ``fn`` receives one Tensor per input. Non-scalar outputs are reduced by a
    fixed random probe vector. The error for each input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``;
    the floor (default 1e-6) keeps finite-difference noise on vanishing
    gradients from reading as a large relative error.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe: list[np.ndarray] = []

    def scalar(values: list[np.ndarray], params=None) -> tuple[float, Tensor]:
        ts = params if params is not None else [Tensor(v) for v in values]
        out = fn(*ts)
        if out.data.size != 1:
            if not probe:
                probe.append(np.random.default_rng(seed).standard_normal(out.shape))
            out = (out * probe[0]).sum()
        return float(out.data), out

    params = [Parameter(a, name=f"input{i}") for i, a in enumerate(arrays)]
    _, out = scalar(arrays, params)
    backward(out)
    errors = []
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp, _ = scalar(arrays)
            flat[j] = orig - h
            fm, _ = scalar(arrays)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * h)
        analytic = params[i].grad
        scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
        errors.append(float(np.max(np.abs(analytic - numeric), initial=0.0) / scale))
    return GradCheckReport(max(errors) if errors else 0.0, errors, tol)
