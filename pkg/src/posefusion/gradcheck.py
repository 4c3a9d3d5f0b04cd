"""Analytic-vs-finite-difference gradient suites.

Each kernel check draws a random configuration from one seed, reduces the
kernel output to a scalar with a random projection, and compares every
analytic gradient against :func:`finite_diff_grad`. The reported error of a
configuration is the worst :func:`relative_error` over all its gradients.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .fusion_kernels import (
    MmtmParams,
    SoftFusionParams,
    finite_diff_grad,
    mmtm,
    mmtm_backward,
    relative_error,
    soft_fusion,
    soft_fusion_backward,
)
from .losses import LOG_VARIANCE, VARIANCE, AuxParams, aleatoric_loss, aleatoric_loss_grad, aux_combine, aux_combine_backward

KERNELS = ("soft_fusion", "mmtm", "aleatoric", "aux_nonlinear", "aux_convolutional")
DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def _worst(pairs) -> float:
    return max(relative_error(a, f) for a, f in pairs)


def _flip(grads: dict, sabotage: bool) -> dict:
    return {k: -v for k, v in grads.items()} if sabotage else grads


def check_soft_fusion(seed: int, h: float = DEFAULT_STEP, sabotage: bool = False) -> float:
    rng = np.random.default_rng(seed)
    dv, di, batch = (int(x) for x in rng.integers(1, 6, 3))
    p = SoftFusionParams.init(dv, di, seed=seed)
    p = replace(p, bias_v=rng.normal(size=dv), bias_i=rng.normal(size=di))
    a_v, a_i = rng.normal(size=(batch, dv)), rng.normal(size=(batch, di))
    G = rng.normal(size=(batch, dv + di))
    grads = _flip(soft_fusion_backward(a_v, a_i, p, G), sabotage)

    def scalar(name, x):
        av, ai, q = a_v, a_i, p
        if name == "a_v":
            av = x
        elif name == "a_i":
            ai = x
        else:
            q = replace(p, **{name: x})
        return float(np.sum(G * soft_fusion(av, ai, q)[0]))

    current = {"a_v": a_v, "a_i": a_i, "weights_v": p.weights_v, "bias_v": p.bias_v,
               "weights_i": p.weights_i, "bias_i": p.bias_i}
    return _worst(
        (grads[name], finite_diff_grad(lambda x, name=name: scalar(name, x), value, h))
        for name, value in current.items()
    )


def check_mmtm(seed: int, h: float = DEFAULT_STEP, sabotage: bool = False) -> float:
    rng = np.random.default_rng(seed)
    ca, cb = (int(x) for x in rng.integers(1, 5, 2))
    batch_dims = int(rng.integers(0, 2))
    lead = (int(rng.integers(1, 3)),) if batch_dims else ()
    a = rng.normal(size=lead + (int(rng.integers(1, 4)), ca))
    b = rng.normal(size=lead + (int(rng.integers(1, 3)), int(rng.integers(1, 3)), cb))
    p = MmtmParams.init(ca, cb, seed=seed)
    # biases away from zero so the ReLU stays off its kink under +-h
    p = replace(p, joint_bias=rng.choice([-1.0, 1.0], p.joint_bias.shape) * rng.uniform(0.2, 1.0, p.joint_bias.shape))
    Ga, Gb = rng.normal(size=a.shape), rng.normal(size=b.shape)
    grads = _flip(mmtm_backward(a, b, p, Ga, Gb, batch_dims), sabotage)

    def scalar(name, x):
        aa, bb, q = a, b, p
        if name == "a":
            aa = x
        elif name == "b":
            bb = x
        else:
            q = replace(p, **{name: x})
        out = mmtm(aa, bb, q, batch_dims)
        return float(np.sum(Ga * out.a_out) + np.sum(Gb * out.b_out))

    current = {"a": a, "b": b, "joint": p.joint, "joint_bias": p.joint_bias, "excite_a": p.excite_a,
               "excite_a_bias": p.excite_a_bias, "excite_b": p.excite_b, "excite_b_bias": p.excite_b_bias}
    return _worst(
        (grads[name], finite_diff_grad(lambda x, name=name: scalar(name, x), value, h))
        for name, value in current.items()
    )


def check_aleatoric(seed: int, h: float = DEFAULT_STEP, sabotage: bool = False) -> float:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    r = rng.uniform(0.1, 5.0, n)
    pairs = []
    for form, s in ((LOG_VARIANCE, rng.normal(size=n)), (VARIANCE, rng.uniform(0.2, 3.0, n))):
        dr, ds = aleatoric_loss_grad(r, s, form)
        if sabotage:
            dr, ds = -dr, -ds
        pairs.append((dr, finite_diff_grad(lambda x: np.sum(aleatoric_loss(x, s, form)), r, h)))
        pairs.append((ds, finite_diff_grad(lambda x: np.sum(aleatoric_loss(r, x, form)), s, h)))
    return _worst(pairs)


def _check_aux(p: AuxParams, losses, h: float, sabotage: bool) -> float:
    _, d_losses, layer_grads = aux_combine_backward(losses, p)
    analytic_phi = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in layer_grads])
    if sabotage:
        d_losses, analytic_phi = -d_losses, -analytic_phi
    return _worst(
        [
            (d_losses, finite_diff_grad(lambda x: aux_combine(x, p), losses, h)),
            (analytic_phi, finite_diff_grad(lambda v: aux_combine(losses, p.with_flat(v)), p.flat(), h)),
        ]
    )


def check_aux_nonlinear(seed: int, h: float = DEFAULT_STEP, sabotage: bool = False) -> float:
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 6))] + [int(x) for x in rng.integers(1, 6, int(rng.integers(0, 3)))] + [1]
    p = AuxParams.nonlinear(sizes, seed=seed)
    return _check_aux(p, rng.uniform(0.0, 3.0, sizes[0]), h, sabotage)


def check_aux_convolutional(seed: int, h: float = DEFAULT_STEP, sabotage: bool = False) -> float:
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 3))
    channels = [1] + [int(x) for x in rng.integers(1, 4, depth - 1)] + [1]
    widths = [int(x) for x in rng.integers(1, 3, depth)]
    p = AuxParams.convolutional(channels, widths, seed=seed)
    n_tasks = sum(w - 1 for w in widths) + int(rng.integers(1, 5))
    return _check_aux(p, rng.uniform(0.0, 3.0, n_tasks), h, sabotage)


CHECKS: dict[str, Callable[..., float]] = {
    "soft_fusion": check_soft_fusion,
    "mmtm": check_mmtm,
    "aleatoric": check_aleatoric,
    "aux_nonlinear": check_aux_nonlinear,
    "aux_convolutional": check_aux_convolutional,
}


class KernelReport(NamedTuple):
    kernel: str
    seeds: int
    worst: float
    worst_seed: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def run_suite(
    seeds: int = 100,
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    kernels: Sequence[str] = KERNELS,
    sabotage: str | None = None,
) -> list[KernelReport]:
    """Run every kernel check on seeds ``0 .. seeds-1``.

    ``sabotage`` names a kernel whose analytic gradients are sign-flipped;
    it exists so callers can confirm a broken gradient is caught.
    """
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    unknown = set(kernels) - set(CHECKS)
    if sabotage is not None:
        unknown |= {sabotage} - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown kernels: {sorted(unknown)}")
    reports = []
    for name in kernels:
        errs = [CHECKS[name](s, h, sabotage == name) for s in range(seeds)]
        k = int(np.argmax(errs))
        reports.append(KernelReport(name, seeds, float(errs[k]), k, tol))
    return reports
