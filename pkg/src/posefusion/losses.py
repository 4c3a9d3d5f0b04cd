"""Training objectives for pose regressors.

* ``pose_distance``: translation norm plus weighted quaternion norm, the
  quaternion taken in whichever sign is closer.
* ``mapnet_loss``: absolute per-frame distances plus distances between
  component-wise pose differences of frame pairs.
* ``fusion_total_loss``: weighted sum of absolute, pairwise and relative
  terms.
* ``aleatoric_loss``: heteroscedastic loss with a predicted variance, in
  variance or log-variance form.
* ``aux_combine``: learned combination of per-task losses (softplus MLP or a
  1D convolution stack), trained by ``aux_alternating_step``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit, softplus

from .errors import DimensionMismatch, DivergenceDetected, IndexOutOfRange, LengthMismatch
from .fusion_kernels import finite_diff_grad
from .geometry import LiteralPoseDiff, Pose, RelativePose, relative_between

VARIANCE = "variance"
LOG_VARIANCE = "log_variance"


@dataclass(frozen=True)
class DistanceConfig:
    beta_q: float = 1.0
    norm: str = "L1"

    def __post_init__(self):
        if not self.beta_q > 0:
            raise ValueError("beta_q must be > 0")
        if self.norm not in ("L1", "L2"):
            raise ValueError("norm must be 'L1' or 'L2'")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # pairwise term
    beta: float = 1.0  # relative term
    gamma: float = 1.0  # absolute term
    allow_zero: bool = False

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if any(not np.isfinite(x) or x < 0 for x in w):
            raise ValueError("loss weights must be finite and >= 0")
        if not self.allow_zero and not any(w):
            raise ValueError("all loss weights are zero; pass allow_zero=True to permit it")


def _norm(v, kind: str) -> float:
    return float(np.sum(np.abs(v))) if kind == "L1" else float(np.linalg.norm(v))


def _parts(x):
    if isinstance(x, Pose):
        return x.t, x.q, True
    if isinstance(x, RelativePose):
        return x.dt, x.dq, True
    if isinstance(x, LiteralPoseDiff):
        return x.dt, x.dq4, False
    raise TypeError(f"unsupported pose type {type(x).__name__}")


def pose_distance(a, b, cfg: DistanceConfig = DistanceConfig()) -> float:
    """``|t_a - t_b| + beta_q |q_a -+ q_b|``.

    For unit quaternions the sign giving the smaller difference is used, so
    ``q`` and ``-q`` are at distance zero. Component-wise differences
    (:class:`LiteralPoseDiff`) are compared as raw vectors.
    """
    ta, qa, unit_a = _parts(a)
    tb, qb, unit_b = _parts(b)
    dq = qa - qb
    if unit_a and unit_b:
        alt = qa + qb
        if _norm(alt, cfg.norm) < _norm(dq, cfg.norm):
            dq = alt
    return _norm(ta - tb, cfg.norm) + cfg.beta_q * _norm(dq, cfg.norm)


def _check_pairs(pairs, n):
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexOutOfRange(f"pair ({i}, {j}) outside {n} frames")


def _pair_value(p: Sequence[Pose], i: int, j: int, literal: bool):
    return LiteralPoseDiff.between(p[i], p[j]) if literal else relative_between(p[i], p[j])


def _abs_term(pred, gt, cfg):
    return sum(pose_distance(a, b, cfg) for a, b in zip(pred, gt))


def _pair_term(pred, gt, pairs, cfg, literal):
    return sum(
        pose_distance(_pair_value(pred, i, j, literal), _pair_value(gt, i, j, literal), cfg) for i, j in pairs
    )


def mapnet_loss(
    pred: Sequence[Pose],
    gt: Sequence[Pose],
    pairs: Sequence[tuple[int, int]],
    cfg: DistanceConfig = DistanceConfig(),
    literal: bool = True,
) -> float:
    """Absolute distances per frame plus pairwise distances of pose differences.

    With ``literal=True`` (default) the pair value is the component-wise
    difference ``(t_i - t_j, q_i - q_j)``; otherwise the body-frame
    relative pose is compared.
    """
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predictions for {len(gt)} ground-truth poses")
    _check_pairs(pairs, len(pred))
    return _abs_term(pred, gt, cfg) + _pair_term(pred, gt, pairs, cfg, literal)


def fusion_total_loss(
    abs_pred: Sequence[Pose],
    abs_gt: Sequence[Pose],
    pairs: Sequence[tuple[int, int]],
    rel_pred: Sequence[RelativePose],
    rel_gt: Sequence[RelativePose],
    w: LossWeights,
    cfg: DistanceConfig = DistanceConfig(),
    literal: bool = True,
) -> float:
    """``gamma * sum h(abs) + alpha * sum h(pair) + beta * sum h(rel)``."""
    if len(abs_pred) != len(abs_gt):
        raise LengthMismatch(f"{len(abs_pred)} absolute predictions for {len(abs_gt)} targets")
    if len(rel_pred) != len(rel_gt):
        raise LengthMismatch(f"{len(rel_pred)} relative predictions for {len(rel_gt)} targets")
    _check_pairs(pairs, len(abs_pred))
    total = 0.0
    if w.gamma:
        total += w.gamma * _abs_term(abs_pred, abs_gt, cfg)
    if w.alpha:
        total += w.alpha * _pair_term(abs_pred, abs_gt, pairs, cfg, literal)
    if w.beta:
        total += w.beta * sum(pose_distance(a, b, cfg) for a, b in zip(rel_pred, rel_gt))
    return total


# -- aleatoric uncertainty -----------------------------------------------------


def aleatoric_loss(residual_sq, s, form: str = LOG_VARIANCE):
    """Heteroscedastic regression loss.

    ``form="log_variance"``: ``0.5 * exp(-s) * r + 0.5 * s`` with ``s = log sigma^2``.
    ``form="variance"``: ``s`` is the variance itself, ``r / (2 s) + 0.5 log s``.
    Both agree whenever the variance equals ``exp(s)``.
    """
    r = np.asarray(residual_sq, dtype=float)
    if np.any(r < 0):
        raise ValueError("residual_sq must be >= 0")
    s = np.asarray(s, dtype=float)
    if form == LOG_VARIANCE:
        out = 0.5 * np.exp(-s) * r + 0.5 * s
    elif form == VARIANCE:
        if np.any(s <= 0):
            raise ValueError("variance must be > 0")
        out = r / (2.0 * s) + 0.5 * np.log(s)
    else:
        raise ValueError(f"unknown form {form!r}")
    return float(out) if out.ndim == 0 else out


def aleatoric_loss_grad(residual_sq, s, form: str = LOG_VARIANCE):
    """Partial derivatives ``(dL/dr, dL/ds)`` of :func:`aleatoric_loss`."""
    r = np.asarray(residual_sq, dtype=float)
    s = np.asarray(s, dtype=float)
    if form == LOG_VARIANCE:
        return 0.5 * np.exp(-s) + 0 * r, 0.5 - 0.5 * np.exp(-s) * r
    if form == VARIANCE:
        return 0.5 / s + 0 * r, -r / (2.0 * s**2) + 0.5 / s
    raise ValueError(f"unknown form {form!r}")


def aleatoric_loss_relative(residual_sq, s_dp):
    """Log-variance loss on a relative-pose residual."""
    return aleatoric_loss(residual_sq, s_dp, LOG_VARIANCE)


@dataclass(frozen=True, eq=False)
class UncertainPose:
    """Predicted pose with per-branch log variances.

    ``log_var`` holds one value (shared by the whole residual) or two
    values (translation, rotation).
    """

    mean: Pose | RelativePose
    log_var: np.ndarray

    def __post_init__(self):
        s = np.array(self.log_var, dtype=float).reshape(-1)
        if s.size not in (1, 2) or not np.all(np.isfinite(s)):
            raise ValueError("log_var must hold 1 or 2 finite values")
        s.flags.writeable = False
        object.__setattr__(self, "log_var", s)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var)


def uncertain_pose_loss(pred: UncertainPose, target: Pose | RelativePose) -> float:
    """Sum of log-variance losses over the translation and rotation branches."""
    tp, qp, _ = _parts(pred.mean)
    tt, qt, _ = _parts(target)
    dq = min(np.sum((qp - qt) ** 2), np.sum((qp + qt) ** 2))
    r_t, r_q = float(np.sum((tp - tt) ** 2)), float(dq)
    if pred.log_var.size == 1:
        return aleatoric_loss(r_t + r_q, pred.log_var[0])
    return aleatoric_loss(r_t, pred.log_var[0]) + aleatoric_loss(r_q, pred.log_var[1])


# -- auxiliary loss combiners --------------------------------------------------

NONLINEAR = "nonlinear"
CONVOLUTIONAL = "convolutional"


def _softplus_grad(x):
    return expit(x)


@dataclass(frozen=True, eq=False)
class AuxParams:
    """Parameters of a learned loss combiner.

    ``nonlinear``: layers ``(W (d_in, d_out), b (d_out,))``, each followed by
    softplus; the last layer has ``d_out = 1``.
    ``convolutional``: layers ``(K (c_out, c_in, width), b (c_out,))`` applied
    as valid 1D convolutions along the loss vector with softplus between
    layers; the last layer has one output channel and is sum-pooled.
    """

    variant: str
    layers: tuple

    def __post_init__(self):
        if self.variant not in (NONLINEAR, CONVOLUTIONAL):
            raise ValueError(f"unknown variant {self.variant!r}")
        layers = tuple((np.asarray(w, dtype=float), np.asarray(b, dtype=float)) for w, b in self.layers)
        if not layers:
            raise DimensionMismatch("at least one layer is required")
        prev = None
        for w, b in layers:
            ndim = 2 if self.variant == NONLINEAR else 3
            if w.ndim != ndim:
                raise DimensionMismatch(f"{self.variant} layer weights must have {ndim} axes, got {w.shape}")
            d_in, d_out = (w.shape[0], w.shape[1]) if ndim == 2 else (w.shape[1], w.shape[0])
            if b.shape != (d_out,):
                raise DimensionMismatch(f"bias shape {b.shape} for {d_out} outputs")
            if prev is not None and d_in != prev:
                raise DimensionMismatch(f"layer expects {d_in} inputs, previous layer gives {prev}")
            prev = d_out
        if prev != 1:
            raise DimensionMismatch("last layer must produce a single output")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def nonlinear(cls, sizes: Sequence[int], seed: int = 0, nonnegative: bool = False) -> "AuxParams":
        """MLP with layer widths ``sizes`` (first = number of tasks, last = 1)."""
        rng = np.random.default_rng(seed)
        layers = []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(0.0 if nonnegative else -bound, bound, (d_in, d_out))
            layers.append((w, rng.uniform(-bound, bound, d_out)))
        return cls(NONLINEAR, tuple(layers))

    @classmethod
    def convolutional(cls, channels: Sequence[int], widths: Sequence[int], seed: int = 0) -> "AuxParams":
        """Conv stack; ``channels[0]`` is 1 (the loss vector), ``channels[-1]`` must be 1."""
        rng = np.random.default_rng(seed)
        layers = []
        for c_in, c_out, k in zip(channels[:-1], channels[1:], widths):
            bound = 1.0 / np.sqrt(c_in * k)
            layers.append((rng.uniform(-bound, bound, (c_out, c_in, k)), rng.uniform(-bound, bound, c_out)))
        return cls(CONVOLUTIONAL, tuple(layers))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    def with_flat(self, v) -> "AuxParams":
        v = np.asarray(v, dtype=float)
        out, k = [], 0
        for w, b in self.layers:
            nw = w.size
            out.append((v[k : k + nw].reshape(w.shape), v[k + nw : k + nw + b.size].reshape(b.shape)))
            k += nw + b.size
        return replace(self, layers=tuple(out))


def _conv1d(x, k, b):
    """Valid cross-correlation: ``x (c_in, L)``, ``k (c_out, c_in, w)`` -> ``(c_out, L - w + 1)``."""
    w = k.shape[2]
    L = x.shape[1] - w + 1
    if L < 1:
        raise DimensionMismatch(f"kernel width {w} longer than input length {x.shape[1]}")
    cols = np.stack([x[:, i : i + w] for i in range(L)])  # (L, c_in, w)
    return np.einsum("lcw,ocw->ol", cols, k) + b[:, None], cols


def _aux_forward(losses, p: AuxParams):
    x = np.asarray(losses, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("loss vector must be finite")
    cache = []
    if p.variant == NONLINEAR:
        if x.size != p.layers[0][0].shape[0]:
            raise DimensionMismatch(f"{x.size} losses for a combiner expecting {p.layers[0][0].shape[0]}")
        h = x
        for w, b in p.layers:
            pre = h @ w + b
            cache.append((h, pre))
            h = softplus(pre)
        return float(h[0]), cache
    h = x[None, :]
    for n, (k, b) in enumerate(p.layers):
        pre, cols = _conv1d(h, k, b)
        cache.append((h, pre, cols))
        h = softplus(pre) if n < len(p.layers) - 1 else pre
    return float(h.sum()), cache


def aux_combine(losses, p: AuxParams) -> float:
    """Scalar ``h(losses; phi)``."""
    return _aux_forward(losses, p)[0]


def aux_combine_backward(losses, p: AuxParams):
    """Return ``(value, d value / d losses, [(dW, db) per layer])``."""
    value, cache = _aux_forward(losses, p)
    grads = []
    if p.variant == NONLINEAR:
        g = np.ones(1)
        for (w, _), (h, pre) in zip(reversed(p.layers), reversed(cache)):
            dpre = g * _softplus_grad(pre)
            grads.append((np.outer(h, dpre), dpre))
            g = w @ dpre
        return value, g, grads[::-1]
    n = len(p.layers)
    g = None
    for idx in range(n - 1, -1, -1):
        k, _ = p.layers[idx]
        h, pre, cols = cache[idx]
        dpre = np.ones_like(pre) if idx == n - 1 else g * _softplus_grad(pre)
        dk = np.einsum("ol,lcw->ocw", dpre, cols)
        grads.append((dk, dpre.sum(axis=1)))
        dcols = np.einsum("ol,ocw->lcw", dpre, k)
        g = np.zeros_like(h)
        for i in range(dcols.shape[0]):
            g[:, i : i + k.shape[2]] += dcols[i]
    return value, g[0], grads[::-1]


# -- alternating auxiliary learning --------------------------------------------


@dataclass(frozen=True, eq=False)
class MultiTaskLinear:
    """``Y_hat = (X @ shared) @ heads``; column 0 of the targets is the main task."""

    shared: np.ndarray  # (d_in, d_h)
    heads: np.ndarray  # (d_h, n_tasks)

    @classmethod
    def init(cls, d_in: int, d_h: int, n_tasks: int, seed: int = 0) -> "MultiTaskLinear":
        rng = np.random.default_rng(seed)
        return cls(
            rng.uniform(-1, 1, (d_in, d_h)) / np.sqrt(d_in), rng.uniform(-1, 1, (d_h, n_tasks)) / np.sqrt(d_h)
        )

    def task_losses(self, X, Y) -> np.ndarray:
        err = np.asarray(X) @ self.shared @ self.heads - Y
        return np.mean(err**2, axis=0)

    def task_loss_grads(self, X, Y) -> list[dict[str, np.ndarray]]:
        X = np.asarray(X, dtype=float)
        H = X @ self.shared
        err = H @ self.heads - Y
        n = X.shape[0]
        out = []
        for k in range(self.heads.shape[1]):
            d = 2.0 * err[:, k] / n  # dL_k / d yhat_k
            gh = np.zeros_like(self.heads)
            gh[:, k] = H.T @ d
            out.append({"shared": X.T @ np.outer(d, self.heads[:, k]), "heads": gh})
        return out

    def step(self, grads: dict[str, np.ndarray], lr: float) -> "MultiTaskLinear":
        return MultiTaskLinear(self.shared - lr * grads["shared"], self.heads - lr * grads["heads"])


def _combine(grads: list[dict], coef) -> dict[str, np.ndarray]:
    return {k: sum(c * g[k] for c, g in zip(coef, grads)) for k in grads[0]}


def _dot(a: dict, b: dict) -> float:
    return float(sum(np.sum(a[k] * b[k]) for k in a))


def total_loss(main: MultiTaskLinear, aux: AuxParams, batch) -> float:
    """``L_main + h(task losses; phi)``."""
    ell = main.task_losses(*batch)
    return float(ell[0]) + aux_combine(ell, aux)


def main_step(main: MultiTaskLinear, aux: AuxParams, batch, lr: float) -> MultiTaskLinear:
    """One descent step on ``L_total`` with the combiner held fixed."""
    ell = main.task_losses(*batch)
    grads = main.task_loss_grads(*batch)
    _, dh, _ = aux_combine_backward(ell, aux)
    coef = dh.copy()
    coef[0] += 1.0
    return main.step(_combine(grads, coef), lr)


class AltStepResult(NamedTuple):
    main: MultiTaskLinear
    aux: AuxParams
    total_loss: float
    aux_loss: float


def aux_alternating_step(
    main: MultiTaskLinear,
    aux: AuxParams,
    train_batch,
    aux_batch,
    lr_main: float,
    lr_aux: float,
    fd_step: float = 1e-6,
) -> AltStepResult:
    """One main step on ``L_total`` then one combiner step on ``L_A``.

    ``L_A`` is the main-task loss on the auxiliary batch after the main
    step. Its gradient with respect to ``phi`` is taken through that single
    update, ignoring second derivatives of the task losses:
    ``dL_A/dphi = -lr_main * d/dphi sum_k (g_A . g_k) dh/dl_k``, where the
    mixed derivative of the combiner is evaluated by finite differences.
    """
    if lr_main < 0 or lr_aux < 0:
        raise ValueError("learning rates must be >= 0")
    l_total = total_loss(main, aux, train_batch)
    new_main = main_step(main, aux, train_batch, lr_main)
    l_aux = float(new_main.task_losses(*aux_batch)[0])
    if not (np.isfinite(l_total) and np.isfinite(l_aux)):
        raise DivergenceDetected("non-finite loss in alternating step")
    if lr_aux == 0 or lr_main == 0:
        return AltStepResult(new_main, aux, l_total, l_aux)

    ell = main.task_losses(*train_batch)
    task_grads = main.task_loss_grads(*train_batch)
    g_aux = new_main.task_loss_grads(*aux_batch)[0]
    d = np.array([_dot(g_aux, g) for g in task_grads])

    def weighted_dh(v):
        return float(d @ aux_combine_backward(ell, aux.with_flat(v))[1])

    phi = aux.flat()
    grad_phi = -lr_main * finite_diff_grad(weighted_dh, phi, fd_step)
    if not np.all(np.isfinite(grad_phi)):
        raise DivergenceDetected("non-finite combiner gradient")
    return AltStepResult(new_main, aux.with_flat(phi - lr_aux * grad_phi), l_total, l_aux)
