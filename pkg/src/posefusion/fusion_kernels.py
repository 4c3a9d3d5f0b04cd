"""Attention-style fusion operators for two feature streams.

Three ways of merging a visual feature ``a_v`` and an inertial feature
``a_i``:

* ``concat``: late concatenation.
* ``soft_fusion``: each stream is re-weighted by a sigmoid mask computed from
  the concatenation of both, ``[a_v * m_v ; a_i * m_i]``.
* ``mmtm``: squeeze both tensors to channel descriptors, build a joint ReLU
  code ``Z`` and gate every channel by ``2 * sigmoid(E)``.

Each forward operator has a matching ``*_backward`` that returns analytic
gradients for the inputs and every parameter. Leading batch axes are
supported by the soft-fusion kernel directly and by the MMTM kernel through
``batch_dims``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, DivergenceDetected, NonFiniteEvaluation


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def concat(a, b) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=float), np.asarray(b, dtype=float)], axis=-1)


# -- soft fusion ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SoftFusionParams:
    """Mask layers ``m_v = sigmoid(W_v^T [a_v; a_i] + b_v)`` and likewise for ``m_i``."""

    weights_v: np.ndarray  # (dv + di, dv)
    bias_v: np.ndarray  # (dv,)
    weights_i: np.ndarray  # (dv + di, di)
    bias_i: np.ndarray  # (di,)

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, np.asarray(getattr(self, f.name), dtype=float))
        dv, di = self.bias_v.shape[0], self.bias_i.shape[0]
        if self.weights_v.shape != (dv + di, dv) or self.weights_i.shape != (dv + di, di):
            raise DimensionMismatch(
                f"soft fusion weights {self.weights_v.shape}, {self.weights_i.shape} "
                f"inconsistent with dv={dv}, di={di}"
            )

    @property
    def dv(self) -> int:
        return self.bias_v.shape[0]

    @property
    def di(self) -> int:
        return self.bias_i.shape[0]

    @classmethod
    def zeros(cls, dv: int, di: int) -> "SoftFusionParams":
        d = dv + di
        return cls(np.zeros((d, dv)), np.zeros(dv), np.zeros((d, di)), np.zeros(di))

    @classmethod
    def init(cls, dv: int, di: int, seed: int = 0) -> "SoftFusionParams":
        rng = np.random.default_rng(seed)
        d = dv + di
        return cls(
            _uniform(rng, d, (d, dv)), _uniform(rng, d, dv), _uniform(rng, d, (d, di)), _uniform(rng, d, di)
        )


class FusionMasks(NamedTuple):
    mask_v: np.ndarray
    mask_i: np.ndarray


def _check_soft(a_v, a_i, p: SoftFusionParams):
    a_v = np.asarray(a_v, dtype=float)
    a_i = np.asarray(a_i, dtype=float)
    if a_v.shape[-1] != p.dv or a_i.shape[-1] != p.di:
        raise DimensionMismatch(
            f"features of size ({a_v.shape[-1]}, {a_i.shape[-1]}) for params ({p.dv}, {p.di})"
        )
    return a_v, a_i


# float sigmoid saturates to exactly 0 or 1; masks are kept in the open interval
_MASK_LO = np.finfo(float).tiny
_MASK_HI = 1.0 - np.finfo(float).epsneg


def _mask(z):
    return np.clip(expit(z), _MASK_LO, _MASK_HI)


def soft_fusion(a_v, a_i, p: SoftFusionParams) -> tuple[np.ndarray, FusionMasks]:
    a_v, a_i = _check_soft(a_v, a_i, p)
    x = concat(a_v, a_i)
    m_v = _mask(x @ p.weights_v + p.bias_v)
    m_i = _mask(x @ p.weights_i + p.bias_i)
    return concat(a_v * m_v, a_i * m_i), FusionMasks(m_v, m_i)


def soft_fusion_backward(a_v, a_i, p: SoftFusionParams, grad_out) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * soft_fusion(a_v, a_i, p)[0])``.

    Parameter gradients are summed over any leading batch axes.
    """
    a_v, a_i = _check_soft(a_v, a_i, p)
    x = concat(a_v, a_i)
    _, (m_v, m_i) = soft_fusion(a_v, a_i, p)
    g = np.asarray(grad_out, dtype=float)
    g_v, g_i = g[..., : p.dv], g[..., p.dv :]
    dz_v = g_v * a_v * m_v * (1.0 - m_v)
    dz_i = g_i * a_i * m_i * (1.0 - m_i)
    dx = dz_v @ p.weights_v.T + dz_i @ p.weights_i.T
    xf = x.reshape(-1, x.shape[-1])
    return {
        "a_v": g_v * m_v + dx[..., : p.dv],
        "a_i": g_i * m_i + dx[..., p.dv :],
        "weights_v": xf.T @ dz_v.reshape(-1, p.dv),
        "bias_v": dz_v.reshape(-1, p.dv).sum(axis=0),
        "weights_i": xf.T @ dz_i.reshape(-1, p.di),
        "bias_i": dz_i.reshape(-1, p.di).sum(axis=0),
    }


# -- MMTM ----------------------------------------------------------------------


def squeeze(t, batch_dims: int = 0) -> np.ndarray:
    """Channel descriptor: mean over every axis between the batch axes and the last one."""
    t = np.asarray(t, dtype=float)
    if t.ndim < batch_dims + 1:
        raise DimensionMismatch(f"tensor of rank {t.ndim} has no channel axis after {batch_dims} batch axes")
    axes = tuple(range(batch_dims, t.ndim - 1))
    if not axes:
        return t.copy()
    return t.mean(axis=axes)


@dataclass(frozen=True, eq=False)
class MmtmParams:
    joint: np.ndarray  # (C + C', dZ)
    joint_bias: np.ndarray  # (dZ,)
    excite_a: np.ndarray  # (dZ, C)
    excite_a_bias: np.ndarray  # (C,)
    excite_b: np.ndarray  # (dZ, C')
    excite_b_bias: np.ndarray  # (C',)

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, np.asarray(getattr(self, f.name), dtype=float))
        dz = self.joint_bias.shape[0]
        ca, cb = self.excite_a_bias.shape[0], self.excite_b_bias.shape[0]
        if dz < 1:
            raise DimensionMismatch("joint dimension must be >= 1")
        if (
            self.joint.shape != (ca + cb, dz)
            or self.excite_a.shape != (dz, ca)
            or self.excite_b.shape != (dz, cb)
        ):
            raise DimensionMismatch(f"MMTM parameter shapes inconsistent with C={ca}, C'={cb}, dZ={dz}")

    @property
    def channels(self) -> tuple[int, int]:
        return self.excite_a_bias.shape[0], self.excite_b_bias.shape[0]

    @staticmethod
    def default_joint_dim(ca: int, cb: int) -> int:
        return max(1, math.ceil((ca + cb) / 4))

    @classmethod
    def init(cls, ca: int, cb: int, dz: int | None = None, seed: int = 0) -> "MmtmParams":
        dz = cls.default_joint_dim(ca, cb) if dz is None else dz
        rng = np.random.default_rng(seed)
        c = ca + cb
        return cls(
            _uniform(rng, c, (c, dz)),
            _uniform(rng, c, dz),
            _uniform(rng, dz, (dz, ca)),
            _uniform(rng, dz, ca),
            _uniform(rng, dz, (dz, cb)),
            _uniform(rng, dz, cb),
        )


class MmtmOutput(NamedTuple):
    a_out: np.ndarray
    b_out: np.ndarray
    e_a: np.ndarray
    e_b: np.ndarray


def _expand(v, t, batch_dims):
    """Reshape a ``(batch..., C)`` gate so it broadcasts over the spatial axes of ``t``."""
    spatial = t.ndim - batch_dims - 1
    return v.reshape(v.shape[:-1] + (1,) * spatial + v.shape[-1:])


def _mmtm_forward(a, b, p: MmtmParams, batch_dims: int):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ca, cb = p.channels
    if a.shape[-1] != ca or b.shape[-1] != cb:
        raise DimensionMismatch(f"channel extents ({a.shape[-1]}, {b.shape[-1]}) for params ({ca}, {cb})")
    u = concat(squeeze(a, batch_dims), squeeze(b, batch_dims))
    zpre = u @ p.joint + p.joint_bias
    z = np.maximum(zpre, 0.0)
    e_a = z @ p.excite_a + p.excite_a_bias
    e_b = z @ p.excite_b + p.excite_b_bias
    return a, b, u, zpre, z, e_a, e_b


def mmtm(a, b, p: MmtmParams, batch_dims: int = 0) -> MmtmOutput:
    a, b, _, _, _, e_a, e_b = _mmtm_forward(a, b, p, batch_dims)
    a_out = 2.0 * _expand(expit(e_a), a, batch_dims) * a
    b_out = 2.0 * _expand(expit(e_b), b, batch_dims) * b
    return MmtmOutput(a_out, b_out, e_a, e_b)


def mmtm_backward(a, b, p: MmtmParams, grad_a, grad_b, batch_dims: int = 0) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_a * a_out) + sum(grad_b * b_out)``."""
    a, b, u, zpre, z, e_a, e_b = _mmtm_forward(a, b, p, batch_dims)
    ca = p.channels[0]
    grad_a = np.asarray(grad_a, dtype=float)
    grad_b = np.asarray(grad_b, dtype=float)
    out = {}
    d_e = []
    d_direct = []
    for t, g, e in ((a, grad_a, e_a), (b, grad_b, e_b)):
        s = expit(e)
        axes = tuple(range(batch_dims, t.ndim - 1))
        d_gate = (g * t).sum(axis=axes) if axes else g * t
        d_e.append(d_gate * 2.0 * s * (1.0 - s))
        d_direct.append(2.0 * _expand(s, t, batch_dims) * g)
    de_a, de_b = d_e
    flat = lambda v: v.reshape(-1, v.shape[-1])  # noqa: E731
    dz = (de_a @ p.excite_a.T + de_b @ p.excite_b.T) * (zpre > 0)
    du = dz @ p.joint.T
    out["joint"] = flat(u).T @ flat(dz)
    out["joint_bias"] = flat(dz).sum(axis=0)
    out["excite_a"] = flat(z).T @ flat(de_a)
    out["excite_a_bias"] = flat(de_a).sum(axis=0)
    out["excite_b"] = flat(z).T @ flat(de_b)
    out["excite_b_bias"] = flat(de_b).sum(axis=0)
    for name, t, d_s, direct in (("a", a, du[..., :ca], d_direct[0]), ("b", b, du[..., ca:], d_direct[1])):
        count = int(np.prod(t.shape[batch_dims:-1], dtype=int))
        out[name] = direct + _expand(d_s, t, batch_dims) / count
    return out


def mask_activation_count(e) -> int:
    """Number of gate logits whose sigmoid exceeds 0.5, i.e. ``e > 0``."""
    return int(np.count_nonzero(np.asarray(e, dtype=float) > 0.0))


# -- gradient utilities --------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function; ``x`` may have any shape."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = float(f(x))
        flat[k] = old - h
        fm = float(f(x))
        flat[k] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"non-finite function value near coordinate {k}")
        gf[k] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric) -> float:
    """``max|a - f| / max(max|a|, max|f|, 1e-8)``."""
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(f), initial=0.0)), 1e-8)
    return float(np.max(np.abs(a - f), initial=0.0)) / scale


# -- small trainable regressors ------------------------------------------------


@dataclass(frozen=True, eq=False)
class SoftFusionModel:
    """Soft fusion followed by a linear head, ``y = W_h^T g_soft + b_h``."""

    weights_v: np.ndarray
    bias_v: np.ndarray
    weights_i: np.ndarray
    bias_i: np.ndarray
    head_w: np.ndarray  # (dv + di, dout)
    head_b: np.ndarray  # (dout,)

    @property
    def fusion(self) -> SoftFusionParams:
        return SoftFusionParams(self.weights_v, self.bias_v, self.weights_i, self.bias_i)

    @classmethod
    def init(cls, dv: int, di: int, dout: int, seed: int = 0) -> "SoftFusionModel":
        f = SoftFusionParams.init(dv, di, seed)
        rng = np.random.default_rng([seed, 1])
        d = dv + di
        return cls(f.weights_v, f.bias_v, f.weights_i, f.bias_i, _uniform(rng, d, (d, dout)), _uniform(rng, d, dout))

    def forward(self, inputs):
        a_v, a_i = inputs
        g, masks = soft_fusion(a_v, a_i, self.fusion)
        return g @ self.head_w + self.head_b, g, masks

    def predict(self, inputs) -> np.ndarray:
        return self.forward(inputs)[0]

    def loss_and_grad(self, inputs, targets):
        a_v, a_i = inputs
        y, g, _ = self.forward(inputs)
        err = y - targets
        loss = float(np.mean(err**2))
        dy = 2.0 * err / err.size
        grads = soft_fusion_backward(a_v, a_i, self.fusion, dy @ self.head_w.T)
        grads.pop("a_v"), grads.pop("a_i")
        grads["head_w"] = g.reshape(-1, g.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        grads["head_b"] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return loss, grads


@dataclass(frozen=True, eq=False)
class MmtmModel:
    """MMTM over one batch axis, squeezed outputs concatenated into a linear head."""

    joint: np.ndarray
    joint_bias: np.ndarray
    excite_a: np.ndarray
    excite_a_bias: np.ndarray
    excite_b: np.ndarray
    excite_b_bias: np.ndarray
    head_w: np.ndarray  # (C + C', dout)
    head_b: np.ndarray

    @property
    def mmtm(self) -> MmtmParams:
        return MmtmParams(
            self.joint, self.joint_bias, self.excite_a, self.excite_a_bias, self.excite_b, self.excite_b_bias
        )

    @classmethod
    def init(cls, ca: int, cb: int, dout: int, dz: int | None = None, seed: int = 0) -> "MmtmModel":
        m = MmtmParams.init(ca, cb, dz, seed)
        rng = np.random.default_rng([seed, 1])
        c = ca + cb
        return cls(
            m.joint, m.joint_bias, m.excite_a, m.excite_a_bias, m.excite_b, m.excite_b_bias,
            _uniform(rng, c, (c, dout)), _uniform(rng, c, dout),
        )

    def forward(self, inputs):
        a, b = inputs
        out = mmtm(a, b, self.mmtm, batch_dims=1)
        feat = concat(squeeze(out.a_out, 1), squeeze(out.b_out, 1))
        return feat @ self.head_w + self.head_b, feat, out

    def predict(self, inputs) -> np.ndarray:
        return self.forward(inputs)[0]

    def loss_and_grad(self, inputs, targets):
        a, b = inputs
        y, feat, _ = self.forward(inputs)
        err = y - targets
        loss = float(np.mean(err**2))
        dy = 2.0 * err / err.size
        dfeat = dy @ self.head_w.T
        ca = self.excite_a_bias.shape[0]
        ga = _spread(dfeat[:, :ca], np.asarray(a))
        gb = _spread(dfeat[:, ca:], np.asarray(b))
        grads = mmtm_backward(a, b, self.mmtm, ga, gb, batch_dims=1)
        grads.pop("a"), grads.pop("b")
        grads["head_w"] = feat.T @ dy
        grads["head_b"] = dy.sum(axis=0)
        return loss, grads


def _spread(d_s, t):
    """Gradient of a batch-1 squeeze, pushed back over the spatial axes of ``t``."""
    count = int(np.prod(t.shape[1:-1], dtype=int))
    return np.broadcast_to(_expand(d_s, t, 1), t.shape) / count


class TrainResult(NamedTuple):
    model: SoftFusionModel | MmtmModel
    losses: list


def grad_step_train(
    model: SoftFusionModel | MmtmModel,
    inputs,
    targets,
    lr: float,
    steps: int,
    seed: int = 0,
    batch_size: int | None = None,
) -> TrainResult:
    """Plain gradient descent on the mean squared error.

    ``losses[k]`` is the full-data loss after ``k`` steps, so the trace has
    ``steps + 1`` entries. With ``batch_size`` each step draws a minibatch
    from a generator seeded by ``seed``; the input model is left untouched.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    targets = np.asarray(targets, dtype=float)
    inputs = tuple(np.asarray(x, dtype=float) for x in inputs)
    n = targets.shape[0]
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps + 1):
        loss, grads = model.loss_and_grad(inputs, targets)
        if not np.isfinite(loss):
            raise DivergenceDetected(f"loss became non-finite at step {step}")
        losses.append(loss)
        if step == steps:
            break
        if batch_size is not None and batch_size < n:
            idx = rng.choice(n, size=batch_size, replace=False)
            _, grads = model.loss_and_grad(tuple(x[idx] for x in inputs), targets[idx])
        model = replace(model, **{k: getattr(model, k) - lr * v for k, v in grads.items()})
    return TrainResult(model, losses)
