"""SGD with momentum and Adagrad, with lazily allocated per-parameter slots.

Updates touch trainable parameters only, in network declaration order.
Slots serialize into checkpoints under "opt/<param>/<slot>" so a run can
resume bitwise-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, UnknownKindError, UnknownParameterError
from .tensor import Tensor

SGD_DEFAULTS = {"lr": 0.0001, "momentum": 0.9}
ADAGRAD_DEFAULTS = {"lr": 0.01, "eps": 1e-7}

SLOT_PREFIX = "opt/"
_SLOT_NAMES = {"sgd_momentum": "velocity", "adagrad": "accumulator"}


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    eps: float = 0.0
    slots: dict = field(default_factory=dict)  # param name -> ndarray


def make_optimizer(kind, overrides=None):
    overrides = dict(overrides or {})
    if kind == "sgd_momentum":
        hp = {**SGD_DEFAULTS, **overrides}
        unknown = set(hp) - {"lr", "momentum"}
        if unknown:
            raise ValueError(f"sgd_momentum does not take {sorted(unknown)}")
        return OptimizerState(kind=kind, lr=hp["lr"], momentum=hp["momentum"])
    if kind == "adagrad":
        hp = {**ADAGRAD_DEFAULTS, **overrides}
        unknown = set(hp) - {"lr", "eps"}
        if unknown:
            raise ValueError(f"adagrad does not take {sorted(unknown)}")
        return OptimizerState(kind=kind, lr=hp["lr"], eps=hp["eps"])
    raise UnknownKindError(f"unknown optimizer kind {kind!r}")


def _check_grads(params, grads):
    for name, g in grads.items():
        p = params.get(name)
        if p is None:
            raise UnknownParameterError(f"gradient for unknown parameter {name!r}")
        if g.data.shape != p.data.shape:
            raise ShapeMismatchError(
                f"{name}: grad shape {g.data.shape} != param shape {p.data.shape}"
            )


def sgd_momentum_step(params, grads, state, lr=None, momentum=None):
    """v <- momentum*v - lr*g; w <- w + v. Velocity starts at zero."""
    lr = state.lr if lr is None else lr
    momentum = state.momentum if momentum is None else momentum
    _check_grads(params, grads)
    for name, p in params.items():  # declaration order keeps runs deterministic
        if name not in grads or not p.trainable:
            continue
        g = grads[name].data
        v = state.slots.get(name)
        if v is None:
            v = state.slots[name] = np.zeros_like(p.data)
        v *= p.dtype.type(momentum)
        v -= p.dtype.type(lr) * g
        p.data += v


def adagrad_step(params, grads, state, lr=None, eps=None):
    """acc <- acc + g^2; w <- w - lr*g / (sqrt(acc) + eps)."""
    lr = state.lr if lr is None else lr
    eps = state.eps if eps is None else eps
    _check_grads(params, grads)
    for name, p in params.items():
        if name not in grads or not p.trainable:
            continue
        g = grads[name].data
        acc = state.slots.get(name)
        if acc is None:
            acc = state.slots[name] = np.zeros_like(p.data)
        acc += g * g
        p.data -= p.dtype.type(lr) * g / (np.sqrt(acc) + p.dtype.type(eps))


def step(params, grads, state):
    if state.kind == "sgd_momentum":
        sgd_momentum_step(params, grads, state)
    elif state.kind == "adagrad":
        adagrad_step(params, grads, state)
    else:
        raise UnknownKindError(f"unknown optimizer kind {state.kind!r}")


def slot_tensors(state):
    """Slots as checkpoint-ready named tensors: opt/<param>/<slot>."""
    slot = _SLOT_NAMES[state.kind]
    return {
        f"{SLOT_PREFIX}{name}/{slot}": Tensor(arr.copy(), name=f"{SLOT_PREFIX}{name}/{slot}")
        for name, arr in state.slots.items()
    }


def restore_slots(state, ckpt):
    """Load any opt/ tensors from a checkpoint into this state; returns count."""
    slot = _SLOT_NAMES[state.kind]
    suffix = f"/{slot}"
    count = 0
    for name, t in ckpt.tensors.items():
        if not name.startswith(SLOT_PREFIX) or not name.endswith(suffix):
            continue
        param = name[len(SLOT_PREFIX) : -len(suffix)]
        state.slots[param] = t.data.astype(np.float32, copy=True)
        count += 1
    return count
