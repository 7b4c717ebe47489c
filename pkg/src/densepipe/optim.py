"""SGD, RMSProp and Adam updates over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8

KINDS = ("sgd", "rmsprop", "adam")


@dataclass
class OptimizerState:
    kind: str
    t: int = 0
    first: dict = field(default_factory=dict)   # Adam first moment
    second: dict = field(default_factory=dict)  # Adam second moment / RMSProp square average

    def buffers(self):
        out = {f"m/{k}": v for k, v in self.first.items()}
        out.update({f"v/{k}": v for k, v in self.second.items()})
        return out


def make_optimizer_state(kind, params):
    """Fresh state with zeroed buffers shaped like ``params`` (name -> array)."""
    if kind not in KINDS:
        raise ParameterError(f"unknown optimizer {kind!r}; expected one of {KINDS}")
    state = OptimizerState(kind)
    for name, p in params.items():
        shape = np.shape(getattr(p, "data", p))
        if kind == "adam":
            state.first[name] = np.zeros(shape)
        if kind in ("adam", "rmsprop"):
            state.second[name] = np.zeros(shape)
    return state


def optimizer_step(params, grads, state, kind=None, lr=1e-4, frozen=()):
    """Apply one update in place and return ``(params, state)``.

    ``params`` and ``grads`` map names to arrays; names missing from
    ``grads`` (or listed in ``frozen``) are left untouched.  The step
    counter advances once per call.
    """
    kind = kind or state.kind
    if kind != state.kind:
        raise ParameterError(f"state was built for {state.kind!r}, not {kind!r}")
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    state.t += 1
    t = state.t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
        if kind == "sgd":
            p -= lr * g
        elif kind == "rmsprop":
            v = state.second.setdefault(name, np.zeros(p.shape))
            v *= RMSPROP_RHO
            v += (1 - RMSPROP_RHO) * g * g
            p -= lr * g / np.sqrt(v + RMSPROP_EPS)
        else:
            m = state.first.setdefault(name, np.zeros(p.shape))
            v = state.second.setdefault(name, np.zeros(p.shape))
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            mhat = m / (1 - ADAM_BETA1 ** t)
            vhat = v / (1 - ADAM_BETA2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return params, state


def step_model(model, state, lr):
    """Update ``model``'s trainable parameters from their ``.grad`` buffers."""
    params = {k: t.data for k, t in model.params.items()}
    grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
    optimizer_step(params, grads, state, state.kind, lr, frozen=model.frozen)
