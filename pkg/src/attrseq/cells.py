"""LSTM cells for the region encoder and the attribute decoder.

Both cells use the four-gate LSTM update

    f = sigmoid(W_f. inputs + b_f)      forget gate
    i = sigmoid(W_i. inputs + b_i)      input gate
    o = sigmoid(W_o. inputs + b_o)      output gate
    g = tanh(W_g. inputs + b_g)         input modulation
    c = f * c_prev + i * g
    h = o * tanh(c)

The encoder cell reads a region feature vector per step; the decoder cell
additionally conditions every gate on a context vector and on the embedding
of the previously predicted attribute. Backward passes are hand-derived and
validated against central finite differences in the test suite.

Internally the four gate matrices of each input path are stored stacked as
one (4d x in) array so a step costs one matrix product per path; the
per-gate tensors remain the public (and checkpoint) surface as views in the
fixed gate order f, i, o, g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import Array, Rng, sigmoid

GATES = ("f", "i", "o", "g")


def _check_finite_fast(v: Array, name: str) -> None:
    # sum() is NaN/Inf-poisoned, so one reduction covers the whole vector
    if not math.isfinite(float(v.sum())):
        raise ContractError(f"{name}: contains NaN or Inf")


def _stack_gates(per_gate: dict[str, Array], suffix: str) -> Array:
    return np.concatenate([np.asarray(per_gate[f"W_{g}{suffix}"], dtype=np.float64)
                           for g in GATES], axis=0)


class _GateViewsMixin:
    """Per-gate views over the stacked storage, named like W_fx / b_f."""

    def _gate_slice(self, stacked: Array, gate: str) -> Array:
        d = self.d
        i = GATES.index(gate)
        return stacked[i * d:(i + 1) * d]

    def __getattr__(self, name: str):
        # only gate-view attributes reach here; everything else is a real field
        if len(name) >= 3 and name.startswith("W_") or name.startswith("b_"):
            gate = name[2] if name.startswith("W_") else name[2:]
            if name.startswith("b_") and gate in GATES:
                return self._gate_slice(self.b, gate)
            if name.startswith("W_") and len(name) == 4 and name[2] in GATES:
                stacked = getattr(self, f"W{name[3]}", None)
                if stacked is not None:
                    return self._gate_slice(stacked, name[2])
        raise AttributeError(name)


@dataclass
class EncoderCellParams(_GateViewsMixin):
    """Encoder gate weights: per gate, input (d x d_region), recurrent (d x d), bias (d).

    Stored stacked: Wx (4d x d_region), Wh (4d x d), b (4d).
    """

    Wx: Array
    Wh: Array
    b: Array

    @property
    def d(self) -> int:
        return self.Wh.shape[1]

    @property
    def d_in(self) -> int:
        return self.Wx.shape[1]

    @classmethod
    def from_gates(cls, **per_gate: Array) -> "EncoderCellParams":
        return cls(Wx=_stack_gates(per_gate, "x"), Wh=_stack_gates(per_gate, "h"),
                   b=np.concatenate([per_gate[f"b_{g}"] for g in GATES]))

    def named_arrays(self):
        for g in GATES:
            yield f"W_{g}x", getattr(self, f"W_{g}x")
        for g in GATES:
            yield f"W_{g}h", getattr(self, f"W_{g}h")
        for g in GATES:
            yield f"b_{g}", getattr(self, f"b_{g}")


@dataclass
class DecoderCellParams(_GateViewsMixin):
    """Decoder gate weights over three input paths.

    Every gate sums the context vector path (d x d), the previous hidden
    state path (d x d), and the previous-prediction embedding path
    (d x embed_dim), plus a bias. Stored stacked like the encoder.
    """

    Wz: Array
    Wh: Array
    Wy: Array
    b: Array

    @property
    def d(self) -> int:
        return self.Wh.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.Wy.shape[1]

    @classmethod
    def from_gates(cls, **per_gate: Array) -> "DecoderCellParams":
        return cls(Wz=_stack_gates(per_gate, "z"), Wh=_stack_gates(per_gate, "h"),
                   Wy=_stack_gates(per_gate, "y"),
                   b=np.concatenate([per_gate[f"b_{g}"] for g in GATES]))

    def named_arrays(self):
        for g in GATES:
            yield f"W_{g}z", getattr(self, f"W_{g}z")
        for g in GATES:
            yield f"W_{g}h", getattr(self, f"W_{g}h")
        for g in GATES:
            yield f"W_{g}y", getattr(self, f"W_{g}y")
        for g in GATES:
            yield f"b_{g}", getattr(self, f"b_{g}")


@dataclass
class CellState:
    h: Array
    c: Array

    @staticmethod
    def zeros(d: int) -> "CellState":
        return CellState(np.zeros(d), np.zeros(d))


@dataclass
class StepTape:
    """Activations cached by one forward step; consumed by exactly one backward."""

    params: object
    inputs: tuple
    h_prev: Array
    c_prev: Array
    f: Array
    i: Array
    o: Array
    g: Array
    tanh_c: Array
    consumed: bool = field(default=False)

    def consume(self, params) -> None:
        if self.consumed:
            raise ContractError("StepTape already consumed by a previous backward pass")
        if params is not self.params:
            raise ContractError("StepTape does not match the parameters passed to backward")
        self.consumed = True


def init_encoder_params(d: int, d_in: int, rng: Rng) -> EncoderCellParams:
    """Uniform(-r, r) weights with r = 1/sqrt(d); zero biases except forget bias 1."""
    r = 1.0 / np.sqrt(d)
    gates = {}
    for g in GATES:
        gates[f"W_{g}x"] = rng.uniform(-r, r, (d, d_in))
    for g in GATES:
        gates[f"W_{g}h"] = rng.uniform(-r, r, (d, d))
    for g in GATES:
        gates[f"b_{g}"] = np.full(d, 1.0) if g == "f" else np.zeros(d)
    return EncoderCellParams.from_gates(**gates)


def init_decoder_params(d: int, embed_dim: int, rng: Rng) -> DecoderCellParams:
    r = 1.0 / np.sqrt(d)
    gates = {}
    for g in GATES:
        gates[f"W_{g}z"] = rng.uniform(-r, r, (d, d))
    for g in GATES:
        gates[f"W_{g}h"] = rng.uniform(-r, r, (d, d))
    for g in GATES:
        gates[f"W_{g}y"] = rng.uniform(-r, r, (d, embed_dim))
    for g in GATES:
        gates[f"b_{g}"] = np.full(d, 1.0) if g == "f" else np.zeros(d)
    return DecoderCellParams.from_gates(**gates)


def _advance(p, pre: Array, prev: CellState, inputs: tuple) -> tuple[CellState, StepTape]:
    d = p.d
    act = np.empty_like(pre)
    act[:3 * d] = sigmoid(pre[:3 * d])
    act[3 * d:] = np.tanh(pre[3 * d:])
    f = act[0 * d:1 * d]
    i = act[1 * d:2 * d]
    o = act[2 * d:3 * d]
    g = act[3 * d:4 * d]
    c = f * prev.c + i * g
    tc = np.tanh(c)
    h = o * tc
    _check_finite_fast(h, "cell output h")
    _check_finite_fast(c, "cell output c")
    tape = StepTape(params=p, inputs=inputs, h_prev=prev.h, c_prev=prev.c,
                    f=f, i=i, o=o, g=g, tanh_c=tc)
    return CellState(h, c), tape


def encoder_step(p: EncoderCellParams, prev: CellState, x: Array) -> tuple[CellState, StepTape]:
    """One encoder step over a region feature vector."""
    if x.shape != (p.d_in,):
        raise ContractError(f"encoder_step: input shape {x.shape}, expected ({p.d_in},)")
    if prev.h.shape != (p.d,) or prev.c.shape != (p.d,):
        raise ContractError("encoder_step: state shape does not match hidden size")
    _check_finite_fast(x, "encoder input x")
    _check_finite_fast(prev.h, "encoder h_prev")
    _check_finite_fast(prev.c, "encoder c_prev")
    pre = p.Wx @ x + p.Wh @ prev.h + p.b
    return _advance(p, pre, prev, (x,))


def decoder_step(p: DecoderCellParams, prev: CellState, z: Array, y_prev: Array) -> tuple[CellState, StepTape]:
    """One decoder step conditioned on a context vector and the previous-prediction embedding."""
    if z.shape != (p.d,):
        raise ContractError(f"decoder_step: context shape {z.shape}, expected ({p.d},)")
    if y_prev.shape != (p.embed_dim,):
        raise ContractError(f"decoder_step: embedding shape {y_prev.shape}, expected ({p.embed_dim},)")
    if prev.h.shape != (p.d,) or prev.c.shape != (p.d,):
        raise ContractError("decoder_step: state shape does not match hidden size")
    _check_finite_fast(z, "decoder context z")
    _check_finite_fast(y_prev, "decoder y_prev")
    _check_finite_fast(prev.h, "decoder h_prev")
    _check_finite_fast(prev.c, "decoder c_prev")
    pre = p.Wz @ z + p.Wh @ prev.h + p.Wy @ y_prev + p.b
    return _advance(p, pre, prev, (z, y_prev))


def _pre_activation_grads(tape: StepTape, grad_h: Array, grad_c: Array):
    """Chain from (dh, dc) to the stacked pre-activation gradient and dc_prev."""
    do = grad_h * tape.tanh_c
    dc = grad_c + grad_h * tape.o * (1.0 - tape.tanh_c ** 2)
    d_pre = np.concatenate([
        dc * tape.c_prev * tape.f * (1.0 - tape.f),
        dc * tape.g * tape.i * (1.0 - tape.i),
        do * tape.o * (1.0 - tape.o),
        dc * tape.i * (1.0 - tape.g ** 2),
    ])
    return d_pre, dc * tape.f


def encoder_backward(p: EncoderCellParams, tape: StepTape, grad_h: Array, grad_c: Array):
    """Gradients of one encoder step.

    Returns (param_grads, grad_h_prev, grad_c_prev, grad_x); accumulating
    param_grads across steps is the caller's responsibility. Gradient keys
    are the stacked tensors Wx, Wh, b.
    """
    tape.consume(p)
    (x,) = tape.inputs
    d_pre, dc_prev = _pre_activation_grads(tape, grad_h, grad_c)
    grads = {
        "Wx": d_pre[:, None] * x[None, :],
        "Wh": d_pre[:, None] * tape.h_prev[None, :],
        "b": d_pre,
    }
    grad_x = p.Wx.T @ d_pre
    grad_h_prev = p.Wh.T @ d_pre
    return grads, grad_h_prev, dc_prev, grad_x


def decoder_backward(p: DecoderCellParams, tape: StepTape, grad_h: Array, grad_c: Array):
    """Gradients of one decoder step.

    Returns (param_grads, grad_h_prev, grad_c_prev, grad_z, grad_y_prev);
    gradient keys are the stacked tensors Wz, Wh, Wy, b.
    """
    tape.consume(p)
    z, y_prev = tape.inputs
    d_pre, dc_prev = _pre_activation_grads(tape, grad_h, grad_c)
    grads = {
        "Wz": d_pre[:, None] * z[None, :],
        "Wh": d_pre[:, None] * tape.h_prev[None, :],
        "Wy": d_pre[:, None] * y_prev[None, :],
        "b": d_pre,
    }
    grad_z = p.Wz.T @ d_pre
    grad_h_prev = p.Wh.T @ d_pre
    grad_y = p.Wy.T @ d_pre
    return grads, grad_h_prev, dc_prev, grad_z, grad_y
