"""Whole-network gradient verification against central finite differences.

Builds a small randomized instance (parameters, one region sequence, cached
exemplar context vectors, one target sequence), computes analytic gradients
for every tensor, then re-derives each element numerically by perturbing the
parameter and re-running the forward pass. Exemplar vectors are held fixed
during perturbation, matching their constant role in backpropagation.

The finite-difference side runs on an independent straight-line forward
implementation in 80-bit extended precision. At eps = 1e-5 a double
precision loss would contribute rounding noise around 1e-11 to the
difference quotient, which swamps legitimately tiny gradient elements
(~1e-8) and would make the comparison meaningless for them; extended
precision pushes that floor three orders of magnitude down while leaving
the quantity under test (the double precision analytic gradients) alone.

Relative error is |a - n| / max(1e-8, |a| + |n|) per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as jmodel
from .context import max_fuse
from .numerics import Rng

LD = np.longdouble


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _random_instance(config: jmodel.ModelConfig, seed: int):
    rng = Rng(seed)
    params = jmodel.init_params(config, rng)
    regions = rng.normal(0.0, 1.0, (config.m, config.d_region))
    exemplar_zs = [rng.normal(0.0, 0.5, config.d) for _ in range(config.k)] \
        if config.context_enabled and config.k > 0 else []
    # random non-empty attribute subset in a random emission order, plus stop
    n_present = int(rng.integers(1, config.n_attr + 1))
    perm = rng.permutation(config.n_attr)
    target_seq = [int(t) for t in perm[:n_present]] + [config.n_attr]
    return params, regions, exemplar_zs, target_seq


def _sigmoid_ld(v):
    return 1.0 / (1.0 + np.exp(-v))


def reference_loss(arrays: dict[str, np.ndarray], config: jmodel.ModelConfig,
                   regions, exemplar_zs, target_seq) -> LD:
    """Independent forward pass over named tensors; any float dtype works.

    Mirrors the production pipeline equation by equation but shares no code
    with it, so it doubles as the finite-difference oracle and as a
    re-implementation check.
    """
    a = arrays
    dt = next(iter(arrays.values())).dtype
    regions = regions.astype(dt)
    m = config.m
    if config.encoder_enabled:
        h = np.zeros(config.d, dtype=dt)
        c = np.zeros(config.d, dtype=dt)
        H = np.zeros((m, config.d), dtype=dt)
        for t in range(m):
            x = regions[t]
            f = _sigmoid_ld(a["encoder.W_fx"] @ x + a["encoder.W_fh"] @ h + a["encoder.b_f"])
            i = _sigmoid_ld(a["encoder.W_ix"] @ x + a["encoder.W_ih"] @ h + a["encoder.b_i"])
            o = _sigmoid_ld(a["encoder.W_ox"] @ x + a["encoder.W_oh"] @ h + a["encoder.b_o"])
            g = np.tanh(a["encoder.W_gx"] @ x + a["encoder.W_gh"] @ h + a["encoder.b_g"])
            c = f * c + i * g
            h = o * np.tanh(c)
            H[t] = h
        z = H[m - 1]
    else:
        H = regions @ a["projection.W_p"].T + a["projection.b_p"]
        z = H.mean(axis=0)

    z_star = z.copy()
    for ez in exemplar_zs:
        z_star = np.maximum(z_star, ez.astype(dt))

    h = z_star.copy()
    c = np.zeros(config.d, dtype=dt)
    total = np.zeros((), dtype=dt)
    for t, target in enumerate(target_seq):
        if config.attention_enabled:
            scores = np.empty(m, dtype=dt)
            for r in range(m):
                pre = a["attention.W_a"] @ np.concatenate([h, H[r]]) + a["attention.b_a"]
                scores[r] = np.tanh(pre) @ a["attention.v_a"]
            w = np.exp(scores - scores.max())
            w /= w.sum()
            z_in = w @ H
        else:
            z_in = z
        y_in = np.zeros(config.embed_dim, dtype=dt) if t == 0 \
            else a["embedding.table"][target_seq[t - 1]]
        f = _sigmoid_ld(a["decoder.W_fz"] @ z_in + a["decoder.W_fh"] @ h + a["decoder.W_fy"] @ y_in + a["decoder.b_f"])
        i = _sigmoid_ld(a["decoder.W_iz"] @ z_in + a["decoder.W_ih"] @ h + a["decoder.W_iy"] @ y_in + a["decoder.b_i"])
        o = _sigmoid_ld(a["decoder.W_oz"] @ z_in + a["decoder.W_oh"] @ h + a["decoder.W_oy"] @ y_in + a["decoder.b_o"])
        g = np.tanh(a["decoder.W_gz"] @ z_in + a["decoder.W_gh"] @ h + a["decoder.W_gy"] @ y_in + a["decoder.b_g"])
        c = f * c + i * g
        h = o * np.tanh(c)
        logits = a["head.W_y"] @ h + a["head.b_y"]
        shifted = logits - logits.max()
        total += -(shifted[target] - np.log(np.exp(shifted).sum()))
    return total / len(target_seq)


def model_gradient_check(config: jmodel.ModelConfig, seed: int = 0, eps: float = 1e-5,
                         tolerance: float = 1e-4) -> GradCheckResult:
    params, regions, exemplar_zs, target_seq = _random_instance(config, seed)

    enc = jmodel.encode(params, config, regions, want_tape=True)
    z_star, fuse_tape = max_fuse(enc.z, exemplar_zs)
    dec = jmodel.decode_train(params, config, enc.H, enc.z, z_star, target_seq, train=False)
    dlogits = jmodel.softmax_xent_grads(dec.logits, dec.targets)
    analytic = jmodel.per_gate_grads(
        params, jmodel.backward_full(params, config, enc, fuse_tape, dec, dlogits))

    arrays = {name: arr.astype(LD) for name, arr in params.named_arrays()}
    eps_ld = LD(eps)

    def loss() -> LD:
        return reference_loss(arrays, config, regions, exemplar_zs, target_seq)

    per_tensor: dict[str, float] = {}
    worst = 0.0
    for name, _ in params.named_arrays():
        flat = arrays[name].reshape(-1)
        a_flat = analytic[name].reshape(-1)
        tensor_worst = 0.0
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + eps_ld
            loss_plus = loss()
            flat[idx] = original - eps_ld
            loss_minus = loss()
            flat[idx] = original
            numeric = float((loss_plus - loss_minus) / (2 * eps_ld))
            tensor_worst = max(tensor_worst, relative_error(float(a_flat[idx]), numeric))
        per_tensor[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return GradCheckResult(max_rel_error=worst, per_tensor=per_tensor, tolerance=tolerance)
