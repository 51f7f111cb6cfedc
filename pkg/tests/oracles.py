"""Independent oracles used across the test suite.

Everything in here deliberately avoids the library's fast paths: forward
passes are per-unit Python loops, gradients come from central finite
differences, search answers come from plain enumeration, and closed-form
spot values are recomputed with mpmath at 50 digits.  Tests compare the
package against these, not the other way around.
"""

from __future__ import annotations

import math

import numpy as np

from splitbus import nn


def loop_forward(model: nn.MlpModel, x: np.ndarray) -> np.ndarray:
    """Forward pass written as explicit per-sample, per-unit loops."""
    current = x
    for layer in model.layers:
        rows = current.shape[0]
        fan_in, fan_out = layer.weight.shape
        out = np.zeros((rows, fan_out))
        for r in range(rows):
            for j in range(fan_out):
                acc = layer.bias[0, j]
                for i in range(fan_in):
                    acc += current[r, i] * layer.weight[i, j]
                if layer.activation is nn.Activation.RELU:
                    acc = acc if acc > 0.0 else 0.0
                elif layer.activation is nn.Activation.SIGMOID:
                    acc = 1.0 / (1.0 + math.exp(-acc)) if acc >= 0 else math.exp(acc) / (1.0 + math.exp(acc))
                out[r, j] = acc
        current = out
    return current


def _loss_value(model: nn.MlpModel, x: np.ndarray, y: np.ndarray, loss: str) -> float:
    out, _ = nn.forward(model, x)
    if loss == "ce":
        value, _ = nn.cross_entropy_loss(out, y)
    else:
        value, _ = nn.mse_loss(out, y)
    return value


def fd_model_grads(
    model: nn.MlpModel, x: np.ndarray, y: np.ndarray, loss: str, h: float = 1e-5
) -> list[nn.LayerGrads]:
    """Central finite differences of the batch loss w.r.t. every parameter."""
    grads = []
    for layer in model.layers:
        d_weight = np.zeros_like(layer.weight)
        for i in range(layer.weight.shape[0]):
            for j in range(layer.weight.shape[1]):
                orig = layer.weight[i, j]
                layer.weight[i, j] = orig + h
                up = _loss_value(model, x, y, loss)
                layer.weight[i, j] = orig - h
                down = _loss_value(model, x, y, loss)
                layer.weight[i, j] = orig
                d_weight[i, j] = (up - down) / (2.0 * h)
        d_bias = np.zeros_like(layer.bias)
        for j in range(layer.bias.shape[1]):
            orig = layer.bias[0, j]
            layer.bias[0, j] = orig + h
            up = _loss_value(model, x, y, loss)
            layer.bias[0, j] = orig - h
            down = _loss_value(model, x, y, loss)
            layer.bias[0, j] = orig
            d_bias[0, j] = (up - down) / (2.0 * h)
        grads.append(nn.LayerGrads(d_weight, d_bias))
    return grads


def fd_input_grad(
    model: nn.MlpModel, x: np.ndarray, y: np.ndarray, loss: str, h: float = 1e-5
) -> np.ndarray:
    """Central finite differences of the batch loss w.r.t. the input matrix."""
    grad = np.zeros_like(x)
    for r in range(x.shape[0]):
        for c in range(x.shape[1]):
            orig = x[r, c]
            x[r, c] = orig + h
            up = _loss_value(model, x, y, loss)
            x[r, c] = orig - h
            down = _loss_value(model, x, y, loss)
            x[r, c] = orig
            grad[r, c] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Largest entry of |a - r|, relative to the gradient tensor's own scale.

    Per-tensor normalisation keeps the metric meaningful for entries whose
    true gradient is orders of magnitude below the finite-difference noise
    floor (~1e-10 absolute with h = 1e-5).
    """
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(reference))), 1e-8)
    return float(np.max(np.abs(analytic - reference))) / scale


def random_mlp_case(seed: int) -> tuple[nn.MlpModel, np.ndarray, np.ndarray, str]:
    """A random small model + batch for gradient checking (depth<=4, width<=16).

    Biases are re-drawn away from zero: with the library's zero bias init, a
    fully dead ReLU layer leaves downstream preactivations at exactly 0.0,
    which parks the finite-difference probe on the kink.
    """
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 5))
    dims = [int(rng.integers(2, 17)) for _ in range(depth)] + [int(rng.integers(1, 17))]
    loss = "ce" if rng.integers(0, 2) == 0 else "mse"
    acts = [nn.Activation.RELU] * (depth - 1)
    acts.append(nn.Activation.SIGMOID if loss == "ce" else nn.Activation.IDENTITY)
    model = nn.init_mlp(dims, acts, seed=int(rng.integers(0, 2**31)))
    for layer in model.layers:
        layer.bias[:] = rng.uniform(0.05, 0.3, size=layer.bias.shape)
    rows = int(rng.integers(2, 7))
    x = rng.normal(0.0, 1.0, size=(rows, dims[0]))
    if loss == "ce":
        y = rng.integers(0, 2, size=(rows, dims[-1])).astype(np.float64)
    else:
        y = rng.normal(0.0, 1.0, size=(rows, dims[-1]))
    return model, x, y, loss


# -- delay model oracles -------------------------------------------------------


def mp_stage_time(coef: float, exp: float, batch: int, workers: int, cores: int) -> float:
    """coef * batch**exp * workers / cores at 50 decimal digits."""
    from mpmath import mp, mpf

    with mp.workdps(50):
        return float(mpf(coef) * mpf(batch) ** mpf(exp) * mpf(workers) / mpf(cores))


def mp_iteration_objective(c, w_a: int, w_p: int, batch: int, scale_ref=None) -> float:
    """High-precision re-evaluation of the planner's objective."""
    from mpmath import mp, mpf

    with mp.workdps(50):
        b = mpf(batch)
        active = (
            mpf(c.forward_coef_active) * b ** mpf(c.forward_exp_active)
            + mpf(c.top_forward_coef) * b ** mpf(c.top_forward_exp)
            + mpf(c.backward_coef_active) * b ** mpf(c.backward_exp_active)
            + mpf(c.top_backward_coef) * b ** mpf(c.top_backward_exp)
        ) * mpf(w_a) / mpf(c.cores_active)
        passive = (
            mpf(c.forward_coef_passive) * b ** mpf(c.forward_exp_passive)
            + mpf(c.backward_coef_passive) * b ** mpf(c.backward_exp_passive)
        ) * mpf(w_p) / mpf(c.cores_passive)
        comm = (mpf(c.embed_message_bytes) + mpf(c.grad_message_bytes)) / mpf(
            c.bandwidth_bytes_per_sec
        )
        if scale_ref is not None:
            comm *= b / mpf(scale_ref)
        return float(max(active, passive) + comm)


def random_delay_constants(rng: np.random.Generator, batch_candidates: list[int]):
    """Valid random constants; the smallest candidate batch always fits."""
    from splitbus.profiler import DelayConstants

    def coef() -> float:
        return float(rng.uniform(0.001, 2.5))

    def expo() -> float:
        return float(rng.uniform(-2.0, 2.0))

    chi = float(rng.uniform(0.5, 2.0))
    base_a = float(rng.uniform(0.0, 1e6))
    base_p = float(rng.uniform(0.0, 1e6))
    slope_a = float(rng.uniform(1.0, 1e3))
    slope_p = float(rng.uniform(1.0, 1e3))
    smallest = min(batch_candidates)
    need_a = slope_a * smallest**chi
    need_p = slope_p * smallest**chi
    return DelayConstants(
        forward_coef_active=coef(), forward_exp_active=expo(),
        forward_coef_passive=coef(), forward_exp_passive=expo(),
        backward_coef_active=coef(), backward_exp_active=expo(),
        backward_coef_passive=coef(), backward_exp_passive=expo(),
        top_forward_coef=coef(), top_forward_exp=expo(),
        top_backward_coef=coef(), top_backward_exp=expo(),
        cores_active=int(rng.integers(1, 64)),
        cores_passive=int(rng.integers(1, 64)),
        embed_message_bytes=float(rng.uniform(0.0, 1e8)),
        grad_message_bytes=float(rng.uniform(0.0, 1e8)),
        bandwidth_bytes_per_sec=float(rng.uniform(1e6, 1e10)),
        mem_base_active=base_a,
        mem_base_passive=base_p,
        mem_slope_active=slope_a,
        mem_slope_passive=slope_p,
        mem_exponent=chi,
        mem_budget_active=base_a + need_a * float(rng.uniform(1.001, 50.0)),
        mem_budget_passive=base_p + need_p * float(rng.uniform(1.001, 50.0)),
    )


def realistic_constants(**overrides):
    """A fitted constant set from a real profiling run, frozen as a fixture.

    Negative exponents (per-call time shrinking with batch size) are what
    heavily vectorised stacks actually measure, so the planner tests get
    exercised on that regime rather than on toy monotone curves.
    """
    from splitbus.profiler import DelayConstants

    values = dict(
        forward_coef_active=0.018, forward_exp_active=-0.8015,
        forward_coef_passive=0.010, forward_exp_passive=-1.0071,
        backward_coef_active=0.066, backward_exp_active=-0.6069,
        backward_coef_passive=0.038, backward_exp_passive=-1.0546,
        top_forward_coef=0.011, top_forward_exp=-0.7514,
        top_backward_coef=0.072, top_backward_exp=-0.7834,
        cores_active=32, cores_passive=32,
        embed_message_bytes=2.0e6, grad_message_bytes=2.0e6,
        bandwidth_bytes_per_sec=1.25e9,
        mem_base_active=1e8, mem_base_passive=1e8,
        mem_slope_active=1e6, mem_slope_passive=1e6,
        mem_exponent=1.0,
        mem_budget_active=4e9, mem_budget_passive=4e9,
    )
    values.update(overrides)
    return DelayConstants(**values)
