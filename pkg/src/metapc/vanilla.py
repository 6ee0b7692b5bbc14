"""Predictive coding on a single concrete network (no weight uncertainty).

The baseline trains plain weight matrices directly: the forward pass is the
deterministic recurrent dynamics, the belief update keeps only the mean
feedback channels, and the weight increment is the error/activity outer
product scaled by the learning rate over the fan-in.  With the ensemble
learner's spike probabilities and slab variances pinned at zero, its belief
trajectories coincide with this engine when the plain weights equal the
first moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import relu, relu_prime, softmax
from .inference import (
    InferenceConfig,
    InferenceDivergence,
    TaskMode,
    compute_errors_batch,
    energy_batch,
)
from .learning import EpochMetrics, Optimizer, TrainConfig, run_training
from .sas import ConcreteNetwork


@dataclass
class VanillaTrace:
    h: np.ndarray
    y: np.ndarray
    fr_prev: np.ndarray
    fr: np.ndarray
    # Fields mirrored from the ensemble trace so the shared error helpers work.
    d_out: np.ndarray = None  # type: ignore[assignment]


def init_network(
    n_in: int, n: int, n_out: int, rng: np.random.Generator
) -> ConcreteNetwork:
    """Plain-weight init at the same 1/fan_in scale as the ensemble moments."""
    if min(n_in, n, n_out) < 1:
        raise ValueError(f"dimensions must be positive, got ({n_in}, {n}, {n_out})")
    return ConcreteNetwork(
        w_in=rng.standard_normal((n, n_in)) / n_in,
        w=rng.standard_normal((n, n)) / n,
        w_out=rng.standard_normal((n_out, n)) / n,
    )


def pc_forward(
    net: ConcreteNetwork, r_prev: np.ndarray, x_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One step of the plain dynamics: (state prediction, softmax readout)."""
    if x_t.shape[-1] != net.w_in.shape[1] or r_prev.shape[-1] != net.w.shape[1]:
        raise ValueError("input/state dimensions do not match the network")
    h = relu(r_prev) @ net.w.T + x_t @ net.w_in.T
    y = softmax(relu(h) @ net.w_out.T)
    return h, y


def run_forward_batch(net: ConcreteNetwork, r: np.ndarray, x: np.ndarray) -> VanillaTrace:
    prev = np.concatenate([np.zeros_like(r[:, :1]), r[:, :-1]], axis=1)
    fr_prev = relu(prev)
    fr = relu(r)
    h = fr_prev @ net.w.T + x @ net.w_in.T
    y = softmax(fr @ net.w_out.T)
    return VanillaTrace(h=h, y=y, fr_prev=fr_prev, fr=fr)


def belief_delta_batch(
    net: ConcreteNetwork,
    r: np.ndarray,
    err_state: np.ndarray,
    err_out: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Negative energy gradient for the beliefs: local mismatch plus the
    successor-step and readout feedback through the plain weights."""
    err_next = np.concatenate(
        [err_state[:, 1:], np.zeros_like(err_state[:, :1])], axis=1
    )
    return gamma * (
        -err_state + relu_prime(r) * (err_next @ net.w + err_out @ net.w_out)
    )


def pc_belief_step(
    net: ConcreteNetwork,
    r: np.ndarray,
    trace: VanillaTrace,
    targets: np.ndarray,
    mode: TaskMode,
    gamma: float,
) -> np.ndarray:
    """One synchronous relaxation sweep for a single sequence, in place."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    err_state, err_out = compute_errors_batch(
        r[None], _lift(trace), targets[None], mode
    )
    r += belief_delta_batch(net, r[None], err_state, err_out, gamma)[0]
    return r


def weight_grads(
    net: ConcreteNetwork,
    err_state: np.ndarray,
    err_out: np.ndarray,
    x: np.ndarray,
    trace: VanillaTrace,
) -> dict[str, np.ndarray]:
    """Raw weight gradients, one fan-in-scaled error/activity contraction each."""
    return {
        "in.w": -np.einsum("bti,btj->ij", err_state, x) / net.w_in.shape[1],
        "rec.w": -np.einsum("bti,btj->ij", err_state, trace.fr_prev) / net.w.shape[1],
        "out.w": -np.einsum("btk,btj->kj", err_out, trace.fr) / net.w_out.shape[1],
    }


def pc_weight_update(
    net: ConcreteNetwork,
    r: np.ndarray,
    trace: VanillaTrace,
    targets: np.ndarray,
    x: np.ndarray,
    mode: TaskMode,
    eta: float,
    opt: Optimizer | None = None,
) -> ConcreteNetwork:
    """Increment the weights from one sequence's converged errors.

    Without an optimizer this is the plain rule w += eta/fan_in * sum_t
    err(t) * activity(t); with one, the same raw gradients go through it.
    """
    err_state, err_out = compute_errors_batch(
        r[None], _lift(trace), targets[None], mode
    )
    grads = weight_grads(net, err_state, err_out, x[None], trace)
    if opt is None:
        opt = Optimizer("sgd", eta)
    opt.step(network_params(net), grads)
    return net


def network_params(net: ConcreteNetwork) -> dict[str, np.ndarray]:
    return {"in.w": net.w_in, "rec.w": net.w, "out.w": net.w_out}


@dataclass
class VanillaInference:
    r: np.ndarray
    trace: VanillaTrace
    err_state: np.ndarray
    err_out: np.ndarray
    energy: np.ndarray


def run_inference_batch(
    net: ConcreteNetwork,
    x: np.ndarray,
    targets: np.ndarray,
    mode: TaskMode,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    energy_history: list[np.ndarray] | None = None,
    r_init: np.ndarray | None = None,
) -> VanillaInference:
    """Belief relaxation for a batch, mirroring the ensemble engine's loop."""
    b, t, _ = x.shape
    n = net.w.shape[0]
    if r_init is not None:
        r = r_init.copy()
    elif cfg.init_from_forward:
        r = _forward_init(net, x)
    else:
        r = rng.standard_normal((b, t, n))

    active = np.arange(b)
    f_prev = np.full(b, np.inf)
    for _ in range(cfg.n_steps):
        r_a, x_a, tgt_a = r[active], x[active], targets[active]
        trace = run_forward_batch(net, r_a, x_a)
        err_state, err_out = compute_errors_batch(r_a, trace, tgt_a, mode)
        f_now = energy_batch(err_state, trace.y, tgt_a, mode)
        if not np.all(np.isfinite(f_now)):
            raise InferenceDivergence(
                "non-finite energy during belief relaxation; lower gamma"
            )
        if energy_history is not None:
            full = np.full(b, np.nan)
            full[active] = f_now
            energy_history.append(full)
        converged = np.abs(f_now - f_prev[active]) < cfg.stop_tol
        f_prev[active] = f_now
        if converged.any():
            keep = ~converged
            active = active[keep]
            if active.size == 0:
                break
            r_a, x_a, tgt_a = r_a[keep], x_a[keep], tgt_a[keep]
            err_state, err_out = err_state[keep], err_out[keep]
        r[active] += belief_delta_batch(net, r_a, err_state, err_out, cfg.gamma)

    trace = run_forward_batch(net, r, x)
    err_state, err_out = compute_errors_batch(r, trace, targets, mode)
    f_final = energy_batch(err_state, trace.y, targets, mode)
    if energy_history is not None:
        energy_history.append(f_final.copy())
    return VanillaInference(
        r=r, trace=trace, err_state=err_state, err_out=err_out, energy=f_final
    )


def _forward_init(net: ConcreteNetwork, x: np.ndarray) -> np.ndarray:
    b, t, _ = x.shape
    r = np.empty((b, t, net.w.shape[0]))
    r_prev = np.zeros((b, net.w.shape[0]))
    for k in range(t):
        r[:, k] = relu(r_prev) @ net.w.T + x[:, k] @ net.w_in.T
        r_prev = r[:, k]
    return r


def predict_sequence_batch(net: ConcreteNetwork, x: np.ndarray) -> np.ndarray:
    """Prediction-phase outputs with beliefs following the dynamics."""
    b, t, _ = x.shape
    r_prev = np.zeros((b, net.w.shape[0]))
    ys = np.empty((b, t, net.w_out.shape[0]))
    for k in range(t):
        h, y = pc_forward(net, r_prev, x[:, k])
        ys[:, k] = y
        r_prev = h
    return ys


class VanillaEngine:
    """Batch driver exposing the same surface as the ensemble engine."""

    def __init__(self, net: ConcreteNetwork, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.target = net

    def params(self) -> dict[str, np.ndarray]:
        return network_params(self.net)

    def batch_grads(self, x, targets, icfg, rng):
        result = run_inference_batch(self.net, x, targets, self.cfg.mode, icfg, rng)
        grads = weight_grads(self.net, result.err_state, result.err_out, x, result.trace)
        return grads, result.energy

    def post_update(self) -> None:
        pass

    def stats(self) -> dict[str, float]:
        out = {}
        for name, w in (("in", self.net.w_in), ("rec", self.net.w), ("out", self.net.w_out)):
            out[f"mean_abs_m_{name}"] = float(np.mean(np.abs(w)))
            out[f"mean_pi_{name}"] = 0.0
            out[f"mean_xi_{name}"] = 0.0
        return out


def train_vanilla(
    net: ConcreteNetwork, dataset: list, cfg: TrainConfig, metric_fn=None,
    epoch_hook=None,
) -> tuple[ConcreteNetwork, list[EpochMetrics]]:
    engine = VanillaEngine(net, cfg)
    metrics = run_training(engine, dataset, cfg, metric_fn, epoch_hook)
    return net, metrics


def _lift(trace: VanillaTrace) -> VanillaTrace:
    return VanillaTrace(
        h=trace.h[None],
        y=trace.y[None],
        fr_prev=trace.fr_prev[None],
        fr=trace.fr[None],
        d_out=None if trace.d_out is None else trace.d_out[None],
    )
