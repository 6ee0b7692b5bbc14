"""Belief inference: energy evaluation and gradient relaxation of beliefs.

A sequence is explained by relaxing a belief trajectory r(1..T) so that it
minimises a single energy: the squared mismatch between beliefs and state
predictions, plus the cross-entropy between readouts and the clamped output
beliefs (the targets).  The relaxation step is the exact negative energy
gradient with the noise draws held frozen, scaled by the rate gamma; it
combines four feedback channels:

* the local mismatch r - h,
* mean feedback of the next step's mismatch through the recurrent moments,
* mean feedback of the output error through the readout moments,
* fluctuation feedback of both errors through the weight variances, scaled
  by the frozen noise over the corresponding fluctuation magnitude.

Two task layouts exist.  ``PER_STEP`` (sequence modelling) scores an output
against a target at steps 1..T-1 and keeps the state mismatch at every step.
``FINAL_STEP`` (classification) scores the output only at step T and drops
the state mismatch there, so the final belief is shaped purely by the output
error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .forward import (
    DELTA_FLOOR,
    EnsembleMoments,
    ForwardTrace,
    NoiseDraws,
    draw_noise,
    relu,
    relu_prime,
    run_forward_batch,
)
from .sas import EnsembleNetwork

LOG_FLOOR = 1e-12


class TaskMode(enum.Enum):
    """Where targets apply and which state terms count.

    ``FINAL_STEP`` drops the final state-mismatch term entirely, so the last
    belief is shaped by the output error alone.  That variant seals label
    information above the final step: nothing upstream of the readout ever
    sees it, which caps what classification can learn.  ``FINAL_STEP_ANCHORED``
    keeps the final mismatch term (the update equations applied uniformly over
    every step), tethering the last belief to the network prediction so the
    label error assigns credit backward through time.
    """

    PER_STEP = "per_step"
    FINAL_STEP = "final_step"
    FINAL_STEP_ANCHORED = "final_step_anchored"


class InferenceDivergence(RuntimeError):
    """Raised when the energy turns non-finite (inference rate too large)."""


@dataclass
class InferenceConfig:
    n_steps: int = 100
    gamma: float = 0.1
    stop_tol: float = 0.1
    init_from_forward: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("at least one inference sweep is required")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


def _guarded_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """num / den with entries set to 0 wherever den is below the floor."""
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den >= DELTA_FLOOR)
    return out


def compute_errors_batch(
    r: np.ndarray,
    trace: ForwardTrace,
    targets: np.ndarray,
    mode: TaskMode,
) -> tuple[np.ndarray, np.ndarray]:
    """Masked error streams (err_state, err_out) for a batch.

    err_state[b, k] = r - h except at the final step in FINAL_STEP mode,
    where the state term is excluded from the energy.  err_out carries
    target - y only at steps that have a target.
    """
    err_state = r - trace.h
    err_out = np.zeros_like(trace.y)
    if mode is TaskMode.PER_STEP:
        err_out[:, :-1] = targets - trace.y[:, :-1]
    else:
        if mode is TaskMode.FINAL_STEP:
            err_state[:, -1] = 0.0
        err_out[:, -1] = targets - trace.y[:, -1]
    return err_state, err_out


def cross_entropy_rows(y: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-sum(target * log y) over the last axis, with the log floored."""
    return -np.sum(targets * np.log(np.maximum(y, LOG_FLOOR)), axis=-1)


def energy_batch(
    err_state: np.ndarray,
    y: np.ndarray,
    targets: np.ndarray,
    mode: TaskMode,
) -> np.ndarray:
    """Per-sequence energy from masked state errors and raw outputs."""
    quad = 0.5 * np.sum(err_state**2, axis=(1, 2))
    if mode is TaskMode.PER_STEP:
        ce = np.sum(cross_entropy_rows(y[:, :-1], targets), axis=1)
    else:
        # err_state row T is already zero in FINAL_STEP mode, so the quad
        # term matches each variant's energy definition without branching.
        ce = cross_entropy_rows(y[:, -1], targets)
    return quad + ce


def belief_delta_batch(
    mom: EnsembleMoments,
    r: np.ndarray,
    trace: ForwardTrace,
    err_state: np.ndarray,
    err_out: np.ndarray,
    eps1: np.ndarray,
    eps2: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Exact negative energy gradient step for every belief entry at once.

    The successor-step feedback terms vanish at the last step (there is no
    step T+1), handled by zero padding.  Fluctuation feedback divides by the
    corresponding fluctuation magnitude; entries under the floor are zeroed,
    their variance numerators being zero in that regime.
    """
    zpad_state = np.zeros_like(err_state[:, :1])
    err_next = np.concatenate([err_state[:, 1:], zpad_state], axis=1)
    eps1_next = np.concatenate([eps1[:, 1:], zpad_state], axis=1)
    d_state_next = np.concatenate(
        [trace.d_state[:, 1:], np.ones_like(trace.d_state[:, :1])], axis=1
    )

    w_state = _guarded_ratio(err_next * eps1_next, d_state_next)
    w_out = _guarded_ratio(err_out * eps2, trace.d_out)

    fprime = relu_prime(r)
    mean_fb = err_next @ mom.mu_rec + err_out @ mom.mu_out
    fluc_fb = w_state @ mom.var_rec + w_out @ mom.var_out
    return gamma * (-err_state + fprime * mean_fb + trace.fr * fprime * fluc_fb)


@dataclass
class BatchInference:
    """Converged beliefs and refreshed caches for a batch of sequences."""

    r: np.ndarray
    trace: ForwardTrace
    err_state: np.ndarray
    err_out: np.ndarray
    energy: np.ndarray  # [B], refreshed after the last sweep
    eps1: np.ndarray
    eps2: np.ndarray
    sweeps: np.ndarray  # [B] number of belief updates applied per sequence


def run_inference_batch(
    mom: EnsembleMoments,
    x: np.ndarray,
    targets: np.ndarray,
    mode: TaskMode,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    energy_history: list[np.ndarray] | None = None,
    r_init: np.ndarray | None = None,
    eps1: np.ndarray | None = None,
    eps2: np.ndarray | None = None,
) -> BatchInference:
    """Relax beliefs for a whole batch with per-sequence early stopping.

    One noise draw is made per sequence and reused across every sweep (the
    learning phase reuses it too).  A sequence freezes once its energy change
    falls below ``stop_tol``; frozen sequences receive no further updates, so
    the result is identical to running each sequence on its own.  Explicit
    ``r_init``/``eps1``/``eps2`` override the draws (useful for harnesses).
    """
    b, t, _ = x.shape
    if eps1 is None:
        eps1 = rng.standard_normal((b, t, mom.n))
    if eps2 is None:
        eps2 = rng.standard_normal((b, t, mom.n_out))

    if r_init is not None:
        r = r_init.copy()
    elif cfg.init_from_forward:
        r = _forward_init(mom, x, eps1)
    else:
        r = rng.standard_normal((b, t, mom.n))

    active = np.arange(b)
    f_prev = np.full(b, np.inf)
    sweeps = np.zeros(b, dtype=int)

    for it in range(cfg.n_steps):
        sub = (r[active], x[active], targets[active], eps1[active], eps2[active])
        r_a, x_a, tgt_a, e1_a, e2_a = sub
        trace = run_forward_batch(mom, r_a, x_a, e1_a, e2_a)
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
            r_a, x_a, tgt_a, e1_a, e2_a = (
                r_a[keep],
                x_a[keep],
                tgt_a[keep],
                e1_a[keep],
                e2_a[keep],
            )
            trace = _slice_trace(trace, keep)
            err_state, err_out = err_state[keep], err_out[keep]

        r[active] += belief_delta_batch(
            mom, r_a, trace, err_state, err_out, e1_a, e2_a, cfg.gamma
        )
        sweeps[active] += 1

    # Refresh every cache against the final beliefs.
    trace = run_forward_batch(mom, r, x, eps1, eps2)
    err_state, err_out = compute_errors_batch(r, trace, targets, mode)
    f_final = energy_batch(err_state, trace.y, targets, mode)
    if energy_history is not None:
        energy_history.append(f_final.copy())
    return BatchInference(
        r=r,
        trace=trace,
        err_state=err_state,
        err_out=err_out,
        energy=f_final,
        eps1=eps1,
        eps2=eps2,
        sweeps=sweeps,
    )


def _forward_init(
    mom: EnsembleMoments, x: np.ndarray, eps1: np.ndarray
) -> np.ndarray:
    """Belief init from the prediction dynamics: r(t) = h(t) step by step."""
    b, t, _ = x.shape
    r = np.empty((b, t, mom.n))
    r_prev = np.zeros((b, mom.n))
    for k in range(t):
        fr_prev = relu(r_prev)
        d2 = x[:, k] ** 2 @ mom.var_in.T + fr_prev**2 @ mom.var_rec.T
        r[:, k] = (
            fr_prev @ mom.mu_rec.T + x[:, k] @ mom.mu_in.T + eps1[:, k] * np.sqrt(d2)
        )
        r_prev = r[:, k]
    return r


def _slice_trace(trace: ForwardTrace, keep: np.ndarray) -> ForwardTrace:
    return ForwardTrace(
        **{k: getattr(trace, k)[keep] for k in ForwardTrace.__dataclass_fields__}
    )


# ---------------------------------------------------------------------------
# Single-sequence view


@dataclass
class BeliefState:
    """Belief trajectory of one sequence plus its refreshed caches.

    The clamped output belief (``r_y``) is the target array itself and is
    never written by inference.  ``stale`` flips whenever r changes without a
    refresh; energy evaluation refuses stale caches.
    """

    r: np.ndarray
    r_y: np.ndarray
    mode: TaskMode
    noise: NoiseDraws
    x: np.ndarray
    r0: np.ndarray = field(default=None)  # type: ignore[assignment]
    trace: ForwardTrace | None = None
    err_state: np.ndarray | None = None
    err_out: np.ndarray | None = None
    stale: bool = True

    def __post_init__(self):
        if self.r0 is None:
            self.r0 = np.zeros(self.r.shape[1])


def make_state(
    ens_or_mom: EnsembleNetwork | EnsembleMoments,
    x: np.ndarray,
    targets: np.ndarray,
    mode: TaskMode,
    rng: np.random.Generator,
    init_from_forward: bool = False,
) -> BeliefState:
    """Fresh belief state with its own frozen noise draw."""
    mom = _as_moments(ens_or_mom)
    t = x.shape[0]
    noise = draw_noise(t, mom.n, mom.n_out, rng)
    if init_from_forward:
        r = _forward_init(mom, x[None], noise.eps1[None])[0]
    else:
        r = rng.standard_normal((t, mom.n))
    state = BeliefState(r=r, r_y=targets, mode=mode, noise=noise, x=x)
    refresh(mom, state)
    return state


def refresh(ens_or_mom: EnsembleNetwork | EnsembleMoments, state: BeliefState) -> None:
    """Recompute the forward trace and error caches for the current beliefs."""
    mom = _as_moments(ens_or_mom)
    trace = run_forward_batch(
        mom, state.r[None], state.x[None], state.noise.eps1[None], state.noise.eps2[None]
    )
    err_state, err_out = compute_errors_batch(
        state.r[None], trace, state.r_y[None], state.mode
    )
    state.trace = _slice_trace(trace, 0)
    state.err_state = err_state[0]
    state.err_out = err_out[0]
    state.stale = False


def energy(state: BeliefState, targets: np.ndarray, mode: TaskMode) -> float:
    """Total energy of one sequence; requires refreshed caches."""
    if state.stale or state.trace is None:
        raise RuntimeError("stale forward trace: refresh the state first")
    return float(
        energy_batch(state.err_state[None], state.trace.y[None], targets[None], mode)[0]
    )


def belief_step(
    ens_or_mom: EnsembleNetwork | EnsembleMoments,
    state: BeliefState,
    mode: TaskMode,
    gamma: float,
) -> np.ndarray:
    """Apply one relaxation sweep to all steps of the trajectory, in place."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if state.stale:
        raise RuntimeError("stale forward trace: refresh the state first")
    mom = _as_moments(ens_or_mom)
    delta = belief_delta_batch(
        mom,
        state.r[None],
        _expand_trace(state.trace),
        state.err_state[None],
        state.err_out[None],
        state.noise.eps1[None],
        state.noise.eps2[None],
        gamma,
    )[0]
    state.r += delta
    state.stale = True
    return state.r


def run_inference(
    ens: EnsembleNetwork | EnsembleMoments,
    x: np.ndarray,
    targets: np.ndarray,
    mode: TaskMode,
    cfg: InferenceConfig,
    rng: np.random.Generator,
) -> tuple[BeliefState, np.ndarray]:
    """Relax one sequence; returns the refreshed state and its energy trace.

    The trace holds the energy seen before each sweep plus the final value
    after the last sweep; relaxation stops early once successive energies
    differ by less than ``stop_tol``.
    """
    mom = _as_moments(ens)
    history: list[np.ndarray] = []
    result = run_inference_batch(
        mom, x[None], targets[None], mode, cfg, rng, energy_history=history
    )
    state = BeliefState(
        r=result.r[0],
        r_y=targets,
        mode=mode,
        noise=NoiseDraws(eps1=result.eps1[0], eps2=result.eps2[0]),
        x=x,
        trace=_slice_trace(result.trace, 0),
        err_state=result.err_state[0],
        err_out=result.err_out[0],
        stale=False,
    )
    f_trace = np.array([h[0] for h in history])
    return state, f_trace


def _as_moments(obj: EnsembleNetwork | EnsembleMoments) -> EnsembleMoments:
    return obj if isinstance(obj, EnsembleMoments) else EnsembleMoments.of(obj)


def _expand_trace(trace: ForwardTrace) -> ForwardTrace:
    return ForwardTrace(
        **{k: getattr(trace, k)[None] for k in ForwardTrace.__dataclass_fields__}
    )
