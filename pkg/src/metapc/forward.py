"""Mean-field forward dynamics of a spike-and-slab ensemble.

Instead of running one sampled network, the ensemble is run at the level of
its weight statistics: every pre-activation is Gaussian with a mean given by
the first-moment currents and a standard deviation given by the variance
currents, realised through frozen standard-normal draws.  With all spike
probabilities and slab variances at zero the fluctuation terms vanish and the
pass reduces exactly to an ordinary recurrent network with weights m/fan_in.

Index conventions (0-based array row k <-> step t = k+1):

* ``x[k]`` is the input at step k, ``r[k]`` the belief at step k;
* the state prediction at step k is built from the input current at step k
  and the recurrent current carried over from step k-1 (the belief before
  step 0 is the zero vector);
* the readout at step k uses the belief at step k.

Batched variants take arrays with a leading batch axis and treat each
sequence independently (per-sequence noise, no coupling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sas import EnsembleNetwork, moments, variance

# Fluctuation scales below this are treated as exactly zero: their variance
# numerators vanish in the same regime, so the ratio is defined as 0.
DELTA_FLOOR = 1e-12


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_prime(x: np.ndarray) -> np.ndarray:
    """Subgradient of ReLU with the kink value fixed at 0."""
    return (x > 0.0).astype(float)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (the bare form overflows)."""
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class EnsembleMoments:
    """Per-layer first moments and variances, precomputed once per update."""

    mu_in: np.ndarray
    var_in: np.ndarray
    mu_rec: np.ndarray
    var_rec: np.ndarray
    mu_out: np.ndarray
    var_out: np.ndarray

    @classmethod
    def of(cls, ens: EnsembleNetwork) -> "EnsembleMoments":
        return cls(
            mu_in=moments(ens.input_layer).mu,
            var_in=variance(ens.input_layer),
            mu_rec=moments(ens.recurrent_layer).mu,
            var_rec=variance(ens.recurrent_layer),
            mu_out=moments(ens.output_layer).mu,
            var_out=variance(ens.output_layer),
        )

    @property
    def n(self) -> int:
        return self.mu_rec.shape[0]

    @property
    def n_in(self) -> int:
        return self.mu_in.shape[1]

    @property
    def n_out(self) -> int:
        return self.mu_out.shape[0]


@dataclass
class NoiseDraws:
    """Frozen standard-normal draws for one sequence and one phase.

    ``eps1`` perturbs the state predictions, ``eps2`` the readout.  A draw is
    made once per phase (one inference+learning round, or one prediction run)
    and reused unchanged within it.
    """

    eps1: np.ndarray  # [T, n]
    eps2: np.ndarray  # [T, n_out]


def draw_noise(t: int, n: int, n_out: int, rng: np.random.Generator) -> NoiseDraws:
    if min(t, n, n_out) < 1:
        raise ValueError("noise dimensions must be positive")
    return NoiseDraws(
        eps1=rng.standard_normal((t, n)), eps2=rng.standard_normal((t, n_out))
    )


@dataclass
class ForwardTrace:
    """Everything one pass computes, cached for the error/update equations.

    Row k of ``g_in``/``d_in`` holds the input current/fluctuation at step k;
    row k of ``g_rec``/``d_rec`` holds the recurrent current/fluctuation
    carried from step k-1.  ``d_state`` combines the two state fluctuation
    components, ``fr_prev``/``fr`` cache ReLU of the shifted/current beliefs.
    Arrays are [T, ...] or [B, T, ...] depending on the entry point.
    """

    h: np.ndarray
    y: np.ndarray
    g_in: np.ndarray
    g_rec: np.ndarray
    g_out: np.ndarray
    d_in: np.ndarray
    d_rec: np.ndarray
    d_out: np.ndarray
    d_state: np.ndarray
    fr_prev: np.ndarray
    fr: np.ndarray


def run_forward_batch(
    mom: EnsembleMoments,
    r: np.ndarray,
    x: np.ndarray,
    eps1: np.ndarray,
    eps2: np.ndarray,
) -> ForwardTrace:
    """Full-trajectory pass for a batch: r, eps1 are [B, T, n]; x is [B, T, n_in]."""
    prev = np.concatenate([np.zeros_like(r[:, :1]), r[:, :-1]], axis=1)
    fr_prev = relu(prev)
    fr = relu(r)

    g_in = x @ mom.mu_in.T
    g_rec = fr_prev @ mom.mu_rec.T
    d_in = np.sqrt(x**2 @ mom.var_in.T)
    d_rec = np.sqrt(fr_prev**2 @ mom.var_rec.T)
    d_state = np.sqrt(d_in**2 + d_rec**2)
    h = g_rec + g_in + eps1 * d_state

    g_out = fr @ mom.mu_out.T
    d_out = np.sqrt(fr**2 @ mom.var_out.T)
    y = softmax(g_out + eps2 * d_out)

    return ForwardTrace(
        h=h,
        y=y,
        g_in=g_in,
        g_rec=g_rec,
        g_out=g_out,
        d_in=d_in,
        d_rec=d_rec,
        d_out=d_out,
        d_state=d_state,
        fr_prev=fr_prev,
        fr=fr,
    )


def run_forward(
    mom: EnsembleMoments, r: np.ndarray, x: np.ndarray, noise: NoiseDraws
) -> ForwardTrace:
    """Single-sequence pass: r is [T, n], x is [T, n_in]."""
    batched = run_forward_batch(
        mom, r[None, :, :], x[None, :, :], noise.eps1[None], noise.eps2[None]
    )
    return ForwardTrace(
        **{k: getattr(batched, k)[0] for k in ForwardTrace.__dataclass_fields__}
    )


@dataclass
class StepCurrents:
    """Current/fluctuation components of one state-prediction step."""

    g_in: np.ndarray
    g_rec: np.ndarray
    d_in: np.ndarray
    d_rec: np.ndarray


def forward_step(
    mom: EnsembleMoments,
    r_prev: np.ndarray,
    x_t: np.ndarray,
    eps1_t: np.ndarray,
) -> tuple[np.ndarray, StepCurrents]:
    """One state-prediction step from the previous belief and current input.

    Accepts flat vectors or a leading batch axis.  Returns the prediction
    h together with its current/fluctuation pieces.
    """
    if x_t.shape[-1] != mom.n_in or r_prev.shape[-1] != mom.n:
        raise ValueError(
            f"expected input dim {mom.n_in} and state dim {mom.n}, "
            f"got {x_t.shape[-1]} and {r_prev.shape[-1]}"
        )
    fr_prev = relu(r_prev)
    g_in = x_t @ mom.mu_in.T
    g_rec = fr_prev @ mom.mu_rec.T
    d_in = np.sqrt(x_t**2 @ mom.var_in.T)
    d_rec = np.sqrt(fr_prev**2 @ mom.var_rec.T)
    h = g_rec + g_in + eps1_t * np.sqrt(d_in**2 + d_rec**2)
    return h, StepCurrents(g_in=g_in, g_rec=g_rec, d_in=d_in, d_rec=d_rec)


def readout(
    mom: EnsembleMoments, r_t: np.ndarray, eps2_t: np.ndarray
) -> np.ndarray:
    """Softmax readout of the current belief; always a probability vector."""
    fr = relu(r_t)
    z = fr @ mom.mu_out.T + eps2_t * np.sqrt(fr**2 @ mom.var_out.T)
    return softmax(z)


def predict_sequence_batch(
    mom: EnsembleMoments,
    x: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Prediction-phase outputs for a batch of sequences: y with shape [B, T, n_out].

    No inference happens at test time, so the belief at each step is taken to
    be the prediction itself; the noise is drawn fresh for the whole phase.
    """
    b, t, _ = x.shape
    eps1 = rng.standard_normal((b, t, mom.n))
    eps2 = rng.standard_normal((b, t, mom.n_out))
    r_prev = np.zeros((b, mom.n))
    ys = np.empty((b, t, mom.n_out))
    for k in range(t):
        h, _ = forward_step(mom, r_prev, x[:, k], eps1[:, k])
        ys[:, k] = readout(mom, h, eps2[:, k])
        r_prev = h
    return ys
