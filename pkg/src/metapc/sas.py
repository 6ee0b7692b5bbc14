"""Spike-and-slab synapse ensembles.

Every connection weight is described by three hyperparameters instead of a
single value: a spike probability ``pi`` (the weight is exactly zero), a slab
mass ``m`` and a slab variance ``xi``.  A concrete network is one sample from
this distribution; training acts on the hyperparameters, never on sampled
weights.  Conventions used throughout the package:

* matrices are ``[post, pre]`` row-major, double precision;
* the slab Gaussian has mean ``m / (fan_in * (1 - pi))`` and variance
  ``xi / (fan_in * (1 - pi))``, so the weight's first moment is ``m / fan_in``
  and its second moment is ``m^2 / (fan_in^2 (1 - pi)) + xi / fan_in``;
* ``pi`` is kept strictly below 1 so the ``1 / (1 - pi)`` factors stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Ceiling for spike probabilities: a spike mass of exactly 1 would make the
# slab scale factors singular, and fully-silent connections never occur in
# trained models anyway.
PI_MAX = 1.0 - 1e-3


@dataclass
class InitConfig:
    """Initial hyperparameter values for a fresh ensemble."""

    pi0: float = 0.5
    xi0: float = 0.05


@dataclass
class SaSLayer:
    """Spike-and-slab hyperparameters for one weight matrix.

    ``pi``, ``m`` and ``xi`` share the ``[post, pre]`` shape; ``fan_in`` is the
    presynaptic dimension used in the 1/fan_in moment scaling.
    """

    pi: np.ndarray
    m: np.ndarray
    xi: np.ndarray
    fan_in: int

    def __post_init__(self):
        if not (self.pi.shape == self.m.shape == self.xi.shape):
            raise ValueError("pi, m, xi must share one shape")
        if self.fan_in != self.pi.shape[1]:
            raise ValueError("fan_in must equal the pre dimension")

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    def copy(self) -> "SaSLayer":
        return SaSLayer(self.pi.copy(), self.m.copy(), self.xi.copy(), self.fan_in)


@dataclass
class LayerMoments:
    """First and second moments of the weights of one layer."""

    mu: np.ndarray
    rho: np.ndarray


@dataclass
class ConcreteNetwork:
    """Plain weight matrices: one sampled (or directly constructed) network."""

    w_in: np.ndarray
    w: np.ndarray
    w_out: np.ndarray

    def copy(self) -> "ConcreteNetwork":
        return ConcreteNetwork(self.w_in.copy(), self.w.copy(), self.w_out.copy())


@dataclass
class EnsembleNetwork:
    """The trainable object: three spike-and-slab layers.

    ``input_layer`` maps n_in -> n, ``recurrent_layer`` maps n -> n (self
    connections included), ``output_layer`` maps n -> n_out.
    """

    input_layer: SaSLayer
    recurrent_layer: SaSLayer
    output_layer: SaSLayer

    @property
    def n_in(self) -> int:
        return self.input_layer.shape[1]

    @property
    def n(self) -> int:
        return self.recurrent_layer.shape[1]

    @property
    def n_out(self) -> int:
        return self.output_layer.shape[0]

    def layers(self) -> dict[str, SaSLayer]:
        return {
            "in": self.input_layer,
            "rec": self.recurrent_layer,
            "out": self.output_layer,
        }

    def copy(self) -> "EnsembleNetwork":
        return EnsembleNetwork(
            self.input_layer.copy(),
            self.recurrent_layer.copy(),
            self.output_layer.copy(),
        )


def variance(layer: SaSLayer) -> np.ndarray:
    """Element-wise weight variance rho - mu^2.

    Computed as ``m^2 pi / (fan_in^2 (1 - pi)) + xi / fan_in``, which is the
    same quantity rearranged so it is exactly zero (not zero up to rounding)
    when pi = 0 and xi = 0.
    """
    n = float(layer.fan_in)
    return (layer.m**2 * layer.pi) / (n**2 * (1.0 - layer.pi)) + layer.xi / n


def moments(layer: SaSLayer) -> LayerMoments:
    """First and second weight moments of one layer.

    mu = m / fan_in; rho = m^2 / (fan_in^2 (1 - pi)) + xi / fan_in.  rho is
    assembled as mu^2 + variance so rho >= mu^2 holds exactly in floats.
    """
    mu = layer.m / float(layer.fan_in)
    rho = mu * mu + variance(layer)
    return LayerMoments(mu=mu, rho=rho)


def clamp(layer: SaSLayer) -> SaSLayer:
    """Project hyperparameters back into their domain, in place.

    pi -> [0, PI_MAX], xi -> [0, inf); m is untouched.  Idempotent.
    """
    np.clip(layer.pi, 0.0, PI_MAX, out=layer.pi)
    np.clip(layer.xi, 0.0, None, out=layer.xi)
    return layer


def init_ensemble(
    n_in: int,
    n: int,
    n_out: int,
    init: InitConfig | None = None,
    rng: np.random.Generator | None = None,
) -> EnsembleNetwork:
    """Create a fresh ensemble: m ~ Normal(0, 1), constant pi0 / xi0.

    The unit-scale m keeps first moments at the 1/fan_in scale, so reservoir
    currents stay order one for any width.
    """
    if min(n_in, n, n_out) < 1:
        raise ValueError(f"dimensions must be positive, got ({n_in}, {n}, {n_out})")
    init = init or InitConfig()
    rng = rng or np.random.default_rng()

    def make(post: int, pre: int) -> SaSLayer:
        return SaSLayer(
            pi=np.full((post, pre), init.pi0, dtype=float),
            m=rng.standard_normal((post, pre)),
            xi=np.full((post, pre), init.xi0, dtype=float),
            fan_in=pre,
        )

    return EnsembleNetwork(make(n, n_in), make(n, n), make(n_out, n))


def sample_weights(layer: SaSLayer, rng: np.random.Generator) -> np.ndarray:
    """Draw one concrete weight matrix from the layer's distribution.

    Each entry is zero with probability pi, otherwise Gaussian with mean
    m / (fan_in (1 - pi)) and variance xi / (fan_in (1 - pi)).  Spike
    uniforms are drawn before slab normals, so the stream layout is stable.
    """
    n = float(layer.fan_in)
    keep = 1.0 - layer.pi
    spikes = rng.random(layer.shape) < layer.pi
    slab = layer.m / (n * keep) + np.sqrt(layer.xi / (n * keep)) * rng.standard_normal(
        layer.shape
    )
    return np.where(spikes, 0.0, slab)


def sample_network(ens: EnsembleNetwork, rng: np.random.Generator) -> ConcreteNetwork:
    """Sample one plain-weight network from the ensemble."""
    return ConcreteNetwork(
        w_in=sample_weights(ens.input_layer, rng),
        w=sample_weights(ens.recurrent_layer, rng),
        w_out=sample_weights(ens.output_layer, rng),
    )
