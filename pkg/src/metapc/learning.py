"""Hyperparameter learning on top of converged beliefs.

After inference has relaxed the beliefs of a batch, the same error streams
and the same frozen noise yield closed-form gradients for all three
hyperparameter families of every layer:

* the slab mass gradient carries a mean-path term (error times presynaptic
  activity over fan-in) plus a fluctuation term;
* the spike-probability and slab-variance gradients are purely fluctuation
  driven: error times noise over the fluctuation magnitude, times the squared
  presynaptic activity, with layer-specific coefficients.

The presynaptic activity is the input vector for the input layer, the ReLU of
the previous-step belief for the recurrent layer and the ReLU of the
current-step belief for the output layer; the error stream is the state
mismatch for the first two and the output error for the readout.

Gradients returned here are raw energy derivatives; the optimizer applies the
learning rate (plain SGD or bias-corrected Adam) and the domain projection
runs afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forward import EnsembleMoments
from .inference import (
    BatchInference,
    BeliefState,
    InferenceConfig,
    TaskMode,
    run_inference_batch,
)
from .sas import EnsembleNetwork, SaSLayer, clamp


@dataclass
class LayerGrads:
    m: np.ndarray
    pi: np.ndarray
    xi: np.ndarray


@dataclass
class HyperGradients:
    """Raw energy gradients for every hyperparameter matrix."""

    input: LayerGrads
    recurrent: LayerGrads
    output: LayerGrads

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, lg in (("in", self.input), ("rec", self.recurrent), ("out", self.output)):
            out[f"{name}.m"] = lg.m
            out[f"{name}.pi"] = lg.pi
            out[f"{name}.xi"] = lg.xi
        return out


def _guarded(num: np.ndarray, den: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den >= floor)
    return out


def _layer_grads(
    layer: SaSLayer, err: np.ndarray, weighted: np.ndarray, xi_act: np.ndarray
) -> LayerGrads:
    """Gradient matrices of one layer from batched error/activity tensors.

    ``err`` is the raw error stream [B, T, post], ``weighted`` the same stream
    already divided by the fluctuation magnitude and multiplied by the frozen
    noise, ``xi_act`` the presynaptic activity [B, T, pre].
    """
    n = float(layer.fan_in)
    s1 = np.einsum("bti,btj->ij", err, xi_act)
    s2 = np.einsum("bti,btj->ij", weighted, xi_act**2)
    keep = 1.0 - layer.pi
    grad_m = -s1 / n - (layer.m * layer.pi / (n**2 * keep)) * s2
    grad_pi = -(layer.m**2 / (2.0 * n**2 * keep**2)) * s2
    grad_xi = -(1.0 / (2.0 * n)) * s2
    return LayerGrads(m=grad_m, pi=grad_pi, xi=grad_xi)


def hyper_gradients_batch(
    ens: EnsembleNetwork,
    result: BatchInference,
    x: np.ndarray,
) -> HyperGradients:
    """Energy gradients summed over a batch of converged sequences."""
    trace = result.trace
    a_state = _guarded(result.err_state * result.eps1, trace.d_state)
    a_out = _guarded(result.err_out * result.eps2, trace.d_out)
    return HyperGradients(
        input=_layer_grads(ens.input_layer, result.err_state, a_state, x),
        recurrent=_layer_grads(ens.recurrent_layer, result.err_state, a_state, trace.fr_prev),
        output=_layer_grads(ens.output_layer, result.err_out, a_out, trace.fr),
    )


def hyper_gradients(ens: EnsembleNetwork, state: BeliefState) -> HyperGradients:
    """Single-sequence gradients from a refreshed belief state."""
    if state.stale or state.trace is None:
        raise RuntimeError("stale forward trace: refresh the state first")
    result = BatchInference(
        r=state.r[None],
        trace=_lift(state.trace),
        err_state=state.err_state[None],
        err_out=state.err_out[None],
        energy=np.zeros(1),
        eps1=state.noise.eps1[None],
        eps2=state.noise.eps2[None],
        sweeps=np.zeros(1, dtype=int),
    )
    return hyper_gradients_batch(ens, result, state.x[None])


def _lift(trace):
    from .forward import ForwardTrace

    return ForwardTrace(
        **{k: getattr(trace, k)[None] for k in ForwardTrace.__dataclass_fields__}
    )


class Optimizer:
    """SGD or bias-corrected Adam over a dict of named parameter arrays."""

    def __init__(
        self,
        kind: str = "adam",
        eta: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        rate_overrides: dict[str, float] | None = None,
    ):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.eta = eta
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.rate_overrides = rate_overrides or {}
        self.step_count = 0
        self.m_acc: dict[str, np.ndarray] = {}
        self.v_acc: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update parameters in place; raises on the first non-finite gradient."""
        self.step_count += 1
        for key, g in grads.items():
            bad = ~np.isfinite(g)
            if bad.any():
                idx = tuple(np.argwhere(bad)[0])
                raise FloatingPointError(f"non-finite gradient in {key} at {idx}")
            p = params[key]
            eta = self.rate_overrides.get(key, self.eta)
            if self.kind == "sgd":
                p -= eta * g
                continue
            m = self.m_acc.setdefault(key, np.zeros_like(p))
            v = self.v_acc.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            m_hat = m / (1.0 - self.beta1**self.step_count)
            v_hat = v / (1.0 - self.beta2**self.step_count)
            p -= eta * m_hat / (np.sqrt(v_hat) + self.eps)


def ensemble_params(ens: EnsembleNetwork) -> dict[str, np.ndarray]:
    out = {}
    for name, layer in ens.layers().items():
        out[f"{name}.m"] = layer.m
        out[f"{name}.pi"] = layer.pi
        out[f"{name}.xi"] = layer.xi
    return out


def apply_update(
    ens: EnsembleNetwork,
    grads: HyperGradients,
    opt: Optimizer,
    update_pi: bool = True,
    update_xi: bool = True,
) -> EnsembleNetwork:
    """One optimizer step on the ensemble followed by the domain projection."""
    grad_dict = grads.as_dict()
    if not update_pi:
        grad_dict = {k: v for k, v in grad_dict.items() if not k.endswith(".pi")}
    if not update_xi:
        grad_dict = {k: v for k, v in grad_dict.items() if not k.endswith(".xi")}
    opt.step(ensemble_params(ens), grad_dict)
    for layer in ens.layers().values():
        clamp(layer)
    return ens


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    gamma: float = 0.1
    eta: float = 0.001
    n_steps: int = 100
    stop_tol: float = 0.1
    optimizer: str = "adam"
    mode: TaskMode = TaskMode.PER_STEP
    seed: int = 0
    init_from_forward: bool = False
    update_pi: bool = True
    update_xi: bool = True
    # Rate for the spike-probability / slab-variance channels.  Defaults to
    # eta; a smaller value tames an instability specific to Adam: the pi
    # gradient scales with m^2 / (1 - pi)^2, and Adam's per-coordinate
    # normalization turns that exploding coefficient into a fixed-size random
    # walk that can pin pi at its ceiling, where the weight variance (and so
    # the energy) blows up once the slab masses are large.
    eta_sparsity: float | None = None
    # Optional late-stage boost of the inference budget.
    late_epoch: int | None = None
    n_steps_late: int | None = None

    def inference_config(self, epoch: int) -> InferenceConfig:
        n = self.n_steps
        if self.late_epoch is not None and epoch >= self.late_epoch:
            n = self.n_steps_late or self.n_steps
        return InferenceConfig(
            n_steps=n,
            gamma=self.gamma,
            stop_tol=self.stop_tol,
            init_from_forward=self.init_from_forward,
        )


@dataclass
class EpochMetrics:
    epoch: int
    mean_energy: float
    metric: float | None
    stats: dict[str, float]


METRIC_COLUMNS = ["epoch", "mean_F", "metric"] + [
    f"{stat}_{layer}"
    for layer in ("in", "rec", "out")
    for stat in ("mean_abs_m", "mean_pi", "mean_xi")
]


def metrics_to_csv(metrics: list[EpochMetrics], path) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for em in metrics:
        row = [str(em.epoch), repr(em.mean_energy)]
        row.append("" if em.metric is None else repr(em.metric))
        for layer in ("in", "rec", "out"):
            for stat in ("mean_abs_m", "mean_pi", "mean_xi"):
                row.append(repr(em.stats[f"{stat}_{layer}"]))
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class MplEngine:
    """Batch driver for the ensemble learner, used by the shared train loop."""

    def __init__(self, ens: EnsembleNetwork, cfg: TrainConfig):
        self.ens = ens
        self.cfg = cfg
        self.target = ens

    def params(self) -> dict[str, np.ndarray]:
        return ensemble_params(self.ens)

    def batch_grads(
        self,
        x: np.ndarray,
        targets: np.ndarray,
        icfg: InferenceConfig,
        rng: np.random.Generator,
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        mom = EnsembleMoments.of(self.ens)
        result = run_inference_batch(mom, x, targets, self.cfg.mode, icfg, rng)
        grads = hyper_gradients_batch(self.ens, result, x).as_dict()
        if not self.cfg.update_pi:
            grads = {k: v for k, v in grads.items() if not k.endswith(".pi")}
        if not self.cfg.update_xi:
            grads = {k: v for k, v in grads.items() if not k.endswith(".xi")}
        return grads, result.energy

    def post_update(self) -> None:
        for layer in self.ens.layers().values():
            clamp(layer)

    def stats(self) -> dict[str, float]:
        out = {}
        for name, layer in self.ens.layers().items():
            out[f"mean_abs_m_{name}"] = float(np.mean(np.abs(layer.m)))
            out[f"mean_pi_{name}"] = float(np.mean(layer.pi))
            out[f"mean_xi_{name}"] = float(np.mean(layer.xi))
        return out


def train(
    ens: EnsembleNetwork,
    dataset: list,
    cfg: TrainConfig,
    metric_fn: Callable[[EnsembleNetwork, int, np.random.Generator], float] | None = None,
    epoch_hook: Callable[[int, list[EpochMetrics]], None] | None = None,
) -> tuple[EnsembleNetwork, list[EpochMetrics]]:
    """Run the inference/learning loop over the dataset.

    Batches are shuffled every epoch from the run seed; per-sequence
    gradients are averaged over the batch before each optimizer step.
    ``metric_fn`` is evaluated once per epoch on its own random stream;
    ``epoch_hook`` runs after each epoch's record is appended (artifact
    writers hang off it).
    """
    engine = MplEngine(ens, cfg)
    metrics = run_training(engine, dataset, cfg, metric_fn, epoch_hook)
    return ens, metrics


def run_training(engine, dataset, cfg: TrainConfig, metric_fn=None,
                 epoch_hook=None) -> list[EpochMetrics]:
    if not dataset:
        raise ValueError("dataset must not be empty")
    shuffle_ss, noise_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    eval_rng = np.random.default_rng(eval_ss)

    overrides = None
    if cfg.eta_sparsity is not None:
        overrides = {
            f"{layer}.{p}": cfg.eta_sparsity
            for layer in ("in", "rec", "out")
            for p in ("pi", "xi")
        }
    opt = Optimizer(cfg.optimizer, cfg.eta, rate_overrides=overrides)
    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        icfg = cfg.inference_config(epoch)
        order = shuffle_rng.permutation(len(dataset))
        energies: list[np.ndarray] = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            grad_sum: dict[str, np.ndarray] = {}
            for x, targets in _length_groups(dataset, batch_idx):
                grads, f_vals = engine.batch_grads(x, targets, icfg, noise_rng)
                energies.append(f_vals)
                for k, g in grads.items():
                    if k in grad_sum:
                        grad_sum[k] += g
                    else:
                        grad_sum[k] = g
            scale = 1.0 / len(batch_idx)
            opt.step(engine.params(), {k: g * scale for k, g in grad_sum.items()})
            engine.post_update()
        metric = None
        if metric_fn is not None:
            metric = float(metric_fn(engine.target, epoch, eval_rng))
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                mean_energy=float(np.mean(np.concatenate(energies))),
                metric=metric,
                stats=engine.stats(),
            )
        )
        if epoch_hook is not None:
            epoch_hook(epoch, metrics)
    return metrics


def _length_groups(dataset, batch_idx):
    """Stack the batch into dense arrays, one group per sequence length."""
    by_len: dict[int, list[int]] = {}
    for i in batch_idx:
        by_len.setdefault(dataset[i].inputs.shape[0], []).append(i)
    for t in sorted(by_len):
        idx = by_len[t]
        x = np.stack([dataset[i].inputs for i in idx])
        targets = np.stack([dataset[i].targets for i in idx])
        yield x, targets
