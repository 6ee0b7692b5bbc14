"""Cyclic-alphabet toy language: generation, scoring and data-load sweeps.

A sequence is grammatical when every letter is followed by the letter two or
four positions later in the alphabet, wrapping around after 'z'.  The full
corpus for length T enumerates every start letter and every chain of +2/+4
choices (26 * 2^(T-1) sequences); the chance level of a random transition is
2/26 = 1/13.  Sweeping the number of training sequences M at fixed reservoir
size N traces how generation quality turns on with the data load M/N.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import SequenceSample, one_hot
from .forward import EnsembleMoments, forward_step, readout
from .learning import TrainConfig, train
from .sas import EnsembleNetwork, init_ensemble

ALPHABET = 26
VALID_STEPS = (2, 4)
CHANCE_LEVEL = len(VALID_STEPS) / ALPHABET  # 1/13


def is_valid_transition(a: int, b: int) -> bool:
    """True iff letter b lies two or four alphabet positions after a, cyclically."""
    return (b - a) % ALPHABET in VALID_STEPS


def seq_to_str(seq: np.ndarray) -> str:
    return "".join(chr(ord("a") + int(c)) for c in seq)


def str_to_seq(text: str) -> np.ndarray:
    seq = np.array([ord(c) - ord("a") for c in text], dtype=np.int64)
    if seq.size and (seq.min() < 0 or seq.max() >= ALPHABET):
        raise ValueError(f"non-alphabet character in {text!r}")
    return seq


def _decode(start: int, choice_bits: int, t: int) -> np.ndarray:
    """Sequence from a start letter and a choice integer (bit k = transition k,
    0 -> +2, 1 -> +4)."""
    seq = np.empty(t, dtype=np.int64)
    seq[0] = start
    cur = start
    for k in range(t - 1):
        cur = (cur + VALID_STEPS[(choice_bits >> k) & 1]) % ALPHABET
        seq[k + 1] = cur
    return seq


def corpus_size(t: int) -> int:
    return ALPHABET * 2 ** (t - 1)


def generate_corpus(
    t: int,
    m: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """All grammatical sequences of length t, or m of them sampled without
    replacement when ``m`` is given."""
    if t < 1:
        raise ValueError("sequence length must be at least 1")
    total = corpus_size(t)
    if m is None:
        n_choices = 2 ** (t - 1)
        bits = (np.arange(n_choices)[:, None] >> np.arange(max(t - 1, 1))) & 1
        steps = np.where(bits[:, : t - 1], VALID_STEPS[1], VALID_STEPS[0])
        out = []
        for start in range(ALPHABET):
            body = (start + np.cumsum(steps, axis=1)) % ALPHABET
            seqs = np.concatenate(
                [np.full((n_choices, 1), start, dtype=np.int64), body], axis=1
            )
            out.extend(seqs[:, :t])
        return out
    if m > total:
        raise ValueError(f"requested {m} sequences but the corpus has {total}")
    if rng is None:
        raise ValueError("sampled corpora need a random generator")
    if total <= 2**22:
        picks = rng.choice(total, size=m, replace=False)
    else:
        # Population far exceeds any desk-scale m: rejection sampling.
        chosen: set[int] = set()
        while len(chosen) < m:
            chosen.add(int(rng.integers(total)))
        picks = np.array(sorted(chosen))
    n_choices = 2 ** (t - 1)
    return [_decode(int(p) // n_choices, int(p) % n_choices, t) for p in picks]


def correct_letter_ratio(seq: np.ndarray) -> float:
    """Fraction of valid adjacent transitions; needs at least one transition."""
    if len(seq) < 2:
        raise ValueError("ratio needs a sequence of length >= 2")
    diffs = (np.asarray(seq[1:]) - np.asarray(seq[:-1])) % ALPHABET
    return float(np.isin(diffs, VALID_STEPS).mean())


def corpus_to_samples(corpus: list[np.ndarray]) -> list[SequenceSample]:
    """Next-letter samples: one-hot inputs, one-hot targets shifted by one."""
    return [
        SequenceSample(
            inputs=one_hot(seq, ALPHABET),
            targets=one_hot(seq[1:], ALPHABET),
            id=i,
        )
        for i, seq in enumerate(corpus)
    ]


def write_corpus(path, corpus: list[np.ndarray]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for seq in corpus:
            fh.write(seq_to_str(seq) + "\n")


def read_corpus(path) -> list[np.ndarray]:
    with open(path, encoding="ascii") as fh:
        return [str_to_seq(line.strip()) for line in fh if line.strip()]


def generate_text(
    ens: EnsembleNetwork | EnsembleMoments,
    start: int,
    length: int,
    rng: np.random.Generator,
    greedy: bool = True,
) -> np.ndarray:
    """Autoregressive generation: each argmax readout becomes the next input.

    No inference happens; the belief follows the prediction dynamics.  Noise
    is drawn fresh for the whole generation phase.  ``greedy=False`` samples
    the readout distribution instead of taking its argmax.
    """
    mom = ens if isinstance(ens, EnsembleMoments) else EnsembleMoments.of(ens)
    letters = np.empty(length, dtype=np.int64)
    letters[0] = start
    r_prev = np.zeros(mom.n)
    for k in range(1, length):
        x = one_hot(np.array([letters[k - 1]]), ALPHABET)[0]
        h, _ = forward_step(mom, r_prev, x, rng.standard_normal(mom.n))
        y = readout(mom, h, rng.standard_normal(mom.n_out))
        letters[k] = int(np.argmax(y)) if greedy else int(rng.choice(ALPHABET, p=y))
        r_prev = h
    return letters


def generation_ratio(
    ens: EnsembleNetwork | EnsembleMoments,
    rng: np.random.Generator,
    length: int = 11,
) -> float:
    """Mean correct-letter ratio over one generated sequence per start letter."""
    mom = ens if isinstance(ens, EnsembleMoments) else EnsembleMoments.of(ens)
    ratios = [
        correct_letter_ratio(generate_text(mom, start, length, rng))
        for start in range(ALPHABET)
    ]
    return float(np.mean(ratios))


@dataclass
class SweepRow:
    alpha: float
    m: int
    mean_ratio: float
    std_ratio: float
    runs: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    # One (alpha, m, run, ratio) record per trained network.
    records: list[tuple[float, int, int, float]]


def sweep_to_csv(result: SweepResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("alpha,M,run,ratio\n")
        for alpha, m, run, ratio in result.records:
            fh.write(f"{alpha!r},{m},{run},{ratio!r}\n")


def _sweep_job(args) -> tuple[float, int, int, float]:
    alpha, m, run, t, n, cfg, seed_key, eval_length = args
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    corpus = generate_corpus(t, m=m, rng=rng)
    samples = corpus_to_samples(corpus)
    ens = init_ensemble(ALPHABET, n, ALPHABET, rng=rng)
    cfg = replace(cfg, seed=int(rng.integers(2**31)))
    train(ens, samples, cfg)
    ratio = generation_ratio(ens, rng, length=eval_length)
    return alpha, m, run, ratio


def alpha_sweep(
    alphas: list[float],
    runs: int,
    cfg: TrainConfig,
    n: int = 100,
    t: int = 11,
    seed: int = 0,
    eval_length: int = 11,
    jobs: int = 1,
) -> SweepResult:
    """Train fresh ensembles on sampled corpora for each data load alpha = M/N.

    Every (alpha, run) cell is an independent job with its own seed stream,
    so results are reproducible regardless of the execution order or the
    number of workers.
    """
    job_args = []
    for ai, alpha in enumerate(alphas):
        m = round(alpha * n)
        if m == 0:
            warnings.warn(f"alpha={alpha} maps to an empty corpus at N={n}; skipped")
            continue
        for run in range(runs):
            job_args.append((alpha, m, run, t, n, cfg, [seed, ai, run], eval_length))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_sweep_job, job_args))
    else:
        records = [_sweep_job(a) for a in job_args]

    rows = []
    for alpha, m in dict.fromkeys((r[0], r[1]) for r in records):
        ratios = [r[3] for r in records if r[0] == alpha]
        rows.append(
            SweepRow(
                alpha=alpha,
                m=m,
                mean_ratio=float(np.mean(ratios)),
                std_ratio=float(np.std(ratios, ddof=1)) if len(ratios) > 1 else 0.0,
                runs=len(ratios),
            )
        )
    return SweepResult(rows=rows, records=records)


def fit_exponent(result: SweepResult, alpha_c: float) -> float:
    """Power-law exponent of (ratio - chance) against (alpha - alpha_c).

    Least-squares slope in log-log space over sweep rows above the threshold;
    rows whose ratio does not exceed chance are dropped.
    """
    above = [row for row in result.rows if row.alpha > alpha_c]
    if len(above) < 4:
        raise ValueError("need at least 4 sweep points above the threshold")
    xs, ys = [], []
    for row in above:
        excess = row.mean_ratio - CHANCE_LEVEL
        if excess <= 0 or row.alpha - alpha_c <= 0:
            continue
        xs.append(np.log(row.alpha - alpha_c))
        ys.append(np.log(excess))
    if len(xs) < 3:
        raise ValueError("fewer than 3 usable points above the threshold")
    slope, _ = np.polyfit(np.array(xs), np.array(ys), 1)
    return float(slope)
