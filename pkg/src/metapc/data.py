"""Dataset ingestion, encodings, perplexity and checkpoints.

MNIST arrives as the classic big-endian IDX pair and becomes 28-step
sequences of 28 pixels per step (rows top to bottom, values scaled to [0,1])
with a one-hot label scored at the final step.  Text corpora are plain UTF-8
files, one sentence per line; tokens rarer than ``min_freq`` collapse into
``<unk>``.  Small vocabularies are fed one-hot; larger ones go through a
frozen seeded random projection instead of a trained embedding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .learning import Optimizer
from .sas import ConcreteNetwork, EnsembleNetwork, SaSLayer

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
CHECKPOINT_VERSION = 1
ONE_HOT_VOCAB_LIMIT = 2000
PROJECTION_DIM = 300
UNK_TOKEN = "<unk>"


@dataclass
class SequenceSample:
    """One training sequence: inputs [T, n_in] and its targets.

    Targets are one-hot next-step rows [T-1, n_out] for sequence modelling or
    a single one-hot row [n_out] for final-step classification.
    """

    inputs: np.ndarray
    targets: np.ndarray
    id: int | str = 0


def one_hot(indices: np.ndarray, size: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((len(indices), size))
    out[np.arange(len(indices)), indices] = 1.0
    return out


# ---------------------------------------------------------------------------
# MNIST (IDX format)


class IdxFormatError(ValueError):
    pass


def _read_be32(data: bytes, offset: int, path) -> int:
    if offset + 4 > len(data):
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">i", data, offset)[0]


def read_idx_images(path) -> np.ndarray:
    """Raw [count, rows, cols] uint8 pixel array from an IDX image file."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = _read_be32(data, 0, path)
    if magic != MNIST_IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic {magic} at offset 0")
    count = _read_be32(data, 4, path)
    rows = _read_be32(data, 8, path)
    cols = _read_be32(data, 12, path)
    body = data[16:]
    if len(body) != count * rows * cols:
        raise IdxFormatError(
            f"{path}: expected {count * rows * cols} pixel bytes after offset 16, "
            f"found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = _read_be32(data, 0, path)
    if magic != MNIST_LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic {magic} at offset 0")
    count = _read_be32(data, 4, path)
    body = data[8:]
    if len(body) != count:
        raise IdxFormatError(
            f"{path}: expected {count} label bytes after offset 8, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8)


def load_mnist(images_path, labels_path) -> list[SequenceSample]:
    """Digit images as 28-step row sequences with final-step one-hot labels."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image/label count mismatch: {len(images)} vs {len(labels)}"
        )
    scaled = images.astype(float) / 255.0
    eye = np.eye(10)
    return [
        SequenceSample(inputs=scaled[i], targets=eye[labels[i]].copy(), id=i)
        for i in range(len(images))
    ]


# ---------------------------------------------------------------------------
# Text corpora


@dataclass
class Vocabulary:
    token_to_index: dict[str, int]
    index_to_token: list[str]
    unk_index: int
    min_freq: int

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, self.unk_index)


def tokenize(text: str, min_freq: int = 5) -> tuple[Vocabulary, list[list[int]]]:
    """Lowercased whitespace tokenization with rare-token replacement.

    Tokens seen fewer than ``min_freq`` times across the whole corpus map to
    the reserved unknown token.  Kept tokens are indexed by descending corpus
    frequency (ties alphabetical), which makes the vocabulary reproducible.
    """
    lines = [line.split() for line in text.lower().splitlines()]
    counts: dict[str, int] = {}
    for toks in lines:
        for tok in toks:
            counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise ValueError("corpus contains no tokens")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq and tok != UNK_TOKEN),
        key=lambda tok: (-counts[tok], tok),
    )
    index_to_token = [UNK_TOKEN] + kept
    token_to_index = {tok: i for i, tok in enumerate(index_to_token)}
    vocab = Vocabulary(token_to_index, index_to_token, unk_index=0, min_freq=min_freq)
    sequences = [[vocab.index(tok) for tok in toks] for toks in lines if toks]
    return vocab, sequences


def make_projection(vocab_size: int, dim: int = PROJECTION_DIM, seed: int = 0) -> np.ndarray:
    """Frozen random token encoding [dim, vocab]; columns have unit expected norm."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, vocab_size, dim]))
    return rng.standard_normal((dim, vocab_size)) / np.sqrt(dim)


def text_to_samples(
    vocab: Vocabulary,
    sequences: list[list[int]],
    projection: np.ndarray | None = None,
) -> list[SequenceSample]:
    """Next-token samples; sequences shorter than two tokens are dropped.

    Inputs are one-hot when the vocabulary is small enough, otherwise columns
    of the frozen projection; targets are always one-hot over the vocabulary.
    """
    if projection is None and vocab.size > ONE_HOT_VOCAB_LIMIT:
        projection = make_projection(vocab.size)
    samples = []
    for i, seq in enumerate(sequences):
        if len(seq) < 2:
            continue
        idx = np.asarray(seq, dtype=np.int64)
        if projection is None:
            inputs = one_hot(idx, vocab.size)
        else:
            inputs = projection[:, idx].T.copy()
        samples.append(
            SequenceSample(inputs=inputs, targets=one_hot(idx[1:], vocab.size), id=i)
        )
    return samples


def perplexity(step_probabilities: np.ndarray, target_indices: np.ndarray) -> float:
    """exp of the mean next-token cross-entropy over the given steps."""
    probs = np.asarray(step_probabilities)
    targets = np.asarray(target_indices, dtype=np.int64)
    if len(probs) != len(targets):
        raise ValueError(
            f"{len(probs)} probability rows vs {len(targets)} targets"
        )
    picked = probs[np.arange(len(targets)), targets]
    return float(np.exp(np.mean(-np.log(np.maximum(picked, 1e-12)))))


# ---------------------------------------------------------------------------
# Checkpoints


def _layer_dict(layer: SaSLayer) -> dict:
    return {"pi": layer.pi.tolist(), "m": layer.m.tolist(), "xi": layer.xi.tolist()}


def save_checkpoint(
    model: EnsembleNetwork | ConcreteNetwork,
    opt: Optimizer | None,
    path,
    rng_seed: int = 0,
    epoch: int = 0,
) -> None:
    """Versioned JSON checkpoint; floats round-trip exactly through repr."""
    if isinstance(model, EnsembleNetwork):
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": "sas",
            "dims": {"n_in": model.n_in, "n": model.n, "n_out": model.n_out},
            "layers": {name: _layer_dict(l) for name, l in model.layers().items()},
            "rng_seed": rng_seed,
            "epoch": epoch,
        }
    else:
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": "concrete",
            "dims": {
                "n_in": model.w_in.shape[1],
                "n": model.w.shape[0],
                "n_out": model.w_out.shape[0],
            },
            "layers": {
                "in": {"w": model.w_in.tolist()},
                "rec": {"w": model.w.tolist()},
                "out": {"w": model.w_out.tolist()},
            },
            "rng_seed": rng_seed,
            "epoch": epoch,
        }
    if opt is not None:
        payload["optimizer"] = {
            "kind": opt.kind,
            "eta": opt.eta,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step_count": opt.step_count,
            "m_acc": {k: v.tolist() for k, v in opt.m_acc.items()},
            "v_acc": {k: v.tolist() for k, v in opt.v_acc.items()},
        }
    with open(path, "w") as fh:
        json.dump(payload, fh)


@dataclass
class Checkpoint:
    model: EnsembleNetwork | ConcreteNetwork
    optimizer: Optimizer | None
    rng_seed: int
    epoch: int


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed checkpoint JSON: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {version!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    layers = payload["layers"]
    if payload.get("kind", "sas") == "sas":
        def make(name):
            d = layers[name]
            pi = np.array(d["pi"], dtype=float)
            return SaSLayer(
                pi=pi,
                m=np.array(d["m"], dtype=float),
                xi=np.array(d["xi"], dtype=float),
                fan_in=pi.shape[1],
            )

        model: EnsembleNetwork | ConcreteNetwork = EnsembleNetwork(
            make("in"), make("rec"), make("out")
        )
    else:
        model = ConcreteNetwork(
            w_in=np.array(layers["in"]["w"], dtype=float),
            w=np.array(layers["rec"]["w"], dtype=float),
            w_out=np.array(layers["out"]["w"], dtype=float),
        )
    opt = None
    if "optimizer" in payload:
        od = payload["optimizer"]
        opt = Optimizer(od["kind"], od["eta"], od["beta1"], od["beta2"], od["eps"])
        opt.step_count = od["step_count"]
        opt.m_acc = {k: np.array(v, dtype=float) for k, v in od["m_acc"].items()}
        opt.v_acc = {k: np.array(v, dtype=float) for k, v in od["v_acc"].items()}
    return Checkpoint(
        model=model,
        optimizer=opt,
        rng_seed=payload["rng_seed"],
        epoch=payload["epoch"],
    )


# ---------------------------------------------------------------------------
# Prediction-phase evaluation


def classification_accuracy(
    model: EnsembleNetwork | ConcreteNetwork,
    samples: list[SequenceSample],
    rng: np.random.Generator,
    batch_size: int = 256,
) -> float:
    """Final-step argmax accuracy under the prediction dynamics."""
    from .forward import EnsembleMoments, predict_sequence_batch
    from .vanilla import predict_sequence_batch as predict_vanilla

    hits = 0
    mom = EnsembleMoments.of(model) if isinstance(model, EnsembleNetwork) else None
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = np.stack([s.inputs for s in chunk])
        labels = np.array([int(np.argmax(s.targets)) for s in chunk])
        if mom is not None:
            y = predict_sequence_batch(mom, x, rng)
        else:
            y = predict_vanilla(model, x)
        hits += int(np.sum(np.argmax(y[:, -1], axis=-1) == labels))
    return hits / len(samples)


def corpus_perplexity(
    model: EnsembleNetwork | ConcreteNetwork,
    samples: list[SequenceSample],
    rng: np.random.Generator,
) -> float:
    """Perplexity pooled over every next-token prediction in the sample list."""
    from .forward import EnsembleMoments, predict_sequence_batch
    from .vanilla import predict_sequence_batch as predict_vanilla

    mom = EnsembleMoments.of(model) if isinstance(model, EnsembleNetwork) else None
    rows, targets = [], []
    for s in samples:
        x = s.inputs[None]
        y = predict_sequence_batch(mom, x, rng) if mom is not None else predict_vanilla(model, x)
        rows.append(y[0, :-1])
        targets.append(np.argmax(s.targets, axis=-1))
    return perplexity(np.concatenate(rows), np.concatenate(targets))
