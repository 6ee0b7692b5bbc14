"""Command-line front end for the experiments.

Subcommands: gen-corpus, train, eval, sample-text, sweep-alpha, export-stats.
Options come from flags, optionally seeded by a JSON config file (flags win).
Every run directory gets a manifest (resolved config + seed + version) that
is sufficient to reproduce its outputs byte for byte.  Exit codes: 0 success,
1 usage/data error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, grammar, plots, vanilla
from .inference import TaskMode
from .learning import TrainConfig, metrics_to_csv, train
from .sas import EnsembleNetwork, init_ensemble

BUNDLED_CORPUS = Path(__file__).parent / "assets" / "tiny_corpus.txt"


class UserError(Exception):
    """Bad flags, missing files, inconsistent dimensions."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


TASK_DEFAULTS = {
    "toy": dict(
        n_in=26, n=100, n_out=26, t=11, epochs=5, batch_size=32, n_steps=100,
        gamma=0.1, eta=0.02, eta_sparsity=0.002, stop_tol=0.1, optimizer="adam",
        init_beliefs="random",
    ),
    "mnist": dict(
        n_in=28, n=100, n_out=10, t=28, epochs=20, batch_size=32, n_steps=100,
        gamma=0.1, eta=0.02, eta_sparsity=0.002, stop_tol=0.1, optimizer="adam",
        init_beliefs="forward", late_epoch=40, n_steps_late=200, anchor_final=True,
    ),
    "text": dict(
        n=100, epochs=10, batch_size=32, n_steps=30, gamma=0.1, eta=0.01,
        eta_sparsity=0.001, stop_tol=0.1, optimizer="adam", init_beliefs="forward",
        min_freq=5, test_fraction=0.1,
    ),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="metapc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def add_common(p):
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument("--plot", action="store_true", default=S,
                       help="render figures next to the CSV outputs")

    def add_train_opts(p, default_task=None):
        if default_task is None:
            p.add_argument("--task", choices=("toy", "mnist", "text"), required=True)
        else:
            p.add_argument("--task", choices=("toy", "mnist", "text"),
                           default=default_task)
        p.add_argument("--engine", choices=("mpl", "vanilla"), default=S)
        p.add_argument("--n", type=int, default=S, help="reservoir size")
        p.add_argument("--n-in", type=int, default=S)
        p.add_argument("--n-out", type=int, default=S)
        p.add_argument("--T", type=int, dest="t", default=S, help="sequence length")
        p.add_argument("--epochs", type=int, default=S)
        p.add_argument("--batch-size", type=int, default=S)
        p.add_argument("--inference-steps", type=int, dest="n_steps", default=S)
        p.add_argument("--gamma", type=float, default=S)
        p.add_argument("--eta", type=float, default=S)
        p.add_argument("--eta-sparsity", type=float, default=S,
                       help="separate rate for the spike/variance channels")
        p.add_argument("--stop-tol", type=float, default=S)
        p.add_argument("--optimizer", choices=("sgd", "adam"), default=S)
        p.add_argument("--init-beliefs", choices=("random", "forward"), default=S)
        p.add_argument("--alpha", default=S,
                       help="toy data load M/N, or 'full' for the whole corpus")
        p.add_argument("--M", type=int, dest="m", default=S,
                       help="toy training-set size (overrides --alpha)")
        p.add_argument("--corpus", default=S, help="text corpus path")
        p.add_argument("--min-freq", type=int, default=S)
        p.add_argument("--test-fraction", type=float, default=S)
        p.add_argument("--anchor-final", action=argparse.BooleanOptionalAction,
                       default=S, help="keep the final state-mismatch term in "
                       "classification (label error then reaches earlier steps)")
        p.add_argument("--mnist-images", default=S)
        p.add_argument("--mnist-labels", default=S)
        p.add_argument("--test-images", default=S)
        p.add_argument("--test-labels", default=S)
        p.add_argument("--limit", type=int, default=S, help="cap training samples")
        p.add_argument("--test-limit", type=int, default=S)

    p = sub.add_parser("gen-corpus", help="write toy-grammar sequences to a file")
    p.add_argument("--T", type=int, dest="t", default=S)
    p.add_argument("--mode", default=S, help="'full' or an integer sample count")
    p.add_argument("--out-file", default=S)
    add_common(p)

    p = sub.add_parser("train", help="run the inference/learning loop")
    add_train_opts(p)
    add_common(p)

    p = sub.add_parser("eval", help="print the task metric of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add_train_opts(p)
    add_common(p)

    p = sub.add_parser("sample-text", help="generate toy sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--length", type=int, default=S)
    p.add_argument("--starts", default=S, help="'all' or letters like 'abc'")
    add_common(p)

    p = sub.add_parser("sweep-alpha", help="train across data loads and record ratios")
    p.add_argument("--alphas", default=S,
                   help="comma list or start:stop:step range of M/N values")
    p.add_argument("--runs", type=int, default=S)
    p.add_argument("--alpha-c", type=float, default=S,
                   help="fit the ratio growth exponent above this threshold")
    p.add_argument("--jobs", type=int, default=S)
    add_train_opts(p, default_task="toy")
    add_common(p)

    p = sub.add_parser("export-stats", help="histogram CSVs of the hyperparameters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", default=S, help="metrics CSV to re-export layer means from")
    p.add_argument("--bins", type=int, default=S)
    add_common(p)

    return parser


def _merge_options(ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; the seed falls back to MPL_SEED."""
    opts = dict(TASK_DEFAULTS.get(getattr(ns, "task", ""), {}))
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            with open(cfg_path) as fh:
                opts.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UserError(f"cannot read config file {cfg_path}: {exc}")
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    opts.update(flags)
    opts.setdefault("seed", int(os.environ.get("MPL_SEED", "0")))
    opts.setdefault("engine", "mpl")
    opts.setdefault("out", "runs/latest")
    opts.setdefault("plot", False)
    return opts


def _write_manifest(out_dir: Path, command: str, opts: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": opts.get("seed"),
        "config": {k: v for k, v in sorted(opts.items())},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def _train_config(opts: dict, mode: TaskMode) -> TrainConfig:
    return TrainConfig(
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        gamma=opts["gamma"],
        eta=opts["eta"],
        n_steps=opts["n_steps"],
        stop_tol=opts["stop_tol"],
        optimizer=opts["optimizer"],
        mode=mode,
        seed=opts["seed"],
        init_from_forward=opts["init_beliefs"] == "forward",
        eta_sparsity=opts.get("eta_sparsity"),
        late_epoch=opts.get("late_epoch"),
        n_steps_late=opts.get("n_steps_late"),
    )


def _load_task(opts: dict):
    """Returns (train_samples, eval_samples, mode, dims, metric_fn)."""
    task = opts["task"]
    if task == "toy":
        t = opts["t"]
        m = opts.get("m")
        alpha = opts.get("alpha", "full")
        rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], 1]))
        if m is None and str(alpha) != "full":
            m = round(float(alpha) * opts["n"])
        if m is None:
            corpus = grammar.generate_corpus(t)
        else:
            if m < 1:
                raise UserError(f"data load gives an empty corpus (M={m})")
            corpus = grammar.generate_corpus(t, m=m, rng=rng)
        samples = grammar.corpus_to_samples(corpus)
        dims = (opts["n_in"], opts["n"], opts["n_out"])

        def metric_fn(model, epoch, mrng):
            return grammar.generation_ratio(model, mrng, length=t) if isinstance(
                model, EnsembleNetwork
            ) else _vanilla_ratio(model, mrng, t)

        return samples, None, TaskMode.PER_STEP, dims, metric_fn

    if task == "mnist":
        for key in ("mnist_images", "mnist_labels"):
            if key not in opts:
                raise UserError(f"--{key.replace('_', '-')} is required for the mnist task")
        try:
            samples = data.load_mnist(opts["mnist_images"], opts["mnist_labels"])
        except (OSError, data.IdxFormatError) as exc:
            raise UserError(str(exc))
        if "limit" in opts:
            samples = samples[: opts["limit"]]
        eval_samples = None
        if "test_images" in opts and "test_labels" in opts:
            eval_samples = data.load_mnist(opts["test_images"], opts["test_labels"])
            if "test_limit" in opts:
                eval_samples = eval_samples[: opts["test_limit"]]
        dims = (opts["n_in"], opts["n"], opts["n_out"])

        def metric_fn(model, epoch, mrng):
            if eval_samples is None:
                return float("nan")
            return data.classification_accuracy(model, eval_samples, mrng)

        mode = (
            TaskMode.FINAL_STEP_ANCHORED
            if opts.get("anchor_final", True)
            else TaskMode.FINAL_STEP
        )
        return samples, eval_samples, mode, dims, metric_fn

    # text
    corpus_path = Path(opts.get("corpus", BUNDLED_CORPUS))
    if not corpus_path.exists():
        raise UserError(f"corpus file not found: {corpus_path}")
    text = corpus_path.read_text(encoding="utf-8")
    try:
        vocab, sequences = data.tokenize(text, min_freq=opts["min_freq"])
    except ValueError as exc:
        raise UserError(str(exc))
    samples = data.text_to_samples(vocab, sequences)
    if "limit" in opts:
        samples = samples[: opts["limit"]]
    split_rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], 2]))
    order = split_rng.permutation(len(samples))
    n_test = max(1, int(len(samples) * opts["test_fraction"]))
    test = [samples[i] for i in order[:n_test]]
    trainset = [samples[i] for i in order[n_test:]]
    n_in = samples[0].inputs.shape[1]
    dims = (n_in, opts["n"], vocab.size)

    def metric_fn(model, epoch, mrng):
        return data.corpus_perplexity(model, test, mrng)

    return trainset, test, TaskMode.PER_STEP, dims, metric_fn


def _vanilla_ratio(net, rng, length):
    letters = []
    for start in range(grammar.ALPHABET):
        seq = [start]
        r_prev = np.zeros(net.w.shape[0])
        for _ in range(length - 1):
            x = data.one_hot(np.array([seq[-1]]), grammar.ALPHABET)[0]
            h, y = vanilla.pc_forward(net, r_prev, x)
            seq.append(int(np.argmax(y)))
            r_prev = h
        letters.append(grammar.correct_letter_ratio(np.array(seq)))
    return float(np.mean(letters))


def cmd_train(opts: dict) -> int:
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, _, mode, dims, metric_fn = _load_task(opts)
    cfg = _train_config(opts, mode)
    rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], 0]))
    _write_manifest(out_dir, "train", opts)

    if opts["engine"] == "mpl":
        model = init_ensemble(*dims, rng=rng)
    else:
        model = vanilla.init_network(*dims, rng=rng)

    def write_artifacts(epoch, metrics_so_far):
        metrics_to_csv(metrics_so_far, out_dir / "metrics.csv")
        data.save_checkpoint(model, None, out_dir / "checkpoint.json",
                             rng_seed=opts["seed"], epoch=epoch + 1)

    if opts["engine"] == "mpl":
        _, metrics = train(model, samples, cfg, metric_fn=metric_fn,
                           epoch_hook=write_artifacts)
    else:
        _, metrics = vanilla.train_vanilla(model, samples, cfg, metric_fn=metric_fn,
                                           epoch_hook=write_artifacts)

    if not metrics:  # zero-epoch run still leaves valid artifacts behind
        write_artifacts(-1, metrics)
    for em in metrics:
        line = f"epoch {em.epoch}: mean_F={em.mean_energy:.4f}"
        if em.metric is not None and np.isfinite(em.metric):
            line += f" metric={em.metric:.4f}"
        print(line)
    if opts["plot"]:
        plots.training_curves(out_dir / "metrics.csv", out_dir / "training_curves.png")
        plots.layer_stat_curves(out_dir / "metrics.csv", out_dir / "layer_stats.png")
        if isinstance(model, EnsembleNetwork):
            plots.hyperparameter_histograms(model, out_dir / "hyperparameters.png")
    print(f"outputs written to {out_dir}")
    return 0


def cmd_eval(opts: dict) -> int:
    ckpt = data.load_checkpoint(opts["checkpoint"])
    task = opts["task"]
    rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], 3]))
    if task == "toy":
        if isinstance(ckpt.model, EnsembleNetwork):
            metric = grammar.generation_ratio(ckpt.model, rng, length=opts["t"])
        else:
            metric = _vanilla_ratio(ckpt.model, rng, opts["t"])
        print(f"correct_letter_ratio {metric:.6f}")
    elif task == "mnist":
        _, eval_samples, _, _, _ = _load_task(opts)
        samples = eval_samples
        if samples is None:
            raise UserError("--test-images/--test-labels are required to eval mnist")
        acc = data.classification_accuracy(ckpt.model, samples, rng)
        print(f"accuracy {acc:.6f}")
    else:
        _, test, _, _, _ = _load_task(opts)
        ppl = data.corpus_perplexity(ckpt.model, test, rng)
        print(f"perplexity {ppl:.6f}")
    return 0


def cmd_sample_text(opts: dict) -> int:
    ckpt = data.load_checkpoint(opts["checkpoint"])
    if not isinstance(ckpt.model, EnsembleNetwork):
        raise UserError("sample-text needs an ensemble checkpoint")
    length = opts.get("length", 11)
    starts_opt = opts.get("starts", "all")
    starts = (
        range(grammar.ALPHABET)
        if starts_opt == "all"
        else [ord(c) - ord("a") for c in starts_opt]
    )
    rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], 4]))
    for start in starts:
        seq = grammar.generate_text(ckpt.model, start, length, rng)
        print(f"{grammar.seq_to_str(seq)}  ratio={grammar.correct_letter_ratio(seq):.3f}")
    return 0


def _parse_alphas(text: str) -> list[float]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UserError("alpha range must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise UserError("alpha step must be positive")
        out = []
        a = start
        while a <= stop + 1e-12:
            out.append(round(a, 12))
            a += step
        return out
    return [float(p) for p in text.split(",") if p]


def cmd_sweep_alpha(opts: dict) -> int:
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    alphas = _parse_alphas(opts.get("alphas", "0.01:0.1:0.01"))
    runs = opts.get("runs", 5)
    cfg = _train_config(opts, TaskMode.PER_STEP)
    _write_manifest(out_dir, "sweep-alpha", opts)
    result = grammar.alpha_sweep(
        alphas,
        runs,
        cfg,
        n=opts["n"],
        t=opts["t"],
        seed=opts["seed"],
        jobs=opts.get("jobs") or os.cpu_count() or 1,
    )
    grammar.sweep_to_csv(result, out_dir / "sweep.csv")
    for row in result.rows:
        print(
            f"alpha={row.alpha:.4f} M={row.m} ratio={row.mean_ratio:.4f} "
            f"+/- {row.std_ratio:.4f} ({row.runs} runs)"
        )
    if "alpha_c" in opts:
        try:
            exponent = grammar.fit_exponent(result, opts["alpha_c"])
        except ValueError as exc:
            # The sweep itself is the artifact; a fit needs more points.
            print(f"exponent fit skipped: {exc}", file=sys.stderr)
        else:
            print(f"growth exponent above alpha_c={opts['alpha_c']}: {exponent:.4f}")
            (out_dir / "exponent.txt").write_text(f"{exponent!r}\n")
    if opts["plot"]:
        plots.sweep_curve(out_dir / "sweep.csv", out_dir / "sweep.png")
    print(f"outputs written to {out_dir}")
    return 0


def cmd_export_stats(opts: dict) -> int:
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = data.load_checkpoint(opts["checkpoint"])
    bins = opts.get("bins", 50)
    _write_manifest(out_dir, "export-stats", opts)
    if isinstance(ckpt.model, EnsembleNetwork):
        layer_params = {
            name: {"m": l.m, "pi": l.pi, "xi": l.xi}
            for name, l in ckpt.model.layers().items()
        }
    else:
        layer_params = {
            "in": {"w": ckpt.model.w_in},
            "rec": {"w": ckpt.model.w},
            "out": {"w": ckpt.model.w_out},
        }
    for lname, params in layer_params.items():
        for pname, arr in params.items():
            counts, edges = np.histogram(arr.ravel(), bins=bins)
            path = out_dir / f"hist_{lname}_{pname}.csv"
            with open(path, "w") as fh:
                fh.write("# edges: " + ",".join(repr(e) for e in edges) + "\n")
                fh.write("bin_lo,bin_hi,count\n")
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    fh.write(f"{lo!r},{hi!r},{int(c)}\n")
    if "metrics" in opts:
        src = Path(opts["metrics"])
        if not src.exists():
            raise UserError(f"metrics file not found: {src}")
        with open(src) as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        keep = [0] + [
            i for i, name in enumerate(header)
            if name.startswith(("mean_abs_m_", "mean_pi_", "mean_xi_"))
        ]
        with open(out_dir / "layer_means.csv", "w") as fh:
            fh.write(",".join(header[i] for i in keep) + "\n")
            for row in rows:
                fh.write(",".join(row[i] for i in keep) + "\n")
    if opts["plot"] and isinstance(ckpt.model, EnsembleNetwork):
        plots.hyperparameter_histograms(
            ckpt.model, out_dir / "hyperparameters.png", bins=bins
        )
    print(f"outputs written to {out_dir}")
    return 0


def cmd_gen_corpus(opts: dict) -> int:
    t = opts.get("t", 11)
    mode = str(opts.get("mode", "full"))
    out_file = Path(opts.get("out_file", "corpus.txt"))
    if mode == "full":
        corpus = grammar.generate_corpus(t)
    else:
        try:
            m = int(mode)
        except ValueError:
            raise UserError(f"--mode must be 'full' or an integer, got {mode!r}")
        rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], 5]))
        corpus = grammar.generate_corpus(t, m=m, rng=rng)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    grammar.write_corpus(out_file, corpus)
    print(f"{len(corpus)} sequences written to {out_file}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample-text": cmd_sample_text,
    "sweep-alpha": cmd_sweep_alpha,
    "export-stats": cmd_export_stats,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        opts = _merge_options(ns)
        return COMMANDS[ns.command](opts)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
