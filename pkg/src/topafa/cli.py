"""Command-line entry point: ``topafa {synth,train,eval,zf,bench}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .activations import ActivationSpec
from .config import ConfigError, RunConfig, defaults, load_config
from .io import (CHECKPOINT_VERSION, DEFAULT_MEMORY_CAP, EMBEDDING_VERSION, FormatError, config_hash,
                 embedding_info, load_checkpoint, load_embeddings, read_embeddings, save_checkpoint,
                 write_csv, write_json, write_synth)
from .metrics import epsilon_jl, evaluate, violin_summary, zf_export
from .model import init_params
from .numerics import make_rng
from .synth import gen_dataset
from .training import LOG_COLUMNS, AdamState, NumericalAbort, adam_step, backward, minibatches, run_forward, train

log = logging.getLogger("topafa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topafa", description="Sparse autoencoders with top-AFA and AFA diagnostics.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--print-defaults", action="store_true", help="print the default config JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic superposition dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an SAE on an embedding file")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="compute the metrics report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")

    z = sub.add_parser("zf", help="export ZF-plot data")
    z.add_argument("--ckpt", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--epsilon", default="jl", help="a number, 'jl' or 'dict'")
    z.add_argument("--out", required=True)
    z.add_argument("--config")

    b = sub.add_parser("bench", help="time one training iteration per activation")
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--out", help="optional JSON output")

    for sp in (s, t, e, z, b):
        sp.add_argument("--print-defaults", action="store_true", help=argparse.SUPPRESS)
    return p


def _manifest(out_path: Path, command: str, cfg: RunConfig, seed, extra: dict | None = None):
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "seed": seed,
        "format_versions": {"embedding": EMBEDDING_VERSION, "checkpoint": CHECKPOINT_VERSION},
        "package_version": __version__,
    }
    doc.update(extra or {})
    write_json(out_path, doc)


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    truth = gen_dataset(cfg.synth)
    out = write_synth(args.out, truth)
    _manifest(out / "manifest.json", "synth", cfg, cfg.synth.seed,
              {"true_epsilon": truth.true_epsilon})
    log.info("wrote %d samples (d=%d, h=%d, eps=%.4f) to %s", len(truth.codes), cfg.synth.d,
             cfg.synth.h, truth.true_epsilon, out)
    return EXIT_OK


def _file_stream(path, batch_size: int):
    while True:
        got = False
        for batch in read_embeddings(path, batch_size):
            if batch.B == batch_size:
                got = True
                yield batch
        if not got:
            return


def cmd_train(args) -> int:
    cfg = _config(args.config)
    d, n = embedding_info(args.data)
    tc = cfg.train
    if n < tc.batch_size:
        raise FormatError(f"{args.data} has {n} rows, fewer than batch_size={tc.batch_size}")
    if n * d * 4 <= DEFAULT_MEMORY_CAP:
        stream = minibatches(load_embeddings(args.data), tc.batch_size, seed=tc.seed)
    else:
        stream = _file_stream(args.data, tc.batch_size)

    out = Path(args.out)
    meta = {"config": tc.to_dict(), "data": str(args.data)}

    def checkpoint(step, params, spec):
        save_checkpoint(out / f"step_{step:06d}", params, spec, {**meta, "iterations_run": step},
                        tie_pre_bias=tc.tie_pre_bias, seed=tc.seed)

    t0 = time.perf_counter()
    result = train(stream, tc, cfg.activation, on_checkpoint=checkpoint)
    elapsed = time.perf_counter() - t0
    save_checkpoint(out, result.params, result.spec, {**meta, "iterations_run": result.iterations_run},
                    tie_pre_bias=tc.tie_pre_bias, seed=tc.seed)
    write_csv(out / "train_log.csv", LOG_COLUMNS, result.log)
    _manifest(out / "manifest.json", "train", cfg, tc.seed,
              {"iterations_run": result.iterations_run, "wall_seconds": elapsed})
    if result.log:
        last = result.log[-1]
        log.info("trained %d iterations: nmse=%.4f mean_l0=%.1f", result.iterations_run, last["nmse"], last["mean_l0"])
    return EXIT_OK


def _limited(batches, max_inputs):
    if max_inputs is None:
        yield from batches
        return
    left = max_inputs
    for b in batches:
        if left <= 0:
            return
        yield b.rows[:left]
        left -= b.B


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    params, spec, _ = load_checkpoint(args.ckpt)
    batches = _limited(read_embeddings(args.data, cfg.eval.batch_size), cfg.eval.max_inputs)
    report, arrays = evaluate(params, spec, batches)
    out = Path(args.out)
    write_json(out / "report.json", report.to_dict())
    series = {"nmse": arrays.nmse_per_sample, "epsilon_lbo": arrays.epsilon_lbo}
    for name, values in series.items():
        values = values[np.isfinite(values)]
        if values.size == 0:
            continue
        summary = violin_summary(values, trim=cfg.eval.trim)
        write_csv(out / f"violin_{name}_stats.csv", ["stat", "value"], summary.stats().items())
        edges = summary.bin_edges
        write_csv(out / f"violin_{name}_hist.csv", ["bin_lo", "bin_hi", "count"],
                  [(edges[i], edges[i + 1], c) for i, c in enumerate(summary.counts)])
    _manifest(out / "manifest.json", "eval", cfg, None, {"checkpoint": str(args.ckpt), "data": str(args.data)})
    log.info("eps_dict=%.4f eps_jl=%.4f nmse=%.4f l0=%.2f violations=%d", report.epsilon_dict,
             report.epsilon_jl, report.nmse, report.l0_mean, report.afa_bound_violations)
    return EXIT_OK


def _parse_epsilon(raw: str, params) -> float:
    if raw == "jl":
        return epsilon_jl(params.h, params.d)
    if raw == "dict":
        from .metrics import epsilon_dict
        return epsilon_dict(params.W_dec)
    try:
        eps = float(raw)
    except ValueError:
        raise UsageError(f"--epsilon must be a number, 'jl' or 'dict', got {raw!r}") from None
    if not 0 <= eps < 1:
        raise UsageError(f"--epsilon must lie in [0, 1), got {eps}")
    return eps


def cmd_zf(args) -> int:
    cfg = _config(args.config)
    params, spec, _ = load_checkpoint(args.ckpt)
    eps = _parse_epsilon(args.epsilon, params)
    # epsilon_jl can exceed 1 for small d; the band is then unbounded above
    eps_band = min(eps, np.nextafter(1.0, 0.0))
    batches = _limited(read_embeddings(args.data, cfg.eval.batch_size), cfg.eval.max_inputs)
    report, arrays = evaluate(params, spec, batches)
    rows = zf_export(arrays.z_cent_norm, arrays.f_eff_norm, eps_band, params.h)
    out = Path(args.out)
    write_csv(out, ["z_norm", "f_norm", "bound_lo", "bound_hi"], rows)
    _manifest(out.with_name(out.stem + ".manifest.json"), "zf", cfg, None,
              {"epsilon": eps, "epsilon_source": args.epsilon, "checkpoint": str(args.ckpt)})
    return EXIT_OK


def run_bench(data: np.ndarray, cfg: RunConfig) -> dict[str, float]:
    """Median wall time (seconds) of one forward+backward+Adam iteration per activation."""
    bc = cfg.bench
    d = data.shape[1]
    h = cfg.train.latent_dim(d)
    batches = minibatches(data, bc.batch_size, seed=bc.seed)
    batch_list = [next(batches) for _ in range(bc.warmup + bc.iterations)]
    out = {}
    for kind in bc.kinds:
        spec = ActivationSpec(kind, k=bc.k if kind in ("topk", "batch_topk") else None)
        params = init_params(make_rng(bc.seed), d, h)
        params.b_dec = batch_list[0].mean(axis=0)
        state = AdamState()
        times = []
        for i, batch in enumerate(batch_list):
            t0 = time.perf_counter()
            fp = run_forward(batch, params, spec, cfg.train)
            grads, _ = backward(batch, params, spec, cfg.train, fp=fp)
            params = adam_step(params, grads, state, cfg.train)
            if i >= bc.warmup:
                times.append(time.perf_counter() - t0)
        out[kind] = statistics.median(times)
    return out


def cmd_bench(args) -> int:
    cfg = _config(args.config)
    data = load_embeddings(args.data)
    if data.shape[0] < cfg.bench.batch_size:
        raise FormatError(f"{args.data} has {data.shape[0]} rows, fewer than bench batch_size")
    times = run_bench(data, cfg)
    ref = times.get("topk")
    print(f"{'activation':<12} {'median ms/iter':>15} {'vs topk':>8}")
    for kind, t in times.items():
        ratio = f"{t / ref:.2f}x" if ref else "-"
        print(f"{kind:<12} {t * 1e3:>15.3f} {ratio:>8}")
    if args.out:
        out = Path(args.out)
        write_json(out, {"median_seconds": times, "d": data.shape[1], "h": cfg.train.latent_dim(data.shape[1]),
                         "batch_size": cfg.bench.batch_size, "iterations": cfg.bench.iterations})
        _manifest(out.with_name(out.stem + ".manifest.json"), "bench", cfg, cfg.bench.seed)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "zf": cmd_zf, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.print_defaults:
            print(json.dumps(defaults(), indent=2, sort_keys=True))
            return EXIT_OK
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
