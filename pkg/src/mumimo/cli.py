"""Command line entry point: ``mumimo <subcommand> [options]``.

Exit codes: 0 success, 1 usage, 2 configuration, 3 I/O, 4 numerical
failure (non-finite values, singular matrices, failed gradient checks).
"""
from __future__ import annotations

import argparse
import os
import sys

EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--deterministic", action="store_true",
                        help="single worker, no wall-clock columns in emitted CSVs")

    p = _Parser(prog="mumimo", description="Learned FDD multi-user MIMO feedback and precoding")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    s = sub.add_parser("gen-data", parents=[common], help="draw channels and write a dataset file")
    s.add_argument("-n", type=int, default=None, help="number of samples (default n_test)")
    sub.add_parser("train", parents=[common], help="train one model per SNR")
    s = sub.add_parser("eval", parents=[common], help="evaluate the configured methods")
    s.add_argument("--checkpoint", help="checkpoint path, may contain {snr}")
    s = sub.add_parser("baseline", parents=[common], help="classical limited-feedback pipeline")
    s.add_argument("--data", help="dataset file written by gen-data")
    s = sub.add_parser("compare", parents=[common], help="learned vs classical under common random numbers")
    s.add_argument("--checkpoint", help="checkpoint path, may contain {snr}")
    s = sub.add_parser("timing", parents=[common], help="per-instance run time of networks and WMMSE")
    s.add_argument("--checkpoint", help="checkpoint to time (random init if absent)")
    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--threshold", type=float, default=1e-4)
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args, required: bool = True):
    from . import harness as hz

    if args.config is None:
        if required:
            raise UsageError(f"{args.command}: --config is required")
        cfg = hz.ExperimentConfig(K=2, B=2)
    else:
        cfg = hz.parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    os.makedirs(cfg.out, exist_ok=True)
    return cfg


def _emit(rows, path, columns=None) -> None:
    from . import harness as hz

    hz.write_csv(rows, path, columns or hz.CSV_COLUMNS)
    for r in rows:
        if "sum_rate_bps_hz" in r:
            print(f"{r['method']:>18s}  snr={r['snr_db']:g} dB  {r['sum_rate_bps_hz']:.4f} "
                  f"+- {r['stderr']:.4f} bps/Hz")
    print(f"wrote {path}")


def cmd_gen_data(args) -> int:
    from . import harness as hz
    from .channels import save_batch

    cfg = _load_config(args)
    batch = hz.gen_data(cfg, args.n or cfg.n_test, cfg.test_seed)
    path = cfg.data or os.path.join(cfg.out, "data.bin")
    save_batch(batch, path)
    print(f"wrote {batch.n} samples to {path}")
    return 0


def cmd_train(args) -> int:
    from . import harness as hz
    from . import neural as nn

    cfg = _load_config(args)
    for snr in cfg.snr_db:
        log = os.path.join(cfg.out, f"train_snr{snr:g}.csv")
        params, res = hz.train(cfg, snr, log_path=log, deterministic=args.deterministic)
        path = cfg.checkpoint_path(snr)
        nn.save_params(params, path)
        print(f"snr={snr:g} dB  stage rates {[round(r, 4) for r in res.rates]}  "
              f"converged={res.converged}  -> {path}")
    return 0


def cmd_eval(args) -> int:
    from . import harness as hz

    cfg = _load_config(args)
    rows = hz.run_eval(cfg)
    _emit(rows, os.path.join(cfg.out, "eval.csv"))
    return 0


def cmd_baseline(args) -> int:
    from . import harness as hz
    from .channels import load_batch

    cfg = _load_config(args)
    data = args.data or cfg.data
    ts = hz.test_set_from_batch(cfg, load_batch(data)) if data else None
    rows = hz.run_eval(cfg, methods=("baseline", "wmmse"), test_set=ts)
    _emit(rows, os.path.join(cfg.out, "baseline.csv"))
    return 0


def cmd_compare(args) -> int:
    from . import harness as hz

    cfg = _load_config(args)
    methods = cfg.methods
    if not any(m in hz.LEARNED for m in methods):
        methods = ("proposed",) + tuple(methods)
    rows = hz.run_eval(cfg, methods=methods)
    _emit(rows, os.path.join(cfg.out, "compare.csv"))
    return 0


def cmd_timing(args) -> int:
    from . import harness as hz
    from . import neural as nn

    cfg = _load_config(args)
    params = nn.load_params(args.checkpoint) if args.checkpoint else None
    rows = hz.run_timing(cfg, params)
    path = os.path.join(cfg.out, "timing.csv")
    hz.write_csv(rows, path, hz.TIMING_COLUMNS)
    for r in rows:
        print(f"{r['method']:>18s}  snr={r['snr_db']:g} dB  {r['mean_time_ms']:.3f} ms")
    print(f"wrote {path}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(threshold=args.threshold)
    bad = 0
    for name, rep in reports:
        status = "ok" if rep.passed else "FAIL"
        worst = max(rep.max_rel_err.values(), default=0.0)
        print(f"{status:4s} {name:28s} max rel err {worst:.2e}")
        bad += not rep.passed
    print(f"{len(reports) - bad}/{len(reports)} checks passed (threshold {args.threshold:g})")
    return EXIT_NUMERIC if bad else 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline,
    "compare": cmd_compare, "timing": cmd_timing, "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see --help")
        _set_threads(args.threads)
        from .autodiff import ContractError
        from .channels import FormatError
        from .complex_tensor import SingularMatrixError
        from .harness import ConfigError
        from .training import TrainingError
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, SingularMatrixError, ContractError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
