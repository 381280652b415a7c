"""Command-line interface: synth | train | denoise | eval | report.

Config precedence is flags > JSON config file > built-in defaults. The
--threads option (or PULSE_CSC_THREADS) is applied to the BLAS thread
environment before numpy is imported, which is why the heavy imports happen
inside main().

Exit codes: 0 success, 2 configuration or schema problems, 3 missing input
files, 4 sampling-rate mismatch, 1 other failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_ALLOWED_KEYS = {
    "synth": {
        "out", "n_subjects", "segments_per_subject", "seed", "fs", "duration_s",
        "zero_phase", "filter_order", "band_low_hz", "band_high_hz", "stop_atten_db",
    },
    "train": {
        "data", "out", "history_out", "n_kernels", "kernel_len", "n_folds", "lam",
        "l2_w", "lr", "batch_size", "patience", "max_epochs", "seed", "init",
        "smooth_beta", "split_seed", "split_fractions",
    },
    "denoise": {
        "model", "data", "out", "window_s", "step_s", "threads", "preprocess",
        "resample", "zero_phase", "fs", "filter_order", "band_low_hz",
        "band_high_hz", "stop_atten_db",
    },
    "eval": {"data", "out_dir", "window_mode", "window_s", "step_s", "center_snr"},
    "report": {"segments", "out_dir"},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulse-csc",
        description="Learned convolutional sparse coding for pulse-signal denoising",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with config values")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a corrupted synthetic corpus")
    common(p)
    p.add_argument("--out", help="output dataset (JSON lines)")
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--segments-per-subject", type=int)
    p.add_argument("--fs", type=float)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--zero-phase", action="store_true", default=None)

    p = sub.add_parser("train", help="train the unfolded model on a corpus")
    common(p)
    p.add_argument("--data", help="training dataset (JSON lines)")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--history-out", help="training history CSV path")
    p.add_argument("--n-kernels", type=int)
    p.add_argument("--kernel-len", type=int)
    p.add_argument("--n-folds", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--l2-w", type=float, dest="l2_w")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--init", choices=["ista", "random"])
    p.add_argument("--smooth-beta", type=float)
    p.add_argument("--split-seed", type=int)

    p = sub.add_parser("denoise", help="denoise dataset records with a checkpoint")
    common(p)
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--data", help="dataset to denoise (JSON lines)")
    p.add_argument("--out", help="output dataset with denoised samples")
    p.add_argument("--window-s", type=float)
    p.add_argument("--step-s", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--preprocess", action="store_true", default=None,
                   help="band-pass raw input before denoising")
    p.add_argument("--resample", action="store_true", default=None,
                   help="resample records whose fs differs from the model rate")
    p.add_argument("--zero-phase", action="store_true", default=None)
    p.add_argument("--fs", type=float, help="model sampling rate (default 125)")

    p = sub.add_parser("eval", help="score denoised records against references")
    common(p)
    p.add_argument("--data", help="dataset with clean/noisy/denoised samples")
    p.add_argument("--out-dir", help="directory for metrics.json and segments.csv")
    p.add_argument("--window-mode", choices=["segment", "sliding"])
    p.add_argument("--window-s", type=float)
    p.add_argument("--step-s", type=float)
    p.add_argument("--no-center-snr", action="store_false", dest="center_snr",
                   default=None, help="score raw signals instead of mean-removed")

    p = sub.add_parser("report", help="derive plot-ready CSVs from segments.csv")
    common(p)
    p.add_argument("--segments", help="segments.csv from eval")
    p.add_argument("--out-dir", help="directory for boxplot/agreement CSVs")
    return parser


def _thread_request(argv) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1]
    return os.environ.get("PULSE_CSC_THREADS")


def _apply_thread_env(argv) -> None:
    n = _thread_request(argv)
    if not n:
        return
    for var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, str(n))


def _merge_config(args: argparse.Namespace, command: str, config_error) -> dict:
    allowed = _ALLOWED_KEYS[command]
    cfg: dict = {}
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        with open(args.config) as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as exc:
                raise config_error(f"config file {args.config}: invalid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise config_error(f"config file {args.config} must hold a JSON object")
        unknown = sorted(set(loaded) - allowed)
        if unknown:
            raise config_error(
                f"config file {args.config} has unknown keys for {command}: {unknown}"
            )
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None and key in allowed:
            cfg[key] = value
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _apply_thread_env(argv)

    # heavy imports only after the thread environment is settled
    from . import pipeline
    from .errors import (
        ConfigError,
        FsMismatchError,
        PulseCscError,
        SchemaError,
    )

    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args, args.command, ConfigError)
        metrics = pipeline.run_command(args.command, cfg)
        print(json.dumps(metrics, indent=2, sort_keys=True, default=float))
        return 0
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 3
    except FsMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except PulseCscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
