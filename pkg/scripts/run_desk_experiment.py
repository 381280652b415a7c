#!/usr/bin/env python3
"""Desk-scale end-to-end run: synthesize, train, denoise held-out subjects, score.

Prints per-epoch progress and the headline test metrics (SNR gain, heart-rate
error ratio). Useful both as a smoke test of the full pipeline and as the
reference recipe behind the packaged acceptance thresholds.
"""

import argparse
import json
import time

import numpy as np

from pulse_csc import (
    TrainConfig,
    denoise_stream,
    evaluate_records,
    init_ista,
    make_dataset,
    split_by_subject,
    train,
)
from pulse_csc.csc import Dictionary
from pulse_csc.pipeline import EvalConfig, from_segment_record
from pulse_csc.signals import Signal


def stack_pairs(records):
    noisy = np.stack([r.noisy.samples for r in records])
    clean = np.stack([r.clean.samples for r in records])
    return noisy, clean


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=160)
    ap.add_argument("--segments", type=int, default=10)
    ap.add_argument("--corpus-seed", type=int, default=2026)
    ap.add_argument("--kernels", type=int, default=8)
    ap.add_argument("--kernel-len", type=int, default=25)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--lam", type=float, default=0.05)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--l2-w", type=float, default=1e-3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="optional path for the metrics JSON")
    args = ap.parse_args()

    t0 = time.perf_counter()
    records = make_dataset(args.subjects, args.segments, seed=args.corpus_seed)
    train_recs, val_recs, test_recs = split_by_subject(
        records, fractions=(0.70, 0.15, 0.15), seed=0
    )
    print(
        f"corpus: {len(records)} segments; "
        f"{len({r.subject_id for r in train_recs})}/"
        f"{len({r.subject_id for r in val_recs})}/"
        f"{len({r.subject_id for r in test_recs})} subjects "
        f"({time.perf_counter() - t0:.1f}s)"
    )

    n = len(records[0].clean)
    rng = np.random.default_rng(args.seed)
    model, trunc = init_ista(
        Dictionary.random(args.kernels, args.kernel_len, rng), args.lam, n, args.folds
    )
    print(f"init: {args.kernels} kernels x {args.kernel_len} taps, "
          f"{args.folds} folds, truncated energy fraction {trunc:.2e}")

    cfg = TrainConfig(
        lam=args.lam,
        l2_w=args.l2_w,
        lr=args.lr,
        batch_size=args.batch_size,
        patience=args.patience,
        max_epochs=args.epochs,
        seed=args.seed,
    )
    t1 = time.perf_counter()
    result = train(model, stack_pairs(train_recs), stack_pairs(val_recs), cfg)
    for row in result.history:
        print(
            f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  "
            f"val {row['val_loss']:.4f}  sparsity {row['sparsity']:.3f}  "
            f"{row['wall_ms'] / 1e3:.1f}s"
        )
    print(f"best epoch {result.best_epoch} (val {result.best_val_loss:.4f}); "
          f"training {time.perf_counter() - t1:.1f}s")

    t2 = time.perf_counter()
    ds_records = []
    for rec in test_recs:
        d = from_segment_record(rec)
        noisy = Signal(d.samples_noisy, d.fs)
        d.samples_denoised = denoise_stream(result.model, noisy).signal.samples
        ds_records.append(d)
    report = evaluate_records(ds_records, EvalConfig())
    m = report.metrics
    print(f"eval ({time.perf_counter() - t2:.1f}s):")
    print(f"  SNR before {m['snr_before_db']['mean']:+.2f} dB  "
          f"after {m['snr_after_db']['mean']:+.2f} dB  "
          f"gain {m['snr_gain_db']:+.2f} dB")
    print(f"  MAE_HR before {m['mae_hr_before_bpm']['mean']:.2f} bpm  "
          f"after {m['mae_hr_after_bpm']['mean']:.2f} bpm  "
          f"ratio {m['mae_ratio']:.3f}")
    print(f"total {time.perf_counter() - t0:.1f}s")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(m, f, indent=2, sort_keys=True, default=float)
            f.write("\n")


if __name__ == "__main__":
    main()
