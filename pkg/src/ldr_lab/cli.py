"""``ldr-lab`` command line."""

import argparse
import json
import logging
import os
import sys

from .harness import ConfigError, RunConfig, ablate, load_datasets, sweep, train
from .noise import corrupt_dataset, write_noise_audit


def _values(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok:
            out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    if not out:
        raise argparse.ArgumentTypeError("empty value list")
    return out


def _seeds(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="ldr-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run and write metrics.csv")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the last completed epoch")

    a = sub.add_parser("ablate", help="loss-term and target-construction ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=_seeds, default=None)
    a.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("sweep", help="one-parameter sweep over several seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, choices=["alpha", "beta", "tau", "delta", "batch_size"])
    s.add_argument("--values", required=True, type=_values)
    s.add_argument("--seeds", type=_seeds, default=None)
    s.add_argument("--workers", type=int, default=1)

    n = sub.add_parser("inject-noise", help="write noise_audit.csv without training")
    n.add_argument("--config", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_json(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "train":
            history, ckpt = train(cfg, resume=args.resume)
            last = history[-1]
            print(f"epochs={last.epoch} test_accuracy={last.test_accuracy:.4f} "
                  f"memory_accuracy={last.memory_accuracy:.4f} checkpoint={ckpt}")
        elif args.command == "ablate":
            for table, name, mean, std, accs in ablate(cfg, seeds=args.seeds, workers=args.workers):
                print(f"{table:20s} {name:24s} {mean:.4f} +- {std:.4f}  (n={len(accs)})")
        elif args.command == "sweep":
            for row in sweep(cfg, args.param, args.values, seeds=args.seeds, workers=args.workers):
                print(f"{args.param}={row['value']}: {float(row['mean_accuracy']):.4f} "
                      f"+- {float(row['std_accuracy']):.4f}")
        elif args.command == "inject-noise":
            train_ds, _, _ = load_datasets(cfg.dataset)
            noisy, cm = corrupt_dataset(train_ds, cfg.noise)
            os.makedirs(cfg.output_dir, exist_ok=True)
            path = os.path.join(cfg.output_dir, "noise_audit.csv")
            write_noise_audit(noisy, path)
            print(json.dumps({"noise_audit": path, "flip_fraction": noisy.flip_fraction,
                              "corruption_matrix": cm.entries.tolist(), "warnings": cm.warnings}))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
