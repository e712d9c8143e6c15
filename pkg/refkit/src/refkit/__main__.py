"""Batch entry points: python -m refkit train|finetune|make-data."""

import argparse

from .data import write_synthetic_dataset
from .train import finetune_pruned, train_and_export


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="refkit")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-data", help="write a synthetic IDX dataset")
    mk.add_argument("directory")
    mk.add_argument("--train", type=int, default=512)
    mk.add_argument("--test", type=int, default=1000)
    mk.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train and export a weight container")
    tr.add_argument("dataset_dir")
    tr.add_argument("--out", required=True)
    tr.add_argument("--activations", help="also dump probe activations here")
    tr.add_argument("--metadata", help="JSON metadata path")
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--seed", type=int, default=0)

    ft = sub.add_parser("finetune", help="fine-tune a pruned container under its mask")
    ft.add_argument("weights")
    ft.add_argument("mask")
    ft.add_argument("dataset_dir")
    ft.add_argument("--out", required=True)
    ft.add_argument("--epochs", type=int, default=10)
    ft.add_argument("--batch-size", type=int, default=16)
    ft.add_argument("--lr", type=float, default=1e-3)
    ft.add_argument("--seed", type=int, default=0)

    args = p.parse_args(argv)
    if args.command == "make-data":
        paths = write_synthetic_dataset(args.directory, args.train, args.test, args.seed)
        for name, path in paths.items():
            print(f"{name}={path}")
        return 0
    if args.command == "train":
        out = train_and_export(
            args.dataset_dir,
            args.out,
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            seed=args.seed,
            activations_path=args.activations,
            metadata_path=args.metadata,
        )
        for key, value in out["metadata"].items():
            print(f"{key}={value}")
        return 0
    out = finetune_pruned(
        args.weights,
        args.mask,
        args.dataset_dir,
        args.out,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    print(f"test_accuracy={out['test_accuracy']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
