"""Synthetic end-to-end run: 150 typists, triplet LSTM on 100, EER on 50 held out.

    python3 scripts/synthetic_e2e.py [--epochs 12] [--lr 0.002] [--out run.txt]
"""

import argparse
import dataclasses
import logging

from keybio.experiment import EndToEndConfig, run_end_to_end, summarize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    base = EndToEndConfig()
    ap.add_argument("--epochs", type=int, default=base.training.epochs)
    ap.add_argument("--batches-per-epoch", type=int, default=base.training.batches_per_epoch)
    ap.add_argument("--batch-size", type=int, default=base.training.batch_size)
    ap.add_argument("--lr", type=float, default=base.training.learning_rate)
    ap.add_argument("--loss", default=base.training.loss)
    ap.add_argument("--seed", type=int, default=base.synth.seed, help="data seed")
    ap.add_argument("--out", help="also write the summary here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = dataclasses.replace(
        base,
        synth=dataclasses.replace(base.synth, seed=args.seed),
        training=dataclasses.replace(
            base.training, epochs=args.epochs, batches_per_epoch=args.batches_per_epoch,
            batch_size=args.batch_size, learning_rate=args.lr, loss=args.loss,
        ),
    )
    result = run_end_to_end(cfg)
    text = summarize(result)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n" + result.history.to_csv())


if __name__ == "__main__":
    main()
