"""Triplet vs contrastive vs softmax under one synthetic budget (slow: three full runs)."""

import argparse
import dataclasses

from keybio.experiment import EndToEndConfig, loss_comparison


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=EndToEndConfig().training.epochs)
    args = ap.parse_args()
    base = EndToEndConfig()
    cfg = dataclasses.replace(base, training=dataclasses.replace(base.training, epochs=args.epochs))
    table = loss_comparison(cfg)
    print("loss," + ",".join(f"G={G}" for G in cfg.galleries))
    for kind, eers in table.items():
        print(kind + "," + ",".join(f"{eers[G]:.2f}" for G in cfg.galleries))


if __name__ == "__main__":
    main()
