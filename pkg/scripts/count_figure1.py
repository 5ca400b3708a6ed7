"""Trainable-parameter counts for the 15 setups on the 1B preset, plus the base model."""

from peftkit.adapters import count_trainable
from peftkit.cli import TABLE1_SETUPS
from peftkit.model import PAPER_1B, count_base_params


def main():
    base = count_base_params(PAPER_1B)
    print(f"base model: {base['total']:,} parameters")
    for name, cfg in TABLE1_SETUPS.items():
        n = count_trainable(cfg, PAPER_1B)["total"]
        print(f"{name:<20} {n:>13,}  {n / base['total']:8.4%}")


if __name__ == "__main__":
    main()
