"""Dev accuracy as a function of the number of reasoning hops.

    python scripts/hop_sweep.py --seed 0 --hops 1 3 5 6
"""
import argparse
import logging

from medkgqa.corpus import SynthSpec, synth_generate
from medkgqa.trainer import TrainConfig, format_table, hop_sweep
from run_synthetic import Experiment, knowledge


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hops", type=int, nargs="+", default=[3, 4, 5, 6])
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    exp = Experiment()
    kb, samples, _ = synth_generate(SynthSpec(n_samples=exp.n_train + exp.n_dev, seed=args.seed))
    transe, transh = knowledge(kb, exp, args.seed)
    config = TrainConfig(hidden=64, knowledge_dim=32, epochs=args.epochs, seed=args.seed)
    print(format_table(hop_sweep(config, kb, samples[:exp.n_train], samples[exp.n_train:], args.hops,
                                 transe, transh)))


if __name__ == "__main__":
    main()
