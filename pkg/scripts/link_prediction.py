"""TransE and TransH on a small clustered KB: trained vs untrained link prediction.

    python scripts/link_prediction.py --seeds 0 1 2 --epochs 1000
"""
import argparse
import time
from dataclasses import dataclass

import numpy as np

from medkgqa.kb import KnowledgeBase, Triplet, drug, protein
from medkgqa.kg_embed import TransConfig, _init_table, eval_link_prediction, train_embeddings
from medkgqa.trainer import format_table


@dataclass
class KBShape:
    per_kind: int = 50
    triplets: int = 200
    clusters: int = 10
    actions: tuple[str, ...] = ("inhibitor", "agonist")


def clustered_kb(shape: KBShape, seed: int) -> KnowledgeBase:
    rng = np.random.default_rng(seed)
    cluster = np.arange(shape.per_kind) % shape.clusters
    pick = lambda k: int(rng.choice(np.flatnonzero(cluster == k)))
    act = shape.actions
    trips = set()
    for i in range(shape.per_kind):
        trips.add(Triplet(protein(f"P{i:03d}"), act[i % len(act)], drug(f"DB{pick(cluster[i]):03d}")))
        trips.add(Triplet(protein(f"P{pick(cluster[i]):03d}"), act[i % len(act)], drug(f"DB{i:03d}")))
    while len(trips) < shape.triplets:
        k = rng.integers(shape.clusters)
        trips.add(Triplet(protein(f"P{pick(k):03d}"), act[rng.integers(len(act))], drug(f"DB{pick(k):03d}")))
    return KnowledgeBase(trips)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=1000)
    ap.add_argument("--models", nargs="+", default=["transe", "transh"])
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        kb = clustered_kb(KBShape(), seed)
        for model in args.models:
            config = TransConfig(model=model, dim=args.dim, epochs=args.epochs)
            start = time.perf_counter()
            table, curve = train_embeddings(kb, config, np.random.default_rng([seed, 1]))
            seconds = time.perf_counter() - start
            untrained = _init_table(kb, config, np.random.default_rng([seed, 2]))
            for label, t in (("trained", table), ("untrained", untrained)):
                filt = eval_link_prediction(t, kb, filtered=True)
                raw = eval_link_prediction(t, kb, filtered=False)
                rows.append({"seed": seed, "model": model, "state": label, "mrr": filt.mrr, "mr": filt.mr,
                             "hits@1": filt.hits_at_1, "hits@10": filt.hits_at_10, "raw_hits@10": raw.hits_at_10,
                             "final_loss": curve[-1] if label == "trained" else float("nan"), "seconds": seconds})
    print(format_table(rows))


if __name__ == "__main__":
    main()
