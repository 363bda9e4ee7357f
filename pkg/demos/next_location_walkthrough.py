"""Small end-to-end run through the library API, about two and a half minutes on one core.

Builds a synthetic city, simulates commuters, trains the next-location task,
compares against the frequency baseline, then looks at what the spatial
embedding learned about geography.

    python demos/next_location_walkthrough.py --agents 80 --days 7 --epochs 300
"""

import argparse
import time

import numpy as np

from pmt.embed_analysis import distance_correlation, region_rows, similarity_matrix
from pmt.evaluation import eval_fbm_next_location, eval_next_location, fbm_fit
from pmt.geo_vocab import build_grid_vocab
from pmt.nn import ModelConfig, TrainingConfig
from pmt.pretrain import train
from pmt.seeding import derive_seed
from pmt.synth import EprParams, simulate_population
from pmt.temporal import EncodingSpec
from pmt.trajectory import filter_by_occupancy, split_users, temporal_occupancy, week_phase

START = 1_578_268_800  # Monday 2020-01-06 00:00 UTC


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--agents", type=int, default=80)
    ap.add_argument("--days", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    world = build_grid_vocab((0, 0, 3000, 3000), 500, derive_seed(args.seed, "world"))
    print(f"world: {world.n_regions} regions on a 6x6 grid")

    span = (START, START + args.days * 86_400)
    seqs = simulate_population(world, EprParams(), args.agents, span,
                               derive_seed(args.seed, "synth"), 0.75,
                               phase_offset=week_phase(START))
    occ = np.mean([temporal_occupancy(s) for s in seqs])
    print(f"simulated {len(seqs)} agents x {len(seqs[0])} windows, mean occupancy {occ:.2f}")

    kept = filter_by_occupancy(seqs, 0.5)
    train_seqs, test_seqs = split_users(kept, 2 / 3, derive_seed(args.seed, "split"))
    print(f"kept {len(kept)} users: {len(train_seqs)} train, {len(test_seqs)} test")

    mc = ModelConfig(D=32, H=64, L=2, A=2, V_out=world.n_regions, embedding_init_std=0.1)
    tc = TrainingConfig(warmup_steps=200, batch_size=8, epochs=args.epochs, context_length=48,
                        seed=derive_seed(args.seed, "pretrain", "next"))
    encoding = EncodingSpec(mc.D, phase_offset=week_phase(START))
    t0 = time.perf_counter()
    result = train("next", train_seqs, mc, tc, encoding=encoding, origin_epoch=START)
    losses = result.epoch_losses
    print(f"trained {len(result.log_rows)} steps in {time.perf_counter() - t0:.0f}s, "
          f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")

    ckpt = result.checkpoint
    reports = eval_next_location(ckpt, test_seqs, model_id="pmt", origin_epoch=START)
    fbm = fbm_fit(test_seqs, world.n_regions, encoding.phase_offset, origin_epoch=START)
    reports += eval_fbm_next_location(fbm, test_seqs)
    print(f"\n{'model':<6}{'stratum':<10}{'acc@1':>8}{'acc@3':>8}")
    for r in reports:
        print(f"{r.model_id:<6}{r.stratum:<10}{r.metrics['acc@1']:>8.3f}{r.metrics['acc@3']:>8.3f}")

    E = region_rows(ckpt.params["spatial_embedding"], world.n_regions)
    pearson, spearman = distance_correlation(similarity_matrix(E), world.centroids())
    print(f"\nembedding similarity vs distance: pearson {pearson:+.3f}, spearman {spearman:+.3f}")
    print("(negative means nearby regions ended up with similar embeddings)")


if __name__ == "__main__":
    main()
