"""More epochs per rollout vs. the norm of penultimate pre-activations.

Trains on the dense chain with K = 1 and K = 32 optimization epochs per
rollout, then K = 32 with the feature-space penalty on the last hidden layer.
The logged pre-activation norm grows faster with more epochs; the penalty
pulls it back down. Expect roughly a minute per K=32 run at the default budget.

    python demos/epochs_and_pfo.py [--steps 50000] [--seeds 2]
"""

import argparse
import time

from ppo_repr import ppo
from ppo_repr.diagnostics import window_aggregate
from ppo_repr.environments import EnvConfig, chain_optimal_return
from ppo_repr.ppo import PpoConfig, TrainConfig


def run(epochs: int, pfo: str, seed: int, steps: int) -> dict:
    cfg = TrainConfig(env=EnvConfig(kind="chain_dense"), ppo=PpoConfig(epochs=epochs, pfo_scope=pfo),
                      total_steps=steps, seed=seed, capacity_every=0.0)
    recs = list(ppo.train(cfg))
    steps_logged = [r.step for r in recs]
    length = cfg.n_batches * cfg.ppo.batch_size
    tail = lambda key: window_aggregate([getattr(r, key) for r in recs], steps_logged, length)
    return {
        "return": tail("episode_return_mean"),
        "preact": tail("actor_preactivation_norm"),
        "dead": tail("actor_dead_neurons"),
        "srank": window_aggregate([r.actor_rank["srank"] for r in recs], steps_logged, length),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=50_000)
    parser.add_argument("--seeds", type=int, default=2)
    args = parser.parse_args()
    print(f"optimal return {chain_optimal_return(EnvConfig(kind='chain_dense')):.4f}")
    print(f"{'variant':<12}{'seed':>5}{'return':>9}{'preact':>9}{'dead':>7}{'srank':>7}{'time':>7}")
    for label, epochs, pfo in (("K=1", 1, "off"), ("K=32", 32, "off"), ("K=32 +PFO", 32, "last")):
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            m = run(epochs, pfo, seed, args.steps)
            print(f"{label:<12}{seed:>5}{m['return']:>9.3f}{m['preact']:>9.2f}{m['dead']:>7.1f}"
                  f"{m['srank']:>7.1f}{time.perf_counter() - t0:>6.0f}s", flush=True)


if __name__ == "__main__":
    main()
