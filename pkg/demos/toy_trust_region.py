"""Two states, two actions, one shared feature direction.

With phi(y) = alpha * phi(x), every update on state x also moves the policy
at y. Clipping only inspects the ratio of the state being updated, so the
other state's probability can drift past 1 + eps (alpha > 0) or the wrong
way (alpha < 0) while every individual step looks inside the trust region.

    python demos/toy_trust_region.py [--out DIR]
"""

import argparse
from pathlib import Path

from ppo_repr.toy import ToyConfig, toy_simulate, toy_verify_claims


def show(alpha: float, out: Path | None) -> None:
    cfg = ToyConfig(alpha=alpha)
    trace = toy_simulate(cfg)
    claims = toy_verify_claims(trace, cfg)
    print(f"\nalpha = {alpha:g}   phi(x) = {cfg.phi:.4f}   limit p = {0.5 * (1 + cfg.clip_eps):.3f}")
    print(" step state    p(a1|x)   p(a1|y)")
    print(f"    -  init   {trace.initial.p_x:.5f}   {trace.initial.p_y:.5f}")
    for i, row in enumerate(trace.rows, 1):
        print(f"{i:5d}  {row.state:>4}   {row.p_x:.5f}   {row.p_y:.5f}")
    print(f"pushed past the clip limit: {claims.pushed_past_clip}; "
          f"fell below its start: {claims.below_initial}; max final ratio {claims.max_final_ratio:.3f}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"toy_alpha{alpha:g}.csv").write_text(trace.to_csv(), encoding="utf-8")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, help="also write the traces as CSV here")
    args = parser.parse_args()
    for alpha in (3.0, -1.0, 1.0, 0.0):
        show(alpha, args.out)


if __name__ == "__main__":
    main()
