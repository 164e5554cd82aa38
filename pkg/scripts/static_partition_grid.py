"""Fixed per-group memory splits vs a shared large-page pool on a trace
whose prompt lengths drift over time."""
import argparse

from hetero_kv.config import load_model_config
from hetero_kv.simulator import EngineConfig, RunGuardError, simulate
from hetero_kv.trace import dynamic_length


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--budget-mb", type=float, nargs="+", default=[500, 800, 1200])
    p.add_argument("--requests", type=int, default=60)
    args = p.parse_args()

    spec = load_model_config("gemma2-like").scaled(0.05)
    trace = dynamic_length(num_requests=args.requests, scale=0.05, seed=0, arrival_gap=1)
    print("budget_mb\tfull_share\tpreemptions\tsteps\tmean_decode_batch")
    for mb in args.budget_mb:
        runs = [("shared", dict(strategy="lcm"))]
        runs += [(f"{f:.1f}", dict(strategy="static", static_ratios={"full": f, "window": 1 - f}))
                 for f in (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)]
        for label, kw in runs:
            try:
                s = simulate(spec, trace, EngineConfig(memory_bytes=int(mb * 1e6), chunk_size=256, **kw)).summary
                print(f"{mb:g}\t{label}\t{s['preemptions']}\t{s['steps']}\t{s['mean_decode_batch']:.2f}", flush=True)
            except RunGuardError as e:
                print(f"{mb:g}\t{label}\tinfeasible: {e}", flush=True)


if __name__ == "__main__":
    main()
