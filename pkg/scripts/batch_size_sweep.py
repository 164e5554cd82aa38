"""Mean decode batch of lcm vs uniform paging on the long-document trace
for a range of memory budgets."""
import argparse

from hetero_kv.config import load_model_config
from hetero_kv.simulator import EngineConfig, simulate
from hetero_kv.trace import load_bundled_trace


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default="ministral-like")
    p.add_argument("--scale", type=float, default=0.01)
    p.add_argument("--budgets-mb", type=float, nargs="+", default=[300, 400, 500, 750, 1000, 2000])
    p.add_argument("--chunk-sizes", type=int, nargs="+", default=[128, 512])
    args = p.parse_args()

    spec = load_model_config(args.model).scaled(args.scale)
    trace = load_bundled_trace("long-doc-qa")
    print("chunk\tbudget_mb\tlcm_batch\tuniform_batch\tratio\tlcm_preempt\tuniform_preempt")
    for chunk in args.chunk_sizes:
        for mb in args.budgets_mb:
            s = [simulate(spec, trace, EngineConfig(memory_bytes=int(mb * 1e6), strategy=st,
                                                    chunk_size=chunk)).summary for st in ("lcm", "uniform")]
            a, b = s[0]["mean_decode_batch"], s[1]["mean_decode_batch"]
            print(f"{chunk}\t{mb:g}\t{a:.3f}\t{b:.3f}\t{a / b:.3f}\t{s[0]['preemptions']}\t{s[1]['preemptions']}",
                  flush=True)


if __name__ == "__main__":
    main()
