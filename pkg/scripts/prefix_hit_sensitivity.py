"""Token hit rate of lcm vs uniform paging on the multi-article workload,
swept over memory budget, article length and trace seed.

Prints one TSV row per (article_tokens, budget) with lcm/uniform per seed.
"""
import argparse

from hetero_kv.config import load_model_config
from hetero_kv.simulator import EngineConfig, simulate
from hetero_kv.trace import multi_article_prefix


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scale", type=float, default=0.05)
    p.add_argument("--articles", type=int, default=8)
    p.add_argument("--article-tokens", type=int, nargs="+", default=[8000, 16000, 24000])
    p.add_argument("--budgets-gb", type=float, nargs="+", default=[1.2, 1.4, 1.7, 2.0, 2.4])
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--output-tokens", type=int, default=16)
    p.add_argument("--arrival-gap", type=int, default=8)
    p.add_argument("--chunk-size", type=int, default=128)
    args = p.parse_args()

    spec = load_model_config("gemma2-like").scaled(args.scale)
    print("article_tokens\tbudget_gb\t" + "\t".join(f"seed{s}" for s in range(args.seeds)))
    for tokens in args.article_tokens:
        traces = [multi_article_prefix(num_articles=args.articles, questions=4, article_tokens=tokens,
                                       question_tokens=64, output_tokens=args.output_tokens,
                                       arrival_gap=args.arrival_gap, scale=args.scale, seed=s)
                  for s in range(args.seeds)]
        for gb in args.budgets_gb:
            cells = []
            for trace in traces:
                rates = []
                for strategy in ("lcm", "uniform"):
                    cfg = EngineConfig(memory_bytes=int(gb * 1e9), strategy=strategy, chunk_size=args.chunk_size,
                                       prefix_caching=True)
                    rates.append(simulate(spec, trace, cfg).summary["hit_rate"])
                cells.append(f"{rates[0]:.2f}/{rates[1]:.2f}")
            print(f"{tokens}\t{gb}\t" + "\t".join(cells), flush=True)


if __name__ == "__main__":
    main()
