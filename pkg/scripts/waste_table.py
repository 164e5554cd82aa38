"""Predicted and simulated memory waste of uniform paging per bundled model."""
from hetero_kv.config import WorkloadProfile, bundled_configs, load_model_config, predict_uniform_waste
from hetero_kv.simulator import EngineConfig, simulate
from hetero_kv.trace import static_trace

SCALE = 0.05


def main():
    trace = static_trace(num_requests=8, prompt_tokens=8192, output_tokens=16, scale=SCALE)
    T = trace[0].prompt_tokens
    print("model\tpredicted\tuniform_steady\tlcm_steady")
    for name in bundled_configs():
        spec = load_model_config(name)
        if any(g.kind.value in ("cross_attention", "vision_embedding", "mamba") for g in spec.groups):
            # needs images or checkpoints; the text-only static trace says nothing useful
            continue
        spec = spec.scaled(SCALE)
        predicted = predict_uniform_waste(spec, WorkloadProfile(T))
        row = [simulate(spec, trace, EngineConfig(memory_bytes=int(40e9 * SCALE), strategy=s,
                                                  chunk_size=512)).summary["steady_waste_fraction"]
               for s in ("uniform", "lcm")]
        print(f"{spec.name}\t{predicted:.4f}\t{row[0]:.4f}\t{row[1]:.4f}")
    mllama = load_model_config("mllama")
    print(f"mllama (T=43, I=6193)\t{predict_uniform_waste(mllama, WorkloadProfile(43, 6193)):.4f}\t-\t-")


if __name__ == "__main__":
    main()
