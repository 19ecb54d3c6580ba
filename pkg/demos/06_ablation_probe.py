"""Which attachment points carry an adapter's effect.

The probe runs the toy model twice, with the full adapter and with chosen
attachment points disabled, and reports the L2 distance between the outputs.
A V-only adapter by construction registers nothing on Q/K/FF toggles; for a
full adapter with equal-scale layers at every point, V and FF typically
dominate because they inject content directly rather than reshaping attention
weights.
"""

from maskfuse import ToyModelConfig, build_toy_model, layer_ablation_l2
from maskfuse.lora import random_lora_set
from maskfuse.tensorio import SeededRng

cfg = ToyModelConfig()
model = build_toy_model(cfg, 42)

full = random_lora_set(SeededRng(7).derive("full"), "full", cfg.d_model, range(cfg.n_blocks))
v_only = random_lora_set(SeededRng(7).derive("v"), "v", cfg.d_model, [0], points=("V",))

print("V-only adapter:")
for point in ("Q", "K", "V", "FF"):
    print(f"  toggle {point:>2}: L2 = {layer_ablation_l2(model, v_only, [point], rng_seed=1):.6f}")

print("adapter on every point of every block:")
for point in ("Q", "K", "V", "FF"):
    print(f"  toggle {point:>2}: L2 = {layer_ablation_l2(model, full, [point], rng_seed=1):.6f}")

print("empty toggle set is exactly:",
      layer_ablation_l2(model, full, [], rng_seed=1))
