"""The full two-stage pipeline on an engineered two-subject scene.

Stage 1 (one step, one block): cross-attention -> sink filtering -> per-subject
activation-token maps -> self-attention enhancement -> SLIC voting, producing
one binary mask per subject. Stage 2: every adapter's image-token output is
gated by its mask for the remaining steps.

The fixture constructs a model/latent pair where subject 'alpha' tokens attend
to the left half of the token grid and 'beta' to the right, so the derived
masks have a known right answer.
"""

from pathlib import Path

import numpy as np

from maskfuse import PixelGrid, run_pipeline, write_pgm
from maskfuse.fixtures import two_subject_half_grid
from maskfuse.toydit import locality_ratio, masked_equivalence_error

out = Path(__file__).parent / "out" / "04_masks"
out.mkdir(parents=True, exist_ok=True)

fx = two_subject_half_grid(seed=11)
trace = run_pipeline(
    fx.model, fx.prompt, fx.subjects,
    slic_params=fx.slic_params, init_latent=fx.latent,
)
d = trace.derivation

print("derived at step", d.step, "block", d.block)
for spec in fx.subjects:
    mask = d.mask_set.mask_for(spec.lora_id)
    target = fx.left_mask if spec.lora_id == "alpha" else fx.right_mask
    print(f"subject {spec.lora_id}: area {mask.mean():.3f}, "
          f"matches engineered half: {np.array_equal(mask, target)}")
    write_pgm(PixelGrid(mask.astype(np.float32)), out / f"mask_{spec.lora_id}.pgm")

# Why gating works: tokens inside a mask mostly attend to each other, so
# dropping an adapter's deltas outside its region barely changes the region.
for spec in fx.subjects:
    tm = d.token_masks[spec.lora_id].ravel()
    loc = locality_ratio(d.a_self, tm)
    err = masked_equivalence_error(
        fx.model, spec.lora_set, tm, trace.latent_before_mask_step, trace.prompt
    )
    print(f"subject {spec.lora_id}: locality {loc:.4f}, masked-equivalence error {err:.6f}")

trace.dump(out / "trace")
print("full trace dumped to", out / "trace")
