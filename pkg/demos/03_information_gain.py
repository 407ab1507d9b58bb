"""How much new direction each latent token adds.

Information gain at position t is the norm of token t+1 outside the span of
tokens 1..t.  The single-shot block is the visual grid plus a per-position
edit, so its tokens keep adding directions until the span fills up.  A
chained baseline that feeds each latent through the same contractive map
adds less and less: every new token is a shrunken rotation of the last.

Needs ``demos/out/sft.bin`` from the previous demo.

    python demos/03_information_gain.py
"""

from pathlib import Path

from latentvis import analysis, inference, synthdata, toyvlm

ckpt = Path(__file__).parent / "out" / "sft.bin"
state = toyvlm.load_checkpoint(ckpt)
held, _ = synthdata.generate(50, synthdata.GenParams(), seed=5000)

latents, skipped = inference.capture_latents(state, held, inference.InferenceConfig())
T = state.config.n_vis_tokens
chained = [analysis.ar_baseline_latents(state, s, T, rho=0.9) for s in held]
ours, base = analysis.ig_curve(latents), analysis.ig_curve(chained)

print(f"{len(latents)} triggered samples ({skipped} answered without the block)")
print("position   single-shot   chained")
for t in (1, 2, 4, 8, 16, 32, 48, 63):
    print(f"  {t:8d}   {ours.at(t):11.4f}   {base.at(t):.3e}")
