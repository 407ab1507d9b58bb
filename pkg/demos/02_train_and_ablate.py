"""Train the toy model end to end, then take the auxiliary block away.

Runs backbone pretraining and the three supervised stages on 2500 samples
(about five minutes on one core), saves ``demos/out/sft.bin`` for the other
demos, and compares held-out accuracy when the fused block is

* produced by the detransformer (normal),
* never built, so the model answers at the trigger (disabled),
* replaced by a constant edit (placeholder).

The last table pools the block to shorter lengths and pads it, which is how
the latent-length sweep separates "more latent tokens" from "more context".

    python demos/02_train_and_ablate.py
"""

from pathlib import Path

from latentvis import analysis, inference, sft, synthdata, toyvlm

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

params = synthdata.GenParams()
train, _ = synthdata.generate(2500, params, seed=100, aux_unnecessary_fraction=0.2)
held, _ = synthdata.generate(400, params, seed=5000)

state = toyvlm.ModelState.init(toyvlm.ModelConfig(seed=0))
cfg = sft.SftConfig(seed=0)


def logger(stage):
    def log(m):
        if m.step % 50 == 0:
            print(f"  stage {stage} step {m.step:4d} loss {m.loss_total:.4f}", flush=True)
    return log


# stage 0 teaches the random backbone to read grids and answer directly
sft.pretrain_backbone(state, params, cfg, log=logger(0))
for stage in (1, 2, 3):
    sft.run_stage(state, train, cfg, stage, log=logger(stage), gen_params=params)
toyvlm.save_checkpoint(state, out / "sft.bin")

print("\nheld-out accuracy by auxiliary mode")
for mode in ("normal", "disabled", "placeholder"):
    acc = inference.accuracy(state, held, inference.InferenceConfig(aux_mode=mode))
    print(f"  {mode:12s} {acc:.3f}")

sw = analysis.latent_length_sweep(state, held[:200], [64, 16, 4, 1])
print("\nlatent length   normal  padded  gap")
for L, a, p, g in zip(sw.latent_lengths, sw.accuracy_normal, sw.accuracy_padded,
                      analysis.padding_gap(sw)):
    print(f"  {L:13d}   {a:.3f}   {p:.3f}   {g:+.3f}")
