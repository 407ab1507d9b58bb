"""A few rounds of policy optimisation on top of the supervised model.

Each round samples eight completions per prompt, scores them (answer
correct, well formed, trigger used before answering), normalises rewards
within the group and takes one clipped step.  The auxiliary block of every
rollout is cached, so the update only touches the language model.

30% of the prompts here are undegraded: the model may answer them directly,
but the trigger bonus rewards asking anyway.  Watch the trigger rate.

Needs ``demos/out/sft.bin``.

    python demos/04_policy_optimisation.py
"""

from pathlib import Path

from latentvis import alpo, inference, synthdata, toyvlm

state = toyvlm.load_checkpoint(Path(__file__).parent / "out" / "sft.bin")
prompts, _ = synthdata.generate(300, synthdata.GenParams(), seed=900, aux_unnecessary_fraction=0.3)

before = inference.accuracy(state, prompts, inference.InferenceConfig())
print("step  reward  trigger  kl")
rows = alpo.train(state, prompts, alpo.AlpoConfig(steps=10),
                  log=lambda m: print(f"{m.step:4d}  {m.mean_reward:.3f}   {m.trigger_rate:.3f}"
                                      f"    {m.mean_kl:.4f}", flush=True))
after = inference.accuracy(state, prompts, inference.InferenceConfig())
print(f"greedy accuracy {before:.3f} -> {after:.3f}")
