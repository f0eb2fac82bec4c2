import numpy as np, time, json
from fhrctg.types import EngineConfig, tags_from_annotations, SpanKind
from fhrctg import model as M
from fhrctg.synth import SynthParams, generate_dataset
from fhrctg.metrics import evaluate_tags

t0 = time.time()
cfg = EngineConfig(seed=0)
params = SynthParams(minutes=20, noise_sd=2.0)
train = generate_dataset(96, params, seed=2024)
held = generate_dataset(32, params, seed=4048)
held_tags = [tags_from_annotations(r) for r in held]

net = M.build_model(cfg)
pre_losses = M.run_pretraining(net, train, steps=200, lr=0.2, seed=7)
print(f"pretrain: {pre_losses[0]:.3f} -> {np.mean(pre_losses[-20:]):.3f}  ({time.time()-t0:.0f}s)", flush=True)

for block in range(4):
    losses = M.run_supervised_training(net, train, epochs=5, lr=0.3, seed=1234 + block)
    preds = [M.predict_record(net, r, 999 + i).tags for i, r in enumerate(held)]
    c = evaluate_tags(held_tags, preds, SpanKind.DECEL, 0.5, cfg)
    a = evaluate_tags(held_tags, preds, SpanKind.ACCEL, 0.5, cfg)
    acc = np.mean([np.mean(p == t) for p, t in zip(preds, held_tags)])
    print(f"ep{(block+1)*5:3d} loss={losses[-1]:8.2f} stepacc={acc:.3f} "
          f"decel={c.sensitivity():.3f}/{c.specificity():.3f} ({c}) "
          f"accel={a.sensitivity():.3f}/{a.specificity():.3f}  ({time.time()-t0:.0f}s)", flush=True)
