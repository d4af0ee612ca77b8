"""Train a small model briefly, then check it against the data oracle.

Prints the loss curve, first-block z-scores for a couple of conditions,
the calibration control on true-process draws, and one crossfade between
two conditions with its single context dropout. The default schedule
(``--steps 3000``) takes about ten minutes on one core; the demo default
is shorter and only meant to show the flow.

    python3 demos/train_and_transition.py --steps 400
"""

import argparse

import numpy as np

from lmdm.data import SyntheticSpec, drift_metric, generate_corpus
from lmdm.dit import DiT, ModelConfig
from lmdm.evaluate import first_block_check, true_process_check
from lmdm.flowcore import SamplerConfig
from lmdm.stream import StreamSession, TransitionConfig, run_transition
from lmdm.train import TrainConfig, pretrain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--items", type=int, default=256)
    args = ap.parse_args()

    spec = SyntheticSpec()
    items = generate_corpus(spec, args.items, seed=0)
    model = DiT.init(ModelConfig(), seed=0)
    res = pretrain(model, items, TrainConfig(steps=args.steps), spec.n_conditions)
    L = np.array(res.losses)
    marks = np.linspace(0, len(L) - 1, 6).astype(int)
    print("loss:", "  ".join(f"{i}:{L[max(i - 9, 0):i + 1].mean():.3f}" for i in marks))

    check = first_block_check(model, spec, SamplerConfig("euler", steps=64), n=32)
    control = true_process_check(spec, model.config.target_frames, n=32)
    print("\nfirst-block z-scores (model | true process)")
    for g in range(3):
        z_m = " ".join(f"{s} {z:+6.1f}" for s, z in zip(("mean", "var", "ac"), check.z[g]))
        z_t = " ".join(f"{z:+5.1f}" for z in control.z[g])
        print(f"  condition {g}: {z_m} | {z_t}")

    s, o = model.config.context_frames, model.config.target_frames
    a, b = 0, 3
    eye = np.eye(spec.n_conditions, dtype=np.float32)
    prime = np.stack([it.latents[:, :s] for it in items if it.condition_id == a][:8])
    sess = StreamSession.create(model, "encdec", SamplerConfig("p4", steps=8), len(prime),
                                prime=prime)
    out = run_transition(sess, TransitionConfig.linear(eye[a], eye[b], 10, 2, 3), 10)
    print(f"\ncrossfade {a} -> {b}:", [(e.block, e.detail["frames"]) for e in sess.events])
    for name, g in (("source", a), ("target", b)):
        d = drift_metric(out, spec, g, o).mean(axis=0)
        print(f"  distance to {name} oracle per block:", np.round(d, 2))


if __name__ == "__main__":
    main()
