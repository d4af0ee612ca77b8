"""Stream the same prime through the three engines and compare cost.

Uses an untrained toy model, so the numbers are about bookkeeping, not
audio quality: pass counts, multiply-accumulates per block, and the fact
that the cached engines reproduce their uncached references.

    python3 demos/streaming_engines.py
"""

import numpy as np

from lmdm import tensor as T
from lmdm.bench import CostModel
from lmdm.dit import DiT, MaskFamily, ModelConfig
from lmdm.flowcore import SamplerConfig
from lmdm.stream import (StreamSession, run_baseline, run_blockcausal,
                         run_blockcausal_reference, run_encdec)


def main():
    cfg = ModelConfig()
    model = DiT.init(cfg, seed=0)
    rng = np.random.default_rng(0)
    prime = rng.standard_normal((1, cfg.channels, cfg.context_frames)).astype(np.float32)
    g = np.eye(cfg.cond_dim, dtype=np.float32)[2]
    sampler = SamplerConfig("pingpong", steps=8, rng_seed=1)
    blocks = 4

    ed = StreamSession.create(model, "encdec", sampler, prime=prime)
    ref = StreamSession.create(model, "baseline", sampler, prime=prime,
                               baseline_mask=MaskFamily.ENCDEC)
    bc = StreamSession.create(model, "blockcausal", sampler, prime=prime)
    with T.no_record():
        x_ed = run_encdec(ed, blocks, g)
        x_ref = run_baseline(ref, blocks, g)
        x_bc = run_blockcausal(bc, blocks, g)
        x_bc_ref = run_blockcausal_reference(model, sampler, blocks, g, prime=prime)

    print(f"encdec vs masked baseline: max abs diff {np.abs(x_ed - x_ref).max():.2e}")
    print(f"blockcausal vs recompute:  max abs diff {np.abs(x_bc - x_bc_ref).max():.2e}")
    print()
    cost = CostModel(cfg)
    rows = [(name, sess.counters, cost.per_block(name, 8))
            for name, sess in (("baseline", ref), ("encdec", ed), ("blockcausal", bc))]
    print(f"{'engine':12s} {'full':>5s} {'enc':>5s} {'dec':>5s} {'MACs/block':>12s}")
    for name, c, macs in rows:
        print(f"{name:12s} {c.full_passes:5d} {c.encode_passes:5d} {c.decode_passes:5d} {macs:12,d}")


if __name__ == "__main__":
    main()
