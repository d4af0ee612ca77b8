"""Invariant checks shared by ``lmdm verify`` and the acceptance tests.

Each ``measure_*`` function returns raw measurements; :func:`run_checks`
applies the tolerances and reports pass/fail lines.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arcforcing import derangement, relativistic_from_scores
from .dit import (DiT, AttentionMaskSpec, ConditionInput, MaskFamily, ModelConfig,
                  build_mask)
from .flowcore import (SamplerConfig, euler_step, forward_corrupt, marginal_velocity,
                       p4_guided_x0, p4_step, pingpong_step, sample_block, x0_from_v)
from .gradcheck import check as gradcheck
from .stream import (Engine, StreamSession, report_nfe, run_baseline, run_blockcausal,
                     run_blockcausal_reference, run_encdec)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _cond(rng, n: int, cfg: ModelConfig) -> ConditionInput:
    g = np.eye(cfg.cond_dim, dtype=np.float32)[rng.integers(cfg.cond_dim, size=n)]
    return ConditionInput(global_vec=g)


# --------------------------------------------------------------------------
# masks


def mask_predicate(family: MaskFamily, s: int, o: int, row: int, col: int) -> bool:
    """Attention rule written entry by entry."""
    if family is MaskFamily.BIDIRECTIONAL:
        return True
    row_is_context = row < s
    col_is_context = col < s
    if not row_is_context:
        return True
    if not col_is_context:
        return False
    if family is MaskFamily.ENCDEC:
        return True
    return col // o <= row // o


def measure_mask_agreement(max_total: int = 12) -> int:
    """Number of (family, s, o) cases where :func:`build_mask` disagrees with the predicate."""
    bad = 0
    for family in MaskFamily:
        for o in range(1, max_total + 1):
            for s in range(0, max_total - o + 1):
                if family is MaskFamily.BLOCKCAUSAL and s % o:
                    continue
                m = build_mask(AttentionMaskSpec(family, s, o), s + o)
                ref = np.array([[mask_predicate(family, s, o, r, c) for c in range(s + o)]
                                for r in range(s + o)])
                bad += int(not np.array_equal(m, ref))
    return bad


# --------------------------------------------------------------------------
# context invariance


def measure_context_invariance(seeds, levels=(0.0, 0.3, 1.0), config: ModelConfig | None = None):
    """Count seeds where context activations differ bitwise across levels or targets."""
    cfg = config or ModelConfig()
    s = cfg.context_frames
    failures = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        model = DiT.init(cfg, seed=seed)
        clean = rng.standard_normal((2, cfg.channels, s)).astype(np.float32)
        cond = _cond(rng, 2, cfg)
        ref = None
        for fill in range(2):
            tgt = rng.standard_normal((2, cfg.channels, cfg.target_frames)).astype(np.float32)
            for k in levels:
                window = np.concatenate([rng.standard_normal(clean.shape).astype(np.float32), tgt], 2)
                with T.no_record():
                    _, hidden = model.forward_full(window, clean, k, cond, return_hidden=True)
                acts = [h.data[:, :s].copy() for h in hidden]
                if ref is None:
                    ref = acts
                elif not all(np.array_equal(a, b) for a, b in zip(acts, ref)):
                    failures += 1
                    break
    return failures


# --------------------------------------------------------------------------
# cache equivalence


def measure_cache_equivalence(seeds, blocks: int = 4, steps: int = 8, batch: int = 1,
                              config: ModelConfig | None = None):
    """Worst max-abs differences ``(encdec vs masked baseline, blockcausal vs recompute)``."""
    cfg = config or ModelConfig()
    worst_ed = worst_bc = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        model = DiT.init(cfg, seed=seed)
        prime = rng.standard_normal((batch, cfg.channels, cfg.context_frames)).astype(np.float32)
        g = np.eye(cfg.cond_dim, dtype=np.float32)[rng.integers(cfg.cond_dim, size=batch)]
        kind = ("euler", "pingpong")[seed % 2]
        sampler = SamplerConfig(kind, steps=steps, rng_seed=seed)
        a = StreamSession.create(model, Engine.ENCDEC, sampler, batch, prime=prime)
        b = StreamSession.create(model, Engine.BASELINE, sampler, batch, prime=prime,
                                 baseline_mask=MaskFamily.ENCDEC)
        worst_ed = max(worst_ed, float(np.abs(run_encdec(a, blocks, g) - run_baseline(b, blocks, g)).max()))
        c = StreamSession.create(model, Engine.BLOCKCAUSAL, sampler, batch, prime=prime)
        ref = run_blockcausal_reference(model, sampler, blocks, g, prime=prime, batch=batch)
        worst_bc = max(worst_bc, float(np.abs(run_blockcausal(c, blocks, g) - ref).max()))
    return worst_ed, worst_bc


# --------------------------------------------------------------------------
# pass counting


def measure_nfe_sweep(Bs=range(1, 6), Ks=range(1, 6), ratios=range(1, 5), o: int = 2):
    """Return the list of mismatching cases between counters and closed forms."""
    mismatches = []
    for ratio in ratios:
        s = ratio * o
        cfg = ModelConfig(channels=2, hidden=8, layers=1, heads=2, head_dim=4,
                          context_frames=s, target_frames=o, cond_dim=2)
        model = DiT.init(cfg, seed=ratio)
        for B, K, engine in itertools.product(Bs, Ks, Engine):
            sess = StreamSession.create(model, engine, SamplerConfig("euler", steps=K), 1)
            {Engine.BASELINE: run_baseline, Engine.ENCDEC: run_encdec,
             Engine.BLOCKCAUSAL: run_blockcausal}[engine](sess, B)
            expected = {Engine.BASELINE: (B * K, 0, 0), Engine.ENCDEC: (0, B, B * K),
                        Engine.BLOCKCAUSAL: (0, s // o + B, B * K)}[engine]
            got = (sess.counters.full_passes, sess.counters.encode_passes,
                   sess.counters.decode_passes)
            if got != expected:
                mismatches.append((engine.value, B, K, s, o, got, expected))
            report_nfe(sess)
    return mismatches


# --------------------------------------------------------------------------
# samplers


def measure_sampler_identities(seed: int = 0, config: ModelConfig | None = None) -> dict:
    """Differences for the three sampler identities (all should be zero / tiny)."""
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    model = DiT.init(cfg, seed=seed)
    ctx = rng.standard_normal((2, cfg.channels, cfg.context_frames)).astype(np.float32)
    cond = _cond(rng, 2, cfg)
    cache = model.new_cache()
    with T.no_record():
        model.encode_context(ctx, cond, cache)
    x1 = rng.standard_normal((2, cfg.channels, cfg.target_frames)).astype(np.float32)

    def predict(x, k, step):
        with T.no_record():
            return model.forward_decode(x, k, cond, cache).data, None

    pp = sample_block(predict, x1, SamplerConfig("pingpong", steps=1), lambda s: None)
    direct = x0_from_v(x1, 1.0, predict(x1, 1.0, 1)[0])
    d_pp = float(np.abs(pp - direct).max())

    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    eps = rng.standard_normal(x1.shape).astype(np.float32)
    d_p4 = 0.0
    for k_prev in (0.0, 0.25, 0.5, 0.75):
        for lam in (0.0, 0.3, 0.7, 1.0):
            a = p4_step(p4_guided_x0(x0, x0, lam), x0, k_prev, eps)
            b = pingpong_step(x0, k_prev, eps)
            d_p4 = max(d_p4, float(np.abs(a - b).max()))
    # whole-sampler form: identical cond/uncond predictions
    noise = {s: rng.standard_normal(x1.shape).astype(np.float32) for s in range(1, 5)}

    def both(x, k, step):
        v = predict(x, k, step)[0]
        return v, v

    p4 = sample_block(both, x1, SamplerConfig("p4", steps=4, p4_weight=0.7), noise.get)
    ppk = sample_block(predict, x1, SamplerConfig("pingpong", steps=4), noise.get)
    d_p4 = max(d_p4, float(np.abs(p4 - ppk).max()))

    x = rng.standard_normal(x1.shape)
    e = rng.standard_normal(x1.shape)
    x_k = forward_corrupt(x, 1.0, e)
    recovered = euler_step(marginal_velocity(x, e), x_k, 1.0, 0.0)
    d_euler = float(np.abs(recovered - x).max())
    return {"pingpong_k1": d_pp, "p4_reduces": d_p4, "euler_exact": d_euler}


# --------------------------------------------------------------------------
# losses


def measure_loss_anchors(batches: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (1, 2, 7, 32):
        s = rng.standard_normal(n)
        worst = max(worst, abs(relativistic_from_scores(s, s).item() - math.log(2)))
        worst = max(worst, abs(relativistic_from_scores(np.zeros(n), np.zeros(n)).item() - math.log(2)))
    fixed = 0
    for _ in range(batches):
        n = int(rng.integers(2, 33))
        p = derangement(n, rng)
        fixed += int(np.sum(p == np.arange(n)))
        if sorted(p.tolist()) != list(range(n)):
            fixed += n
    return {"f0_error": worst, "fixed_points": fixed}


# --------------------------------------------------------------------------
# gradients


def _op_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((3, 4))
    g = rng.standard_normal(4)
    pos = np.arange(3)
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    return {
        "add": (lambda u, v: T.sum(T.mul(T.add(u, v), w)), [a, rng.standard_normal((3, 4))]),
        "sub": (lambda u, v: T.sum(T.mul(T.sub(u, v), w)), [a, rng.standard_normal(4)]),
        "mul": (lambda u, v: T.sum(T.mul(u, v)), [a, rng.standard_normal((3, 4))]),
        "scale_neg": (lambda u: T.sum(T.mul(T.neg(T.scale(u, 1.7)), w)), [a]),
        "square": (lambda u: T.sum(T.square(u)), [a]),
        "silu": (lambda u: T.sum(T.mul(T.silu(u), w)), [a]),
        "exp": (lambda u: T.sum(T.mul(T.exp(u), w)), [a]),
        "log": (lambda u: T.sum(T.mul(T.log(u), w)), [np.abs(a) + 0.5]),
        "softplus": (lambda u: T.sum(T.mul(T.softplus(u), w)), [a]),
        "sum_axis": (lambda u: T.sum(T.square(T.sum(u, axis=1))), [a]),
        "mean": (lambda u: T.sum(T.square(T.mean(u, axis=0, keepdims=True))), [a]),
        "matmul": (lambda u, v: T.sum(T.square(T.matmul(u, v))), [a, b]),
        "batched_matmul": (lambda u, v: T.sum(T.square(T.matmul(u, v))),
                           [x, rng.standard_normal((2, 4, 3))]),
        "softmax": (lambda u: T.sum(T.mul(T.softmax(u, axis=-1), w)), [a]),
        "layer_norm": (lambda u, gg, bb: T.sum(T.mul(T.layer_norm(u, gg, bb), w)),
                       [a, g, rng.standard_normal(4)]),
        "reshape_transpose": (lambda u: T.sum(T.mul(T.transpose(T.reshape(u, (4, 3))), w)), [a]),
        "concat": (lambda u, v: T.sum(T.square(T.concat([u, v], axis=1))),
                   [a, rng.standard_normal((3, 2))]),
        "take": (lambda u: T.sum(T.square(T.take(u, (slice(None), slice(1, 3))))), [a]),
        "expand": (lambda u: T.sum(T.mul(T.expand(u, (3, 4)), w)), [g]),
        "masked_softmax": (lambda u: T.sum(T.mul(T.softmax(T.masked_fill(u, mask), -1), w)), [a]),
        "rope": (lambda u: T.sum(T.mul(T.rope(u, pos), x[0])), [rng.standard_normal((3, 4))]),
    }


def measure_op_gradients(seeds) -> dict:
    """Worst relative error per op over ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, (fn, inputs) in _op_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), gradcheck(fn, inputs))
    return worst


def tiny_config() -> ModelConfig:
    return ModelConfig(channels=2, hidden=8, layers=1, heads=2, head_dim=4,
                       context_frames=2, target_frames=2, cond_dim=2)


def measure_block_gradient(seed: int, names=("blocks.0.qkv.weight", "blocks.0.mlp.w1",
                                             "init.weight", "out.weight")) -> float:
    """End-to-end flow loss through one transformer block vs finite differences."""
    from .flowcore import flow_loss

    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    base = DiT.init(cfg, seed=seed)
    params = {n: p.data.copy() for n, p in base.params.items()}
    for n in params:
        if n.endswith("mod.weight") or n == "out.weight":
            params[n] = rng.normal(0, 0.5, params[n].shape).astype(np.float32)
    x = rng.standard_normal((2, cfg.channels, cfg.total_frames))
    eps = rng.standard_normal(x.shape)
    k = rng.uniform(0.1, 0.9, 2)
    cond = _cond(rng, 2, cfg)
    mask = np.zeros(cfg.total_frames, bool)
    mask[cfg.context_frames:] = True

    def fn(*leaves):
        ps = {n: T.Tensor(v) for n, v in params.items()}
        ps.update(dict(zip(names, leaves)))
        model = DiT(cfg, ps)
        ctx = x[:, :, :cfg.context_frames]
        return flow_loss(lambda xk, kk: model.forward_full(xk, ctx, kk, cond), x, k, eps, mask)

    return gradcheck(fn, [params[n] for n in names])


# --------------------------------------------------------------------------
# cost model


def measure_mac_agreement(ratios=range(1, 5), o: int = 4, batch: int = 2) -> list:
    """Cases where counted MACs differ from the closed forms or decode is not cheaper."""
    from .bench import CostModel

    bad = []
    for ratio in ratios:
        cfg = ModelConfig(channels=4, hidden=16, layers=2, heads=2, head_dim=8,
                          context_frames=ratio * o, target_frames=o, cond_dim=3)
        model = DiT.init(cfg, seed=ratio)
        cost = CostModel(cfg)
        rng = np.random.default_rng(ratio)
        cond = _cond(rng, batch, cfg)
        ctx = rng.standard_normal((batch, cfg.channels, cfg.context_frames)).astype(np.float32)
        tgt = rng.standard_normal((batch, cfg.channels, o)).astype(np.float32)
        cache = model.new_cache()
        with T.no_record():
            with T.count_macs() as full:
                model.forward_full(np.concatenate([ctx, tgt], 2), ctx, 0.5, cond)
            with T.count_macs() as enc:
                model.encode_context(ctx, cond, cache)
            with T.count_macs() as dec:
                model.forward_decode(tgt, 0.5, cond, cache)
        got = (full.total, enc.total, dec.total)
        want = (cost.full_pass(batch), cost.encode_pass(cfg.context_frames, 0, batch),
                cost.decode_pass(None, batch))
        if got != want or not cost.decode_pass() < cost.full_pass():
            bad.append((cfg.context_frames, o, got, want))
    return bad


# --------------------------------------------------------------------------
# driver


def _timed(name, fn, judge):
    t0 = time.perf_counter()
    try:
        value = fn()
        ok, detail = judge(value)
    except Exception as exc:  # report, do not crash the suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t0)


def run_checks(fast: bool = False, seed: int = 0) -> list:
    n_seeds = 3 if fast else 20
    seeds = range(seed, seed + n_seeds)
    checks = [
        ("mask_rules", measure_mask_agreement, lambda v: (v == 0, f"{v} mismatching cases")),
        ("context_invariance", lambda: measure_context_invariance(seeds),
         lambda v: (v == 0, f"{v} seeds with differing context activations")),
        ("cache_equivalence", lambda: measure_cache_equivalence(seeds, blocks=4 if not fast else 2,
                                                                steps=8 if not fast else 4),
         lambda v: (max(v) <= 1e-4, f"encdec {v[0]:.2e}, blockcausal {v[1]:.2e} (limit 1e-4)")),
        ("nfe_closed_forms", (lambda: measure_nfe_sweep(range(1, 3), range(1, 3), range(1, 3)))
         if fast else measure_nfe_sweep,
         lambda v: (not v, f"{len(v)} mismatches")),
        ("mac_closed_forms", measure_mac_agreement,
         lambda v: (not v, f"{len(v)} mismatching geometries")),
        ("sampler_identities", lambda: measure_sampler_identities(seed),
         lambda v: (v["pingpong_k1"] == 0 and v["p4_reduces"] == 0 and v["euler_exact"] <= 1e-6,
                    ", ".join(f"{k}={x:.1e}" for k, x in v.items()))),
        ("loss_anchors", lambda: measure_loss_anchors(50 if fast else 500, seed),
         lambda v: (v["f0_error"] <= 1e-7 and v["fixed_points"] == 0,
                    f"|f(0)-ln2|={v['f0_error']:.1e}, fixed points={v['fixed_points']}")),
        ("op_gradients", lambda: measure_op_gradients(range(seed, seed + (2 if fast else 20))),
         lambda v: (max(v.values()) < 1e-3, f"worst {max(v, key=v.get)} {max(v.values()):.1e}")),
        ("block_gradient", lambda: max(measure_block_gradient(s) for s in
                                       range(seed, seed + (1 if fast else 20))),
         lambda v: (v < 1e-3, f"relative error {v:.1e}")),
    ]
    if not fast:
        from .bench import forward_speedup
        checks.append(("decode_speedup",
                       lambda: [forward_speedup(DiT.init(ModelConfig(), seed)).ratio for _ in range(3)],
                       lambda v: (min(v) >= 1.05, "ratios " + ", ".join(f"{r:.2f}" for r in v))))
    return [_timed(name, fn, judge) for name, fn, judge in checks]
