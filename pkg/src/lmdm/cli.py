"""Command-line entry point: ``lmdm <command> [--config FILE] [--set key=value ...]``.

Commands: gen-data, train, posttrain, sample, bench, verify. Structured
logs (one JSON object per line) go to stderr; data products go to the paths
named in the config. Exit codes: 0 success, 1 verification failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .errors import ConfigError, ContractError, FormatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def log(record: dict):
    rec = {"t": round(time.time(), 3), **record}
    print(json.dumps(rec, default=_json_default), file=sys.stderr, flush=True)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _corpus(run):
    from .data import generate_corpus, read_corpus

    manifest = Path(run.data.corpus_dir) / "manifest.jsonl"
    if manifest.exists():
        return read_corpus(manifest, run.spec)
    return generate_corpus(run.spec, run.data.items, run.data.seed + run.seed,
                           run.data.accompaniment, run.data.future_visibility)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(run, args) -> int:
    from .data import generate_corpus, write_corpus

    items = generate_corpus(run.spec, run.data.items, run.data.seed + run.seed,
                            run.data.accompaniment, run.data.future_visibility)
    manifest = write_corpus(items, run.data.corpus_dir, run.spec)
    digest = hashlib.sha256()
    for it in items:
        digest.update(it.latents.tobytes())
    log({"event": "gen_data", "items": len(items), "manifest": str(manifest),
         "sha256": digest.hexdigest()})
    print(json.dumps({"items": len(items), "manifest": str(manifest)}))
    return EXIT_OK


def cmd_train(run, args) -> int:
    from .dit import DiT
    from .io import load_checkpoint, save_checkpoint
    from .train import AdamW, pretrain

    items = _corpus(run)
    tc = dataclasses.replace(run.train, seed=run.train.seed + run.seed)
    start = 0
    if args.resume:
        model, state = load_checkpoint(args.resume)
        opt = AdamW(model.params, lr=tc.lr, weight_decay=tc.weight_decay)
        opt.load_state(state)
        start = int(state["step"][0])
        log({"event": "resume", "from": args.resume, "step": start})
    else:
        model = DiT.init(run.model, seed=run.seed)
        opt = AdamW(model.params, lr=tc.lr, weight_decay=tc.weight_decay)
    res = pretrain(model, items, tc, run.spec.n_conditions, optimizer=opt, start_step=start,
                   stop_step=args.stop_at, log=log,
                   csv_path=_ensure_parent(run.paths.train_log))
    extra = opt.state()
    extra["step"] = np.array([res.step], np.float32)
    save_checkpoint(_ensure_parent(run.paths.checkpoint), model, extra)
    summary = {"event": "train_done", "step": res.step, "checkpoint": run.paths.checkpoint}
    if res.losses:
        summary.update(first_loss=res.losses[0], last_loss=res.losses[-1])
    log(summary)
    return EXIT_OK


def cmd_posttrain(run, args) -> int:
    from .arcforcing import arc_force, drift_probe
    from .flowcore import SamplerConfig
    from .io import load_checkpoint, save_checkpoint

    items = _corpus(run)
    G, _ = load_checkpoint(args.checkpoint or run.paths.checkpoint)
    seeds = list(range(run.seed, run.seed + 5))
    blocks = run.rollout.blocks
    # both probes use the rollout sampler so the comparison isolates the weights
    probe_sampler = SamplerConfig("pingpong", steps=run.sampler.steps)
    pre = drift_probe(G, probe_sampler, run.spec, items, blocks, seeds, run.arc.probe_items)
    log({"event": "drift_pre", "per_block": pre.mean(axis=0)})
    arc = dataclasses.replace(run.arc, seed=run.arc.seed + run.seed)
    res = arc_force(G, items, run.spec, arc, run.rollout, run.loss, log=log,
                    csv_path=_ensure_parent(run.paths.arc_metrics))
    post = drift_probe(res.generator, probe_sampler, run.spec, items, blocks, seeds,
                       run.arc.probe_items)
    log({"event": "drift_post", "per_block": post.mean(axis=0)})
    save_checkpoint(_ensure_parent(run.paths.posttrained), res.generator)
    log({"event": "posttrain_done", "checkpoint": run.paths.posttrained,
         "drift_pre_late": float(pre[:, 5:].mean()), "drift_post_late": float(post[:, 5:].mean())})
    return EXIT_OK


def _parse_transition(text: str, run, blocks: int):
    from .stream import TransitionConfig

    parts = text.split(",")
    if len(parts) < 3:
        raise ConfigError("--transition expects a,b,w1[:w2:...] or a,b,linear:START:LEN")
    a, b = int(parts[0]), int(parts[1])
    eye = np.eye(run.spec.n_conditions, run.model.cond_dim)
    sched = ",".join(parts[2:])
    if sched.startswith("linear:"):
        _, start, length = sched.split(":")
        return TransitionConfig.linear(eye[a], eye[b], blocks, int(start), int(length))
    return TransitionConfig(eye[a], eye[b], tuple(float(w) for w in sched.split(":")))


def cmd_sample(run, args) -> int:
    from .io import load_checkpoint, load_latents, save_latents
    from .stream import StreamSession, run_transition, stream_blocks

    model, _ = load_checkpoint(args.checkpoint or run.paths.checkpoint)
    prime = None
    if args.prime:
        prime = load_latents(args.prime, channels=model.config.channels)
    engine = args.engine
    sampler = run.sampler
    if args.transition:
        sampler = dataclasses.replace(sampler, kind="p4")
        engine = "encdec"
    sampler = dataclasses.replace(sampler, rng_seed=sampler.rng_seed + run.seed)
    sess = StreamSession.create(model, engine, sampler, 1, prime=prime)
    if args.transition:
        tc = _parse_transition(args.transition, run, args.blocks)
        out = run_transition(sess, tc, args.blocks)
    else:
        g = np.eye(run.spec.n_conditions, model.config.cond_dim, dtype=np.float32)[args.condition]
        out = np.concatenate(list(stream_blocks(sess, args.blocks, g)), axis=2)
    for ev in sess.events:
        log({"event": ev.kind, "block": ev.block, **ev.detail})
    path = _ensure_parent(args.output or run.paths.samples)
    save_latents(path, out[0])
    log({"event": "sample_done", "engine": engine, "frames": int(out.shape[2]), "path": str(path),
         "nfe": sess.counters.as_dict()})
    return EXIT_OK


def cmd_bench(run, args) -> int:
    from .bench import compare_engines, emit_csv, forward_speedup
    from .dit import DiT
    from .io import load_checkpoint

    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = DiT.init(run.model, seed=run.seed)
    b = run.bench
    reports = compare_engines(model, tuple(b.engines), sampler=run.sampler, trials=b.trials,
                              warmup=b.warmup, batch=b.batch, blocks=b.blocks)
    emit_csv(reports, _ensure_parent(run.paths.bench_csv))
    sp = forward_speedup(model, trials=b.trials, warmup=b.warmup, batch=b.batch)
    for r in reports:
        log({"event": "bench", **dataclasses.asdict(r)})
    log({"event": "forward_speedup", "ratio": sp.ratio, "full_s": sp.full_median_s,
         "decode_s": sp.decode_median_s, "csv": run.paths.bench_csv})
    return EXIT_OK


def cmd_verify(run, args) -> int:
    from .verify import run_checks

    results = run_checks(fast=args.fast, seed=run.seed)
    ok = True
    for r in results:
        log({"event": "check", "name": r.name, "passed": r.passed, "detail": r.detail,
             "seconds": r.seconds})
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "posttrain": cmd_posttrain,
            "sample": cmd_sample, "bench": cmd_bench, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmdm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.steps=200 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides config and environment)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="flow-matching training")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-at", type=int, help="stop before this step (for staged runs)")
    pt = sub.add_parser("posttrain", parents=[common], help="adversarial rollout post-training")
    pt.add_argument("--checkpoint", help="pretrained checkpoint (default: paths.checkpoint)")
    s = sub.add_parser("sample", parents=[common], help="stream a latent sequence")
    s.add_argument("--engine", default="encdec", choices=["baseline", "encdec", "blockcausal"])
    s.add_argument("--blocks", type=int, default=4)
    s.add_argument("--condition", type=int, default=0)
    s.add_argument("--prime", help="latent stream file whose last s frames prime the context")
    s.add_argument("--transition", help="a,b,w1:w2:... or a,b,linear:START:LEN")
    s.add_argument("--checkpoint")
    s.add_argument("--output")
    b = sub.add_parser("bench", parents=[common], help="latency and cost report")
    b.add_argument("--checkpoint")
    v = sub.add_parser("verify", parents=[common], help="run the invariant checks")
    v.add_argument("--fast", action="store_true", help="quick subset")
    return p


def resolve_config(args):
    run = cfgmod.load(args.config)
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key, yaml.safe_load(value)))
    run = cfgmod.override_many(run, pairs)
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    return run


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        run = resolve_config(args)
        return COMMANDS[args.command](run, args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        log({"event": "error", "kind": type(exc).__name__, "message": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, AssertionError) as exc:
        log({"event": "error", "kind": type(exc).__name__, "message": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
