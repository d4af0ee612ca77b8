"""Cost model and wall-clock harness for the streaming engines.

:class:`CostModel` gives exact multiply-accumulate counts for the three
pass types, matching what :func:`tensor.count_macs` records on a real
forward. :func:`measure` times whole sessions; :func:`forward_speedup`
times a single cached decode pass against a full-window pass.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dit import DiT, ConditionInput, ModelConfig
from .errors import ConfigError
from .flowcore import SamplerConfig
from .stream import Engine, StreamSession, generate_block, predicted_nfe


@dataclass(frozen=True)
class CostModel:
    """Closed-form MAC counts for one batch item (multiply by ``batch``).

    ``routed`` describes full-window passes: routed windows embed two noise
    levels (context at 0, target at ``k``), unrouted ones a single level.
    """

    config: ModelConfig
    conditioned: bool = True
    routed: bool = True

    def _embedding(self, levels: int) -> int:
        c = self.config
        per = 2 * c.hidden * c.hidden + (c.cond_dim * c.hidden if self.conditioned else 0)
        return levels * per

    def _layer(self, rows: int, keys: int, levels: int, kv_only: bool = False) -> int:
        c = self.config
        H = c.hidden
        macs = levels * H * 6 * H + rows * H * 3 * H
        if kv_only:
            return macs
        macs += 2 * c.heads * rows * keys * c.head_dim
        macs += rows * H * H
        macs += 2 * rows * H * c.mlp_ratio * H
        return macs

    def _head(self, rows: int, levels: int) -> int:
        c = self.config
        return levels * c.hidden * 2 * c.hidden + rows * c.hidden * c.channels

    def _projection(self, rows: int) -> int:
        return rows * self.config.input_width * self.config.hidden

    def full_pass(self, batch: int = 1) -> int:
        """Full window, context and target rows."""
        c = self.config
        T_ = c.total_frames
        levels = 2 if c.context_frames and self.routed else 1
        macs = (self._embedding(levels) + self._projection(T_)
                + c.layers * self._layer(T_, T_, levels) + self._head(T_, levels))
        return batch * macs

    def encode_pass(self, frames: int, cached: int = 0, batch: int = 1) -> int:
        """Encode ``frames`` clean frames attending ``cached`` entries plus themselves."""
        c = self.config
        keys = cached + frames
        macs = (self._embedding(1) + self._projection(frames)
                + (c.layers - 1) * self._layer(frames, keys, 1)
                + self._layer(frames, keys, 1, kv_only=True))
        return batch * macs

    def decode_pass(self, cached: int | None = None, batch: int = 1) -> int:
        """Target rows attending ``cached`` (default ``s``) entries plus themselves."""
        c = self.config
        cached = c.context_frames if cached is None else cached
        o = c.target_frames
        macs = (self._embedding(1) + self._projection(o)
                + c.layers * self._layer(o, cached + o, 1) + self._head(o, 1))
        return batch * macs

    def per_block(self, engine, steps: int, batch: int = 1) -> int:
        """Steady-state MACs to produce one block."""
        engine = Engine(engine)
        c = self.config
        if engine is Engine.BASELINE:
            return steps * self.full_pass(batch)
        if engine is Engine.ENCDEC:
            return self.encode_pass(c.context_frames, 0, batch) + steps * self.decode_pass(None, batch)
        return (self.encode_pass(c.target_frames, c.context_frames, batch)
                + steps * self.decode_pass(None, batch))


@dataclass
class BenchReport:
    engine: str
    batch: int
    steps: int
    blocks: int
    trials: int
    block_median_s: float
    block_p95_s: float
    ttff_median_s: float
    full_passes: int
    encode_passes: int
    decode_passes: int
    macs_per_block: int
    speedup_vs_baseline: float = float("nan")
    config: dict = field(default_factory=dict)


CSV_COLUMNS = ["engine", "batch", "steps", "blocks", "trials", "block_median_s",
               "block_p95_s", "ttff_median_s", "full_passes", "encode_passes",
               "decode_passes", "macs_per_block", "speedup_vs_baseline"]


def _timed_session(model: DiT, engine: Engine, sampler: SamplerConfig, batch: int,
                   blocks: int, cond, prime):
    t0 = time.perf_counter()
    sess = StreamSession.create(model, engine, sampler, batch, prime=prime,
                                baseline_mask="bidirectional")
    stamps = []
    for _ in range(blocks):
        generate_block(sess, cond)
        stamps.append(time.perf_counter())
    ttff = stamps[0] - t0
    per_block = np.diff([t0] + stamps)
    return sess, ttff, per_block


def measure(model: DiT, engine, sampler: SamplerConfig | None = None, trials: int = 30,
            warmup: int = 5, batch: int = 1, blocks: int = 3, cond=None,
            prime=None) -> BenchReport:
    """Median and 95th percentile per-block latency plus time to first block.

    Steady-state block times skip each trial's first block (which carries
    the cache fill); with ``blocks == 1`` the first block is used.
    """
    if trials < 5:
        raise ConfigError(f"at least 5 trials are required, got {trials}")
    if blocks < 1:
        raise ConfigError("blocks must be >= 1")
    engine = Engine(engine)
    sampler = sampler or SamplerConfig()
    cfg = model.config
    if prime is None:
        prime = np.zeros((cfg.channels, cfg.context_frames), np.float32)
    for _ in range(warmup):
        _timed_session(model, engine, sampler, batch, blocks, cond, prime)
    ttffs, steady = [], []
    sess = None
    for _ in range(trials):
        sess, ttff, per_block = _timed_session(model, engine, sampler, batch, blocks, cond, prime)
        ttffs.append(ttff)
        steady.extend(per_block[1:] if blocks > 1 else per_block)
    counters = sess.counters
    pred = predicted_nfe(engine, blocks, sum(sess.steps_run), cfg.context_frames, cfg.target_frames)
    if counters != pred:
        raise AssertionError(f"counters {counters} differ from closed form {pred}")
    # the timed baseline runs the unrouted bidirectional window
    cost = CostModel(cfg, conditioned=cond is not None, routed=False)
    passes = 2 if sampler.guided else 1
    return BenchReport(engine.value, batch, sampler.steps, blocks, trials,
                       float(np.median(steady)), float(np.percentile(steady, 95)),
                       float(np.median(ttffs)), counters.full_passes, counters.encode_passes,
                       counters.decode_passes,
                       cost.per_block(engine, sampler.steps, batch * passes),
                       config=asdict(cfg))


def compare_engines(model: DiT, engines=("baseline", "encdec", "blockcausal"), **kw) -> list:
    """Measure several engines; fills ``speedup_vs_baseline`` when a baseline is present."""
    reports = [measure(model, e, **kw) for e in engines]
    base = next((r for r in reports if r.engine == Engine.BASELINE.value), None)
    if base is not None:
        for r in reports:
            r.speedup_vs_baseline = base.block_median_s / r.block_median_s
    return reports


@dataclass(frozen=True)
class SpeedupResult:
    full_median_s: float
    decode_median_s: float

    @property
    def ratio(self) -> float:
        return self.full_median_s / self.decode_median_s


def forward_speedup(model: DiT, trials: int = 30, warmup: int = 5, batch: int = 1,
                    seed: int = 0) -> SpeedupResult:
    """Median time of one full-window pass vs one cached decode pass.

    Timings interleave the two pass types so drifting machine load affects
    both equally.
    """
    if trials < 5:
        raise ConfigError(f"at least 5 trials are required, got {trials}")
    cfg = model.config
    rng = np.random.default_rng(seed)
    ctx = rng.standard_normal((batch, cfg.channels, cfg.context_frames)).astype(np.float32)
    tgt = rng.standard_normal((batch, cfg.channels, cfg.target_frames)).astype(np.float32)
    window = np.concatenate([ctx, tgt], axis=2)
    cond = ConditionInput(global_vec=np.eye(cfg.cond_dim, dtype=np.float32)[np.zeros(batch, int)])
    cache = model.new_cache()
    with T.no_record():
        model.encode_context(ctx, cond, cache)

    def full():
        with T.no_record():
            model.forward_full(window, ctx, 0.5, cond)

    def dec():
        with T.no_record():
            model.forward_decode(tgt, 0.5, cond, cache)

    for _ in range(warmup):
        full()
        dec()
    tf, td = [], []
    for _ in range(trials):
        t0 = time.perf_counter()
        full()
        t1 = time.perf_counter()
        dec()
        t2 = time.perf_counter()
        tf.append(t1 - t0)
        td.append(t2 - t1)
    return SpeedupResult(float(np.median(tf)), float(np.median(td)))


def emit_csv(reports, path) -> None:
    """Header plus one row per report, columns in :data:`CSV_COLUMNS` order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            d = asdict(r)
            w.writerow([d[c] for c in CSV_COLUMNS])


def read_csv(path) -> list:
    """Parse a report CSV back into dicts with numeric fields converted."""
    ints = {"batch", "steps", "blocks", "trials", "full_passes", "encode_passes",
            "decode_passes", "macs_per_block"}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: (v if k == "engine" else int(v) if k in ints else float(v))
                        for k, v in row.items()})
    return out
