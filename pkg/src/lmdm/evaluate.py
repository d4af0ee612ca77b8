"""Model-vs-oracle comparison of generated block statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (SyntheticSpec, block_autocorr_expectation, block_expectations,
                   block_statistics)
from .dit import DiT
from .flowcore import SamplerConfig
from .stream import StreamSession, run_encdec

STATS = ("mean", "variance", "autocorr")


@dataclass
class BlockCheck:
    """Per-condition z-scores of channel-averaged first-block statistics.

    ``z`` has shape ``(n_conditions, 3)`` in :data:`STATS` order;
    ``ratio`` is generated over expected channel-mean variance.
    """

    z: np.ndarray
    expected: np.ndarray
    observed: np.ndarray
    ratio: np.ndarray
    n: int

    def within(self, limit: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.z) <= limit))


def _expected(spec: SyntheticSpec, g: int, o: int, seed: int) -> np.ndarray:
    ex = block_expectations(spec, g, o)
    ac = block_autocorr_expectation(spec, g, o, seed=seed)
    return np.array([ex.mean.mean(), ex.variance.mean(), ac.mean()])


def _zscores(x: np.ndarray, o: int, expected: np.ndarray):
    st = block_statistics(x, o)
    # channel average per sample, first block
    per = np.stack([st.mean[:, 0].mean(-1), st.variance[:, 0].mean(-1),
                    st.autocorr[:, 0].mean(-1)], axis=1)
    obs = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / np.sqrt(per.shape[0])
    return (obs - expected) / se, obs


def first_block_check(model: DiT, spec: SyntheticSpec, sampler: SamplerConfig,
                      n: int = 32, seed: int = 0) -> BlockCheck:
    """Unprimed, conditioned one-block rollouts vs the data oracle."""
    o = model.config.target_frames
    eye = np.eye(spec.n_conditions, model.config.cond_dim, dtype=np.float32)
    zs, exps, obss, ratios = [], [], [], []
    for g in range(spec.n_conditions):
        sess = StreamSession.create(model, "encdec",
                                    SamplerConfig(sampler.kind, sampler.steps, sampler.cfg_weight,
                                                  sampler.p4_weight, seed * 1000 + g,
                                                  sampler.levels), batch=n)
        x = run_encdec(sess, 1, eye[g])
        expected = _expected(spec, g, o, seed)
        z, obs = _zscores(x, o, expected)
        zs.append(z)
        exps.append(expected)
        obss.append(obs)
        ratios.append(obs[1] / expected[1])
    return BlockCheck(np.array(zs), np.array(exps), np.array(obss), np.array(ratios), n)


def true_process_check(spec: SyntheticSpec, o: int, n: int = 32, seed: int = 0) -> BlockCheck:
    """The same test applied to fresh draws of the data process (a control)."""
    from .data import simulate

    zs, exps, obss, ratios = [], [], [], []
    for g in range(spec.n_conditions):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(g, 11)))
        x = np.stack([simulate(spec, g, o, rng) for _ in range(n)])
        expected = _expected(spec, g, o, seed)
        z, obs = _zscores(x, o, expected)
        zs.append(z)
        exps.append(expected)
        obss.append(obs)
        ratios.append(obs[1] / expected[1])
    return BlockCheck(np.array(zs), np.array(exps), np.array(obss), np.array(ratios), n)
