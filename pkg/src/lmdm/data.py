"""Synthetic latent "music" with closed-form statistics.

Each condition id owns, per channel, a mean ``mu``, a sinusoid (amplitude
``a``, frequency ``f`` in cycles per frame, random phase per item) and a
stationary AR(1) component (coefficient ``rho``, innovation ``sigma``)::

    x_c(t) = mu + a sin(2 pi f t + phi) + z_t,   z_t = rho z_{t-1} + sigma e_t

With a uniform phase the process is stationary with autocovariance
``gamma(h) = a^2/2 cos(2 pi f h) + sigma^2 rho^|h| / (1 - rho^2)``, which is
what the oracle functions below evaluate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class SyntheticSpec:
    channels: int = 8
    n_conditions: int = 8
    frames: int = 128
    table_seed: int = 1234
    mean_range: tuple = (-1.0, 1.0)
    amp_range: tuple = (0.5, 1.0)
    freq_range: tuple = (0.02, 0.2)
    rho_range: tuple = (0.3, 0.8)
    sigma_range: tuple = (0.1, 0.25)
    coupling_range: tuple = (0.3, 0.9)

    def __post_init__(self):
        if self.channels < 1 or self.n_conditions < 1 or self.frames < 2:
            raise ConfigError("channels, n_conditions must be >= 1 and frames >= 2")
        for name in ("mean_range", "amp_range", "freq_range", "rho_range",
                     "sigma_range", "coupling_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not (0 <= self.rho_range[0] and self.rho_range[1] < 1):
            raise ConfigError("AR coefficients must lie in [0, 1)")

    def tables(self) -> "ProcessTables":
        rng = np.random.default_rng(self.table_seed)
        shape = (self.n_conditions, self.channels)

        def u(r):
            return rng.uniform(r[0], r[1], shape)

        return ProcessTables(mean=u(self.mean_range), amp=u(self.amp_range),
                             freq=u(self.freq_range), rho=u(self.rho_range),
                             sigma=u(self.sigma_range),
                             coupling=rng.uniform(*self.coupling_range, self.n_conditions))

    def global_vec(self, condition_id) -> np.ndarray:
        """One-hot global condition vector(s)."""
        ids = np.asarray(condition_id)
        return np.eye(self.n_conditions, dtype=np.float32)[ids]


@dataclass(frozen=True)
class ProcessTables:
    mean: np.ndarray
    amp: np.ndarray
    freq: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    coupling: np.ndarray

    def autocov(self, g: int, lags) -> np.ndarray:
        """``gamma_c(h)`` for condition ``g``: ``(C, len(lags))``."""
        h = np.abs(np.asarray(lags, dtype=np.float64))[None, :]
        a, f, rho, sig = (x[g][:, None] for x in (self.amp, self.freq, self.rho, self.sigma))
        return 0.5 * a ** 2 * np.cos(2 * np.pi * f * h) + sig ** 2 * rho ** h / (1 - rho ** 2)


@dataclass
class CorpusItem:
    latents: np.ndarray            # (C, T)
    condition_id: int
    global_vec: np.ndarray
    local_chans: np.ndarray        # (2, T)
    accompaniment: np.ndarray | None = None
    future_visibility: int = 0
    index: int = 0


@dataclass(frozen=True)
class Moments:
    mean: np.ndarray
    variance: np.ndarray
    autocorr: np.ndarray


# --------------------------------------------------------------------------
# generation


def _item_rng(seed: int, index: int, stream: int = 0):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=(int(index), int(stream))))


def simulate(spec: SyntheticSpec, condition_id: int, frames: int, rng) -> np.ndarray:
    """One stationary draw ``(C, frames)`` for a condition."""
    tab = spec.tables()
    g = int(condition_id)
    return _simulate(tab, g, frames, rng)


def _simulate(tab: ProcessTables, g: int, frames: int, rng) -> np.ndarray:
    C = tab.mean.shape[1]
    mu, a, f, rho, sig = tab.mean[g], tab.amp[g], tab.freq[g], tab.rho[g], tab.sigma[g]
    phase = rng.uniform(0, 2 * np.pi, C)
    t = np.arange(frames)
    sinus = a[:, None] * np.sin(2 * np.pi * f[:, None] * t[None, :] + phase[:, None])
    z = np.empty((C, frames))
    z[:, 0] = rng.standard_normal(C) * sig / np.sqrt(1 - rho ** 2)
    e = rng.standard_normal((C, frames))
    for i in range(1, frames):
        z[:, i] = rho * z[:, i - 1] + sig * e[:, i]
    return mu[:, None] + sinus + z


def local_conditions(latents: np.ndarray) -> np.ndarray:
    """Per-frame RMS envelope and dominant-channel index, ``(2, T)``.

    The index is scaled to [0, 1]. Works on ``(C, T)`` or ``(N, C, T)``.
    """
    x = np.asarray(latents, dtype=np.float64)
    rms = np.sqrt((x ** 2).mean(axis=-2))
    c = x.shape[-2]
    dom = np.argmax(np.abs(x), axis=-2) / max(c - 1, 1)
    return np.stack([rms, dom], axis=-2).astype(np.float32)


def visibility_mask(frames: int, s: int, t_f: int | None) -> np.ndarray:
    """True for window frames visible to an accompaniment stream."""
    idx = np.arange(frames)
    if t_f is None:
        return np.ones(frames, dtype=bool)
    return idx < s + int(t_f)


def apply_visibility(chans: np.ndarray, s: int, t_f: int | None) -> np.ndarray:
    """Zero-fill channel frames past the visibility cutoff ``s + t_f``."""
    out = np.array(chans, dtype=np.float32, copy=True)
    out[..., ~visibility_mask(out.shape[-1], s, t_f)] = 0.0
    return out


def generate_corpus(spec: SyntheticSpec, n: int, seed: int, accompaniment: bool = False,
                    future_visibility: int = 0) -> list[CorpusItem]:
    """``n`` items; item ``i`` uses its own RNG keyed by ``(seed, i)``."""
    if n < 1:
        raise ContractError(f"corpus needs at least one item, got {n}")
    tab = spec.tables()
    items = []
    for i in range(n):
        rng = _item_rng(seed, i)
        g = int(rng.integers(spec.n_conditions))
        x = _simulate(tab, g, spec.frames, rng).astype(np.float32)
        stem = None
        if accompaniment:
            other = _simulate(tab, g, spec.frames, _item_rng(seed, i, 1))
            rho = tab.coupling[g]
            mu = tab.mean[g][:, None]
            stem = (mu + rho * (x - mu) + math.sqrt(1 - rho ** 2) * (other - mu)).astype(np.float32)
        items.append(CorpusItem(x, g, spec.global_vec(g), local_conditions(x), stem,
                                future_visibility, i))
    return items


def stack_items(items, start: int = 0, frames: int | None = None):
    """``(latents (N, C, frames), condition ids (N,))`` from a list of items."""
    stop = None if frames is None else start + frames
    x = np.stack([it.latents[:, start:stop] for it in items])
    ids = np.array([it.condition_id for it in items])
    return x, ids


# --------------------------------------------------------------------------
# oracle


def oracle_moments(spec: SyntheticSpec, condition_id: int) -> Moments:
    """Stationary per-channel mean, variance and lag-1 autocorrelation."""
    g = _check_id(spec, condition_id)
    tab = spec.tables()
    gam = tab.autocov(g, [0, 1])
    return Moments(tab.mean[g].copy(), gam[:, 0], gam[:, 1] / gam[:, 0])


def block_expectations(spec: SyntheticSpec, condition_id: int, o: int) -> Moments:
    """Expected block-empirical mean and (biased) variance over ``o`` frames.

    ``E[var_hat] = gamma(0) - Var(block mean)`` with
    ``Var(block mean) = sum_{i,j} gamma(i - j) / o^2``. The autocorrelation
    entry is the stationary value.
    """
    g = _check_id(spec, condition_id)
    tab = spec.tables()
    lags = np.arange(o)
    gam = tab.autocov(g, lags)
    weights = np.where(lags == 0, o, 2 * (o - lags))
    var_mean = (gam * weights[None, :]).sum(axis=1) / o ** 2
    st = oracle_moments(spec, g)
    return Moments(st.mean, gam[:, 0] - var_mean, st.autocorr)


def block_autocorr_expectation(spec: SyntheticSpec, condition_id: int, o: int,
                               draws: int = 4096, seed: int = 0) -> np.ndarray:
    """Monte-Carlo expectation of the per-block lag-1 autocorrelation.

    The ratio estimator over ``o`` frames is strongly biased toward
    negative values for short blocks and has no closed form, so it is
    averaged over ``draws`` simulated blocks of the true process.
    """
    g = _check_id(spec, condition_id)
    tab = spec.tables()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(g, 7)))
    sims = np.stack([_simulate(tab, g, o, rng) for _ in range(draws)])
    return block_statistics(sims, o).autocorr[:, 0].mean(axis=0)


def long_run_variance(spec: SyntheticSpec, condition_id: int) -> np.ndarray:
    """Spectral density at zero (sum of all autocovariances) per channel.

    The sinusoid contributes nothing at frequency zero; the AR(1) part gives
    ``sigma^2 / (1 - rho)^2``. This is the right variance for the standard
    error of a time average.
    """
    g = _check_id(spec, condition_id)
    tab = spec.tables()
    return tab.sigma[g] ** 2 / (1 - tab.rho[g]) ** 2


def _check_id(spec, condition_id) -> int:
    g = int(condition_id)
    if not 0 <= g < spec.n_conditions:
        raise LookupError(f"unknown condition id {condition_id}")
    return g


def block_statistics(x: np.ndarray, o: int) -> Moments:
    """Empirical per-block stats of ``(..., C, B*o)``; arrays shaped ``(..., B, C)``."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if L % o:
        raise ContractError(f"rollout length {L} is not a multiple of o={o}")
    blocks = x.reshape(x.shape[:-1] + (L // o, o))
    blocks = np.moveaxis(blocks, -2, -3)  # (..., B, C, o)
    m = blocks.mean(axis=-1)
    d = blocks - m[..., None]
    var = (d ** 2).mean(axis=-1)
    num = (d[..., :-1] * d[..., 1:]).sum(axis=-1)
    den = (d ** 2).sum(axis=-1)
    ac = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return Moments(m, var, ac)


def drift_metric(rollout: np.ndarray, spec: SyntheticSpec, condition_id, o: int) -> np.ndarray:
    """Per-block squared distance between block stats and the oracle.

    Summed over channels of (mean, variance, lag-1 autocorrelation).
    ``rollout`` is ``(C, L)`` or ``(N, C, L)``; with a batch,
    ``condition_id`` may be per item. Returns ``(B,)`` or ``(N, B)``.
    """
    x = np.asarray(rollout, dtype=np.float64)
    st = block_statistics(x, o)
    ids = np.atleast_1d(np.asarray(condition_id))
    if x.ndim == 2:
        ids = ids[:1]
    else:
        ids = np.broadcast_to(ids, (x.shape[0],))
    orc = [oracle_moments(spec, g) for g in ids]
    mu = np.stack([m.mean for m in orc])[:, None, :]
    var = np.stack([m.variance for m in orc])[:, None, :]
    ac = np.stack([m.autocorr for m in orc])[:, None, :]
    if x.ndim == 2:
        mu, var, ac = mu[0], var[0], ac[0]
    d = (st.mean - mu) ** 2 + (st.variance - var) ** 2 + (st.autocorr - ac) ** 2
    return d.sum(axis=-1)


def trend_slope(values: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of ``values`` against block index and its standard error."""
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc ** 2).sum())
    resid = y - y.mean() - slope * xc
    dof = max(len(y) - 2, 1)
    se = float(np.sqrt((resid ** 2).sum() / dof / (xc ** 2).sum()))
    return slope, se


# --------------------------------------------------------------------------
# on-disk corpus


@dataclass
class ManifestRecord:
    path: str
    condition_id: int
    t_f: int = 0

    def to_json(self) -> str:
        return json.dumps({"path": self.path, "condition_id": self.condition_id, "t_f": self.t_f},
                          sort_keys=True)


def write_corpus(items, directory, spec: SyntheticSpec) -> Path:
    """Save each item as a latent stream file plus a line-delimited manifest."""
    from .io import save_latents

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with manifest.open("w") as fh:
        for it in items:
            name = f"item_{it.index:06d}.lat"
            save_latents(directory / name, it.latents)
            rec = ManifestRecord(name, it.condition_id, it.future_visibility)
            fh.write(rec.to_json() + "\n")
            if it.accompaniment is not None:
                save_latents(directory / f"item_{it.index:06d}.stem.lat", it.accompaniment)
    return manifest


def read_corpus(manifest, spec: SyntheticSpec) -> list[CorpusItem]:
    from .io import load_latents

    manifest = Path(manifest)
    items = []
    for i, line in enumerate(manifest.read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        x = load_latents(manifest.parent / rec["path"], channels=spec.channels)
        stem_path = manifest.parent / rec["path"].replace(".lat", ".stem.lat")
        stem = load_latents(stem_path, channels=spec.channels) if stem_path.exists() else None
        g = int(rec["condition_id"])
        items.append(CorpusItem(x, g, spec.global_vec(g), local_conditions(x), stem,
                                int(rec.get("t_f", 0)), i))
    return items
