"""Toy diffusion transformer with context routing and cacheable attention.

Latents are ``(N, C, T)`` arrays; internally the model works on frame rows
``(N, T, H)``. The first ``s`` frames of a window are clean context and the
last ``o`` frames are the noisy target block.

Three ways to run the model:

* :meth:`DiT.forward_full` -- one pass over the whole window with an
  explicit attention mask (training and reference path).
* :meth:`DiT.encode_context` -- push clean frames through the network at
  noise level 0 and store their per-layer keys/values in a :class:`KVCache`.
* :meth:`DiT.forward_decode` -- predict velocity for the target block while
  attending to the cache.

Per-frame conditioning: every frame is modulated by an embedding of its own
noise level (0 for context, ``k`` for targets) plus the global condition, so
context rows never see ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    context_frames: int = 24
    target_frames: int = 8
    cond_dim: int = 8
    local_cond_channels: int = 0
    max_positions: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            minimum = 0 if f.name in ("context_frames", "local_cond_channels") else 1
            if v < minimum:
                raise ConfigError(f"{f.name} must be >= {minimum}, got {v}")
        if self.hidden != self.heads * self.head_dim:
            raise ConfigError(f"hidden {self.hidden} != heads {self.heads} x head_dim {self.head_dim}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary positions")
        if self.context_frames % self.target_frames:
            raise ConfigError(f"context_frames {self.context_frames} not divisible by "
                              f"target_frames {self.target_frames}")
        if self.total_frames > self.max_positions:
            raise ConfigError("window longer than max_positions")

    @property
    def total_frames(self) -> int:
        return self.context_frames + self.target_frames

    @property
    def input_width(self) -> int:
        return 2 * self.channels + self.local_cond_channels

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-size window: 240 frames with 48-frame blocks."""
        return cls(channels=64, hidden=1024, layers=16, heads=16, head_dim=64,
                   context_frames=192, target_frames=48, cond_dim=768, max_positions=1024)


# --------------------------------------------------------------------------
# conditions


@dataclass
class ConditionInput:
    """Global vector, optional local per-frame channels and null flags.

    ``global_vec`` is ``(N, cond_dim)`` (or ``None`` for all-null);
    ``global_null`` marks items whose global condition is dropped.
    ``local_chans`` covers the frames of the current window,
    ``(N, L, frames)``. ``null_context_frames`` counts, per item, how many of
    the oldest context frames are null. ``future_visibility`` (``t_f``)
    zeroes local frames at or beyond ``s + t_f`` of the window.
    """

    global_vec: np.ndarray | None = None
    global_null: np.ndarray | None = None
    local_chans: np.ndarray | None = None
    local_null: np.ndarray | None = None
    null_context_frames: np.ndarray | int = 0
    future_visibility: int | None = None

    def batch_size(self, default: int = 1) -> int:
        for a in (self.global_vec, self.local_chans, self.global_null):
            if a is not None:
                return np.asarray(a).shape[0]
        n = np.asarray(self.null_context_frames)
        return n.shape[0] if n.ndim else default

    def null_counts(self, n: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.null_context_frames, dtype=np.int64), (n,)).copy()

    def global_null_mask(self, n: int) -> np.ndarray:
        if self.global_vec is None:
            return np.ones(n, dtype=bool)
        if self.global_null is None:
            return np.zeros(n, dtype=bool)
        return np.broadcast_to(np.asarray(self.global_null, bool), (n,)).copy()

    def unconditional(self) -> "ConditionInput":
        """Same context flags, global and local conditions dropped."""
        return replace(self, global_vec=None, global_null=None, local_chans=None, local_null=None)

    def local_window(self, n: int, frames: int, channels: int, s: int, start: int = 0):
        """Local channels for window frames ``[start, start + frames)``.

        Returns ``(N, frames, channels)`` rows with null items and frames past
        the visibility cutoff zeroed.
        """
        out = np.zeros((n, frames, channels), dtype=np.float32)
        if channels == 0 or self.local_chans is None:
            return out
        lc = np.asarray(self.local_chans, dtype=np.float32)
        if lc.shape[0] != n or lc.shape[1] != channels:
            raise DimensionError(f"local_chans {lc.shape} for batch {n}, {channels} channels")
        if lc.shape[2] < start + frames:
            raise DimensionError(f"local_chans cover {lc.shape[2]} frames, need {start + frames}")
        out[:] = lc[:, :, start:start + frames].transpose(0, 2, 1)
        if self.future_visibility is not None:
            cutoff = s + int(self.future_visibility)
            idx = np.arange(start, start + frames)
            out[:, idx >= cutoff, :] = 0.0
        if self.local_null is not None:
            out[np.asarray(self.local_null, bool)] = 0.0
        return out

    def take(self, idx) -> "ConditionInput":
        """Sub-batch."""
        def pick(a):
            return None if a is None else np.asarray(a)[idx]
        ncf = np.asarray(self.null_context_frames)
        return ConditionInput(pick(self.global_vec), pick(self.global_null),
                              pick(self.local_chans), pick(self.local_null),
                              ncf[idx] if ncf.ndim else ncf, self.future_visibility)


def stack_conditions(a: ConditionInput, b: ConditionInput, n: int) -> ConditionInput:
    """Concatenate two condition batches of size ``n`` along the batch axis."""
    def gvec(c):
        if c.global_vec is None:
            return None
        return np.asarray(c.global_vec, np.float32)

    ga, gb = gvec(a), gvec(b)
    if ga is None and gb is None:
        g = None
    else:
        width = (ga if ga is not None else gb).shape[-1]
        g = np.concatenate([ga if ga is not None else np.zeros((n, width), np.float32),
                            gb if gb is not None else np.zeros((n, width), np.float32)])
    gnull = np.concatenate([a.global_null_mask(n), b.global_null_mask(n)])
    if a.local_chans is None and b.local_chans is None:
        lc = lnull = None
    else:
        ref = a.local_chans if a.local_chans is not None else b.local_chans
        zero = np.zeros_like(np.asarray(ref, np.float32))
        lc = np.concatenate([a.local_chans if a.local_chans is not None else zero,
                             b.local_chans if b.local_chans is not None else zero])
        lnull = np.concatenate([
            np.zeros(n, bool) if a.local_null is None and a.local_chans is not None
            else (np.ones(n, bool) if a.local_chans is None else np.asarray(a.local_null, bool)),
            np.zeros(n, bool) if b.local_null is None and b.local_chans is not None
            else (np.ones(n, bool) if b.local_chans is None else np.asarray(b.local_null, bool)),
        ])
    ncf = np.concatenate([a.null_counts(n), b.null_counts(n)])
    return ConditionInput(g, gnull, lc, lnull, ncf, a.future_visibility)


# --------------------------------------------------------------------------
# attention masks


class MaskFamily(str, Enum):
    BIDIRECTIONAL = "bidirectional"
    ENCDEC = "encdec"
    BLOCKCAUSAL = "blockcausal"


@dataclass(frozen=True)
class AttentionMaskSpec:
    family: MaskFamily
    s: int = 0
    o: int = 1

    def __post_init__(self):
        object.__setattr__(self, "family", MaskFamily(self.family))


def build_mask(spec: AttentionMaskSpec, T_frames: int | None = None) -> np.ndarray:
    """Boolean ``(T, T)`` matrix; ``True`` means row may attend column."""
    s, o = spec.s, spec.o
    n = s + o if T_frames is None else T_frames
    if spec.family is MaskFamily.BIDIRECTIONAL:
        return np.ones((n, n), dtype=bool)
    if n != s + o:
        raise ConfigError(f"mask for s={s}, o={o} needs T={s + o}, got {n}")
    mask = np.ones((n, n), dtype=bool)
    mask[:s, s:] = False
    if spec.family is MaskFamily.BLOCKCAUSAL:
        if o <= 0 or s % o:
            raise ConfigError(f"block-causal mask needs s ({s}) divisible by o ({o})")
        blk = np.arange(s) // o
        mask[:s, :s] = blk[None, :] <= blk[:, None]
    return mask


def banded_block_mask(n_context_blocks: int, o: int, window_blocks: int) -> np.ndarray:
    """Mask over a long history of context blocks followed by one target block.

    Every block attends itself and the ``window_blocks`` blocks before it;
    this is the dependency structure a sliding block-causal cache produces.
    """
    nb = n_context_blocks + 1
    blk = np.arange(nb * o) // o
    diff = blk[:, None] - blk[None, :]
    return (diff >= 0) & (diff <= window_blocks)


# --------------------------------------------------------------------------
# KV cache


@dataclass
class KVCache:
    """Per-layer keys (stored before rotation) and values for a window.

    Arrays are ``(N, heads, length, head_dim)``. Keys are rotated on read
    according to their current window position, so evicting old frames
    shifts the remaining ones down without invalidating them.
    """

    layers: int
    capacity: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    _rotated: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.keys:
            self.keys = [None] * self.layers
            self.values = [None] * self.layers

    def __len__(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    @property
    def length(self) -> int:
        return len(self)

    def clear(self):
        self.keys = [None] * self.layers
        self.values = [None] * self.layers
        self._rotated.clear()

    def append(self, new_keys, new_values):
        n_new = new_keys[0].shape[2]
        if len(self) + n_new > self.capacity:
            raise ContractError(f"cache capacity {self.capacity} exceeded "
                                f"({len(self)} + {n_new})")
        for i, (k, v) in enumerate(zip(new_keys, new_values)):
            if self.keys[i] is None:
                self.keys[i], self.values[i] = k, v
            else:
                self.keys[i] = np.concatenate([self.keys[i], k], axis=2)
                self.values[i] = np.concatenate([self.values[i], v], axis=2)
        self._rotated.clear()

    def slide_evict(self, n: int):
        """Drop the oldest ``n`` frames."""
        if n > len(self):
            raise ContractError(f"cannot evict {n} of {len(self)} cached frames")
        for i in range(self.layers):
            self.keys[i] = self.keys[i][:, :, n:]
            self.values[i] = self.values[i][:, :, n:]
        self._rotated.clear()

    def rotated_keys(self, layer: int) -> np.ndarray:
        if layer not in self._rotated:
            k = self.keys[layer]
            self._rotated[layer] = T.rope(T.Tensor(k), np.arange(k.shape[2])).data
        return self._rotated[layer]


# --------------------------------------------------------------------------
# parameters


def _param_shapes(cfg: ModelConfig) -> dict:
    H, C = cfg.hidden, cfg.channels
    shapes = {
        "init.weight": (cfg.input_width, H),
        "null_context": (H,),
        "time.w1": (H, H), "time.b1": (H,),
        "time.w2": (H, H), "time.b2": (H,),
        "cond.weight": (cfg.cond_dim, H), "cond.bias": (H,),
        "cond.null": (H,),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "mod.weight": (H, 6 * H), p + "mod.bias": (6 * H,),
            p + "qkv.weight": (H, 3 * H), p + "qkv.bias": (3 * H,),
            p + "proj.weight": (H, H), p + "proj.bias": (H,),
            p + "mlp.w1": (H, cfg.mlp_ratio * H), p + "mlp.b1": (cfg.mlp_ratio * H,),
            p + "mlp.w2": (cfg.mlp_ratio * H, H), p + "mlp.b2": (H,),
        })
    shapes.update({
        "final.mod.weight": (H, 2 * H), "final.mod.bias": (2 * H,),
        "out.weight": (H, C), "out.bias": (C,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if len(shape) == 1:
            if name in ("null_context", "cond.null"):
                arr = rng.normal(0, 0.1, shape)
            else:
                arr = np.zeros(shape)
        else:
            arr = rng.normal(0, 1 / math.sqrt(shape[0]), shape)
            if name.endswith("mod.weight") or name == "out.weight":
                arr *= 0.1
        params[name] = T.parameter(arr)
    return params


def sinusoidal_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal features of noise levels ``k`` (shape ``(N,)``)."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * k[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb.astype(np.float32)


def attention(q, k, v, mask=None, q_positions=None, k_positions=None) -> T.Tensor:
    """Scaled dot-product attention over ``(N, heads, rows, head_dim)`` inputs.

    When positions are given, rotary encoding is applied to ``q``/``k``
    first. ``mask`` is a boolean ``(rows_q, rows_k)`` array.
    """
    if q_positions is not None:
        q = T.rope(q, q_positions)
    if k_positions is not None:
        k = T.rope(k, k_positions)
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape[-2:]:
            raise DimensionError(f"mask {mask.shape} for scores {scores.shape[-2:]}")
        if not mask.any(axis=1).all():
            raise ContractError("attention mask has a row with no allowed columns")
        scores = T.masked_fill(scores, mask)
    return T.matmul(T.softmax(scores, axis=-1), v)


# --------------------------------------------------------------------------
# model


class DiT:
    """Velocity network ``v(x_k, k, c)`` with a routed input projection."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        expected = _param_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0) -> "DiT":
        config = config or ModelConfig()
        return cls(config, init_params(config, seed))

    def frozen(self) -> "DiT":
        """Copy sharing values whose parameters are not grad-enabled."""
        return DiT(self.config, {n: T.Tensor._wrap(p.data) for n, p in self.params.items()})

    def trainable(self) -> "DiT":
        return DiT(self.config, {n: T.parameter(p.data) for n, p in self.params.items()})

    def with_config(self, config: ModelConfig) -> "DiT":
        """Same weights under another window geometry (weights are window-agnostic)."""
        return DiT(config, self.params)

    @property
    def A(self) -> np.ndarray:
        """Noisy-latent block of the input projection, ``(H, C)``."""
        return self.params["init.weight"].data[:self.config.channels].T

    @property
    def B(self) -> np.ndarray:
        """Clean-context block of the input projection, ``(H, C)``."""
        c = self.config.channels
        return self.params["init.weight"].data[c:2 * c].T

    # ---- embeddings -----------------------------------------------------

    def _level_embedding(self, levels, cond: ConditionInput, n: int) -> T.Tensor:
        """``silu(time(k) + cond)`` per item, shape ``(N, H)``."""
        p = self.params
        H = self.config.hidden
        lv = np.broadcast_to(np.asarray(levels, np.float32).reshape(-1), (n,))
        sin = sinusoidal_embedding(lv, H)
        t = T.add(T.matmul(sin, p["time.w1"]), p["time.b1"])
        t = T.add(T.matmul(T.silu(t), p["time.w2"]), p["time.b2"])
        null = cond.global_null_mask(n)
        if null.all():
            g = T.expand(p["cond.null"], (n, H))
        else:
            gv = np.zeros((n, self.config.cond_dim), np.float32)
            if cond.global_vec is not None:
                gv = np.asarray(cond.global_vec, np.float32).reshape(n, -1)
            if gv.shape[1] != self.config.cond_dim:
                raise DimensionError(f"global_vec width {gv.shape[1]} != cond_dim {self.config.cond_dim}")
            g = T.add(T.matmul(gv, p["cond.weight"]), p["cond.bias"])
            if null.any():
                keep = np.broadcast_to((~null)[:, None].astype(np.float32), (n, H))
                g = T.add(T.mul(g, keep), T.mul(1.0 - keep, p["cond.null"]))
        return T.silu(T.add(t, g))

    def _embeddings(self, segments, cond: ConditionInput, n: int):
        """Embeddings for each distinct level; ``segments`` is ``[(level, frames), ...]``."""
        cache = {}
        out = []
        for level, frames in segments:
            key = np.asarray(level, np.float32).tobytes()
            if key not in cache:
                cache[key] = self._level_embedding(level, cond, n)
            out.append((cache[key], frames))
        return out

    # ---- input projection ------------------------------------------------

    def input_project(self, x_noisy, x_clean, cond: ConditionInput | None = None,
                      route: bool = True) -> T.Tensor:
        """Initial hidden rows ``(N, T, H)`` of a full window.

        With routing, noisy latents are zeroed on context frames before the
        projection, so context rows depend only on ``x_clean``.
        """
        cfg = self.config
        s, C = cfg.context_frames, cfg.channels
        x_noisy = T._as_tensor(x_noisy)
        x_clean = T._as_tensor(x_clean)
        if x_noisy.ndim != 3 or x_noisy.shape[1] != C:
            raise DimensionError(f"x_noisy must be (N, {C}, T), got {x_noisy.shape}")
        n, _, t_frames = x_noisy.shape
        if t_frames != cfg.total_frames:
            raise DimensionError(f"window has {t_frames} frames, model expects {cfg.total_frames}")
        if x_clean.shape != (n, C, s):
            raise DimensionError(f"x_clean must be {(n, C, s)}, got {x_clean.shape}")
        cond = cond or ConditionInput()
        xt = T.transpose(x_noisy, (0, 2, 1))
        if route:
            r = np.zeros((t_frames, C), np.float32)
            r[s:] = 1.0
            xt = T.mul(xt, r)
        parts = [xt]
        zeros_tgt = np.zeros((n, cfg.target_frames, C), np.float32)
        parts.append(T.concat([T.transpose(x_clean, (0, 2, 1)), zeros_tgt], axis=1))
        if cfg.local_cond_channels:
            parts.append(cond.local_window(n, t_frames, cfg.local_cond_channels, s))
        h = T.matmul(T.concat(parts, axis=-1), self.params["init.weight"])
        return self._add_null_context(h, cond, n, 0, t_frames, s)

    def _add_null_context(self, h, cond, n, start, frames, limit):
        counts = np.minimum(cond.null_counts(n), limit)
        idx = np.arange(start, start + frames)
        rows = (idx[None, :] < counts[:, None]).astype(np.float32)
        if not rows.any():
            return h
        H = self.config.hidden
        mask = np.broadcast_to(rows[:, :, None], (n, frames, H))
        return T.add(h, T.mul(mask, self.params["null_context"]))

    def _project_rows(self, x_rows, clean: bool, cond, n, start, frames, s):
        """Project frame rows outside a full window (cached passes)."""
        cfg = self.config
        C = cfg.channels
        x_rows = T._as_tensor(x_rows)
        xt = T.transpose(x_rows, (0, 2, 1))
        zeros = np.zeros((n, frames, C), np.float32)
        parts = [zeros, xt] if clean else [xt, zeros]
        if cfg.local_cond_channels:
            parts.append(cond.local_window(n, frames, cfg.local_cond_channels, s, start))
        h = T.matmul(T.concat(parts, axis=-1), self.params["init.weight"])
        if clean:
            h = self._add_null_context(h, cond, n, start, frames, s)
        return h

    # ---- transformer body -----------------------------------------------

    def _modulation(self, embeds, weight, bias, n, parts):
        """Per-frame modulation rows: list of ``parts`` tensors ``(N, T, H)``."""
        H = self.config.hidden
        pieces = []
        for e, frames in embeds:
            m = T.add(T.matmul(e, weight), bias)
            m = T.reshape(m, (n, 1, parts * H))
            pieces.append(T.expand(m, (n, frames, parts * H)))
        mod = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=1)
        total = mod.shape[1]
        mod = T.reshape(mod, (n, total, parts, H))
        return [T.take(mod, (slice(None), slice(None), i)) for i in range(parts)]

    def _body(self, h, embeds, positions, mask=None, cache: KVCache | None = None,
              collect_kv: bool = False, kv_only: bool = False, hidden_out=None,
              mac_rows=None):
        """Run all layers on rows ``h``.

        Queries are the rows of ``h`` at ``positions``; keys/values are the
        cached entries (if any) followed by the rows themselves.
        """
        cfg = self.config
        p = self.params
        n, rows, H = h.shape
        nh, hd = cfg.heads, cfg.head_dim
        new_k, new_v = [], []
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            sh1, sc1, g1, sh2, sc2, g2 = self._modulation(
                embeds, p[pre + "mod.weight"], p[pre + "mod.bias"], n, 6)
            x = T.layer_norm(h)
            x = T.add(T.mul(x, T.add(sc1, 1.0)), sh1)
            qkv = T.add(T.matmul(x, p[pre + "qkv.weight"]), p[pre + "qkv.bias"])
            qkv = T.transpose(T.reshape(qkv, (n, rows, 3, nh, hd)), (2, 0, 3, 1, 4))
            q, k, v = (T.take(qkv, j) for j in range(3))
            if collect_kv:
                new_k.append(k.data)
                new_v.append(v.data)
            if kv_only and i == cfg.layers - 1:
                break
            q_rot = T.rope(q, positions)
            k_rot = T.rope(k, positions)
            if cache is not None and len(cache):
                k_rot = T.concat([cache.rotated_keys(i), k_rot], axis=2)
                v_all = T.concat([cache.values[i], v], axis=2)
            else:
                v_all = v
            att = attention(q_rot, k_rot, v_all, mask)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (n, rows, H))
            att = T.add(T.matmul(att, p[pre + "proj.weight"]), p[pre + "proj.bias"])
            h = T.add(h, T.mul(g1, att))
            x = T.layer_norm(h)
            x = T.add(T.mul(x, T.add(sc2, 1.0)), sh2)
            x = T.silu(T.add(T.matmul(x, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
            x = T.add(T.matmul(x, p[pre + "mlp.w2"]), p[pre + "mlp.b2"])
            h = T.add(h, T.mul(g2, x))
            if hidden_out is not None:
                hidden_out.append(h)
        return h, new_k, new_v

    def _head(self, h, embeds, n) -> T.Tensor:
        p = self.params
        shift, sc = self._modulation(embeds, p["final.mod.weight"], p["final.mod.bias"], n, 2)
        x = T.add(T.mul(T.layer_norm(h), T.add(sc, 1.0)), shift)
        out = T.add(T.matmul(x, p["out.weight"]), p["out.bias"])
        return T.transpose(out, (0, 2, 1))

    # ---- public passes -----------------------------------------------------

    def forward_full(self, x_k, x_clean, k, cond: ConditionInput | None = None,
                     mask_spec: AttentionMaskSpec | None = None, route: bool = True,
                     return_hidden: bool = False):
        """Velocity over every frame of the window, ``(N, C, s + o)``.

        With ``return_hidden`` also returns ``[h_init, h_1, ..., h_L]``.
        """
        cfg = self.config
        s, o = cfg.context_frames, cfg.target_frames
        cond = cond or ConditionInput()
        mask_spec = mask_spec or AttentionMaskSpec(MaskFamily.ENCDEC, s, o)
        if mask_spec.family is not MaskFamily.BIDIRECTIONAL and (mask_spec.s, mask_spec.o) != (s, o):
            raise ConfigError(f"mask geometry {(mask_spec.s, mask_spec.o)} != model {(s, o)}")
        h = self.input_project(x_k, x_clean, cond, route)
        n = h.shape[0]
        if route:
            segments = [(0.0, s), (k, o)] if s else [(k, o)]
        else:
            segments = [(k, s + o)]
        embeds = self._embeddings(segments, cond, n)
        mask = build_mask(mask_spec, s + o)
        hidden = [h] if return_hidden else None
        h, _, _ = self._body(h, embeds, np.arange(s + o), mask, hidden_out=hidden)
        v = self._head(h, embeds, n)
        return (v, hidden) if return_hidden else v

    def forward_history(self, history, x_k_target, k, cond: ConditionInput | None = None,
                        window_blocks: int | None = None, null_frames=None):
        """No-cache reference for block-causal streaming.

        Runs the whole clean ``history`` (``(N, C, H_frames)``, a multiple of
        ``o``) plus the target block with :func:`banded_block_mask`, and
        returns the target-block velocity.
        """
        cfg = self.config
        o = cfg.target_frames
        cond = cond or ConditionInput()
        history = T._as_tensor(history)
        n, _, hf = history.shape
        if hf % o:
            raise DimensionError(f"history length {hf} not a multiple of o={o}")
        window_blocks = cfg.context_frames // o if window_blocks is None else window_blocks
        null_cond = replace(cond, null_context_frames=0 if null_frames is None else null_frames)
        h_ctx = self._project_rows(history, True, null_cond, n, 0, hf, hf)
        h_tgt = self._project_rows(x_k_target, False, cond, n, 0, o, 0)
        h = T.concat([h_ctx, h_tgt], axis=1)
        embeds = self._embeddings([(0.0, hf), (k, o)], cond, n)
        mask = banded_block_mask(hf // o, o, window_blocks)
        h, _, _ = self._body(h, embeds, np.arange(hf + o), mask)
        v = self._head(h, embeds, n)
        return T.take(v, (slice(None), slice(None), slice(hf, hf + o)))

    def new_cache(self) -> KVCache:
        return KVCache(self.config.layers, max(self.config.context_frames, 1))

    def encode_context(self, frames, cond: ConditionInput | None, cache: KVCache,
                       evict_oldest: bool = False):
        """Encode clean frames at level 0 and store their keys/values.

        New frames attend the existing cache plus themselves. With
        ``evict_oldest`` the cache drops as many old frames as were encoded
        before appending (sliding window). Returns the new ``(keys, values)``.
        ``cond.null_context_frames`` counts null frames from the start of the
        current window.
        """
        cfg = self.config
        cond = cond or ConditionInput()
        frames = T._as_tensor(frames)
        n, C, nf = frames.shape
        if C != cfg.channels:
            raise DimensionError(f"frames have {C} channels, model expects {cfg.channels}")
        start = len(cache)
        if not evict_oldest and start + nf > cache.capacity:
            raise ContractError(f"cache capacity {cache.capacity} exceeded ({start} + {nf})")
        h = self._project_rows(frames, True, cond, n, start, nf, cfg.context_frames)
        embeds = self._embeddings([(0.0, nf)], cond, n)
        positions = np.arange(start, start + nf)
        _, keys, values = self._body(h, embeds, positions, cache=cache,
                                     collect_kv=True, kv_only=True)
        if evict_oldest and start + nf > cache.capacity:
            cache.slide_evict(start + nf - cache.capacity)
        cache.append(keys, values)
        return keys, values

    def forward_decode(self, x_k_target, k, cond: ConditionInput | None, cache: KVCache):
        """Target-block velocity ``(N, C, o)`` attending cached context."""
        cfg = self.config
        cond = cond or ConditionInput()
        x_k_target = T._as_tensor(x_k_target)
        n, C, o = x_k_target.shape
        if (C, o) != (cfg.channels, cfg.target_frames):
            raise DimensionError(f"target must be (N, {cfg.channels}, {cfg.target_frames}), "
                                 f"got {x_k_target.shape}")
        start = len(cache)
        if cfg.context_frames > 0 and start == 0:
            raise ContractError("decode needs an encoded context in the cache")
        h = self._project_rows(x_k_target, False, cond, n, start, o, start)
        embeds = self._embeddings([(k, o)], cond, n)
        h, _, _ = self._body(h, embeds, np.arange(start, start + o), cache=cache)
        return self._head(h, embeds, n)
