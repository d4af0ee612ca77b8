import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdm import tensor as T
from lmdm.arcforcing import (ArcConfig, Discriminator, LossWeights, RolloutConfig, arc_force,
                             contrastive_loss, derangement, discriminator_step, generator_loss,
                             make_arc_batch,
                             relativistic_from_scores, relativistic_loss, rollout,
                             warmstart_discriminator)
from lmdm.data import SyntheticSpec, generate_corpus
from lmdm.dit import ConditionInput, DiT, ModelConfig
from lmdm.errors import ConfigError, ContractError
from lmdm.flowcore import (NoiseRole, NoiseSchedule, SamplerConfig, draw_noise, pingpong_step,
                           x0_from_v)
from lmdm.gradcheck import check
from lmdm.stream import StreamSession, run_blockcausal, run_encdec
from lmdm.train import AdamW

CFG = ModelConfig(channels=3, hidden=16, layers=1, heads=2, head_dim=8,
                  context_frames=4, target_frames=2, cond_dim=3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(0, 10_000))
def test_derangement_has_no_fixed_points(n, seed):
    p = derangement(n, np.random.default_rng(seed))
    assert sorted(p.tolist()) == list(range(n))
    assert not np.any(p == np.arange(n))


def test_derangement_needs_two():
    with pytest.raises(ContractError):
        derangement(1, np.random.default_rng(0))


def test_symmetric_scores_give_log_two():
    s = np.random.default_rng(0).standard_normal(9)
    assert abs(relativistic_from_scores(s, s).item() - math.log(2)) <= 1e-7


def test_both_losses_at_log_two_for_a_condition_blind_critic():
    G = DiT.init(CFG, 0)
    D = Discriminator.from_generator(G).attach_head(0)
    # zero the condition pathway so the critic ignores the class
    D.backbone.params["cond.weight"] = T.parameter(np.zeros_like(D.backbone.params["cond.weight"].data))
    x = np.random.default_rng(1).standard_normal((4, 3, 8)).astype(np.float32)
    c = ConditionInput(global_vec=np.eye(3, dtype=np.float32)[[0, 1, 2, 0]])
    k = np.full(4, 0.5, np.float32)
    with T.no_record():
        assert abs(relativistic_loss(D, x, x, c, k).item() - math.log(2)) <= 1e-7
        lc = contrastive_loss(D, x, c, k, derangement(4, np.random.default_rng(2)))
    assert abs(lc.item() - math.log(2)) <= 1e-7


def test_contrastive_loss_rejects_fixed_points():
    D = Discriminator.from_generator(DiT.init(CFG)).attach_head()
    c = ConditionInput(global_vec=np.eye(3, dtype=np.float32)[[0, 1]])
    with pytest.raises(ContractError):
        contrastive_loss(D, np.zeros((2, 3, 4), np.float32), c, 0.5, np.array([0, 1]))


@pytest.mark.parametrize("engine", ["encdec", "blockcausal"])
def test_rollout_matches_streaming_engine(engine):
    G = DiT.init(CFG, 2)
    rng = np.random.default_rng(0)
    prime = rng.standard_normal((2, 3, 4)).astype(np.float32)
    g = np.eye(3, dtype=np.float32)[[1, 2]]
    cfg = RolloutConfig(blocks=3, fixed_steps=2, engine=engine)
    with T.Tape() as tape:
        ro = rollout(G, prime, g, cfg, seed=7, null_frames=np.zeros(2, int), tape=tape)
    assert tape.count_regions("denoise") == 3
    sess = StreamSession.create(G, engine, SamplerConfig("pingpong", steps=2, rng_seed=7), 2,
                                prime=prime)
    ref = (run_encdec if engine == "encdec" else run_blockcausal)(sess, 3, g)
    np.testing.assert_allclose(ro.frames.data, ref, atol=1e-5)


def test_rollout_gradient_reaches_generator():
    G = DiT.init(CFG, 2).trainable()
    ctx = np.zeros((2, 3, 4), np.float32)
    cfg = RolloutConfig(blocks=2, fixed_steps=2)
    with T.Tape() as tape:
        ro = rollout(G, ctx, None, cfg, null_frames=np.full(2, 4), tape=tape)
        loss = T.sum(T.square(ro.frames))
    grads = tape.backward(loss)
    assert np.abs(grads[G.params["out.weight"]]).sum() > 0


def test_discriminator_step_lowers_its_loss_on_separable_data():
    D = Discriminator.from_generator(DiT.init(CFG, 0), window=8).attach_head(0)
    opt = AdamW(D.params, lr=3e-3)
    rng = np.random.default_rng(0)
    real = rng.standard_normal((4, 3, 8)).astype(np.float32)
    fake = real + 3.0
    c = ConditionInput(global_vec=np.eye(3, dtype=np.float32)[[0, 1, 2, 0]])
    first = discriminator_step(D, opt, fake, real, c, rng, k_range=(0.02, 0.1))
    for _ in range(15):
        last = discriminator_step(D, opt, fake, real, c, rng, k_range=(0.02, 0.1))
    assert last["L_R_D"] < first["L_R_D"]


def test_arc_force_smoke_and_csv(tmp_path):
    spec = SyntheticSpec(channels=3, n_conditions=3, frames=16)
    items = generate_corpus(spec, 8, 0)
    G = DiT.init(CFG, 1)
    acfg = ArcConfig(steps=2, batch=2, warmstart_steps=2, warmstart_batch=2, probe_every=1)
    res = arc_force(G, items, spec, acfg, RolloutConfig(blocks=2, k_max=2),
                    csv_path=tmp_path / "m.csv", probe=lambda g: 0.5)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,L_R_D,L_C,L_G,drift" and len(lines) == 3
    assert len(res.history) == 2 and len(res.warmstart_losses) == 2
    # the original generator is untouched
    for n, p in G.params.items():
        assert p.data is not res.generator.params[n].data


def test_config_validation():
    with pytest.raises(ConfigError):
        RolloutConfig(engine="baseline")
    with pytest.raises(ConfigError):
        RolloutConfig(k_min=3, k_max=2)
    with pytest.raises(ConfigError):
        ArcConfig(batch=1)
    with pytest.raises(ConfigError):
        LossWeights(contrastive=-1)


def test_arc_batch_lengths():
    spec = SyntheticSpec(channels=3, n_conditions=3, frames=16)
    items = generate_corpus(spec, 4, 0)
    b = make_arc_batch(items, np.random.default_rng(0), CFG, RolloutConfig(blocks=3), 5, 3)
    assert b.context.shape == (5, 3, 4) and b.real.shape == (5, 3, 6)
    with pytest.raises(ConfigError):
        make_arc_batch(items, np.random.default_rng(0), CFG, RolloutConfig(blocks=7), 5, 3)


def test_softplus_values_and_limits():
    assert relativistic_from_scores([1.0], [0.0]).item() == pytest.approx(1.3133, abs=1e-4)
    assert relativistic_from_scores([-60.0], [0.0]).item() < 1e-20
    # matched scores far above mismatched ones drive the contrastive loss to zero
    assert relativistic_from_scores([-30.0, -30.0], [30.0, 30.0]).item() < 1e-20


def test_only_derangement_of_two_is_a_swap():
    assert derangement(2, np.random.default_rng(0)).tolist() == [1, 0]


def test_final_step_only_tape_is_independent_of_step_count():
    G = DiT.init(CFG, 2).trainable()
    ctx = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    sizes, outs = [], []
    for K, seed in ((2, 0), (5, 0), (5, 1)):
        with T.Tape() as tape:
            ro = rollout(G, ctx, None, RolloutConfig(blocks=2, fixed_steps=K), seed=seed,
                         null_frames=np.zeros(2, int), tape=tape)
        sizes.append(len(tape))
        outs.append(ro.frames.data)
    assert sizes[0] == sizes[1] == sizes[2]
    assert not np.allclose(outs[1], outs[2])


def test_detached_early_steps_match_unrecorded_early_steps():
    # hand-rolled one-block rollout that records the early step and detaches it
    G = DiT.init(CFG, 4).trainable()
    ctx = np.random.default_rng(1).standard_normal((1, 3, 4)).astype(np.float32)
    cfg = RolloutConfig(blocks=1, fixed_steps=2)
    with T.Tape() as tape:
        ro = rollout(G, ctx, None, cfg, seed=3, null_frames=np.zeros(1, int), tape=tape)
        loss = T.sum(T.square(ro.frames))
    ref = tape.backward(loss)

    (k2, k1), (_, _) = NoiseSchedule.pingpong(2).pairs()
    cond = ConditionInput(null_context_frames=np.zeros(1, int))
    with T.Tape() as tape:
        cache = G.new_cache()
        G.encode_context(ctx, cond, cache)
        x = draw_noise(3, [0], 0, 0, NoiseRole.TARGET_INIT, 3, 2)
        x0 = x0_from_v(x, k2, G.forward_decode(x, k2, cond, cache))
        x = T.detach(pingpong_step(x0, k1, draw_noise(3, [0], 0, 2, NoiseRole.RENOISE, 3, 2)))
        out = x0_from_v(x, k1, G.forward_decode(x, k1, cond, cache))
        loss = T.sum(T.square(out))
    got = tape.backward(loss)
    assert set(map(id, got)) == set(map(id, ref))
    for p in G.params.values():
        if p in ref:
            np.testing.assert_array_equal(got[p], ref[p])


def test_fully_unconditional_rollouts_start_from_null_context():
    G = DiT.init(CFG, 0)
    ctx = np.ones((3, 3, 4), np.float32)
    ro = rollout(G, ctx, None, RolloutConfig(blocks=1, fixed_steps=2, p_uncond=1.0, p_partial=0.0),
                 rng=np.random.default_rng(0))
    assert ro.null_frames.tolist() == [4, 4, 4]
    assert not ro.context.any()


def test_combined_critic_loss_gradient_matches_finite_differences():
    cfg = ModelConfig(channels=2, hidden=8, layers=2, heads=2, head_dim=4,
                      context_frames=0, target_frames=4, cond_dim=2)
    D = Discriminator(DiT.init(cfg, 0).frozen()).attach_head(0)
    rng = np.random.default_rng(0)
    real = rng.standard_normal((2, 2, 4))
    c = ConditionInput(global_vec=np.eye(2, dtype=np.float32))
    k = np.float32([0.3, 0.6])

    def loss(w, fake):
        Dw = Discriminator(D.backbone, {"head.weight": w, "head.bias": D.head["head.bias"]})
        return T.add(relativistic_loss(Dw, fake, real, c, k),
                     contrastive_loss(Dw, real, c, k, np.array([1, 0])))

    assert check(loss, [D.head["head.weight"].data, rng.standard_normal((2, 2, 4))]) < 1e-3


def test_discriminator_separates_toy_data():
    D = Discriminator.from_generator(DiT.init(CFG, 0), window=8).attach_head(0)
    opt = AdamW(D.params, lr=1e-3)
    rng = np.random.default_rng(0)
    real = rng.standard_normal((4, 3, 8)).astype(np.float32)
    fake = real + 2.0
    c = ConditionInput(global_vec=np.eye(3, dtype=np.float32)[[0, 1, 2, 0]])
    for _ in range(200):
        discriminator_step(D, opt, fake, real, c, rng, k_range=(0.02, 0.2))
    k = np.full(4, 0.1, np.float32)
    with T.no_record():
        gap = D.score(real, k, c).data - D.score(fake, k, c).data
    assert gap.mean() > 0


def test_pure_relativistic_update_without_contrastive_weight():
    D = Discriminator.from_generator(DiT.init(CFG, 0), window=8).attach_head(0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8)).astype(np.float32)
    c = ConditionInput(global_vec=np.eye(3, dtype=np.float32)[[0, 1]])
    out = discriminator_step(D, AdamW(D.params), x + 1, x, c, rng, LossWeights(contrastive=0.0))
    assert out["L_C"] == 0.0


def test_constant_critic_gives_the_generator_zero_gradient():
    G = DiT.init(CFG, 2).trainable()
    D = Discriminator.from_generator(DiT.init(CFG, 0), window=8).attach_head(0)
    D.head["head.weight"] = T.parameter(np.zeros((CFG.hidden, 1)))
    Df = D.frozen()
    rng = np.random.default_rng(0)
    ctx = rng.standard_normal((2, 3, 4)).astype(np.float32)
    real = rng.standard_normal((2, 3, 8)).astype(np.float32)
    k = np.full(2, 0.5, np.float32)
    with T.Tape() as tape:
        ro = rollout(G, ctx, None, RolloutConfig(blocks=2, fixed_steps=2),
                     null_frames=np.zeros(2, int), tape=tape)
        fake = T.concat([ro.context, ro.frames], axis=2)
        eps = rng.standard_normal((2, 2, 3, 8)).astype(np.float32)
        loss = generator_loss(Df, fake, real, None, k, eps[0], eps[1])
    assert loss.item() == pytest.approx(math.log(2))
    grads = tape.backward(loss)
    assert any(p in grads for p in G.params.values())
    for p in G.params.values():
        if p in grads:
            np.testing.assert_allclose(grads[p], 0.0, atol=1e-7)


def test_warmstart_lowers_loss_and_leaves_head_for_later():
    spec = SyntheticSpec(channels=3, n_conditions=3, frames=24)
    items = generate_corpus(spec, 16, 0)
    D = Discriminator.from_generator(DiT.init(CFG, 0), window=8)
    losses = warmstart_discriminator(D, items, 60, 3, lr=3e-3, batch=8)
    tail = max(len(losses) // 10, 1)
    assert np.mean(losses[-tail:]) < losses[0]
    assert D.head == {}
    with pytest.raises(ContractError):
        warmstart_discriminator(D.attach_head(), items, 1, 3)


def test_default_critic_window_is_twice_the_generator_window():
    gen = ModelConfig()
    assert Discriminator.backbone_config(gen).target_frames == 2 * gen.total_frames
