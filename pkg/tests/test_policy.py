import math

import numpy as np
import pytest

from plannerrl.grammar import FeatureSpace, GrammarConfig
from plannerrl.policy import (
    Adam,
    CheckpointError,
    ContractError,
    DecodeTable,
    GrammarError,
    NumericalError,
    TokenBatch,
    apply_update,
    init_params,
    load_checkpoint,
    masked_log_softmax,
    next_distribution,
    save_checkpoint,
    surrogate_from_tokens,
    surrogate_gradient,
)
from plannerrl.shaping import ShapingConfig, shape
from plannerrl.trajectory import RolloutGroup

from conftest import good_rollout
from helpers import fd_gradient, max_relative_error, near_kink, random_batch


@pytest.fixture(scope="module")
def space():
    return FeatureSpace()


def test_uniform_init_entropy(space):
    p = init_params(0, 0.0, space)
    for b in range(space.n_buckets):
        d = next_distribution(p, b)
        k = int(space.mask[b].sum())
        assert np.allclose(d.probs[space.mask[b]], 1 / k)
        assert math.isclose(d.entropy, math.log(k), abs_tol=1e-12)


def test_init_deterministic_and_finite(space):
    a, b = init_params(3, 0.1, space), init_params(3, 0.1, space)
    assert np.array_equal(a.logits, b.logits)
    assert np.all(np.isfinite(a.logits)) and np.abs(a.logits).max() <= 0.1
    with pytest.raises(ValueError):
        init_params(0, -1.0, space)


def test_two_token_softmax(space):
    p = init_params(0, 0.0, space)
    b = next(i for i in range(space.n_buckets) if space.mask[i].sum() == 2)
    ids = np.flatnonzero(space.mask[b])
    d = next_distribution(p, b)
    assert np.allclose(d.probs[ids], [0.5, 0.5]) and math.isclose(d.entropy, math.log(2))
    logits = p.logits.copy()
    logits[b, ids[0]] = 1.0
    d = next_distribution(p.with_logits(logits), b)
    e = math.e
    assert np.allclose(d.probs[ids], [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert abs(d.probs.sum() - 1) < 1e-12
    assert np.all(d.probs[~space.mask[b]] == 0.0)


def test_empty_mask_is_error(space):
    p = init_params(0, 0.0, space)
    with pytest.raises(GrammarError):
        next_distribution(p, 0, np.zeros(space.n_tokens, dtype=bool))


def test_entropy_bounds(space):
    p = init_params(5, 3.0, space)
    for b in range(space.n_buckets):
        h = next_distribution(p, b).entropy
        assert -1e-12 <= h <= math.log(space.mask[b].sum()) + 1e-12


def test_decode_table_matches_distribution(space):
    p = init_params(2, 1.0, space)
    table = DecodeTable(p)
    rng = np.random.default_rng(0)
    b = space.bucket("plan", 0, True)
    d = next_distribution(p, b)
    draws = [table.sample(b, u)[0] for u in rng.random(20000)]
    freq = np.bincount(draws, minlength=space.n_tokens) / len(draws)
    assert np.abs(freq - d.probs).max() < 0.015
    tid, lp, h = table.sample(b, 0.3)
    assert math.isclose(lp, math.log(d.probs[tid])) and math.isclose(h, d.entropy)


def test_argmax_ties_go_to_lowest_id(space):
    table = DecodeTable(init_params(0, 0.0, space))
    for b in range(space.n_buckets):
        assert table.argmax(b)[0] == int(np.flatnonzero(space.mask[b])[0])


# -- surrogate ---------------------------------------------------------------


def test_ratio_one_identity(space):
    rng = np.random.default_rng(1)
    p = init_params(1, 0.5, space)
    batch = random_batch(space, p, rng)
    sg = surrogate_from_tokens(p, batch, 0.2)
    assert math.isclose(sg.objective_value, float(np.sum(batch.weight * batch.advantage)), abs_tol=1e-12)
    logp = masked_log_softmax(p.logits[batch.buckets], space.mask[batch.buckets])
    probs = np.where(space.mask[batch.buckets], np.exp(logp), 0.0)
    expected = np.zeros_like(p.logits)
    for i, (b, t) in enumerate(zip(batch.buckets, batch.tokens)):
        onehot = np.zeros(space.n_tokens)
        onehot[t] = 1.0
        expected[b] += batch.weight[i] * batch.advantage[i] * (onehot - probs[i])
    assert np.allclose(sg.grads, expected, atol=1e-14)
    assert sg.clip_fraction == 0.0


def test_zero_advantage_zero_gradient(space):
    rng = np.random.default_rng(2)
    p = init_params(1, 0.5, space)
    batch = random_batch(space, p, rng, drift=0.5)
    batch.advantage[:] = 0.0
    assert not surrogate_from_tokens(p, batch, 0.2).grads.any()


@pytest.mark.parametrize("seed", range(12))
def test_gradient_matches_finite_differences(space, seed):
    rng = np.random.default_rng(seed)
    p = init_params(seed, 1.0, space)
    eps = 0.2
    while True:
        batch = random_batch(space, p, rng, n_tokens=30, n_buckets=5, drift=0.6 if seed % 2 else 0.0)
        if not near_kink(p, batch, eps):
            break
    kl = 0.05 if seed % 3 == 0 else 0.0
    ref = init_params(seed + 100, 1.0, space) if kl else None
    sg = surrogate_from_tokens(p, batch, eps, kl, ref)
    assert max_relative_error(sg.grads, fd_gradient(p, batch, eps, kl, ref)) < 1e-4


def test_clipped_tokens_have_no_ratio_gradient(space):
    p = init_params(0, 0.0, space)
    b = space.bucket("plan", 0, True)
    t = int(np.flatnonzero(space.mask[b])[0])
    logp = float(masked_log_softmax(p.logits[b], space.mask[b])[t])
    # ratio = 2 with positive advantage: the clipped branch wins, gradient is zero
    batch = TokenBatch(np.array([b]), np.array([t]), np.array([logp - math.log(2)]), np.array([1.0]), np.array([1.0]))
    sg = surrogate_from_tokens(p, batch, 0.2)
    assert not sg.grads.any() and sg.clip_fraction == 1.0
    assert math.isclose(sg.objective_value, 1.2)
    # same ratio, negative advantage: unclipped branch is the min, gradient flows
    batch.advantage[:] = -1.0
    assert surrogate_from_tokens(p, batch, 0.2).grads.any()


def test_surrogate_contract_errors(space):
    p = init_params(0, 0.0, space)
    rng = np.random.default_rng(0)
    batch = random_batch(space, p, rng)
    with pytest.raises(ContractError):
        surrogate_from_tokens(p, batch, 1.5)
    with pytest.raises(ContractError):
        surrogate_from_tokens(p, batch, 0.2, kl_beta=0.1)


def test_group_gradient_alignment_checked(space):
    # rollouts built by hand carry no buckets, so the advantage count must still match tokens
    group = RolloutGroup("q0", (good_rollout(1), good_rollout(1)))
    shaped = shape(group, [1.0, 0.0], [r.per_token.entropy for r in group], ShapingConfig())
    shaped.final[0] = shaped.final[0][:-1]
    with pytest.raises(ContractError):
        surrogate_gradient(init_params(0, 0.0, space), group, shaped, space=space)


# -- updates -----------------------------------------------------------------


def test_update_identities(space):
    p = init_params(0, 0.3, space)
    g = np.random.default_rng(0).standard_normal(p.logits.shape)
    assert np.array_equal(apply_update(p, g, 0.0).logits, p.logits)
    assert np.array_equal(apply_update(p, np.zeros_like(g), 1.0).logits, p.logits)
    with pytest.raises(ValueError):
        apply_update(p, g, -1.0)
    g[0, 0] = np.nan
    with pytest.raises(NumericalError):
        apply_update(p, g, 1.0)


def test_grad_norm_clip(space):
    p = init_params(0, 0.0, space)
    g = np.ones(p.logits.shape)
    out = apply_update(p, g, 1.0, max_grad_norm=1.0)
    assert math.isclose(np.linalg.norm(out.logits - p.logits), 1.0)


def test_bandit_step_increases_objective(space):
    p = init_params(0, 0.0, space)
    b = space.bucket("plan", 0, True)
    ids = np.flatnonzero(space.mask[b])
    logp = masked_log_softmax(p.logits[b], space.mask[b])
    batch = TokenBatch(np.array([b, b]), ids[:2], logp[ids[:2]], np.array([1.0, -1.0]), np.array([0.5, 0.5]))
    before = surrogate_from_tokens(p, batch, 0.2)
    after = surrogate_from_tokens(apply_update(p, before.grads, 0.5), batch, 0.2)
    assert after.objective_value > before.objective_value


def test_adam_moves_uphill(space):
    p = init_params(0, 0.0, space)
    g = np.zeros(p.logits.shape)
    g[3, 1] = 2.0
    out = Adam(0.1).step(p, g)
    assert out.logits[3, 1] > 0 and np.count_nonzero(out.logits) == 1


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, space):
    p = init_params(4, 0.7, space)
    save_checkpoint(tmp_path / "c.npz", p, step=12)
    back = load_checkpoint(tmp_path / "c.npz", space)
    assert np.array_equal(back.logits, p.logits) and back.signature == p.signature


def test_checkpoint_shape_mismatch(tmp_path, space):
    save_checkpoint(tmp_path / "c.npz", init_params(0, 0.1, space))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.npz", FeatureSpace(GrammarConfig(max_hops=2)))
