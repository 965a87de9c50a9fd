"""Oracles shared by the unit and acceptance tests."""

import numpy as np

from plannerrl.grammar import FeatureSpace, instruction_prior
from plannerrl.policy import TokenBatch, masked_log_softmax, surrogate_from_tokens
from plannerrl.trajectory import ActionToken, TokenKind


def random_batch(space: FeatureSpace, params, rng, n_tokens=40, n_buckets=8, drift=0.0, weight=None):
    """Tokens drawn from the policy; old log-probs come from logits shifted by ``drift``."""
    buckets = rng.choice(space.n_buckets, size=n_buckets, replace=False)
    b = rng.choice(buckets, size=n_tokens)
    old_logits = params.logits + drift * rng.standard_normal(params.logits.shape)
    old_logp_all = masked_log_softmax(old_logits[b], space.mask[b])
    tokens = np.array([rng.choice(np.flatnonzero(space.mask[x])) for x in b])
    old = old_logp_all[np.arange(n_tokens), tokens]
    adv = rng.normal(0, 1.5, size=n_tokens)
    w = np.full(n_tokens, 1.0 / n_tokens) if weight is None else weight
    return TokenBatch(b.astype(np.int64), tokens.astype(np.int64), old, adv, w)


def near_kink(params, batch, eps, margin=1e-4):
    logp = masked_log_softmax(params.logits[batch.buckets], params.mask[batch.buckets])
    ratio = np.exp(logp[np.arange(batch.buckets.size), batch.tokens] - batch.old_logprob)
    return bool(np.any(np.abs(ratio - (1 - eps)) < margin) or np.any(np.abs(ratio - (1 + eps)) < margin))


def fd_gradient(params, batch, eps, kl_beta=0.0, ref=None, h=1e-5):
    """Central differences over every entry of the rows the batch touches."""
    rows = np.unique(batch.buckets)
    g = np.zeros_like(params.logits)
    base = params.logits
    for r in rows:
        for c in np.flatnonzero(params.mask[r]):
            up = base.copy()
            up[r, c] += h
            dn = base.copy()
            dn[r, c] -= h
            f_up = surrogate_from_tokens(params.with_logits(up), batch, eps, kl_beta, ref).objective_value
            f_dn = surrogate_from_tokens(params.with_logits(dn), batch, eps, kl_beta, ref).objective_value
            g[r, c] = (f_up - f_dn) / (2 * h)
    return g


def max_relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def oracle_bias(space: FeatureSpace, strength=8.0):
    """Logit offsets for an agent that writes the exact hop plan and follows it."""
    v = space.vocab
    bias = instruction_prior(space, strength, think_end=strength)
    end = v.kind(TokenKind.END_SEG)
    for b, key in enumerate(space.keys):
        if key[0] == "plan":
            _, p, more = key
            target = v.arg(f"rel:{p + 1}") if more and p < space.cfg.max_hops else end
            bias[b, target] += strength
    return np.where(space.mask, bias, 0.0)
