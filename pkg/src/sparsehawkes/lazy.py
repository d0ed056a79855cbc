"""Sparse evaluation engine: cost scales with active entities, not the universe.

Most entities never appear in a given sequence, yet each one owes compensator
mass there.  That mass only enters through two global sums: the total
receiving embedding and the decay-weighted emitting totals across sequences.
Precomputing those (plus a per-entity share of the horizons where an entity
is absent) removes every per-inactive-entity term from the likelihood and
gradient, which is what makes training on huge entity universes feasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense import GradientBuffer
from .model import Dataset, ModelParams, NumericalDivergenceError, Sequence, checked_beta, softplus, softplus_grad
from .scan import batch_sequence_stats, sequence_stats

__all__ = [
    "StaleCacheError",
    "LazyCaches",
    "SequenceGradient",
    "build_caches",
    "lazy_log_likelihood",
    "lazy_sequence_gradients",
    "accumulate_lazy_gradient",
    "update_u_hat",
]


class StaleCacheError(RuntimeError):
    """Caches were built under different parameters than the ones supplied."""


@dataclass
class LazyCaches:
    """Precomputed aggregates the sparse engine leans on.

    u_hat : (d,) sum of receiving embeddings over all entities
    z_hat : (d,) decay-weighted emitting totals summed over all sequences
    d_const : (n,) per-entity inactive-horizon share, zero for entities with
        no events anywhere
    g_mu_const : (n,) same quotient, kept separately because the likelihood
        and the background-rate gradient consume it independently
    total_horizon : summed observation windows
    never_active : entity ids absent from every sequence; their compensator
        mass cannot ride on the per-active terms and is added globally
    built_from : defensive copy of the parameters the caches were built from
    """

    u_hat: np.ndarray
    z_hat: np.ndarray
    d_const: np.ndarray
    g_mu_const: np.ndarray
    total_horizon: float
    never_active: np.ndarray
    built_from: ModelParams

    def check(self, params: ModelParams):
        ref = self.built_from
        same = (
            ref.theta_beta == params.theta_beta
            and np.array_equal(ref.theta_mu, params.theta_mu)
            and np.array_equal(ref.theta_self, params.theta_self)
            and np.array_equal(ref.theta_u, params.theta_u)
            and np.array_equal(ref.theta_v, params.theta_v)
        )
        if not same:
            raise StaleCacheError(
                "caches were built from different parameter values; rebuild them "
                "or pass check_caches=False if the drift is intentional"
            )


@dataclass
class SequenceGradient:
    """Gradient contribution of a single sequence, touching only its entities."""

    entities: np.ndarray        # (a,) sorted entity ids
    d_theta_mu: np.ndarray      # (a,)
    d_theta_self: np.ndarray    # (a,)
    d_theta_u: np.ndarray       # (a, d)
    d_theta_v: np.ndarray       # (a, d)
    d_theta_beta: float


def _sequence_z(params: ModelParams, seq: Sequence, beta: float) -> np.ndarray:
    if len(seq) == 0:
        return np.zeros(params.dim)
    active, loc = np.unique(seq.entities, return_inverse=True)
    v_act = softplus(params.theta_v[active])
    w = -np.expm1(-beta * (seq.horizon - seq.times))
    return w @ v_act[loc]


def build_caches(params: ModelParams, data: Dataset) -> LazyCaches:
    """One full pass over parameters and data; linear in both."""
    beta = params.beta()
    u_hat = params.factors_u().sum(axis=0)
    z_hat = np.zeros(params.dim)
    active_horizon = np.zeros(data.num_entities)
    all_horizons, nonempty, lengths, times, labels = data.flat_events()
    if nonempty.size:
        n = data.num_entities
        tails = np.repeat(all_horizons[nonempty], lengths) - times
        w = -np.expm1(-beta * tails)
        z_hat = w @ softplus(params.theta_v[labels])
        # Each (sequence, entity) slot contributes its sequence's horizon to
        # the entity's active-time total.
        _, slot_seq, slot_entity, _, _ = data.slot_tables()
        active_horizon = np.bincount(
            slot_entity, weights=all_horizons[slot_seq], minlength=n
        )
    total_horizon = data.total_horizon
    activity = data.activity_count
    d_const = np.zeros(data.num_entities)
    np.divide(
        total_horizon - active_horizon,
        activity,
        out=d_const,
        where=activity > 0,
    )
    return LazyCaches(
        u_hat=u_hat,
        z_hat=z_hat,
        d_const=d_const,
        g_mu_const=d_const.copy(),
        total_horizon=float(total_horizon),
        never_active=data.never_active(),
        built_from=params.copy(),
    )


def lazy_log_likelihood(
    params: ModelParams,
    data: Dataset,
    caches: LazyCaches,
    check_caches: bool = True,
) -> float:
    """Exact log-likelihood in per-active-entity form.

    Equal to the dense engine's value to floating-point noise; the per-entity
    terms only run over entities active in each sequence, with the absent
    entities' mass folded in through the cached aggregates.
    """
    if check_caches:
        caches.check(params)
    beta = checked_beta(params)
    u_hat = caches.u_hat
    bs = batch_sequence_stats(params, data)
    ns = bs.num_seqs
    n_active = bs.active_counts
    # Per-slot pieces of the active-entity compensator, reduced per sequence.
    z_rows = bs.z[bs.slot_seq]
    own_slot = bs.mu_slot * bs.horizons[bs.slot_seq] + (
        np.einsum("ij,ij->i", bs.u_slot, z_rows) + bs.c_slot * bs.q
    ) / beta
    own_seq = np.bincount(bs.slot_seq, weights=own_slot, minlength=ns)
    # Shared term: each active entity carries an equal share of the global
    # receiving total against this sequence's decayed emitting sum.
    u_dot_z = np.bincount(
        bs.slot_seq, weights=np.einsum("ij,ij->i", bs.u_slot, z_rows), minlength=ns
    )
    uhat_z = bs.z @ u_hat
    absent_seq = np.bincount(
        bs.slot_seq,
        weights=bs.mu_slot * caches.d_const[bs.slot_entity],
        minlength=ns,
    )
    seq_vals = bs.loglam - own_seq - (uhat_z - u_dot_z) / beta - absent_seq
    terms = seq_vals[n_active > 0].tolist()
    never = caches.never_active
    if len(never):
        terms.append(-caches.total_horizon * float(softplus(params.theta_mu[never]).sum()))
    total = math.fsum(terms)
    if not math.isfinite(total):
        raise NumericalDivergenceError(f"log-likelihood is not finite: {total!r}")
    return total


def lazy_sequence_gradients(
    params: ModelParams,
    seq: Sequence,
    caches: LazyCaches,
    data: Dataset,
    check_caches: bool = False,
) -> SequenceGradient:
    """Gradient contribution of one sequence, sparse over its active entities.

    The returned block rows line up with ``entities``.  Summed over all
    sequences (plus the closed-form corrections for never-active entities,
    see :func:`accumulate_lazy_gradient`) this reproduces the dense gradient.
    The cached ``z_hat`` is consumed in per-active-sequence shares, so during
    training it may deliberately lag the parameters by one epoch.
    """
    if check_caches:
        caches.check(params)
    st = sequence_stats(params, seq, gradients=True)
    act = st.active
    a = len(act)
    d = params.dim
    beta = checked_beta(params)
    if a == 0:
        return SequenceGradient(
            entities=act,
            d_theta_mu=np.zeros(0),
            d_theta_self=np.zeros(0),
            d_theta_u=np.zeros((0, d)),
            d_theta_v=np.zeros((0, d)),
            d_theta_beta=0.0,
        )
    u_hat = caches.u_hat
    activity = data.activity_count[act]

    g_mu = st.inv_lam - seq.horizon - caches.g_mu_const[act]
    g_self = st.r_over_lam - st.q / beta
    g_u = (
        st.s_over_lam
        - st.v_act * st.r_over_lam[:, None]
        - (st.z[None, :] - st.v_act * st.q[:, None]) / beta
        + (st.z[None, :] - caches.z_hat[None, :] / activity[:, None]) / beta
    )
    g_v = (
        st.p_rev
        - st.u_act * st.r_over_lam[:, None]
        - (u_hat[None, :] - st.u_act) * st.q[:, None] / beta
    )
    uz = float(u_hat @ st.z)
    uz_beta = float(u_hat @ st.z_beta)
    cq = float(st.c_act @ st.q)
    cq_beta = float(st.c_act @ st.q_beta)
    g_beta = st.beta_log + (uz + cq) / beta**2 - (uz_beta + cq_beta) / beta

    return SequenceGradient(
        entities=act,
        d_theta_mu=g_mu * softplus_grad(params.theta_mu[act]),
        d_theta_self=g_self * softplus_grad(params.theta_self[act]),
        d_theta_u=g_u * softplus_grad(params.theta_u[act]),
        d_theta_v=g_v * softplus_grad(params.theta_v[act]),
        d_theta_beta=float(g_beta * softplus_grad(params.theta_beta)),
    )


def accumulate_lazy_gradient(
    params: ModelParams,
    data: Dataset,
    caches: LazyCaches,
    check_caches: bool = True,
) -> GradientBuffer:
    """Full-dataset gradient assembled from per-sequence sparse pieces.

    Entities active nowhere still owe a background-rate term over every
    horizon and a receiving-embedding term against the global decayed totals;
    both are closed-form and added here.
    """
    if check_caches:
        caches.check(params)
    n_ent = params.num_entities
    d = params.dim
    beta = checked_beta(params)
    buf = GradientBuffer.zeros(n_ent, d)
    bs = batch_sequence_stats(params, data, gradients=True)
    ns = bs.num_seqs
    u_hat = caches.u_hat
    ent = bs.slot_entity
    if len(ent):
        hor = bs.horizons[bs.slot_seq]
        activity = data.activity_count[ent]

        g_mu = bs.inv_lam - hor - caches.g_mu_const[ent]
        g_self = bs.r_over_lam - bs.q / beta
        # Emitting and receiving embeddings share the structure "event sums
        # minus the slot's share of the compensator"; the sequence-local
        # emitting total cancels between the own-pair and shared terms,
        # leaving the self-rate correction and one global outer product each.
        g_u = (
            bs.s_over_lam
            - bs.v_slot * g_self[:, None]
            - np.outer(1.0 / (beta * activity), caches.z_hat)
        )
        g_v = (
            bs.p_rev
            - bs.u_slot * g_self[:, None]
            - np.outer(bs.q / beta, u_hat)
        )
        gu_raw = g_u * softplus_grad(params.theta_u[ent])
        gv_raw = g_v * softplus_grad(params.theta_v[ent])
        scalars = np.stack(
            [
                g_mu * softplus_grad(params.theta_mu[ent]),
                g_self * softplus_grad(params.theta_self[ent]),
            ],
            axis=1,
        )
        # Group the slot rows by entity once and scatter the per-entity sums;
        # entities touched nowhere in the batch are simply never written.
        stacked = np.concatenate([gu_raw, gv_raw, scalars], axis=1)
        order_e = np.argsort(ent, kind="stable")
        ent_sorted = ent[order_e]
        starts = np.flatnonzero(np.r_[True, ent_sorted[1:] != ent_sorted[:-1]])
        sums = np.add.reduceat(stacked[order_e], starts, axis=0)
        uniq = ent_sorted[starts]
        buf.d_theta_u[uniq] += sums[:, :d]
        buf.d_theta_v[uniq] += sums[:, d:2 * d]
        buf.d_theta_mu[uniq] += sums[:, 2 * d]
        buf.d_theta_self[uniq] += sums[:, 2 * d + 1]

    uz = bs.z @ u_hat
    uz_beta = bs.z_beta @ u_hat
    cq = np.bincount(bs.slot_seq, weights=bs.c_slot * bs.q, minlength=ns)
    cq_beta = np.bincount(bs.slot_seq, weights=bs.c_slot * bs.q_beta, minlength=ns)
    g_beta = bs.beta_log + (uz + cq) / beta**2 - (uz_beta + cq_beta) / beta
    beta_terms = (g_beta * softplus_grad(params.theta_beta)).tolist()
    never = caches.never_active
    if len(never):
        buf.d_theta_mu[never] = -caches.total_horizon * softplus_grad(params.theta_mu[never])
        buf.d_theta_u[never] = (
            -(caches.z_hat[None, :] / checked_beta(params)) * softplus_grad(params.theta_u[never])
        )
    buf.d_theta_beta = math.fsum(beta_terms)
    return buf


def update_u_hat(caches: LazyCaches, entity: int, theta_u_old: np.ndarray, theta_u_new: np.ndarray):
    """Constant-time refresh of the receiving-embedding total after one row moved."""
    caches.u_hat += softplus(theta_u_new) - softplus(theta_u_old)
