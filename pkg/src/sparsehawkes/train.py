"""Stochastic training: per-sequence sparse Adam steps over the lazy engine.

One epoch walks the sequences once.  Each step reads the one-epoch-lagged
decayed emitting totals from the caches, the incrementally maintained
receiving-embedding total, and only the parameters of entities active in the
sequence; the Adam update then touches exactly those rows plus the global
decay slot.  The parallel mode runs the same step lock-free from several
workers over shared memory, trading bitwise reproducibility for throughput.
"""

from __future__ import annotations

import ctypes
import hashlib
import json
import math
import multiprocessing
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .lazy import LazyCaches, SequenceGradient, _sequence_z, build_caches, lazy_log_likelihood, lazy_sequence_gradients, update_u_hat
from .model import Dataset, ModelParams, NumericalDivergenceError, softplus, softplus_inv

__all__ = [
    "TrainingDivergedError",
    "TrainConfig",
    "AdamState",
    "TrainReport",
    "adam_step",
    "init_params",
    "train",
    "train_parallel",
]


class TrainingDivergedError(RuntimeError):
    """Optimization produced a non-finite objective.

    Carries the last parameter snapshot whose exact epoch log-likelihood was
    finite, plus the report rows accumulated up to the failure.
    """

    def __init__(self, message: str, last_params: ModelParams, report: "TrainReport", epoch: int):
        super().__init__(message)
        self.last_params = last_params
        self.report = report
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dim: int = 20
    threads: int = 1
    seed: int = 0
    shuffle: bool = False
    log_every: int = 10
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            # zero is degenerate but accepted: it freezes the parameters,
            # which is the cleanest probe of the lagged-cache bookkeeping
            raise ValueError("learning_rate must not be negative")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("adam decay factors must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def digest(self) -> str:
        payload = json.dumps(
            {k: v for k, v in self.__dict__.items() if k != "checkpoint_dir"},
            sort_keys=True,
        )
        return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()


@dataclass
class AdamState:
    """Moment buffers shaped like the parameters, with per-row step counts.

    Counters advance only when their row is touched, so rarely seen entities
    get the full bias correction on their first updates instead of a stale
    global step number.
    """

    m_mu: np.ndarray
    v_mu: np.ndarray
    t_mu: np.ndarray
    m_beta: float
    v_beta: float
    t_beta: int
    m_self: np.ndarray
    v_self: np.ndarray
    t_self: np.ndarray
    m_u: np.ndarray
    v_u: np.ndarray
    t_u: np.ndarray
    m_v: np.ndarray
    v_v: np.ndarray
    t_v: np.ndarray

    @classmethod
    def zeros(cls, n: int, d: int) -> "AdamState":
        return cls(
            m_mu=np.zeros(n), v_mu=np.zeros(n), t_mu=np.zeros(n, dtype=np.int64),
            m_beta=0.0, v_beta=0.0, t_beta=0,
            m_self=np.zeros(n), v_self=np.zeros(n), t_self=np.zeros(n, dtype=np.int64),
            m_u=np.zeros((n, d)), v_u=np.zeros((n, d)), t_u=np.zeros(n, dtype=np.int64),
            m_v=np.zeros((n, d)), v_v=np.zeros((n, d)), t_v=np.zeros(n, dtype=np.int64),
        )


@dataclass
class TrainReport:
    """Exact per-epoch curves and snapshot bookkeeping.

    ``u_hat_drift`` holds the relative gap per epoch between the running
    receiving-embedding total and a from-scratch recomputation.
    ``final_caches`` is the training-state cache object at exit (lagged
    aggregates included), kept for invariant checks and warm restarts.
    """

    epoch_loglik: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    snapshot_paths: list[str] = field(default_factory=list)
    u_hat_drift: list[float] = field(default_factory=list)
    final_caches: LazyCaches | None = None


def _adam_rows(m, v, t, idx, grad, config) -> np.ndarray:
    """Bias-corrected Adam direction for the touched rows of one block.

    The trainer maximizes the log-likelihood; following the usual minimizer
    convention the accumulated moment is of the negated gradient and the
    returned step is subtracted by the caller.
    """
    g = -grad
    b1 = config.adam_beta1
    b2 = config.adam_beta2
    t[idx] += 1
    steps = t[idx]
    if g.ndim == 2:
        steps = steps[:, None]
    m[idx] = b1 * m[idx] + (1.0 - b1) * g
    v[idx] = b2 * v[idx] + (1.0 - b2) * g * g
    m_hat = m[idx] / (1.0 - b1**steps)
    v_hat = v[idx] / (1.0 - b2**steps)
    return config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def adam_step(state: AdamState, grads: SequenceGradient, config: TrainConfig, params: ModelParams):
    """Apply one sparse ascent step in place.

    Only rows of ``grads.entities`` and the global decay parameter move;
    every other row's parameters, moments, and counters stay untouched.
    """
    idx = grads.entities
    if len(idx):
        params.theta_mu[idx] -= _adam_rows(state.m_mu, state.v_mu, state.t_mu, idx, grads.d_theta_mu, config)
        params.theta_self[idx] -= _adam_rows(state.m_self, state.v_self, state.t_self, idx, grads.d_theta_self, config)
        params.theta_u[idx] -= _adam_rows(state.m_u, state.v_u, state.t_u, idx, grads.d_theta_u, config)
        params.theta_v[idx] -= _adam_rows(state.m_v, state.v_v, state.t_v, idx, grads.d_theta_v, config)

    g = -grads.d_theta_beta
    b1 = config.adam_beta1
    b2 = config.adam_beta2
    state.t_beta += 1
    state.m_beta = b1 * state.m_beta + (1.0 - b1) * g
    state.v_beta = b2 * state.v_beta + (1.0 - b2) * g * g
    m_hat = state.m_beta / (1.0 - b1**state.t_beta)
    v_hat = state.v_beta / (1.0 - b2**state.t_beta)
    params.theta_beta -= config.learning_rate * m_hat / (math.sqrt(v_hat) + config.adam_eps)


def init_params(data: Dataset, config: TrainConfig, rng: np.random.Generator) -> ModelParams:
    """Data-informed starting point.

    Background rates warm-start at each entity's event count over the summed
    horizons (floored at half an event so silent entities stay finite); the
    decay speed starts at 1; embeddings and diagonals start small and
    positive, away from the flat region of the softplus.
    """
    n = data.num_entities
    counts = np.zeros(n)
    for seq in data.sequences:
        if len(seq):
            counts += np.bincount(seq.entities, minlength=n)
    rates = np.maximum(counts, 0.5) / data.total_horizon
    return ModelParams(
        theta_mu=softplus_inv(rates),
        theta_beta=float(softplus_inv(1.0)),
        theta_self=rng.normal(-2.0, 0.1, size=n),
        theta_u=rng.normal(-2.0, 0.1, size=(n, config.dim)),
        theta_v=rng.normal(-2.0, 0.1, size=(n, config.dim)),
        dim=config.dim,
    )


def _maybe_checkpoint(config: TrainConfig, params: ModelParams, epoch: int,
                      loglik: float, report: TrainReport):
    if config.checkpoint_dir is None:
        return
    from .data_io import write_checkpoint

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    path = os.path.join(config.checkpoint_dir, f"epoch{epoch:04d}.ckpt")
    meta = {
        "epoch": epoch,
        "loglik": loglik,
        "seed": config.seed,
        "config_digest": config.digest(),
    }
    write_checkpoint(path, params, meta)
    report.snapshot_paths.append(path)


def _finish_epoch(params: ModelParams, data: Dataset, caches: LazyCaches,
                  config: TrainConfig, report: TrainReport, epoch: int,
                  secs: float, last_good: ModelParams) -> float:
    """Exact reporting with freshly built caches; raises on divergence."""
    try:
        fresh = build_caches(params, data)
        loglik = lazy_log_likelihood(params, data, fresh)
    except (NumericalDivergenceError, ValueError) as exc:
        raise TrainingDivergedError(
            f"epoch {epoch}: {exc}", last_good, report, epoch
        ) from exc
    rebuilt_norm = float(np.linalg.norm(fresh.u_hat))
    drift = float(np.linalg.norm(caches.u_hat - fresh.u_hat)) / max(rebuilt_norm, 1e-300)
    report.epoch_loglik.append(loglik)
    report.epoch_seconds.append(secs)
    report.u_hat_drift.append(drift)
    if epoch % config.log_every == 0 or epoch == config.epochs:
        print(f"epoch={epoch} loglik={loglik:.6f} secs={secs:.3f}", flush=True)
        _maybe_checkpoint(config, params, epoch, loglik, report)
    return loglik


def train(
    data: Dataset,
    config: TrainConfig,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Sequential training; deterministic for a fixed config.

    Per epoch, per sequence: add the sequence's decayed emitting total to the
    next epoch's aggregate, take the sparse gradient against the lagged
    aggregate, apply Adam to the touched rows, then refresh the running
    receiving-embedding total for exactly those rows.  Reported likelihoods
    are exact, computed against rebuilt caches after each epoch.
    """
    rng = np.random.default_rng(config.seed)
    if init is None:
        params = init_params(data, config, rng)
    else:
        if init.num_entities != data.num_entities:
            raise ValueError(
                f"init covers {init.num_entities} entities, data has {data.num_entities}"
            )
        params = init.copy()
    caches = build_caches(params, data)
    state = AdamState.zeros(params.num_entities, params.dim)
    report = TrainReport()
    last_good = params.copy()
    base_order = np.arange(len(data.sequences))

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(base_order) if config.shuffle else base_order
        z_next = np.zeros(params.dim)
        try:
            for si in order:
                seq = data.sequences[si]
                if len(seq) == 0:
                    continue
                z_next += _sequence_z(params, seq, params.beta())
                grads = lazy_sequence_gradients(params, seq, caches, data, check_caches=False)
                old_rows = params.theta_u[grads.entities].copy()
                adam_step(state, grads, config, params)
                for k, x in enumerate(grads.entities):
                    update_u_hat(caches, int(x), old_rows[k], params.theta_u[x])
        except NumericalDivergenceError as exc:
            raise TrainingDivergedError(
                f"epoch {epoch}: {exc}", last_good, report, epoch
            ) from exc
        caches.z_hat = z_next
        secs = time.perf_counter() - start
        _finish_epoch(params, data, caches, config, report, epoch, secs, last_good)
        last_good = params.copy()
    report.final_caches = caches
    return params, report


def _shared_array(shape, dtype=np.float64):
    size = int(np.prod(shape))
    if dtype == np.float64:
        raw = multiprocessing.RawArray(ctypes.c_double, size)
    elif dtype == np.int64:
        raw = multiprocessing.RawArray(ctypes.c_int64, size)
    else:
        raise ValueError(f"unsupported shared dtype {dtype}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def _shared_adam_state(n: int, d: int) -> AdamState:
    return AdamState(
        m_mu=_shared_array((n,)), v_mu=_shared_array((n,)), t_mu=_shared_array((n,), np.int64),
        m_beta=0.0, v_beta=0.0, t_beta=0,
        m_self=_shared_array((n,)), v_self=_shared_array((n,)), t_self=_shared_array((n,), np.int64),
        m_u=_shared_array((n, d)), v_u=_shared_array((n, d)), t_u=_shared_array((n,), np.int64),
        m_v=_shared_array((n, d)), v_v=_shared_array((n, d)), t_v=_shared_array((n,), np.int64),
    )


def _parallel_worker(
    worker_id: int,
    shard: np.ndarray,
    data: Dataset,
    params: ModelParams,
    beta_slots: np.ndarray,
    state: AdamState,
    caches: LazyCaches,
    config: TrainConfig,
    queue,
):
    """One epoch over a shard against shared-memory parameters.

    The decay parameter and its Adam scalars live in a shared slot vector
    (value, first moment, second moment, step count); reads and writes of
    individual float64 slots are atomic on the supported platforms, and torn
    vector rows are tolerated by the lock-free contract.
    """
    dim = params.dim
    z_partial = np.zeros(dim)
    try:
        for si in shard:
            seq = data.sequences[si]
            if len(seq) == 0:
                continue
            params.theta_beta = float(beta_slots[0])
            state.m_beta = float(beta_slots[1])
            state.v_beta = float(beta_slots[2])
            state.t_beta = int(beta_slots[3])
            z_partial += _sequence_z(params, seq, params.beta())
            grads = lazy_sequence_gradients(params, seq, caches, data, check_caches=False)
            old_rows = params.theta_u[grads.entities].copy()
            adam_step(state, grads, config, params)
            beta_slots[0] = params.theta_beta
            beta_slots[1] = state.m_beta
            beta_slots[2] = state.v_beta
            beta_slots[3] = float(state.t_beta)
            for k, x in enumerate(grads.entities):
                update_u_hat(caches, int(x), old_rows[k], params.theta_u[x])
        queue.put(("done", worker_id, z_partial))
    except NumericalDivergenceError as exc:
        queue.put(("diverged", worker_id, str(exc)))
    except Exception as exc:  # surfaced by the parent as a hard failure
        queue.put(("error", worker_id, f"{type(exc).__name__}: {exc}"))


def train_parallel(data: Dataset, config: TrainConfig) -> tuple[ModelParams, TrainReport]:
    """Lock-free parallel training over forked workers and shared memory.

    Sequences are split into one static shard per worker; each epoch forks
    the workers, they stream updates into the shared parameter blocks
    without locks, and the parent then swaps in the next epoch's decayed
    emitting totals, measures the receiving-total drift, rebuilds it, and
    reports the exact likelihood.  Results match sequential training
    statistically, not bitwise.
    """
    if config.threads < 2:
        raise ValueError("train_parallel needs threads >= 2; use train for one")
    ctx = multiprocessing.get_context("fork")
    rng = np.random.default_rng(config.seed)
    seed_params = init_params(data, config, rng)
    n = data.num_entities
    d = config.dim

    params = ModelParams(
        theta_mu=_shared_array((n,)),
        theta_beta=seed_params.theta_beta,
        theta_self=_shared_array((n,)),
        theta_u=_shared_array((n, d)),
        theta_v=_shared_array((n, d)),
        dim=d,
    )
    params.theta_mu[:] = seed_params.theta_mu
    params.theta_self[:] = seed_params.theta_self
    params.theta_u[:] = seed_params.theta_u
    params.theta_v[:] = seed_params.theta_v
    # slot vector: decay value, its two Adam moments, its step count
    beta_slots = _shared_array((4,))
    beta_slots[0] = seed_params.theta_beta

    state = _shared_adam_state(n, d)
    caches = build_caches(params, data)
    shared_u_hat = _shared_array((d,))
    shared_u_hat[:] = caches.u_hat
    caches.u_hat = shared_u_hat

    report = TrainReport()
    last_good = params.copy()
    base_order = np.arange(len(data.sequences))

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(base_order) if config.shuffle else base_order
        shards = np.array_split(order, config.threads)
        queue = ctx.Queue()
        workers = [
            ctx.Process(
                target=_parallel_worker,
                args=(wid, shard, data, params, beta_slots, state, caches, config, queue),
            )
            for wid, shard in enumerate(shards)
        ]
        for w in workers:
            w.start()
        z_next = np.zeros(d)
        failures = []
        for _ in workers:
            kind, wid, payload = queue.get()
            if kind == "done":
                z_next += payload
            else:
                failures.append((kind, wid, payload))
        for w in workers:
            w.join()
        params.theta_beta = float(beta_slots[0])
        if failures:
            kind, wid, payload = failures[0]
            if kind == "diverged":
                raise TrainingDivergedError(
                    f"epoch {epoch} worker {wid}: {payload}", last_good, report, epoch
                )
            raise RuntimeError(f"epoch {epoch} worker {wid} failed: {payload}")
        caches.z_hat = z_next
        secs = time.perf_counter() - start
        _finish_epoch(params, data, caches, config, report, epoch, secs, last_good)
        # lock-free interleaving lets the incremental receiving total drift;
        # rebuild it exactly once per epoch after recording how far it moved
        caches.u_hat[:] = softplus(params.theta_u).sum(axis=0)
        last_good = params.copy()
    report.final_caches = caches
    return params, report
