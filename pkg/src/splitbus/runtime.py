"""Two-party training runtime.

One process hosts both parties.  The passive party owns the feature-only
bottom model; the active party owns its bottom model, the top model and the
labels.  Workers are threads; the only things the parties share are the
batch plan (derived from the run seed on both sides) and the broker.

Per batch, the choreography is: a passive worker runs its bottom model
forward, adds calibrated Gaussian noise, and publishes the embedding on the
batch's embedding channel; an active worker consumes it, finishes the
forward pass, publishes the cut-layer gradient on the batch's gradient
channel, and applies its local updates; the passive worker consumes the
gradient, backprops through the saved tape and updates its replica.

Execution modes differ only in worker counts, lookahead (how many batches a
passive worker may have in flight), waiting deadlines, and when the
parameter servers average replicas — see :class:`splitbus.config.Mode`.
"""

from __future__ import annotations

import math
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import broker as bk
from . import metrics as mt
from . import nn
from .config import Mode, TrainConfig, ConfigError, SINGLE_PAIR_MODES
from .data import BatchPlan, Task, VerticalDataset, make_batch_plan
from .privacy import GdpConfig, NoiseReport, add_noise, calibrate_sigma, worker_noise_rng
from .schedule import AggregationSchedule


class TrainingAbort(RuntimeError):
    """Raised when a run cannot continue (e.g. the loss went non-finite)."""


class AlignmentError(RuntimeError):
    """A message's sample range disagrees with the consumer's batch plan."""


# Tags for deriving independent child seeds from the run seed.
_SEED_PASSIVE_BOTTOM = 1
_SEED_ACTIVE_BOTTOM = 2
_SEED_TOP = 3
_SEED_PLAN = 4
_SEED_NOISE = 5


def derive_seed(*parts: int) -> int:
    """Stable child seed from integer parts (order matters)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def build_models(
    shape, d_active: int, d_passive: int, task: Task, seed: int
) -> tuple[nn.MlpModel, nn.MlpModel, nn.MlpModel]:
    """Initial (passive bottom, active bottom, top) models for a run seed.

    Hidden layers are ReLU throughout, including each bottom model's output
    layer (it is a hidden layer of the composed network); the top model ends
    in a sigmoid for classification, identity for regression.
    """
    passive_dims = [d_passive, *shape.passive_hidden, shape.passive_embed]
    active_dims = [d_active, *shape.active_hidden, shape.active_embed]
    top_dims = [shape.active_embed + shape.passive_embed, *shape.top_hidden, 1]
    head = nn.Activation.SIGMOID if task is Task.CLASSIFICATION else nn.Activation.IDENTITY
    passive = nn.init_mlp(
        passive_dims, [nn.Activation.RELU] * (len(passive_dims) - 1),
        derive_seed(seed, _SEED_PASSIVE_BOTTOM),
    )
    active = nn.init_mlp(
        active_dims, [nn.Activation.RELU] * (len(active_dims) - 1),
        derive_seed(seed, _SEED_ACTIVE_BOTTOM),
    )
    top = nn.init_mlp(
        top_dims, [nn.Activation.RELU] * (len(top_dims) - 2) + [head],
        derive_seed(seed, _SEED_TOP),
    )
    return passive, active, top


def plan_for_epoch(num_rows: int, batch_size: int, run_seed: int, epoch: int) -> BatchPlan:
    """Both parties call this with the same arguments and get the same plan."""
    return make_batch_plan(num_rows, batch_size, derive_seed(run_seed, _SEED_PLAN, epoch))


def batch_loss_mean(losses: list[tuple[int, float]]) -> float:
    """Mean of per-batch losses, accumulated in batch-id order.

    The fixed order makes the float sum reproducible regardless of which
    worker finished which batch first.
    """
    if not losses:
        return math.nan
    total = 0.0
    for _, value in sorted(losses):
        total += value
    return total / len(losses)


class WorkQueue:
    """Shared batch queue for one party's worker pool: (batch_id, attempt)."""

    def __init__(self, batch_ids: list[int]):
        self._items: list[tuple[int, int]] = [(b, 0) for b in batch_ids]
        self._lock = threading.Lock()

    def pop(self) -> tuple[int, int] | None:
        with self._lock:
            return self._items.pop(0) if self._items else None

    def push_retry(self, batch_id: int, attempt: int) -> None:
        with self._lock:
            self._items.append((batch_id, attempt))

    def empty(self) -> bool:
        with self._lock:
            return not self._items


@dataclass
class WorkerStats:
    busy_seconds: float = 0.0
    wait_seconds: float = 0.0
    wall_seconds: float = 0.0
    max_single_wait: float = 0.0
    completed: int = 0
    skipped: int = 0
    retries: int = 0
    pushes: int = 0
    stale_discards: int = 0

    def add_wait(self, seconds: float) -> None:
        self.wait_seconds += seconds
        if seconds > self.max_single_wait:
            self.max_single_wait = seconds


@dataclass
class PartyEpochStats:
    workers: list[WorkerStats]

    @property
    def completed(self) -> int:
        return sum(w.completed for w in self.workers)

    @property
    def skipped(self) -> int:
        return sum(w.skipped for w in self.workers)

    @property
    def retries(self) -> int:
        return sum(w.retries for w in self.workers)

    @property
    def busy_seconds(self) -> float:
        return sum(w.busy_seconds for w in self.workers)

    @property
    def wait_seconds(self) -> float:
        return sum(w.wait_seconds for w in self.workers)

    @property
    def wall_seconds(self) -> float:
        return sum(w.wall_seconds for w in self.workers)

    @property
    def max_single_wait(self) -> float:
        return max((w.max_single_wait for w in self.workers), default=0.0)


class PartyServer:
    """Parameter server for one party: averages replica groups in place."""

    def __init__(self, name: str):
        self.name = name
        self.syncs = 0
        self.pushes = 0
        self._lock = threading.Lock()

    def note_push(self) -> None:
        with self._lock:
            self.pushes += 1

    def sync(self, replica_groups: list[list[nn.MlpModel]]) -> None:
        """Average each replica group and broadcast the result back."""
        for group in replica_groups:
            averaged = nn.average_models(group)
            for replica in group:
                replica.load_from(averaged)
        self.syncs += 1


class EpochShared:
    """State shared by every worker thread during one epoch."""

    def __init__(self, broker: bk.Broker, epoch: int):
        self.broker = broker
        self.epoch = epoch
        self.losses: list[tuple[int, float]] = []
        self._lock = threading.Lock()
        self.failure: BaseException | None = None
        self.barriers: list[threading.Barrier] = []

    def record_loss(self, batch_id: int, value: float) -> None:
        with self._lock:
            self.losses.append((batch_id, value))

    def fail(self, exc: BaseException) -> None:
        with self._lock:
            if self.failure is None:
                self.failure = exc
        self.broker.close()
        for barrier in self.barriers:
            barrier.abort()

    @property
    def failed(self) -> bool:
        return self.failure is not None


@dataclass
class _PendingBatch:
    tape: nn.ForwardTape
    attempt: int


class PassiveEngine:
    """The feature-only party: bottom-model replicas plus noise streams."""

    def __init__(
        self,
        features: np.ndarray,
        initial_model: nn.MlpModel,
        num_workers: int,
        eta: float,
        sigma: float,
        noise_seed: int,
        skew_seconds: float = 0.0,
        max_retries: int = 1,
    ):
        self.features = features
        self.replicas = [initial_model.clone() for _ in range(num_workers)]
        self.eta = eta
        self.sigma = sigma
        self.skew_seconds = skew_seconds
        self.max_retries = max_retries
        self.noise_rngs = [worker_noise_rng(noise_seed, w) for w in range(num_workers)]
        self.noise_reports = [NoiseReport() for _ in range(num_workers)]
        self.server = PartyServer("passive")

    @property
    def num_workers(self) -> int:
        return len(self.replicas)

    def replica_groups(self) -> list[list[nn.MlpModel]]:
        return [self.replicas]

    def snapshot(self) -> nn.MlpModel:
        return nn.average_models(self.replicas)

    def run_epoch(
        self,
        plan: BatchPlan,
        queue: WorkQueue,
        shared: EpochShared,
        deadline: float | None,
        lookahead: int,
    ) -> PartyEpochStats:
        stats = [WorkerStats() for _ in range(self.num_workers)]
        threads = [
            threading.Thread(
                target=self._worker_loop,
                args=(w, plan, queue, shared, deadline, lookahead, stats[w]),
                name=f"passive-{w}",
            )
            for w in range(self.num_workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return PartyEpochStats(stats)

    # -- worker internals ---------------------------------------------------

    def _worker_loop(self, w, plan, queue, shared, deadline, lookahead, stats):
        start = time.perf_counter()
        try:
            self._worker_body(w, plan, queue, shared, deadline, lookahead, stats)
        except BaseException as exc:  # propagate through the shared failure slot
            shared.fail(exc)
        finally:
            stats.wall_seconds = time.perf_counter() - start

    def _worker_body(self, w, plan, queue, shared, deadline, lookahead, stats):
        model = self.replicas[w]
        pending: OrderedDict[int, _PendingBatch] = OrderedDict()
        while not shared.failed:
            # Opportunistically absorb any gradients that are already waiting.
            for batch_id in list(pending):
                result = shared.broker.subscribe(bk.MessageKind.GRADIENT, batch_id, 0.0)
                stats.add_wait(result.waited_seconds)
                if result.outcome is bk.SubscribeOutcome.DELIVERED:
                    self._apply_gradient(w, model, plan, batch_id, pending.pop(batch_id),
                                         result.message, shared, stats)
            if len(pending) < lookahead:
                item = queue.pop()
                if item is not None:
                    batch_id, attempt = item
                    tape = self._publish_embedding(w, model, plan, batch_id, shared, stats)
                    pending[batch_id] = _PendingBatch(tape, attempt)
                    continue
            if pending:
                oldest = next(iter(pending))
                result = shared.broker.subscribe(bk.MessageKind.GRADIENT, oldest, deadline)
                stats.add_wait(result.waited_seconds)
                if result.outcome is bk.SubscribeOutcome.DELIVERED:
                    self._apply_gradient(w, model, plan, oldest, pending.pop(oldest),
                                         result.message, shared, stats)
                elif result.outcome is bk.SubscribeOutcome.EXPIRED:
                    entry = pending.pop(oldest)
                    if entry.attempt < self.max_retries:
                        queue.push_retry(oldest, entry.attempt + 1)
                        stats.retries += 1
                    else:
                        stats.skipped += 1
                else:  # CLOSED
                    return
            elif queue.empty():
                return

    def _publish_embedding(self, w, model, plan, batch_id, shared, stats) -> nn.ForwardTape:
        batch = plan.batches[batch_id]
        t0 = time.perf_counter()
        if self.skew_seconds > 0.0:
            time.sleep(self.skew_seconds)  # simulated extra compute
        x = self.features[batch.indices]
        embedding, tape = nn.forward(model, x)
        noised = add_noise(embedding, self.sigma, self.noise_rngs[w], self.noise_reports[w])
        stats.busy_seconds += time.perf_counter() - t0
        shared.broker.publish(
            bk.ChannelMessage(
                bk.MessageKind.EMBEDDING,
                batch_id,
                noised,
                batch.sample_range,
                sender_worker=w,
                param_version=model.param_version,
            )
        )
        return tape

    def _apply_gradient(self, w, model, plan, batch_id, entry, message, shared, stats):
        batch = plan.batches[batch_id]
        if message.sample_range != batch.sample_range:
            raise AlignmentError(
                f"gradient for batch {batch_id} covers rows {message.sample_range}, "
                f"expected {batch.sample_range}"
            )
        t0 = time.perf_counter()
        grads, _ = nn.backward(model, entry.tape, message.payload)
        nn.sgd_step(model, grads, self.eta)
        stats.busy_seconds += time.perf_counter() - t0
        self.server.note_push()
        stats.pushes += 1
        stats.completed += 1

    # -- rendezvous mode ----------------------------------------------------

    def run_rendezvous_epoch(
        self,
        plan: BatchPlan,
        pairs: int,
        shared: EpochShared,
        barrier: threading.Barrier,
    ) -> PartyEpochStats:
        stats = [WorkerStats() for _ in range(pairs)]
        iterations = math.ceil(plan.num_batches / pairs)
        threads = [
            threading.Thread(
                target=self._rendezvous_loop,
                args=(j, plan, pairs, iterations, shared, barrier, stats[j]),
                name=f"passive-pair-{j}",
            )
            for j in range(pairs)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return PartyEpochStats(stats)

    def _rendezvous_loop(self, j, plan, pairs, iterations, shared, barrier, stats):
        start = time.perf_counter()
        model = self.replicas[j]
        try:
            for k in range(iterations):
                if shared.failed:
                    return
                batch_id = k * pairs + j
                if batch_id < plan.num_batches:
                    tape = self._publish_embedding(j, model, plan, batch_id, shared, stats)
                    result = shared.broker.subscribe(bk.MessageKind.GRADIENT, batch_id, None)
                    stats.add_wait(result.waited_seconds)
                    if result.outcome is not bk.SubscribeOutcome.DELIVERED:
                        return
                    self._apply_gradient(j, model, plan, batch_id,
                                         _PendingBatch(tape, 0),
                                         result.message, shared, stats)
                t0 = time.perf_counter()
                barrier.wait()
                stats.add_wait(time.perf_counter() - t0)
        except threading.BrokenBarrierError:
            return
        except BaseException as exc:
            shared.fail(exc)
        finally:
            stats.wall_seconds = time.perf_counter() - start


class ActiveEngine:
    """The label-holding party: bottom + top replicas per worker."""

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        task: Task,
        initial_bottom: nn.MlpModel,
        initial_top: nn.MlpModel,
        num_workers: int,
        eta: float,
        skew_seconds: float = 0.0,
        max_retries: int = 1,
        staleness_bound: int | None = None,
    ):
        self.features = features
        self.labels = labels
        self.task = task
        self.bottoms = [initial_bottom.clone() for _ in range(num_workers)]
        self.tops = [initial_top.clone() for _ in range(num_workers)]
        self.embed_cols = initial_bottom.out_dim
        self.eta = eta
        self.skew_seconds = skew_seconds
        self.max_retries = max_retries
        self.staleness_bound = staleness_bound
        self.server = PartyServer("active")

    @property
    def num_workers(self) -> int:
        return len(self.bottoms)

    def replica_groups(self) -> list[list[nn.MlpModel]]:
        return [self.bottoms, self.tops]

    def snapshot(self) -> tuple[nn.MlpModel, nn.MlpModel]:
        return nn.average_models(self.bottoms), nn.average_models(self.tops)

    def run_epoch(
        self,
        plan: BatchPlan,
        queue: WorkQueue,
        shared: EpochShared,
        deadline: float | None,
    ) -> PartyEpochStats:
        stats = [WorkerStats() for _ in range(self.num_workers)]
        threads = [
            threading.Thread(
                target=self._worker_loop,
                args=(w, plan, queue, shared, deadline, stats[w]),
                name=f"active-{w}",
            )
            for w in range(self.num_workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return PartyEpochStats(stats)

    def _worker_loop(self, w, plan, queue, shared, deadline, stats):
        start = time.perf_counter()
        try:
            while not shared.failed:
                item = queue.pop()
                if item is None:
                    return
                batch_id, attempt = item
                result = shared.broker.subscribe(bk.MessageKind.EMBEDDING, batch_id, deadline)
                stats.add_wait(result.waited_seconds)
                if result.outcome is bk.SubscribeOutcome.CLOSED:
                    return
                if result.outcome is bk.SubscribeOutcome.EXPIRED:
                    if attempt < self.max_retries:
                        queue.push_retry(batch_id, attempt + 1)
                        stats.retries += 1
                    else:
                        stats.skipped += 1
                    continue
                message = result.message
                if (
                    self.staleness_bound is not None
                    and self.bottoms[w].param_version - message.param_version
                    > self.staleness_bound
                ):
                    stats.stale_discards += 1
                    if attempt < self.max_retries:
                        queue.push_retry(batch_id, attempt + 1)
                        stats.retries += 1
                    else:
                        stats.skipped += 1
                    continue
                self._process_batch(w, plan, batch_id, message, shared, stats)
        except BaseException as exc:
            shared.fail(exc)
        finally:
            stats.wall_seconds = time.perf_counter() - start

    def _process_batch(self, w, plan, batch_id, message, shared, stats):
        batch = plan.batches[batch_id]
        if message.sample_range != batch.sample_range:
            raise AlignmentError(
                f"embedding for batch {batch_id} covers rows {message.sample_range}, "
                f"expected {batch.sample_range}"
            )
        bottom, top = self.bottoms[w], self.tops[w]
        t0 = time.perf_counter()
        if self.skew_seconds > 0.0:
            time.sleep(self.skew_seconds)  # simulated extra compute
        x = self.features[batch.indices]
        y = self.labels[batch.indices]
        z_active, tape_bottom = nn.forward(bottom, x)
        top_input = np.concatenate([z_active, message.payload], axis=1)
        predictions, tape_top = nn.forward(top, top_input)
        if self.task is Task.CLASSIFICATION:
            loss, d_pred = nn.cross_entropy_loss(predictions, y)
        else:
            loss, d_pred = nn.mse_loss(predictions, y)
        if not math.isfinite(loss):
            raise TrainingAbort(
                f"non-finite training loss at epoch {shared.epoch}, batch {batch_id}"
            )
        top_grads, d_top_input = nn.backward(top, tape_top, d_pred)
        d_z_active = d_top_input[:, : self.embed_cols]
        d_z_passive = np.ascontiguousarray(d_top_input[:, self.embed_cols :])
        stats.busy_seconds += time.perf_counter() - t0
        # Ship the cut-layer gradient before touching local parameters so the
        # passive side can start its backward pass as early as possible.
        shared.broker.publish(
            bk.ChannelMessage(
                bk.MessageKind.GRADIENT,
                batch_id,
                d_z_passive,
                batch.sample_range,
                sender_worker=w,
                param_version=bottom.param_version,
            )
        )
        t1 = time.perf_counter()
        bottom_grads, _ = nn.backward(bottom, tape_bottom, d_z_active)
        nn.sgd_step(top, top_grads, self.eta)
        nn.sgd_step(bottom, bottom_grads, self.eta)
        stats.busy_seconds += time.perf_counter() - t1
        shared.record_loss(batch_id, loss)
        self.server.note_push()
        stats.pushes += 1
        stats.completed += 1

    # -- rendezvous mode ----------------------------------------------------

    def run_rendezvous_epoch(
        self,
        plan: BatchPlan,
        pairs: int,
        shared: EpochShared,
        barrier: threading.Barrier,
    ) -> PartyEpochStats:
        stats = [WorkerStats() for _ in range(pairs)]
        iterations = math.ceil(plan.num_batches / pairs)
        threads = [
            threading.Thread(
                target=self._rendezvous_loop,
                args=(j, plan, pairs, iterations, shared, barrier, stats[j]),
                name=f"active-pair-{j}",
            )
            for j in range(pairs)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return PartyEpochStats(stats)

    def _rendezvous_loop(self, j, plan, pairs, iterations, shared, barrier, stats):
        start = time.perf_counter()
        try:
            for k in range(iterations):
                if shared.failed:
                    return
                batch_id = k * pairs + j
                if batch_id < plan.num_batches:
                    result = shared.broker.subscribe(bk.MessageKind.EMBEDDING, batch_id, None)
                    stats.add_wait(result.waited_seconds)
                    if result.outcome is not bk.SubscribeOutcome.DELIVERED:
                        return
                    self._process_batch(j, plan, batch_id, result.message, shared, stats)
                t0 = time.perf_counter()
                barrier.wait()
                stats.add_wait(time.perf_counter() - t0)
        except threading.BrokenBarrierError:
            return
        except BaseException as exc:
            shared.fail(exc)
        finally:
            stats.wall_seconds = time.perf_counter() - start


@dataclass
class RunResult:
    mode: Mode
    epochs: list[mt.EpochMetrics]
    summary: mt.RunSummary
    party_stats: list[dict]
    final_models: dict[str, nn.MlpModel]
    noise_sigma: float
    noise_report: NoiseReport

    @property
    def epoch_train_losses(self) -> list[float]:
        return [row.mean_train_loss for row in self.epochs]


def evaluate_models(
    passive_bottom: nn.MlpModel,
    active_bottom: nn.MlpModel,
    top: nn.MlpModel,
    dataset: VerticalDataset,
) -> float:
    """Test metric on clean (noise-free) embeddings: AUC up / RMSE down."""
    z_passive, _ = nn.forward(passive_bottom, dataset.passive_features)
    z_active, _ = nn.forward(active_bottom, dataset.active_features)
    scores, _ = nn.forward(top, np.concatenate([z_active, z_passive], axis=1))
    if dataset.task is Task.CLASSIFICATION:
        return mt.auc_score(dataset.labels, scores)
    return mt.rmse(dataset.labels, scores)


def _default_lookahead(cfg: TrainConfig, num_batches: int) -> int:
    if cfg.mode is Mode.LOCKSTEP:
        return 1
    if cfg.lookahead is not None:
        return cfg.lookahead
    if cfg.mode in (Mode.ASYNC, Mode.ASYNC_PS):
        return num_batches  # free-running: never wait before the queue is empty
    # pubsub: one batch of lookahead hides the other party's latency; a single
    # worker keeps lookahead 1 so the degenerate config stays deterministic.
    return 1 if cfg.workers_passive == 1 else 2


def run_training(
    train: VerticalDataset,
    test: VerticalDataset | None,
    cfg: TrainConfig,
) -> RunResult:
    """Run one training job in the configured mode and collect metrics.

    Raises :class:`TrainingAbort` if the loss goes non-finite, and
    :class:`AlignmentError` if a cross-party message ever pairs up with the
    wrong batch (that one indicates a bug, not a condition to tolerate).
    """
    if cfg.mode in SINGLE_PAIR_MODES and (cfg.workers_active != 1 or cfg.workers_passive != 1):
        raise ConfigError(f"mode {cfg.mode.value} runs exactly one worker per party")

    n = train.num_rows
    num_batches = bk.channel_count_for(n, cfg.batch_size)
    d_active = train.active_features.shape[1]
    d_passive = train.passive_features.shape[1]
    passive_init, active_init, top_init = build_models(
        cfg.shape, d_active, d_passive, train.task, cfg.seed
    )

    sigma = calibrate_sigma(
        GdpConfig(
            privacy_mu=cfg.privacy_mu,
            minibatch_size=cfg.batch_size,
            whole_batch_size=n,
            num_queries=cfg.privacy_queries or num_batches,
            scale_constant=cfg.privacy_scale_constant,
        )
    )

    embed_cap = 1 if cfg.mode is Mode.ASYNC else cfg.embed_capacity
    grad_cap = 1 if cfg.mode is Mode.ASYNC else cfg.grad_capacity
    broker = bk.Broker(num_batches, embed_cap, grad_cap)

    passive = PassiveEngine(
        train.passive_features,
        passive_init,
        cfg.workers_passive,
        cfg.learning_rate,
        sigma,
        derive_seed(cfg.seed, _SEED_NOISE),
        skew_seconds=cfg.skew_passive_seconds,
        max_retries=cfg.max_retries,
    )
    active = ActiveEngine(
        train.active_features,
        train.labels,
        train.task,
        active_init,
        top_init,
        cfg.workers_active,
        cfg.learning_rate,
        skew_seconds=cfg.skew_active_seconds,
        max_retries=cfg.max_retries,
        staleness_bound=cfg.staleness_bound,
    )

    schedule = AggregationSchedule(cfg.sync_base_interval)
    lookahead = _default_lookahead(cfg, num_batches)
    deadline = None if cfg.mode in (Mode.LOCKSTEP, Mode.SYNC_PS) else cfg.deadline_seconds

    epoch_rows: list[mt.EpochMetrics] = []
    party_rows: list[dict] = []
    prev_stats = broker.stats()
    stopped_early = False

    for epoch in range(1, cfg.epochs + 1):
        plan = plan_for_epoch(n, cfg.batch_size, cfg.seed, epoch)
        broker.flush_all()  # deadline-skipped leftovers never leak across epochs
        shared = EpochShared(broker, epoch)
        epoch_start = time.perf_counter()

        if cfg.mode is Mode.SYNC_PS:
            pairs = min(cfg.workers_active, cfg.workers_passive)
            barrier_p = threading.Barrier(
                pairs, action=lambda: passive.server.sync(passive.replica_groups())
            )
            barrier_a = threading.Barrier(
                pairs, action=lambda: active.server.sync(active.replica_groups())
            )
            shared.barriers = [barrier_p, barrier_a]
            results: dict[str, PartyEpochStats] = {}

            def _run(engine, barrier, key):
                results[key] = engine.run_rendezvous_epoch(plan, pairs, shared, barrier)

            t_passive = threading.Thread(target=_run, args=(passive, barrier_p, "passive"))
            t_active = threading.Thread(target=_run, args=(active, barrier_a, "active"))
            t_passive.start(), t_active.start()
            t_passive.join(), t_active.join()
            passive_stats, active_stats = results["passive"], results["active"]
            synced = True
        else:
            queue_p = WorkQueue([b.batch_id for b in plan.batches])
            queue_a = WorkQueue([b.batch_id for b in plan.batches])
            results = {}

            def _run_passive():
                results["passive"] = passive.run_epoch(plan, queue_p, shared, deadline, lookahead)

            def _run_active():
                results["active"] = active.run_epoch(plan, queue_a, shared, deadline)

            t_passive = threading.Thread(target=_run_passive)
            t_active = threading.Thread(target=_run_active)
            t_passive.start(), t_active.start()
            t_passive.join(), t_active.join()
            passive_stats, active_stats = results["passive"], results["active"]

            if cfg.mode is Mode.PUBSUB:
                synced = schedule.should_sync(epoch)
            elif cfg.mode is Mode.ASYNC_PS:
                synced = True
            else:
                synced = False
            if synced:
                passive.server.sync(passive.replica_groups())
                active.server.sync(active.replica_groups())

        epoch_wall = time.perf_counter() - epoch_start
        if shared.failure is not None:
            raise shared.failure

        broker_now = broker.stats()
        passive_snapshot = passive.snapshot()
        active_bottom_snap, top_snap = active.snapshot()
        test_metric = (
            evaluate_models(passive_snapshot, active_bottom_snap, top_snap, test)
            if test is not None
            else None
        )
        total_wall_threads = passive_stats.wall_seconds + active_stats.wall_seconds
        busy = passive_stats.busy_seconds + active_stats.busy_seconds
        epoch_rows.append(
            mt.EpochMetrics(
                epoch=epoch,
                wall_seconds=epoch_wall,
                mean_train_loss=batch_loss_mean(shared.losses),
                test_metric=test_metric,
                total_wait_seconds=passive_stats.wait_seconds + active_stats.wait_seconds,
                busy_fraction=busy / total_wall_threads if total_wall_threads > 0 else 0.0,
                bytes_published=broker_now.bytes_published,
                batches_completed=active_stats.completed,
                batches_skipped=active_stats.skipped + passive_stats.skipped,
                batch_retries=active_stats.retries + passive_stats.retries,
                evictions=broker_now.evicted - prev_stats.evicted,
                sync_performed=synced,
            )
        )
        party_rows.append(
            {
                "epoch": epoch,
                "passive_completed": passive_stats.completed,
                "passive_skipped": passive_stats.skipped,
                "active_completed": active_stats.completed,
                "active_skipped": active_stats.skipped,
                "max_single_wait": max(
                    passive_stats.max_single_wait, active_stats.max_single_wait
                ),
            }
        )
        prev_stats = broker_now
        if cfg.loss_target is not None and epoch_rows[-1].mean_train_loss <= cfg.loss_target:
            stopped_early = True
            break

    merged_report = NoiseReport(sigma=sigma)
    for report in passive.noise_reports:
        merged_report.entries += report.entries
        merged_report.total += report.total
        merged_report.total_sq += report.total_sq

    higher_better = train.task is Task.CLASSIFICATION
    target_time = (
        mt.time_to_target(epoch_rows, cfg.target_metric, higher_better)
        if cfg.target_metric is not None
        else None
    )
    final_stats = broker.stats()
    test_metrics = [r.test_metric for r in epoch_rows if r.test_metric is not None]
    summary = mt.RunSummary(
        mode=cfg.mode.value,
        epochs_run=len(epoch_rows),
        total_wall_seconds=sum(r.wall_seconds for r in epoch_rows),
        final_train_loss=epoch_rows[-1].mean_train_loss,
        final_test_metric=epoch_rows[-1].test_metric,
        best_test_metric=(
            (max(test_metrics) if higher_better else min(test_metrics))
            if test_metrics
            else None
        ),
        total_bytes_published=final_stats.bytes_published,
        total_batches_skipped=sum(r.batches_skipped for r in epoch_rows),
        total_batch_retries=sum(r.batch_retries for r in epoch_rows),
        total_evictions=final_stats.evicted,
        ps_syncs=passive.server.syncs,
        noise_sigma=sigma,
        time_to_target_seconds=target_time,
        stopped_early=stopped_early,
    )
    broker.close()
    return RunResult(
        mode=cfg.mode,
        epochs=epoch_rows,
        summary=summary,
        party_stats=party_rows,
        final_models={
            "passive_bottom": passive_snapshot,
            "active_bottom": active_bottom_snap,
            "top": top_snap,
        },
        noise_sigma=sigma,
        noise_report=merged_report,
    )
