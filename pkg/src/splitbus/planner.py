"""Configuration search: pick (workers_active, workers_passive, batch_size).

The per-iteration wall time is modelled as the slower party's compute time
plus the channel transfer time; the search minimises it over a discrete
grid, restricted to batch sizes both parties can hold in memory.  The grid
has no overlapping subproblems, so the "table" is a full evaluation with
the per-batch polynomial of each party hoisted out of the worker loops;
``brute_force_search`` is the plain triple loop kept as an oracle — the two
must agree bit for bit, including tie-breaks.
"""

from __future__ import annotations

from dataclasses import dataclass

from .profiler import DelayConstants, memory_bound


class InfeasiblePlanError(ValueError):
    """No candidate batch size fits in memory (or the space is empty)."""


@dataclass
class SearchSpace:
    """Inclusive worker ranges and the candidate batch sizes, in given order."""

    workers_active_min: int
    workers_active_max: int
    workers_passive_min: int
    workers_passive_max: int
    batch_candidates: list[int]
    message_scale_reference: int | None = None  # see comm_seconds

    def __post_init__(self) -> None:
        if not (1 <= self.workers_active_min <= self.workers_active_max):
            raise ValueError("bad active worker range")
        if not (1 <= self.workers_passive_min <= self.workers_passive_max):
            raise ValueError("bad passive worker range")
        if not self.batch_candidates or any(b < 1 for b in self.batch_candidates):
            raise ValueError("batch candidates must be a nonempty list of >= 1")
        if self.message_scale_reference is not None and self.message_scale_reference < 1:
            raise ValueError("message_scale_reference must be >= 1 when set")

    @property
    def workers_active(self) -> range:
        return range(self.workers_active_min, self.workers_active_max + 1)

    @property
    def workers_passive(self) -> range:
        return range(self.workers_passive_min, self.workers_passive_max + 1)


@dataclass
class PlanState:
    """A grid point: 1-based indices plus the decoded configuration."""

    index_active: int
    index_passive: int
    index_batch: int
    workers_active: int
    workers_passive: int
    batch_size: int
    cost_seconds: float


def party_polynomials(c: DelayConstants, batch_size: int) -> tuple[float, float]:
    """Per-call compute seconds at one core per worker, per party.

    The active party runs its bottom model and the top model; the passive
    party only its bottom model.  Shared by every cost evaluation below so
    the search and its oracle perform identical float operations.
    """
    b = float(batch_size)
    active = (
        c.forward_coef_active * b**c.forward_exp_active
        + c.top_forward_coef * b**c.top_forward_exp
        + c.backward_coef_active * b**c.backward_exp_active
        + c.top_backward_coef * b**c.top_backward_exp
    )
    passive = (
        c.forward_coef_passive * b**c.forward_exp_passive
        + c.backward_coef_passive * b**c.backward_exp_passive
    )
    return active, passive


def comm_seconds(
    c: DelayConstants, batch_size: int, message_scale_reference: int | None = None
) -> float:
    """Embedding + gradient transfer time for one iteration.

    By default the measured message sizes are taken as-is for every
    candidate batch size.  When ``message_scale_reference`` is set, sizes
    are assumed proportional to the batch and rescaled from that reference.
    """
    seconds = (c.embed_message_bytes + c.grad_message_bytes) / c.bandwidth_bytes_per_sec
    if message_scale_reference is not None:
        seconds *= batch_size / message_scale_reference
    return seconds


def iteration_objective(
    c: DelayConstants,
    workers_active: int,
    workers_passive: int,
    batch_size: int,
    message_scale_reference: int | None = None,
) -> float:
    """Predicted wall seconds per iteration for one configuration."""
    if batch_size < 1 or workers_active < 1 or workers_passive < 1:
        raise ValueError("batch size and worker counts must be >= 1")
    if batch_size > memory_bound(c):
        raise InfeasiblePlanError(f"batch size {batch_size} exceeds the memory bound")
    poly_active, poly_passive = party_polynomials(c, batch_size)
    compute = max(
        poly_active * workers_active / c.cores_active,
        poly_passive * workers_passive / c.cores_passive,
    )
    return compute + comm_seconds(c, batch_size, message_scale_reference)


def state_cost(c: DelayConstants, space: SearchSpace, i: int, j: int, r: int) -> float:
    """Compute-only cost of grid state (i, j, r), all indices 1-based."""
    if not (1 <= i <= len(space.workers_active)):
        raise IndexError("active worker index out of range")
    if not (1 <= j <= len(space.workers_passive)):
        raise IndexError("passive worker index out of range")
    if not (1 <= r <= len(space.batch_candidates)):
        raise IndexError("batch index out of range")
    w_a = space.workers_active_min + i - 1
    w_p = space.workers_passive_min + j - 1
    poly_active, poly_passive = party_polynomials(c, space.batch_candidates[r - 1])
    return max(
        poly_active * w_a / c.cores_active,
        poly_passive * w_p / c.cores_passive,
    )


def _feasible_batches(c: DelayConstants, space: SearchSpace) -> list[tuple[int, int]]:
    ceiling = memory_bound(c)
    feasible = [
        (r, b)
        for r, b in enumerate(space.batch_candidates, start=1)
        if b <= ceiling
    ]
    if not feasible:
        raise InfeasiblePlanError(
            f"no candidate batch size fits the memory bound {ceiling:.1f}"
        )
    return feasible


def _state(space: SearchSpace, r: int, b: int, w_a: int, w_p: int, cost: float) -> PlanState:
    return PlanState(
        index_active=w_a - space.workers_active_min + 1,
        index_passive=w_p - space.workers_passive_min + 1,
        index_batch=r,
        workers_active=w_a,
        workers_passive=w_p,
        batch_size=b,
        cost_seconds=cost,
    )


def dp_search(c: DelayConstants, space: SearchSpace) -> PlanState:
    """Full-grid minimisation with per-batch polynomials cached.

    Ties break toward the smaller batch size, then fewer active workers,
    then fewer passive workers — cheaper memory and coordination for free.
    """
    best_key: tuple | None = None
    best: PlanState | None = None
    for r, b in _feasible_batches(c, space):
        poly_active, poly_passive = party_polynomials(c, b)
        comm = comm_seconds(c, b, space.message_scale_reference)
        for w_a in space.workers_active:
            active_time = poly_active * w_a / c.cores_active
            for w_p in space.workers_passive:
                cost = max(active_time, poly_passive * w_p / c.cores_passive) + comm
                key = (cost, b, w_a, w_p)
                if best_key is None or key < best_key:
                    best_key, best = key, _state(space, r, b, w_a, w_p, cost)
    assert best is not None
    return best


def brute_force_search(c: DelayConstants, space: SearchSpace) -> PlanState:
    """Triple loop over the raw grid, no caching; the oracle for dp_search."""
    best_key: tuple | None = None
    best: PlanState | None = None
    for w_a in space.workers_active:
        for w_p in space.workers_passive:
            for r, b in _feasible_batches(c, space):
                cost = iteration_objective(
                    c, w_a, w_p, b, space.message_scale_reference
                )
                key = (cost, b, w_a, w_p)
                if best_key is None or key < best_key:
                    best_key, best = key, _state(space, r, b, w_a, w_p, cost)
    assert best is not None
    return best


# -- plan file I/O --------------------------------------------------------------


def write_plan(path: str, plan: PlanState) -> None:
    with open(path, "w") as handle:
        handle.write(f"workers_active = {plan.workers_active}\n")
        handle.write(f"workers_passive = {plan.workers_passive}\n")
        handle.write(f"batch_size = {plan.batch_size}\n")
        handle.write(f"cost_seconds = {plan.cost_seconds!r}\n")


def read_plan(path: str) -> dict:
    values: dict[str, float | int] = {}
    with open(path) as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, _, text = line.partition("=")
            name, text = name.strip(), text.strip()
            if name == "cost_seconds":
                values[name] = float(text)
            elif name in ("workers_active", "workers_passive", "batch_size"):
                values[name] = int(text)
            else:
                raise ValueError(f"{path}:{lineno}: unknown plan field {name!r}")
    for required in ("workers_active", "workers_passive", "batch_size"):
        if required not in values:
            raise ValueError(f"{path}: missing plan field {required!r}")
    return values
