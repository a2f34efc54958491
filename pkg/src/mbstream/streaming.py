"""Virtual-time simulation of the host-to-device streaming schedule.

Micro-batches are transferred and computed strictly in plan order on two
resources: one transfer channel and one compute unit. Without overlap the
schedule is the literal sequence transfer/forward/backward per micro-batch
followed by the parameter update. With overlap (double buffering, two
slots) the transfer of micro-batch k+1 may run while micro-batch k
computes; at most one transfer is ever in flight, and the slot being
filled must have been released by the compute two micro-batches back.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine import MicroBatchPlan


@dataclass(frozen=True)
class CostModel:
    """Seconds-per-unit costs of the simulated device and link.

    The latency fields are fixed per-event setup costs; they are what
    makes finer splits more expensive, since per-byte and per-sample terms
    alone are invariant to how a mini-batch is divided.
    """

    transfer_seconds_per_byte: float
    compute_seconds_per_sample_forward: float
    compute_seconds_per_sample_backward: float
    update_seconds: float = 0.0
    transfer_latency_seconds: float = 0.0
    compute_latency_seconds: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


@dataclass(frozen=True)
class StreamEvent:
    kind: str  # "transfer" | "forward" | "backward" | "update"
    index: int  # micro-batch index; -1 for the update
    start: float
    end: float


@dataclass(frozen=True)
class StreamSchedule:
    events: tuple[StreamEvent, ...]
    makespan: float
    overlap_enabled: bool


def _durations(plan: MicroBatchPlan, cost: CostModel, bytes_per_sample: int):
    transfer = [cost.transfer_latency_seconds + s * bytes_per_sample * cost.transfer_seconds_per_byte
                for s in plan.sizes]
    fwd = [cost.compute_latency_seconds + s * cost.compute_seconds_per_sample_forward
           for s in plan.sizes]
    bwd = [cost.compute_latency_seconds + s * cost.compute_seconds_per_sample_backward
           for s in plan.sizes]
    return transfer, fwd, bwd


def sequential_makespan(plan: MicroBatchPlan, cost: CostModel, bytes_per_sample: int) -> float:
    """Closed form for the no-overlap schedule: the plain sum of all durations."""
    transfer, fwd, bwd = _durations(plan, cost, bytes_per_sample)
    total = 0.0
    for k in range(plan.n_s_mu):
        total += transfer[k]
        total += fwd[k]
        total += bwd[k]
    total += cost.update_seconds
    return total


def simulate_stream(plan: MicroBatchPlan, cost: CostModel, bytes_per_sample: int,
                    overlap: bool = False) -> StreamSchedule:
    """Timed transfer/compute/update events for one mini-batch's plan."""
    transfer, fwd, bwd = _durations(plan, cost, bytes_per_sample)
    events: list[StreamEvent] = []
    if not overlap:
        t = 0.0
        for k in range(plan.n_s_mu):
            events.append(StreamEvent("transfer", k, t, t + transfer[k]))
            t += transfer[k]
            events.append(StreamEvent("forward", k, t, t + fwd[k]))
            t += fwd[k]
            events.append(StreamEvent("backward", k, t, t + bwd[k]))
            t += bwd[k]
        events.append(StreamEvent("update", -1, t, t + cost.update_seconds))
        t += cost.update_seconds
        return StreamSchedule(tuple(events), t, overlap_enabled=False)

    transfer_end = [0.0] * plan.n_s_mu
    compute_end = [0.0] * plan.n_s_mu
    for k in range(plan.n_s_mu):
        channel_free = transfer_end[k - 1] if k >= 1 else 0.0
        slot_free = compute_end[k - 2] if k >= 2 else 0.0  # two buffer slots
        t_start = max(channel_free, slot_free)
        transfer_end[k] = t_start + transfer[k]
        events.append(StreamEvent("transfer", k, t_start, transfer_end[k]))
        c_start = max(transfer_end[k], compute_end[k - 1] if k >= 1 else 0.0)
        events.append(StreamEvent("forward", k, c_start, c_start + fwd[k]))
        b_start = c_start + fwd[k]
        compute_end[k] = b_start + bwd[k]
        events.append(StreamEvent("backward", k, b_start, compute_end[k]))
    u_start = compute_end[plan.n_s_mu - 1]
    events.append(StreamEvent("update", -1, u_start, u_start + cost.update_seconds))
    return StreamSchedule(tuple(events), u_start + cost.update_seconds, overlap_enabled=True)


@dataclass(frozen=True)
class OverheadReport:
    """Makespan cost of streaming versus a single whole-mini-batch transfer.

    A baseline that does not fit device memory is flagged failed, mirroring
    configurations that can only train at all with streaming; its overhead
    is then undefined.
    """

    mbs_makespan: float
    baseline_makespan: float | None
    overhead_seconds: float | None
    overhead_pct: float | None
    baseline_failed: bool


def overhead_report(mbs_schedule: StreamSchedule,
                    baseline_schedule: StreamSchedule | None) -> OverheadReport:
    """Compare an MBS schedule against the no-split baseline (None = infeasible)."""
    if baseline_schedule is None:
        return OverheadReport(
            mbs_makespan=mbs_schedule.makespan,
            baseline_makespan=None,
            overhead_seconds=None,
            overhead_pct=None,
            baseline_failed=True,
        )
    delta = mbs_schedule.makespan - baseline_schedule.makespan
    pct = 100.0 * delta / baseline_schedule.makespan if baseline_schedule.makespan > 0 else 0.0
    return OverheadReport(
        mbs_makespan=mbs_schedule.makespan,
        baseline_makespan=baseline_schedule.makespan,
        overhead_seconds=delta,
        overhead_pct=pct,
        baseline_failed=False,
    )


def epoch_makespan(plans: list[MicroBatchPlan], cost: CostModel, bytes_per_sample: int,
                   overlap: bool = False) -> float:
    """Total virtual time for a sequence of mini-batch plans.

    Mini-batches are strict barriers: the next transfer waits for the
    previous update, since compute needs the updated parameters anyway.
    """
    return sum(
        simulate_stream(plan, cost, bytes_per_sample, overlap).makespan for plan in plans
    )
