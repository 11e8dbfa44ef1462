"""Global model state, FedAvg aggregation, and the two federation engines.

Synchronous rounds: every client fetches the model, trains, filters its
own update client-side, and the round closes at the barrier — the max
over surviving clients of (download + training + upload-if-accepted) —
plus an aggregation cost proportional to the accepted count. The global
model becomes the plain mean of the accepted updates.

Asynchronous runs: clients loop independently (fetch, train, filter,
upload if accepted, then fetch again once the upload is delivered) while
the server flushes its buffer whenever it holds k_min updates, or on a
timeout with at least one pending. Each flush replaces the global model
with the mean of exactly that flush's updates; fetches that land while
the server is mid-flush are served when it frees up. A run ends once the
accepted-update budget (rounds x clients) has been applied, so both
modes do comparable amounts of global progress; per-round reports are
emitted each time another `num_clients` accepted updates have been
applied. With a single client and k_min=1 this degenerates to exactly
the synchronous timeline.

Client failures are drawn per (client, cycle). Without checkpointing a
failed cycle is lost; with checkpointing the client restores the last
intra-round checkpoint (through the real save/restore codec), pays the
recovery time plus the redo of work since that checkpoint, and still
delivers its update. Recovery reproduces the uninterrupted parameters
bitwise because training is a pure function of (inputs, seed).

All timing lives on the simnet timeline; nothing reads the wall clock.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .client import ClientProfile, ClientUpdate, TrainingProgress, batch_count, train_local
from .fault import Checkpoint, restore_checkpoint, save_checkpoint
from .metrics import RoundReport, evaluate
from .model import Batch, ModelSpec, ParamVector, forward, lr_schedule
from .rng import derive_seed
from .selection import SelectionPolicy, filter_update
from .simnet import Timeline

MODES = ("sync_baseline", "sync_filtered", "async_filtered")


@dataclass
class GlobalState:
    round: int
    w_g: ParamVector
    w_g_prev: ParamVector | None = None
    history: list = field(default_factory=list)  # (round, accepted_ids, agg_time_s)


@dataclass
class AsyncBuffer:
    k_min: int
    timeout_s: float
    pending: list = field(default_factory=list)
    epoch: int = 0  # bumped on every flush; invalidates stale timeout events

    def __post_init__(self):
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")


def aggregate(updates: list[ParamVector]) -> ParamVector | None:
    """Elementwise mean of the update vectors; None signals an empty set.

    Summation runs in a canonical (byte-order) arrangement of the inputs,
    so the result is bitwise independent of update arrival order.
    """
    if not updates:
        return None
    length = len(updates[0])
    for u in updates:
        if len(u) != length:
            raise ValueError("update vectors disagree on length")
    order = sorted(range(len(updates)), key=lambda i: updates[i].values.tobytes())
    stacked = np.stack([updates[i].values for i in order])
    return ParamVector(stacked.mean(axis=0), updates[0].spec_digest)


@dataclass
class WorldClient:
    """Per-client static context: shard, batch size, timing geometry."""

    profile: ClientProfile
    features: np.ndarray
    labels: np.ndarray
    batch_size: int
    steps_per_epoch: int = 0
    base_span_s: float = 0.0  # training busy time per cycle
    boundaries_s: np.ndarray | None = None  # batch-end offsets within the span
    samples_at_step: np.ndarray | None = None
    ckpt_capture_steps: list[int] = field(default_factory=list)
    ckpt_capture_offsets: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class World:
    """Everything the engines need, fully precomputed and immutable."""

    spec: ModelSpec
    clients: list[WorldClient]
    test_features: np.ndarray
    test_labels: np.ndarray
    policy: SelectionPolicy
    mode: str
    epochs: int
    rounds: int
    base_lr: float
    lr_decay: float
    agg_cost_per_update_s: float
    k_min: int
    buffer_timeout_s: float
    master_seed: int
    dropout_rate: float = 0.0
    fail_matrix: np.ndarray | None = None  # [clients x max_cycles]
    fail_offsets: np.ndarray | None = None
    checkpointing: bool = False
    recovery_s: float = 0.0
    step_overhead_s: float = 0.0
    workers: int = 1
    horizon_s: float | None = None
    cycle_cap: int = 50
    eval_threshold: float = 0.5

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def update_budget(self) -> int:
        return self.rounds * self.num_clients


def finalize_client_geometry(wc: WorldClient, epochs: int, step_overhead_s: float,
                             ckpt_interval_s: float | None) -> None:
    """Precompute batch boundaries, span, and checkpoint capture points."""
    n, b = wc.n, wc.batch_size
    k = batch_count(n, b)
    wc.steps_per_epoch = k
    speed = wc.profile.speed

    sizes = [b] * (k - 1) + [n - b * (k - 1)]
    boundaries = []
    samples_at = []
    samples = 0
    for epoch in range(epochs):
        for size in sizes:
            samples += size
            step_idx = len(boundaries) + 1
            boundaries.append(samples / speed + step_idx * step_overhead_s)
            samples_at.append(samples)
    wc.boundaries_s = np.asarray(boundaries)
    wc.samples_at_step = np.asarray(samples_at)
    wc.base_span_s = boundaries[-1] if boundaries else 0.0

    wc.ckpt_capture_steps = []
    wc.ckpt_capture_offsets = []
    if ckpt_interval_s is not None and boundaries:
        next_mark = ckpt_interval_s
        for step_idx, off in enumerate(boundaries, start=1):
            if off >= next_mark:
                wc.ckpt_capture_steps.append(step_idx)
                wc.ckpt_capture_offsets.append(off)
                while next_mark <= off:
                    next_mark += ckpt_interval_s


@dataclass
class CycleOutcome:
    client_id: int
    cycle: int
    failed: bool
    recovered: bool
    fail_offset_s: float | None
    span_s: float  # busy time from broadcast arrival to training completion
    update: ClientUpdate | None
    accepted: bool
    relevance: float | None
    capture_offsets: list[float]
    redo_s: float = 0.0


def run_client_cycle(
    world: World,
    ci: int,
    cycle: int,
    lr_round: int,
    w_g: ParamVector,
    w_g_prev: ParamVector | None,
) -> CycleOutcome:
    """Train one client for one cycle against the model it fetched."""
    wc = world.clients[ci]
    cid = wc.profile.id
    seed = derive_seed(world.master_seed, "train", cid, cycle)
    lr = lr_schedule(lr_round, world.base_lr, world.lr_decay)
    base_span = wc.base_span_s

    failed = bool(world.fail_matrix[ci, cycle]) if world.fail_matrix is not None else False
    fail_off = None
    captures: list[float] = []
    if failed:
        frac = float(world.fail_offsets[ci, cycle])
        fail_off = frac * base_span

    def full_training() -> ClientUpdate:
        return train_local(
            world.spec, wc.profile, w_g, wc.features, wc.labels,
            world.epochs, wc.batch_size, lambda e: lr, seed, round_index=cycle,
        )

    if not failed:
        if world.checkpointing:
            captures = list(wc.ckpt_capture_offsets)
        update = full_training()
        span = base_span
        recovered = False
        redo = 0.0
    elif world.checkpointing:
        # restore from the last capture at or before the failure point and
        # redo the lost work; runs through the real checkpoint codec
        last_step, last_off = 0, 0.0
        for step_idx, off in zip(wc.ckpt_capture_steps, wc.ckpt_capture_offsets):
            if off <= fail_off:
                last_step, last_off = step_idx, off
            else:
                break
        captures = [off for off in wc.ckpt_capture_offsets if off <= fail_off]
        partial = train_local(
            world.spec, wc.profile, w_g, wc.features, wc.labels,
            world.epochs, wc.batch_size, lambda e: lr, seed, round_index=cycle,
            stop_after_steps=last_step,
        )
        assert isinstance(partial, TrainingProgress)
        blob = save_checkpoint(
            Checkpoint(
                scope=f"client-{cid}",
                round=cycle,
                seq=last_step,
                params=partial.params,
                optimizer_state={"lr": lr, "train_seed": seed},
                epoch=partial.epoch,
                batch_index=partial.batch_index,
            )
        )
        restored = restore_checkpoint(blob)
        progress = TrainingProgress(
            params=restored.params,
            epoch=restored.epoch,
            batch_index=restored.batch_index,
            steps_done=last_step,
            samples_done=int(wc.samples_at_step[last_step - 1]) if last_step else 0,
        )
        update = train_local(
            world.spec, wc.profile, w_g, wc.features, wc.labels,
            world.epochs, wc.batch_size, lambda e: lr, seed, round_index=cycle,
            resume=progress,
        )
        redo = fail_off - last_off
        span = base_span + world.recovery_s + redo
        recovered = True
    else:
        update = None
        span = fail_off
        recovered = False
        redo = 0.0

    accepted = False
    relevance = None
    if update is not None:
        if world.policy.mode == "delta_sign" and w_g_prev is None:
            accepted = True  # no movement history yet: nothing to compare against
        else:
            accepted, score = filter_update(update, w_g, w_g_prev, world.policy)
            relevance = score.ratio
            update.relevance = score

    return CycleOutcome(
        client_id=cid,
        cycle=cycle,
        failed=failed,
        recovered=recovered,
        fail_offset_s=fail_off,
        span_s=span,
        update=update,
        accepted=accepted,
        relevance=relevance,
        capture_offsets=captures,
    )


class FederationEngine:
    """Drives one experiment over a simnet timeline. Use run()."""

    def __init__(self, world: World, timeline: Timeline | None = None):
        if world.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {world.mode!r}")
        self.world = world
        self.timeline = timeline if timeline is not None else Timeline()
        self.reports: list[RoundReport] = []
        self.global_checkpoints: list[Checkpoint] = []
        self._cum_transfer_s = 0.0
        self._window_train_done: list[int] = []
        self._window_counts = {"accepted": 0, "rejected": 0, "failures": 0, "steps": 0}
        self._agg_seq = 0

    # ------------------------------------------------------------------ common

    def _evaluate_global(self, state: GlobalState):
        probs = forward(
            self.world.spec,
            state.w_g,
            Batch(self.world.test_features, np.zeros(len(self.world.test_features))),
            mode="eval",
        )
        return evaluate(probs, self.world.test_labels, self.world.eval_threshold)

    def _emit_report(self, state: GlobalState, window: int, t_s: float,
                     updates: int, aggregations: int, staleness: list[int]):
        res = self._evaluate_global(state)
        counts = self._window_counts
        decided = counts["accepted"] + counts["rejected"]
        rep = RoundReport(
            round=window,
            t_s=t_s,
            accuracy=res.accuracy,
            auc=res.auc,
            updates=updates,
            aggregations=aggregations,
            accepted=counts["accepted"],
            rejected=counts["rejected"],
            failures=counts["failures"],
            accepted_frac=counts["accepted"] / decided if decided else 0.0,
            staleness_mean=float(np.mean(staleness)) if staleness else 0.0,
            staleness_max=int(max(staleness)) if staleness else 0,
            comm_time_s=t_s,
            transfer_s=self._cum_transfer_s,
            sgd_steps=counts["steps"],
        )
        self.reports.append(rep)
        self._window_counts = {"accepted": 0, "rejected": 0, "failures": 0, "steps": 0}

    def _capture_global(self, state: GlobalState, round_index: int):
        self.global_checkpoints.append(
            Checkpoint(
                scope="global",
                round=round_index,
                seq=self._agg_seq,
                params=state.w_g.copy(),
                optimizer_state={"base_lr": self.world.base_lr, "lr_decay": self.world.lr_decay},
            )
        )

    def _schedule_cycle_events(self, t_arrive: float, outcome: CycleOutcome, round_label: int):
        """Common fail/recover/checkpoint/train_done scheduling."""
        tl = self.timeline
        for off in outcome.capture_offsets:
            tl.schedule(t_arrive + off, "checkpoint",
                        client_id=outcome.client_id, round=round_label,
                        scope=f"client-{outcome.client_id}")
        if outcome.failed:
            tl.schedule(t_arrive + outcome.fail_offset_s, "client_fail",
                        client_id=outcome.client_id, round=round_label,
                        recovered=outcome.recovered)
            if outcome.recovered:
                tl.schedule(
                    t_arrive + outcome.fail_offset_s + self.world.recovery_s,
                    "client_recover", client_id=outcome.client_id, round=round_label,
                )
        if outcome.update is not None:
            tl.schedule(t_arrive + outcome.span_s, "train_done",
                        client_id=outcome.client_id, round=round_label,
                        accepted=outcome.accepted, relevance=outcome.relevance,
                        steps=outcome.update.steps)

    @staticmethod
    def _record(ev) -> dict:
        rec = {"t_s": ev.t_s, "kind": ev.kind}
        rec.update(ev.payload)
        return rec

    # -------------------------------------------------------------------- sync

    def run_sync_round(self, state: GlobalState) -> GlobalState:
        """One synchronous round: broadcast, train all, filter, barrier, mean."""
        world = self.world
        tl = self.timeline
        t0 = tl.now_s
        r = state.round

        arrivals = [t0 + wc.profile.down_latency_s for wc in world.clients]
        for wc, t_arr in zip(world.clients, arrivals):
            tl.schedule(t_arr, "broadcast_arrive", client_id=wc.profile.id,
                        round=r, latency_s=wc.profile.down_latency_s)
            self._cum_transfer_s += wc.profile.down_latency_s

        def compute(ci):
            return run_client_cycle(world, ci, r, r, state.w_g, state.w_g_prev)

        indices = range(world.num_clients)
        if world.workers > 1:
            with ThreadPoolExecutor(max_workers=world.workers) as pool:
                outcomes = list(pool.map(compute, indices))
        else:
            outcomes = [compute(ci) for ci in indices]

        accepted_updates: list[ClientUpdate] = []
        resolve_times: list[float] = []
        for t_arr, outcome in zip(arrivals, outcomes):
            self._schedule_cycle_events(t_arr, outcome, r)
            if outcome.update is None:
                self._window_counts["failures"] += 1
                continue
            if outcome.failed:
                self._window_counts["failures"] += 1  # recovered, still a failure event
            done_t = t_arr + outcome.span_s
            self._window_counts["steps"] += outcome.update.steps
            if outcome.accepted:
                up = world.clients[outcome.client_id].profile.up_latency_s
                tl.schedule(done_t + up, "upload_arrive", client_id=outcome.client_id,
                            round=r, latency_s=up, staleness=0)
                self._cum_transfer_s += up
                accepted_updates.append(outcome.update)
                resolve_times.append(done_t + up)
                self._window_counts["accepted"] += 1
            else:
                resolve_times.append(done_t)
                self._window_counts["rejected"] += 1

        if not resolve_times:  # every client lost: stalled round
            barrier = max(
                (t + o.fail_offset_s for t, o in zip(arrivals, outcomes) if o.failed),
                default=t0,
            )
            tl.run(self._record)
            tl.schedule(barrier, "round_stalled", round=r)
            tl.run(self._record)
            state.round += 1
            state.history.append((r, [], barrier))
            self._emit_report(state, r, barrier, updates=0, aggregations=0, staleness=[])
            return state

        barrier = max(resolve_times)
        cost = world.agg_cost_per_update_s * len(accepted_updates)
        t_agg = barrier + cost
        tl.run(self._record)  # drain everything up to the barrier
        accepted_ids = [u.client_id for u in accepted_updates]
        tl.schedule(t_agg, "aggregate", round=r, window=r, accepted_ids=accepted_ids,
                    count=len(accepted_updates), cost_s=cost, barrier_t_s=barrier)
        tl.run(self._record)

        mean = aggregate([u.params for u in accepted_updates])
        state.w_g_prev = state.w_g
        if mean is not None:
            state.w_g = mean
        state.round += 1
        state.history.append((r, accepted_ids, t_agg))
        self._agg_seq += 1
        self._capture_global(state, r)
        self._emit_report(state, r, t_agg, updates=len(accepted_updates),
                          aggregations=1, staleness=[0] * len(accepted_updates))
        return state

    def run_sync(self, state: GlobalState) -> GlobalState:
        for _ in range(self.world.rounds):
            state = self.run_sync_round(state)
        self.timeline.schedule(self.timeline.now_s, "run_end", reason="rounds_done")
        self.timeline.run(self._record)
        return state

    # ------------------------------------------------------------------- async

    def run_async(self, state: GlobalState, horizon_s: float | None = None) -> GlobalState:
        """Buffered asynchronous run; ends at the accepted-update budget."""
        world = self.world
        tl = self.timeline
        buffer = AsyncBuffer(k_min=world.k_min, timeout_s=world.buffer_timeout_s)
        horizon = horizon_s if horizon_s is not None else world.horizon_s

        ctx = {
            "agg_count": 0,
            "applied": 0,
            "server_free_t": 0.0,
            "cycles": [0] * world.num_clients,
            "window_staleness": [],
            "end_reason": None,
        }
        max_cycles = world.rounds * world.cycle_cap
        budget = world.update_budget
        by_id = {wc.profile.id: ci for ci, wc in enumerate(world.clients)}

        def start_cycle(cid: int, t_request: float):
            ci = by_id[cid]
            cycle = ctx["cycles"][ci]
            if cycle >= max_cycles:
                return
            ctx["cycles"][ci] += 1
            down = world.clients[ci].profile.down_latency_s
            depart = max(t_request, ctx["server_free_t"])  # server busy aggregating
            tl.schedule(depart + down, "broadcast_arrive", client_id=cid,
                        round=cycle, latency_s=down)
            self._cum_transfer_s += down

        def flush(t_now: float, trigger: str):
            batch = list(buffer.pending)
            buffer.pending.clear()
            buffer.epoch += 1
            start = max(t_now, ctx["server_free_t"])
            cost = world.agg_cost_per_update_s * len(batch)
            done = start + cost
            ctx["server_free_t"] = done
            tl.schedule(done, "aggregate", round=ctx["agg_count"],
                        window=ctx["applied"] // world.num_clients,
                        accepted_ids=[u.client_id for u, _ in batch],
                        count=len(batch), cost_s=cost, trigger=trigger,
                        batch=batch)

        def handle(ev):
            kind = ev.kind
            p = ev.payload
            if kind == "broadcast_arrive":
                cid = p["client_id"]
                ci = by_id[cid]
                cycle = p["round"]
                outcome = run_client_cycle(
                    world, ci, cycle, min(cycle, world.rounds - 1), state.w_g, state.w_g_prev
                )
                fetched = ctx["agg_count"]
                self._schedule_cycle_events(ev.t_s, outcome, cycle)
                if outcome.update is None:
                    self._window_counts["failures"] += 1
                    start_cycle(cid, ev.t_s + outcome.span_s)
                else:
                    if outcome.failed:
                        self._window_counts["failures"] += 1
                    self._pending_outcomes[(cid, cycle)] = (outcome, fetched)
                return self._record(ev)

            if kind == "train_done":
                cid, cycle = p["client_id"], p["round"]
                outcome, fetched = self._pending_outcomes.pop((cid, cycle))
                self._window_counts["steps"] += outcome.update.steps
                if outcome.accepted:
                    self._window_counts["accepted"] += 1
                    up = world.clients[by_id[cid]].profile.up_latency_s
                    tl.schedule(ev.t_s + up, "upload_arrive", client_id=cid, round=cycle,
                                latency_s=up, staleness=None,
                                update=outcome.update, fetched=fetched)
                    self._cum_transfer_s += up
                else:
                    self._window_counts["rejected"] += 1
                    start_cycle(cid, ev.t_s)  # nothing to deliver, fetch again now
                return self._record(ev)

            if kind == "upload_arrive":
                update, fetched = p.pop("update"), p.pop("fetched")
                buffer.pending.append((update, fetched))
                if len(buffer.pending) == 1:
                    tl.schedule(ev.t_s + buffer.timeout_s, "buffer_timeout",
                                epoch=buffer.epoch, pending=len(buffer.pending))
                if len(buffer.pending) >= buffer.k_min:
                    flush(ev.t_s, "size")
                start_cycle(p["client_id"], ev.t_s)  # cycle serialized behind the upload
                rec = self._record(ev)
                rec["staleness"] = ctx["agg_count"] - fetched
                return rec

            if kind == "buffer_timeout":
                if p["epoch"] != buffer.epoch:
                    return None  # superseded by a size-triggered flush
                if buffer.pending:
                    flush(ev.t_s, "timeout")
                return self._record(ev)

            if kind == "aggregate":
                batch = ev.payload.pop("batch")
                staleness = [ctx["agg_count"] - fetched for _, fetched in batch]
                mean = aggregate([u.params for u, _ in batch])
                state.w_g_prev = state.w_g
                if mean is not None:
                    state.w_g = mean
                ctx["agg_count"] += 1
                before = ctx["applied"]
                ctx["applied"] += len(batch)
                ctx["window_staleness"].extend(staleness)
                state.history.append((ctx["agg_count"] - 1, [u.client_id for u, _ in batch], ev.t_s))
                self._agg_seq += 1
                rec = self._record(ev)
                rec["staleness"] = staleness

                window_before = before // world.num_clients
                window_after = ctx["applied"] // world.num_clients
                for w in range(window_before, min(window_after, world.rounds)):
                    self._emit_report(
                        state, w, ev.t_s,
                        updates=world.num_clients,
                        aggregations=ctx["agg_count"] - self._aggs_reported,
                        staleness=ctx["window_staleness"],
                    )
                    self._aggs_reported = ctx["agg_count"]
                    ctx["window_staleness"] = []
                if ctx["applied"] >= budget:
                    tl.schedule(ev.t_s, "run_end", reason="budget")
                return rec

            if kind == "run_end":
                tl.stop()
                return self._record(ev)

            if kind in ("client_fail", "client_recover", "checkpoint"):
                return self._record(ev)
            raise AssertionError(f"unhandled event {kind}")

        self._pending_outcomes: dict = {}
        self._aggs_reported = 0
        for wc in world.clients:
            start_cycle(wc.profile.id, 0.0)
        tl.run(handle, horizon_s=horizon)
        if not tl.stopped:  # horizon or cycle cap ended the run before the budget
            reason = "horizon" if horizon is not None and tl.now_s >= horizon else "cycle_cap"
            tl.schedule(tl.now_s, "run_end", reason=reason)
            tl.run(handle)
        self._capture_global(state, state.round + world.rounds)
        state.round += world.rounds
        return state

    # --------------------------------------------------------------- top level

    def run(self, initial: ParamVector) -> GlobalState:
        state = GlobalState(round=0, w_g=initial)
        if self.world.mode in ("sync_baseline", "sync_filtered"):
            return self.run_sync(state)
        return self.run_async(state)
