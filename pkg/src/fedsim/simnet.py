"""Deterministic discrete-event kernel and communication-time accounting.

The timeline orders events by (t_s, seq) where seq is the insertion
counter, so ties pop in scheduling order and a run is a pure function of
its inputs. Simulated time only moves when events are processed; nothing
here ever reads the wall clock. The processed-event log is the ground
truth for all timing reports and for the replay digest (an
order-sensitive 64-bit hash of the log's canonical JSON lines).
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field

EVENT_KINDS = (
    "broadcast_arrive",
    "train_done",
    "upload_arrive",
    "buffer_timeout",
    "client_fail",
    "client_recover",
    "checkpoint",
    "aggregate",
    "round_stalled",
    "run_end",
)


@dataclass(order=True)
class SimEvent:
    t_s: float
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


class Timeline:
    """Event queue + clock + log. Single-owner; handlers run inline."""

    def __init__(self):
        self.now_s = 0.0
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.log: list[dict] = []
        self._stopped = False

    def schedule(self, t_s: float, kind: str, **payload) -> SimEvent:
        if t_s < self.now_s:
            raise ValueError(f"cannot schedule {kind} at {t_s} before now {self.now_s}")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        ev = SimEvent(t_s=float(t_s), seq=self._seq, kind=kind, payload=payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def stop(self) -> None:
        """End the run after the current event; remaining events are dropped."""
        self._stopped = True

    @property
    def stopped(self) -> bool:
        return self._stopped

    def run(self, handler, horizon_s: float | None = None) -> int:
        """Process events in (t_s, seq) order until the queue drains, the
        horizon passes, or a handler calls stop(). The handler returns the
        log record for the event (or None to keep it out of the log).
        Returns the number of events processed."""
        processed = 0
        while self._heap and not self._stopped:
            if horizon_s is not None and self._heap[0].t_s > horizon_s:
                break
            ev = heapq.heappop(self._heap)
            self.now_s = ev.t_s
            record = handler(ev)
            if record is not None:
                self.log.append(record)
            processed += 1
        if horizon_s is not None and not self._stopped:
            self.now_s = max(self.now_s, horizon_s)
        return processed

    def digest(self) -> str:
        return log_digest(self.log)


def log_digest(log: list[dict]) -> str:
    """Order-sensitive 64-bit digest of the canonical JSON log lines."""
    h = hashlib.blake2b(digest_size=8)
    for record in log:
        h.update(json.dumps(record, sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def write_event_log(log: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class DistSpec:
    """A one-dimensional sampling distribution (latency, speed, capacity).

    kinds: constant(value), lognormal(mu, sigma) of the underlying normal,
    loguniform(low, high), empirical(values) with uniform choice.
    Samples are always >= 0 and deterministic per (stream, draw index).
    """

    kind: str
    params: tuple

    @staticmethod
    def from_config(cfg: dict) -> "DistSpec":
        kind = cfg.get("distribution")
        if kind == "constant":
            value = float(cfg["value"])
            if value < 0:
                raise ValueError("constant distribution value must be >= 0")
            return DistSpec("constant", (value,))
        if kind == "lognormal":
            return DistSpec("lognormal", (float(cfg["mu"]), float(cfg["sigma"])))
        if kind == "loguniform":
            low, high = float(cfg["low"]), float(cfg["high"])
            if not 0 < low <= high:
                raise ValueError("loguniform needs 0 < low <= high")
            return DistSpec("loguniform", (low, high))
        if kind == "empirical":
            values = tuple(float(v) for v in cfg["values"])
            if not values or any(v < 0 for v in values):
                raise ValueError("empirical distribution needs non-negative values")
            return DistSpec("empirical", values)
        raise ValueError(f"unknown distribution {kind!r}")

    def sample(self, rng) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "lognormal":
            mu, sigma = self.params
            return float(rng.lognormal(mu, sigma))
        if self.kind == "loguniform":
            low, high = self.params
            import math

            return float(math.exp(rng.uniform(math.log(low), math.log(high))))
        if self.kind == "empirical":
            return float(self.params[int(rng.integers(len(self.params)))])
        raise AssertionError(self.kind)


def comm_time_report(log: list[dict]) -> dict:
    """Aggregate timing view over an event log.

    total_comm_s sums every latency-bearing interval: transfer latencies,
    synchronous barrier waits, and aggregation costs. idle_s is per-client
    barrier wait (zero by construction for asynchronous runs, where a
    client re-fetches immediately after finishing). updates_per_round is
    the aggregation-event count per round window.
    """
    transfer_s = 0.0
    agg_cost_s = 0.0
    resolve: dict[tuple[int, int], float] = {}  # (round/window, client) -> done time
    barriers: dict[int, float] = {}
    agg_times: list[float] = []
    agg_windows: dict[int, int] = {}
    idle: dict[int, float] = {}

    for rec in log:
        kind = rec.get("kind")
        if kind in ("broadcast_arrive", "upload_arrive"):
            transfer_s += rec.get("latency_s", 0.0)
        if kind in ("train_done", "upload_arrive") and "client_id" in rec:
            key = (rec.get("round", 0), rec["client_id"])
            resolve[key] = max(resolve.get(key, 0.0), rec["t_s"])
        if kind == "aggregate":
            agg_cost_s += rec.get("cost_s", 0.0)
            agg_times.append(rec["t_s"])
            window = rec.get("window", rec.get("round", 0))
            agg_windows[window] = agg_windows.get(window, 0) + 1
            if rec.get("barrier_t_s") is not None:
                barriers[rec.get("round", 0)] = rec["barrier_t_s"]

    wait_s = 0.0
    for (rnd, client), done_t in resolve.items():
        if rnd in barriers:
            gap = barriers[rnd] - done_t
            if gap > 0:
                idle[client] = idle.get(client, 0.0) + gap
                wait_s += gap

    per_round_s = []
    prev = 0.0
    for t in agg_times:
        per_round_s.append(t - prev)
        prev = t

    n_windows = max(1, len(agg_windows))
    return {
        "total_comm_s": transfer_s + wait_s + agg_cost_s,
        "transfer_s": transfer_s,
        "barrier_wait_s": wait_s,
        "agg_cost_s": agg_cost_s,
        "per_round_s": per_round_s,
        "updates_per_round": sum(agg_windows.values()) / n_windows,
        "idle_s": idle,
    }


def check_causality(log: list[dict]) -> None:
    """Raises AssertionError if the log violates ordering or conservation.

    Checks: event times never decrease; each upload_arrive is preceded by
    its client's train_done; between consecutive broadcasts to a client
    exactly one of {train_done, client_fail} occurs for it.
    """
    last_t = 0.0
    open_cycle: dict[int, list[str]] = {}
    trained: set[tuple[int, int]] = set()
    for rec in log:
        t = rec.get("t_s", last_t)
        assert t >= last_t - 1e-12, f"time went backwards: {t} after {last_t}"
        last_t = t
        kind = rec.get("kind")
        cid = rec.get("client_id")
        if kind == "broadcast_arrive":
            pending = open_cycle.get(cid, [])
            assert (
                not pending or pending[-1] in ("train_done", "client_fail")
            ), f"client {cid} re-broadcast before resolving previous cycle"
            open_cycle[cid] = []
        elif kind in ("train_done", "client_fail") and cid is not None:
            if kind == "client_fail" and rec.get("recovered"):
                continue  # recovered failures still end in train_done
            history = open_cycle.setdefault(cid, [])
            assert all(
                k not in ("train_done", "client_fail") for k in history
            ), f"client {cid} resolved twice in one cycle"
            history.append(kind)
            if kind == "train_done":
                trained.add((cid, rec.get("round", 0)))
        elif kind == "upload_arrive":
            assert (
                cid,
                rec.get("round", 0),
            ) in trained, f"upload without train_done for client {cid}"
