"""Deterministic discrete-event harness around the router and the protocol.

A Network binds one server and N-1 clients to the ports of a router,
schedules every wavelength at its own time offset inside the repetition
frame, and drives :func:`wdmqkd.protocol.run_session` with quantum
transmissions whose loss is the measured router path plus a configurable
eATT.  Every pulse arrival, detection gate, and classical message lands
in an event log that is totally ordered and reproducible from the seed.

Pulse trains put millions of identical-period events in the log, so the
log stores them as arithmetic segments and expands to lines only when
rendered.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .photonics import (
    DEFAULT_CLIENT_DARK_RATES_HZ,
    DEFAULT_E_OPT,
    DEFAULT_FIBER_ALPHA_DB_PER_KM,
    DEFAULT_GATE_WIDTH_NS,
    DEFAULT_MU,
    DEFAULT_REP_RATE_HZ,
    DetectorModel,
    LinkBudget,
    SourceModel,
    attenuation_to_length,
    p_dark_per_gate,
    p_signal_click,
)
from .protocol import (
    ClassicalMessage,
    DetectionTrain,
    InsufficientDetectionsError,
    LinkParameters,
    PulseTrain,
    SessionAbortError,
    SessionConfig,
    SessionResult,
    generate_train,
    measure_train,
    run_session,
)
from .router import (
    ChannelId,
    RouterSpec,
    UnroutableWavelengthError,
    fourport_router_spec,
    path_loss_db,
    route,
)

__all__ = [
    "Event",
    "EventLog",
    "Network",
    "NetworkRun",
    "NetworkSpec",
    "SchedulingInfeasibleError",
    "SweepRow",
    "assign_time_offsets",
    "default_fourport_network",
    "run_network",
    "sweep_attenuation",
    "sweep_rows_to_csv",
]


class SchedulingInfeasibleError(ValueError):
    """The requested channels cannot be spaced inside one frame period."""


DEFAULT_GUARD_NS = 100

EVENT_KINDS = ("pulse-arrival", "gate-open", "classical-message")
_RANK = {kind: rank for rank, kind in enumerate(EVENT_KINDS)}


def assign_time_offsets(
    channels: Iterable[ChannelId | int],
    frame_period_ns: int,
    guard_ns: int = DEFAULT_GUARD_NS,
) -> dict[int, int]:
    """Greedy per-channel offsets: 0, guard, 2·guard, ... within the frame.

    Offsets are pairwise separated by at least ``guard_ns`` (also across
    the frame boundary) so pulses of different wavelengths never share a
    time slot at the router.
    """
    idx = [c.index if isinstance(c, ChannelId) else int(c) for c in channels]
    if len(set(idx)) != len(idx):
        raise ValueError("channels must be distinct")
    if not idx:
        raise ValueError("need at least one channel")
    if frame_period_ns <= 0 or guard_ns <= 0:
        raise ValueError("frame period and guard must be positive")
    if len(idx) * guard_ns > frame_period_ns:
        raise SchedulingInfeasibleError(
            f"{len(idx)} channels at {guard_ns} ns guard do not fit in a "
            f"{frame_period_ns} ns frame"
        )
    return {c: i * guard_ns for i, c in enumerate(idx)}


# ---------------------------------------------------------------------------
# Event log


@dataclass(frozen=True)
class Event:
    """One log entry; renders as ``time_ns kind port channel detail``."""

    time_ns: int
    kind: str
    port: str
    channel: str
    detail: str

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def line(self) -> str:
        return f"{self.time_ns} {self.kind} {self.port} {self.channel} {self.detail}".rstrip()


@dataclass(frozen=True)
class _Segment:
    """``count`` identical events at times time0 + i·period_ns."""

    time0: int
    period_ns: int
    count: int
    kind: str
    port: str
    channel: str
    detail: str
    seq0: int


class EventLog:
    """Totally ordered event log with lazy expansion of periodic trains.

    Order is (time, kind rank, sequence number); sequence numbers follow
    append order, so ties between same-kind events keep causal order.
    """

    def __init__(self) -> None:
        self._segments: list[_Segment] = []
        self._singles: list[tuple[int, int, int, Event]] = []
        self._next_seq = 0

    def append(self, event: Event) -> None:
        self._singles.append((event.time_ns, _RANK[event.kind], self._next_seq, event))
        self._next_seq += 1

    def append_train(
        self,
        time0: int,
        period_ns: int,
        count: int,
        kind: str,
        port: str,
        channel: str,
        detail: str,
    ) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if count <= 0 or period_ns <= 0:
            raise ValueError("a train needs positive count and period")
        self._segments.append(
            _Segment(time0, period_ns, count, kind, port, channel, detail, self._next_seq)
        )
        self._next_seq += count

    def __len__(self) -> int:
        return len(self._singles) + sum(s.count for s in self._segments)

    def _streams(self) -> list[Iterator[tuple[int, int, int, Event | _Segment, int]]]:
        def expand(seg: _Segment):
            for i in range(seg.count):
                yield (seg.time0 + i * seg.period_ns, _RANK[seg.kind], seg.seq0 + i, seg, i)

        streams = [expand(s) for s in self._segments]
        streams.append((t, r, q, ev, -1) for t, r, q, ev in sorted(self._singles, key=lambda x: x[:3]))
        return streams

    def events(self) -> Iterator[Event]:
        for time_ns, _, _, obj, i in heapq.merge(*self._streams(), key=lambda x: x[:3]):
            if i < 0:
                yield obj  # already an Event
            else:
                yield Event(time_ns, obj.kind, obj.port, obj.channel, obj.detail)

    def render_lines(self) -> Iterator[str]:
        for time_ns, _, _, obj, i in heapq.merge(*self._streams(), key=lambda x: x[:3]):
            if i < 0:
                yield obj.line()
            else:
                yield f"{time_ns} {obj.kind} {obj.port} {obj.channel} {obj.detail}".rstrip()

    def render_text(self, max_lines: int | None = None) -> str:
        lines = []
        for n, line in enumerate(self.render_lines()):
            if max_lines is not None and n >= max_lines:
                break
            lines.append(line)
        return "\n".join(lines) + ("\n" if lines else "")

    def digest(self) -> str:
        """SHA-256 over the rendered lines; cheap way to compare huge logs."""
        h = hashlib.sha256()
        for line in self.render_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def pulse_arrivals(self) -> tuple[np.ndarray, np.ndarray]:
        """(times, channel labels) of every pulse-arrival event, unsorted."""
        times: list[np.ndarray] = []
        chans: list[np.ndarray] = []
        for s in self._segments:
            if s.kind != "pulse-arrival":
                continue
            times.append(s.time0 + s.period_ns * np.arange(s.count, dtype=np.int64))
            chans.append(np.repeat(s.channel, s.count))
        for t, _, _, ev in self._singles:
            if ev.kind == "pulse-arrival":
                times.append(np.array([t], dtype=np.int64))
                chans.append(np.array([ev.channel]))
        if not times:
            return np.array([], dtype=np.int64), np.array([], dtype=object)
        return np.concatenate(times), np.concatenate(chans)

    def guard_violations(self, guard_ns: int) -> list[tuple[int, str, int, str]]:
        """Pairs of different-channel pulse arrivals closer than the guard."""
        times, chans = self.pulse_arrivals()
        if times.size < 2:
            return []
        order = np.argsort(times, kind="stable")
        times, chans = times[order], chans[order]
        gaps = np.diff(times)
        bad = np.flatnonzero((gaps < guard_ns) & (chans[1:] != chans[:-1]))
        return [
            (int(times[i]), str(chans[i]), int(times[i + 1]), str(chans[i + 1]))
            for i in bad
        ]


# ---------------------------------------------------------------------------
# Network specification


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Static description of the star network.

    The port named by ``server`` holds the source; every other port holds
    a client with its own detector and a per-link eATT on its path.
    ``frame_period_ns`` must equal 10⁹ / source rep rate; leave it None to
    have it derived.
    """

    router: RouterSpec
    server: int
    source: SourceModel
    detectors: Mapping[int, DetectorModel]
    eatt_db: Mapping[int, float]
    offsets_ns: Mapping[int, int] | None = None
    frame_period_ns: int | None = None
    guard_ns: int = DEFAULT_GUARD_NS
    classical_delay_ns: int = 0

    def __post_init__(self) -> None:
        a = self.router.assignment
        n = a.n_ports
        if not 0 <= self.server < n:
            raise ValueError(f"server port {self.server} outside the router")
        clients = tuple(p for p in range(n) if p != self.server)

        period = 1e9 / self.source.rep_rate_hz
        if abs(period - round(period)) > 1e-9:
            raise ValueError(
                f"rep rate {self.source.rep_rate_hz} Hz gives a non-integer "
                f"frame period of {period} ns"
            )
        period = int(round(period))
        if self.frame_period_ns is None:
            object.__setattr__(self, "frame_period_ns", period)
        elif self.frame_period_ns != period:
            raise ValueError(
                f"frame period {self.frame_period_ns} ns contradicts the "
                f"{self.source.rep_rate_hz} Hz rep rate ({period} ns)"
            )

        if set(self.detectors) != set(clients):
            raise ValueError(
                f"detectors must cover exactly the client ports {clients}, "
                f"got {sorted(self.detectors)}"
            )
        for p, det in self.detectors.items():
            if det.rep_rate_hz != self.source.rep_rate_hz:
                raise ValueError(
                    f"detector at port {p} is gated at {det.rep_rate_hz} Hz "
                    f"but the source runs at {self.source.rep_rate_hz} Hz"
                )
        if set(self.eatt_db) != set(clients):
            raise ValueError(
                f"eATT map must cover exactly the client ports {clients}, "
                f"got {sorted(self.eatt_db)}"
            )
        for p, db in self.eatt_db.items():
            if db < 0:
                raise ValueError(f"eATT at port {p} is negative: {db} dB")

        channel_idx = tuple(ch.index for ch in a.channels)
        if self.offsets_ns is None:
            object.__setattr__(
                self,
                "offsets_ns",
                assign_time_offsets(channel_idx, self.frame_period_ns, self.guard_ns),
            )
        else:
            offs = dict(self.offsets_ns)
            if set(offs) != set(channel_idx):
                raise ValueError(
                    f"offsets must cover exactly the channels {channel_idx}"
                )
            values = list(offs.values())
            if len(set(values)) != len(values):
                raise ValueError("channel offsets must be pairwise distinct")
            for ch, off in offs.items():
                if not 0 <= off < self.frame_period_ns:
                    raise ValueError(
                        f"offset {off} ns of channel {ch} outside the frame"
                    )

    @property
    def clients(self) -> tuple[int, ...]:
        return tuple(
            p for p in range(self.router.assignment.n_ports) if p != self.server
        )

    def with_uniform_eatt(self, db: float) -> "NetworkSpec":
        return replace(self, eatt_db={c: float(db) for c in self.clients})


def default_fourport_network(
    eatt_db: float = 0.0,
    mu: float = DEFAULT_MU,
    e_opt: float = DEFAULT_E_OPT,
    rep_rate_hz: float = DEFAULT_REP_RATE_HZ,
    dark_rates_hz: Sequence[float] = DEFAULT_CLIENT_DARK_RATES_HZ,
    efficiency: float = 0.10,
    guard_ns: int = DEFAULT_GUARD_NS,
) -> NetworkSpec:
    """The shipped 4-port star: server at port A, measured losses, three
    clients whose detectors carry the calibrated dark rates in port order."""
    router = fourport_router_spec()
    source = SourceModel(mean_photon_number=mu, rep_rate_hz=rep_rate_hz, e_opt=e_opt)
    detectors = {
        port: DetectorModel(
            efficiency=efficiency,
            dark_rate_hz=rate,
            gate_width_ns=DEFAULT_GATE_WIDTH_NS,
            rep_rate_hz=rep_rate_hz,
        )
        for port, rate in zip((1, 2, 3), dark_rates_hz)
    }
    return NetworkSpec(
        router=router,
        server=0,
        source=source,
        detectors=detectors,
        eatt_db={1: eatt_db, 2: eatt_db, 3: eatt_db},
        guard_ns=guard_ns,
    )


# ---------------------------------------------------------------------------
# Runtime network handle


class Network:
    """Runtime handle satisfying the run_session contract with full logging."""

    def __init__(self, spec: NetworkSpec, seed: int | np.random.SeedSequence = 0):
        self.spec = spec
        self.events = EventLog()
        self._assignment = spec.router.assignment
        seed_seq = (
            seed
            if isinstance(seed, np.random.SeedSequence)
            else np.random.SeedSequence(int(seed))
        )
        children = seed_seq.spawn(self._assignment.n_ports + 1)
        self._quantum_rng = {
            port: np.random.default_rng(children[port])
            for port in range(self._assignment.n_ports)
        }
        self._session_rng = np.random.default_rng(children[-1])
        self._now = 0
        self._window: tuple[int, int] | None = None  # (start_ns, n_frames)

    @property
    def n_ports(self) -> int:
        return self._assignment.n_ports

    def port_label(self, port: int) -> str:
        return self._assignment.port(port).label

    def clock_ns(self) -> int:
        self._now += self.spec.classical_delay_ns
        return self._now

    def protocol_rng(self) -> np.random.Generator:
        return self._session_rng

    def notify_classical(self, msg: ClassicalMessage) -> None:
        port = "-" if msg.sender is None else self.port_label(msg.sender)
        link = "-" if msg.link is None else (
            f"{self.port_label(msg.link[0])}-{self.port_label(msg.link[1])}"
        )
        self.events.append(
            Event(
                msg.time_ns,
                "classical-message",
                port,
                "-",
                f"kind={msg.kind} link={link} seq={msg.seq}",
            )
        )

    def link_budget(self, server: int, client: int) -> LinkBudget:
        return LinkBudget.of(
            ("router", path_loss_db(self.spec.router, server, client)),
            ("eATT", float(self.spec.eatt_db[client])),
        )

    def link_parameters(self, server: int, client: int) -> LinkParameters:
        if server != self.spec.server:
            raise ValueError(
                f"port {self.port_label(server)} holds no source; the server "
                f"is {self.port_label(self.spec.server)}"
            )
        channel = self._assignment.pair_channel(server, client)
        det = self.spec.detectors[client]
        budget = self.link_budget(server, client)
        return LinkParameters(
            channel=channel,
            p_sig=p_signal_click(self.spec.source, budget, det),
            p_dark=p_dark_per_gate(det),
            e_opt=self.spec.source.e_opt,
            rep_rate_hz=self.spec.source.rep_rate_hz,
            total_loss_db=budget.total_db,
            offset_ns=self.spec.offsets_ns[channel.index],
        )

    def _window_start(self, n_frames: int) -> int:
        period = self.spec.frame_period_ns
        if self._window is not None:
            start, frames = self._window
            if frames != n_frames:
                raise ValueError(
                    "all trains of one quantum window must share n_frames"
                )
            return start
        start = (self._now // period + 1) * period
        self._window = (start, n_frames)
        self._now = start + n_frames * period
        return start

    def transmit_train(
        self, server: int, client: int, n_frames: int
    ) -> tuple[PulseTrain, DetectionTrain]:
        params = self.link_parameters(server, client)
        period = self.spec.frame_period_ns
        start = self._window_start(n_frames) + params.offset_ns
        budget = self.link_budget(server, client)
        rng = self._quantum_rng[client]
        train = generate_train(n_frames, params.channel, self.spec.source, rng)
        detections = measure_train(
            train, self.spec.detectors[client], params.p_sig, params.e_opt, rng
        )
        router_db, eatt_db = (db for _, db in budget.components)
        self.events.append_train(
            start, period, n_frames,
            "pulse-arrival",
            self.port_label(server),
            params.channel.label,
            f"dest={self.port_label(client)} router_db={router_db} "
            f"eatt_db={eatt_db} loss_db={budget.total_db}",
        )
        self.events.append_train(
            start, period, n_frames,
            "gate-open",
            self.port_label(client),
            params.channel.label,
            f"width_ns={self.spec.detectors[client].gate_width_ns}",
        )
        return train, detections

    def inject_pulse(self, in_port: int, channel: int | ChannelId, frame: int = 0):
        """Send one isolated pulse; returns the output port, or None if the
        wavelength is dark at that input and the pulse is discarded."""
        period = self.spec.frame_period_ns
        ch_index = channel.index if isinstance(channel, ChannelId) else int(channel)
        offset = self.spec.offsets_ns.get(ch_index, 0)
        time_ns = (self._now // period + 1 + frame) * period + offset
        label = ChannelId(ch_index).label
        try:
            dest = route(self.spec.router, in_port, ch_index)
        except UnroutableWavelengthError:
            self.events.append(
                Event(
                    time_ns, "pulse-arrival", self.port_label(in_port), label,
                    "dest=- discarded=unroutable",
                )
            )
            return None
        self.events.append(
            Event(
                time_ns, "pulse-arrival", self.port_label(in_port), label,
                f"dest={dest.label}",
            )
        )
        return dest


@dataclass(frozen=True, eq=False)
class NetworkRun:
    """A finished run: the session outcome plus the full event log."""

    result: SessionResult
    events: EventLog
    seed: int


def run_network(
    spec: NetworkSpec, cfg: SessionConfig, seed: int | None = None
) -> NetworkRun:
    """Run one session over ``spec``; the seed defaults to ``cfg.seed``.

    Session failures (abort, no detections) propagate as exceptions; their
    diagnostics carry the per-link measurements.
    """
    actual_seed = cfg.seed if seed is None else int(seed)
    net = Network(spec, seed=actual_seed)
    result = run_session(cfg, net)
    return NetworkRun(result=result, events=net.events, seed=actual_seed)


# ---------------------------------------------------------------------------
# Attenuation sweep


@dataclass(frozen=True)
class SweepRow:
    """One (attenuation, channel) point of a sweep.

    ``status`` is "ok" for completed sessions, "abort" when the error rate
    tripped the threshold (key discarded, QBER still measured), and
    "no-detections" when a link sifted down to nothing (QBER undefined).
    """

    atten_db: float
    channel_nm: float | None
    qber: float
    sift_rate_hz: float
    leaked_bits: int
    length_km: float
    client: int
    status: str


def sweep_attenuation(
    spec: NetworkSpec,
    cfg: SessionConfig,
    db_list: Sequence[float],
    seed: int | None = None,
    fiber_alpha: float = DEFAULT_FIBER_ALPHA_DB_PER_KM,
) -> list[SweepRow]:
    """Rerun the session once per eATT value, collecting per-channel rows.

    Every point gets a fresh seed derived from the master seed (``seed``
    or ``cfg.seed``).  Aborted points contribute rows with their measured
    QBER and zero leaked bits; points with no detections contribute NaN
    QBER markers.  Rows are ordered by dB, then client port.
    """
    if not db_list:
        raise ValueError("db_list must be nonempty")
    if any(db < 0 for db in db_list):
        raise ValueError("attenuations must be nonnegative")
    master = cfg.seed if seed is None else int(seed)
    rows: list[SweepRow] = []
    for i, db in enumerate(sorted(db_list)):
        point_spec = spec.with_uniform_eatt(db)
        point_seed = int(
            np.random.SeedSequence((master, i)).generate_state(1, np.uint64)[0]
        )
        length_km = attenuation_to_length(db, fiber_alpha)
        try:
            run = run_network(point_spec, cfg, seed=point_seed)
            reports = run.result.links
            status = "ok"
        except SessionAbortError as err:
            reports = err.diagnostics
            status = "abort"
        except InsufficientDetectionsError:
            for client in cfg.clients:
                params = Network(point_spec, seed=point_seed).link_parameters(
                    cfg.server, client
                )
                rows.append(
                    SweepRow(
                        atten_db=float(db),
                        channel_nm=params.channel.nm,
                        qber=float("nan"),
                        sift_rate_hz=0.0,
                        leaked_bits=0,
                        length_km=length_km,
                        client=client,
                        status="no-detections",
                    )
                )
            continue
        for link in reports:
            rows.append(
                SweepRow(
                    atten_db=float(db),
                    channel_nm=link.channel_nm,
                    qber=link.qber_measured,
                    sift_rate_hz=link.sift_rate_hz,
                    leaked_bits=link.leaked_bits,
                    length_km=length_km,
                    client=link.client,
                    status=status,
                )
            )
    return rows


SWEEP_CSV_HEADER = "atten_db,channel_nm,qber,sift_rate_hz,leaked_bits,length_km"


def sweep_rows_to_csv(rows: Sequence[SweepRow]) -> str:
    """Render sweep rows as CSV under the stable six-column header."""
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        nm = "" if r.channel_nm is None else repr(float(r.channel_nm))
        lines.append(
            f"{float(r.atten_db)!r},{nm},{float(r.qber)!r},"
            f"{float(r.sift_rate_hz)!r},{r.leaked_bits},{float(r.length_km)!r}"
        )
    return "\n".join(lines) + "\n"
