"""Command-line front end: router tables, single sessions, attenuation sweeps.

The `simulate` and `sweep` subcommands share one YAML config whose
sections mirror the library dataclasses (``network`` feeds NetworkSpec,
``session`` feeds SessionConfig).  Unknown keys anywhere in the file are
hard errors so a typo in a physics parameter cannot silently fall back
to a default.

Exit codes: 0 success, 2 usage or configuration error, 3 protocol abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .netsim import (
    NetworkSpec,
    default_fourport_network,
    run_network,
    sweep_attenuation,
    sweep_rows_to_csv,
)
from .photonics import (
    DEFAULT_CLIENT_DARK_RATES_HZ,
    DEFAULT_E_OPT,
    DEFAULT_EFFICIENCY,
    DEFAULT_GATE_WIDTH_NS,
    DEFAULT_MU,
    DEFAULT_REP_RATE_HZ,
    DetectorModel,
    SourceModel,
)
from .protocol import SessionAbortError, SessionConfig, SessionError
from .router import (
    FOURPORT_CHANNEL_NM,
    build_assignment,
    export_assignment,
    format_assignment_table,
    fourport_router_spec,
    import_loss_matrix,
    uniform_router_spec,
    wdm_requirements,
)

__all__ = ["ConfigError", "RunConfig", "load_config", "main"]


class ConfigError(ValueError):
    """The config file is missing, malformed, or contains unknown keys."""


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3

_TOP_KEYS = frozenset({"network", "session", "sweep", "output"})
_NETWORK_KEYS = frozenset({
    "router", "server", "source", "detectors", "eatt_db",
    "offsets_ns", "frame_period_ns", "guard_ns", "classical_delay_ns",
})
_ROUTER_KEYS = frozenset({"ports", "uniform_loss_db", "loss_file", "crosstalk_db"})
_SOURCE_KEYS = frozenset({"mean_photon_number", "rep_rate_hz", "e_opt"})
_DETECTOR_KEYS = frozenset({"efficiency", "dark_rate_hz", "gate_width_ns", "rep_rate_hz"})
_SESSION_KEYS = frozenset({
    "mode", "clients", "n_frames", "sample_fraction", "qber_abort_threshold", "seed",
})
_SWEEP_KEYS = frozenset({"start_db", "stop_db", "step_db"})
_OUTPUT_KEYS = frozenset({"key_dir", "csv"})


# ---------------------------------------------------------------------------
# Config ingestion


def _require_mapping(obj: Any, where: str) -> dict:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where} must be a mapping, got {type(obj).__name__}")
    return dict(obj)


def _check_keys(data: Mapping, allowed: frozenset, where: str) -> None:
    unknown = sorted(str(k) for k in data if k not in allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {', '.join(unknown)}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )


def _as_int(value: Any, where: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            f = float(value)
        except ValueError:
            raise ConfigError(f"{where} must be an integer, got {value!r}") from None
        if f.is_integer():
            return int(f)
    raise ConfigError(f"{where} must be an integer, got {value!r}")


def _as_float(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{where} must be a number, got {value!r}") from None


def _build_router(node: Any, base_dir: Path):
    if node is None or node == "fourport":
        return fourport_router_spec()
    data = _require_mapping(node, "network.router")
    _check_keys(data, _ROUTER_KEYS, "network.router")
    ports = _as_int(data.get("ports", 4), "network.router.ports")
    if ports < 2:
        raise ConfigError(f"network.router.ports must be at least 2, got {ports}")
    crosstalk = _as_float(data.get("crosstalk_db", 28.0), "network.router.crosstalk_db")
    nm = FOURPORT_CHANNEL_NM if ports == 4 else None
    assignment = build_assignment(ports, nm=nm)
    if "loss_file" in data:
        path = base_dir / str(data["loss_file"])
        if not path.is_file():
            raise ConfigError(f"network.router.loss_file not found: {path}")
        return import_loss_matrix(
            path.read_text(encoding="utf-8"), assignment, crosstalk_db=crosstalk
        )
    if "uniform_loss_db" in data:
        loss = _as_float(data["uniform_loss_db"], "network.router.uniform_loss_db")
        return uniform_router_spec(assignment, loss_db=loss, crosstalk_db=crosstalk)
    if ports == 4:
        return fourport_router_spec(crosstalk_db=crosstalk)
    return uniform_router_spec(assignment, crosstalk_db=crosstalk)


def _build_source(node: Any) -> SourceModel:
    if node is None:
        return SourceModel()
    data = _require_mapping(node, "network.source")
    _check_keys(data, _SOURCE_KEYS, "network.source")
    return SourceModel(
        mean_photon_number=_as_float(
            data.get("mean_photon_number", DEFAULT_MU), "network.source.mean_photon_number"
        ),
        rep_rate_hz=_as_float(
            data.get("rep_rate_hz", DEFAULT_REP_RATE_HZ), "network.source.rep_rate_hz"
        ),
        e_opt=_as_float(data.get("e_opt", DEFAULT_E_OPT), "network.source.e_opt"),
    )


def _build_detectors(
    node: Any, clients: Sequence[int], source: SourceModel
) -> dict[int, DetectorModel]:
    if node is None:
        if len(clients) != len(DEFAULT_CLIENT_DARK_RATES_HZ):
            raise ConfigError(
                "network.detectors is required unless the router has exactly "
                f"{len(DEFAULT_CLIENT_DARK_RATES_HZ)} clients"
            )
        return {
            c: DetectorModel(
                efficiency=DEFAULT_EFFICIENCY,
                dark_rate_hz=rate,
                gate_width_ns=DEFAULT_GATE_WIDTH_NS,
                rep_rate_hz=source.rep_rate_hz,
            )
            for c, rate in zip(clients, DEFAULT_CLIENT_DARK_RATES_HZ)
        }
    data = _require_mapping(node, "network.detectors")
    out = {}
    for key, value in data.items():
        port = _as_int(key, "network.detectors port key")
        det = _require_mapping(value, f"network.detectors.{port}")
        _check_keys(det, _DETECTOR_KEYS, f"network.detectors.{port}")
        out[port] = DetectorModel(
            efficiency=_as_float(
                det.get("efficiency", DEFAULT_EFFICIENCY),
                f"network.detectors.{port}.efficiency",
            ),
            dark_rate_hz=_as_float(
                det.get("dark_rate_hz", 0.0), f"network.detectors.{port}.dark_rate_hz"
            ),
            gate_width_ns=_as_float(
                det.get("gate_width_ns", DEFAULT_GATE_WIDTH_NS),
                f"network.detectors.{port}.gate_width_ns",
            ),
            rep_rate_hz=_as_float(
                det.get("rep_rate_hz", source.rep_rate_hz),
                f"network.detectors.{port}.rep_rate_hz",
            ),
        )
    return out


def _build_eatt(value: Any, clients: Sequence[int]) -> dict[int, float]:
    if isinstance(value, Mapping):
        return {
            _as_int(k, "network.eatt_db port key"): _as_float(v, f"network.eatt_db[{k}]")
            for k, v in value.items()
        }
    db = _as_float(value, "network.eatt_db")
    return {c: db for c in clients}


def _build_network(node: Any, base_dir: Path) -> NetworkSpec:
    if node is None:
        return default_fourport_network()
    data = _require_mapping(node, "network")
    _check_keys(data, _NETWORK_KEYS, "network")
    router = _build_router(data.get("router"), base_dir)
    server = _as_int(data.get("server", 0), "network.server")
    source = _build_source(data.get("source"))
    clients = tuple(p for p in range(router.assignment.n_ports) if p != server)
    kwargs: dict[str, Any] = {}
    if "offsets_ns" in data:
        offs = _require_mapping(data["offsets_ns"], "network.offsets_ns")
        kwargs["offsets_ns"] = {
            _as_int(k, "network.offsets_ns channel key"): _as_int(
                v, f"network.offsets_ns[{k}]"
            )
            for k, v in offs.items()
        }
    for field in ("frame_period_ns", "guard_ns", "classical_delay_ns"):
        if field in data:
            kwargs[field] = _as_int(data[field], f"network.{field}")
    return NetworkSpec(
        router=router,
        server=server,
        source=source,
        detectors=_build_detectors(data.get("detectors"), clients, source),
        eatt_db=_build_eatt(data.get("eatt_db", 0.0), clients),
        **kwargs,
    )


def _build_session(node: Any, spec: NetworkSpec) -> SessionConfig:
    data = {} if node is None else _require_mapping(node, "session")
    _check_keys(data, _SESSION_KEYS, "session")
    clients = data.get("clients", spec.clients)
    if not isinstance(clients, (list, tuple)):
        raise ConfigError("session.clients must be a list of port indices")
    return SessionConfig(
        server=spec.server,
        clients=tuple(_as_int(c, "session.clients entry") for c in clients),
        mode=str(data.get("mode", "broadcast")),
        n_frames=_as_int(data.get("n_frames", 100_000), "session.n_frames"),
        sample_fraction=_as_float(
            data.get("sample_fraction", 0.25), "session.sample_fraction"
        ),
        qber_abort_threshold=_as_float(
            data.get("qber_abort_threshold", 0.11), "session.qber_abort_threshold"
        ),
        seed=_as_int(data.get("seed", 0), "session.seed"),
    )


def _build_sweep(node: Any) -> tuple[float, float, float] | None:
    if node is None:
        return None
    data = _require_mapping(node, "sweep")
    _check_keys(data, _SWEEP_KEYS, "sweep")
    missing = sorted(_SWEEP_KEYS - set(data))
    if missing:
        raise ConfigError(f"sweep section is missing {', '.join(missing)}")
    return (
        _as_float(data["start_db"], "sweep.start_db"),
        _as_float(data["stop_db"], "sweep.stop_db"),
        _as_float(data["step_db"], "sweep.step_db"),
    )


@dataclass(frozen=True)
class RunConfig:
    """A parsed config file: the network, the session, and output plumbing."""

    spec: NetworkSpec
    session: SessionConfig
    sweep_db: tuple[float, float, float] | None
    key_dir: str
    csv_path: str


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {p}: {err}") from err
    data = _require_mapping(raw if raw is not None else {}, "config")
    _check_keys(data, _TOP_KEYS, "config")
    spec = _build_network(data.get("network"), p.parent)
    session = _build_session(data.get("session"), spec)
    output = _require_mapping(data.get("output") or {}, "output")
    _check_keys(output, _OUTPUT_KEYS, "output")
    return RunConfig(
        spec=spec,
        session=session,
        sweep_db=_build_sweep(data.get("sweep")),
        key_dir=str(output.get("key_dir", "keys")),
        csv_path=str(output.get("csv", "sweep.csv")),
    )


# ---------------------------------------------------------------------------
# Subcommands


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _warn_low_frames(n_frames: int) -> None:
    if n_frames < 1000:
        print(
            f"warning: n_frames={n_frames} is too small for stable statistics",
            file=sys.stderr,
        )


def cmd_router_table(ports: int, out: str | None) -> int:
    """Human table, machine listing, and the WDM count for an N-port router."""
    if ports < 2:
        raise ConfigError(f"a router needs at least 2 ports, got {ports}")
    nm = FOURPORT_CHANNEL_NM if ports == 4 else None
    assignment = build_assignment(ports, nm=nm)
    n_wdms, per_wdm = wdm_requirements(ports)
    text = (
        format_assignment_table(assignment)
        + "\n"
        + export_assignment(assignment)
        + f"\n{n_wdms} WDMs × {per_wdm} channels\n"
    )
    _emit(text, out)
    return EXIT_OK


def cmd_simulate(run_cfg: RunConfig, out: str | None) -> int:
    """One session over the configured network; keys land in per-client files."""
    cfg = run_cfg.session
    assignment = run_cfg.spec.router.assignment
    label = lambda port: assignment.port(port).label
    _warn_low_frames(cfg.n_frames)
    try:
        run = run_network(run_cfg.spec, cfg)
    except SessionAbortError as err:
        print(f"abort: {err}", file=sys.stderr)
        for rep in err.diagnostics:
            print(
                f"  link {label(rep.server)}-{label(rep.client)}  "
                f"qber_estimate {rep.qber_estimate:.6f}  "
                f"qber_measured {rep.qber_measured:.6f}",
                file=sys.stderr,
            )
        return EXIT_ABORT
    except SessionError as err:
        print(f"abort: {err}", file=sys.stderr)
        return EXIT_ABORT

    result = run.result
    clients = ",".join(label(c) for c in cfg.clients)
    print(
        f"mode {cfg.mode}  server {label(cfg.server)}  clients {clients}  "
        f"seed {run.seed}  frames {cfg.n_frames}"
    )
    for link in result.links:
        nm = "" if link.channel_nm is None else f" {link.channel_nm}nm"
        print(
            f"link {label(link.server)}-{label(link.client)}  "
            f"ch λ{link.channel_index + 1}{nm}  "
            f"loss_db {link.total_loss_db:.2f}  "
            f"sifted {link.n_sifted}  "
            f"qber {link.qber_measured:.6f}  "
            f"leaked_bits {link.leaked_bits}  "
            f"key_bits {link.final_length}"
        )
    print(
        f"final key: {result.key_length} bits, "
        f"reference client {label(result.reference_client)}"
    )
    out_dir = Path(out if out is not None else run_cfg.key_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for client in sorted(result.client_keys):
        bits = result.client_keys[client]
        path = out_dir / f"key_{label(client)}.hex"
        payload = np.packbits(bits).tobytes().hex()
        path.write_text(f"bits {bits.size}\n{payload}\n", encoding="utf-8")
        print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(run_cfg: RunConfig, out: str | None) -> int:
    """QBER versus eATT sweep; CSV artifact plus a per-channel summary."""
    if run_cfg.sweep_db is None:
        raise ConfigError("the config has no sweep section")
    start, stop, step = run_cfg.sweep_db
    if step <= 0:
        raise ConfigError(f"sweep.step_db must be positive, got {step}")
    if start < 0 or stop < start:
        raise ConfigError(
            f"sweep range must satisfy 0 <= start <= stop, got {start}..{stop}"
        )
    n_points = int(math.floor((stop - start) / step + 1e-9)) + 1
    db_list = [start + i * step for i in range(n_points)]
    _warn_low_frames(run_cfg.session.n_frames)
    rows = sweep_attenuation(run_cfg.spec, run_cfg.session, db_list)
    path = Path(out if out is not None else run_cfg.csv_path)
    if path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(sweep_rows_to_csv(rows), encoding="utf-8")
    print(
        f"sweep {start:g}..{stop:g} dB step {step:g}: "
        f"{len(rows)} rows -> {path}"
    )
    by_channel: dict[str, list[float]] = {}
    for r in rows:
        key = f"{r.channel_nm}nm" if r.channel_nm is not None else f"client {r.client}"
        by_channel.setdefault(key, []).append(r.qber)
    for key in sorted(by_channel):
        finite = [q for q in by_channel[key] if not math.isnan(q)]
        if finite:
            print(f"channel {key}: qber min {min(finite):.6f} max {max(finite):.6f}")
        else:
            print(f"channel {key}: no detections")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wdmqkd",
        description="wavelength-addressed QKD star network simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_table = sub.add_parser(
        "router-table", help="print the wavelength assignment of an N-port router"
    )
    p_table.add_argument("--ports", type=int, default=4, help="number of ports")
    p_table.add_argument("--out", default=None, help="write to a file instead of stdout")

    p_sim = sub.add_parser("simulate", help="run one key-agreement session")
    p_sim.add_argument("--config", required=True, help="YAML config path")
    p_sim.add_argument("--seed", type=int, default=None, help="override session.seed")
    p_sim.add_argument("--out", default=None, help="directory for the key files")

    p_sweep = sub.add_parser("sweep", help="QBER versus attenuation sweep")
    p_sweep.add_argument("--config", required=True, help="YAML config path")
    p_sweep.add_argument("--seed", type=int, default=None, help="override session.seed")
    p_sweep.add_argument("--out", default=None, help="CSV output path")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself on --help and usage errors
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "router-table":
            return cmd_router_table(args.ports, args.out)
        run_cfg = load_config(args.config)
        if args.seed is not None:
            run_cfg = dataclasses.replace(
                run_cfg, session=dataclasses.replace(run_cfg.session, seed=args.seed)
            )
        if args.command == "simulate":
            return cmd_simulate(run_cfg, args.out)
        return cmd_sweep(run_cfg, args.out)
    except SessionError as err:
        print(f"abort: {err}", file=sys.stderr)
        return EXIT_ABORT
    except Exception as err:  # exit codes are a contract: anything else is 2
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
