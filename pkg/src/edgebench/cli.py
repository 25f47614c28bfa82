"""Command-line entry points for the host and target applications.

The host reads an optional JSON run file (``--config``); command-line flags
override it. With ``--broker loopback`` the broker, the host and one
simulated target per ``--targets`` entry all run in this process.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import uuid
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import cv2

from .host import DatasetError, Session, SessionFailed, load_annotations, load_dataset, run_session
from .metrics import load_power_log
from .protocol import SessionConfig
from .report import render_summary, write_report
from .target import MockDetectorConfig, TargetAgent, default_registry
from .transport import DeliveryPolicy, FaultProfile, LoopbackBroker
from .transport.mqtt import BrokerUnreachableError, MqttEndpoint, parse_address

log = logging.getLogger("edgebench")


def setup_logging() -> None:
    level = os.environ.get("BENCH_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(asctime)s %(name)s %(levelname)s %(message)s")


@dataclass
class HostRunSpec:
    """Everything needed to run one benchmark session from the host."""

    broker: str = "loopback"
    dataset: str = ""
    annotations: str = ""
    targets: list[str] = field(default_factory=lambda: ["target1"])
    detector: str = "gt-replay"
    session_id: str = ""
    conf_thr: float = 0.25
    nms_thr: float = 0.45
    runs: int = 1
    width: int = 512
    height: int = 512
    echo: bool = False
    power_logs: dict[str, str] = field(default_factory=dict)
    idle_watts: dict[str, float] = field(default_factory=dict)
    precision_labels: dict[str, str] = field(default_factory=dict)
    out: str = "bench-out"
    max_in_flight: int = 4
    config_timeout: float = 10.0
    drain_timeout: float = 30.0
    # loopback only: fault profile and per-target mock detector settings
    duplicate_probability: float = 0.0
    seed: int = 0
    mock: dict[str, dict] = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("conf_thr", "nms_thr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.annotations or not Path(self.annotations).is_file():
            raise ValueError(f"annotation file {self.annotations!r} does not exist")
        if not self.dataset or not Path(self.dataset).is_dir():
            raise ValueError(f"dataset directory {self.dataset!r} does not exist")
        for tid, path in self.power_logs.items():
            if not Path(path).is_file():
                raise ValueError(f"power log {path!r} for {tid} does not exist")
        if not self.targets:
            raise ValueError("at least one target is required")

    def session_config(self) -> SessionConfig:
        return SessionConfig.for_session(
            self.session_id or uuid.uuid4().hex[:12],
            self.detector,
            confidence_threshold=self.conf_thr,
            nms_threshold=self.nms_thr,
            run_count=self.runs,
            echo_annotated_images=self.echo,
            model_input_width=self.width,
            model_input_height=self.height,
        )


def _pairs(items, convert=str) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected target=value, got {item!r}")
        out[key] = convert(value)
    return out


def host_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgebench-host", description="Run a benchmark session from the host.")
    p.add_argument("--config", help="JSON run file; flags override its values")
    p.add_argument("--broker", help="host:port of an MQTT broker, or 'loopback'")
    p.add_argument("--dataset", help="directory holding the images")
    p.add_argument("--annotations", help="COCO-style annotation JSON")
    p.add_argument("--targets", help="comma-separated target ids")
    p.add_argument("--detector", help="detector plugin name")
    p.add_argument("--session-id")
    p.add_argument("--conf-thr", type=float)
    p.add_argument("--nms-thr", type=float)
    p.add_argument("--runs", type=int)
    p.add_argument("--width", type=int, help="model input width")
    p.add_argument("--height", type=int, help="model input height")
    p.add_argument("--echo", action="store_true", default=None, help="ask targets to echo annotated frames")
    p.add_argument("--power-log", action="append", metavar="TARGET=PATH")
    p.add_argument("--idle-watts", action="append", metavar="TARGET=WATTS")
    p.add_argument("--precision", action="append", metavar="TARGET=LABEL")
    p.add_argument("--out", help="output directory")
    return p


def build_run_spec(args: argparse.Namespace) -> HostRunSpec:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
        unknown = set(data) - {f.name for f in fields(HostRunSpec)}
        if unknown:
            raise ValueError(f"unknown keys in run file: {sorted(unknown)}")
    spec = HostRunSpec(**data)
    overrides = {
        "broker": args.broker,
        "dataset": args.dataset,
        "annotations": args.annotations,
        "targets": args.targets.split(",") if args.targets else None,
        "detector": args.detector,
        "session_id": args.session_id,
        "conf_thr": args.conf_thr,
        "nms_thr": args.nms_thr,
        "runs": args.runs,
        "width": args.width,
        "height": args.height,
        "echo": args.echo,
        "out": args.out,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(spec, key, value)
    spec.power_logs.update(_pairs(args.power_log))
    spec.idle_watts.update(_pairs(args.idle_watts, float))
    spec.precision_labels.update(_pairs(args.precision))
    return spec


def _start_loopback_targets(broker: LoopbackBroker, spec: HostRunSpec, dataset) -> list[TargetAgent]:
    agents = []
    for tid in spec.targets:
        mock = MockDetectorConfig(gt_source=dataset.annotations, **spec.mock.get(tid, {}))
        agent = TargetAgent(broker.endpoint(tid), tid, default_registry(mock))
        agent.start()
        agents.append(agent)
    return agents


def _write_echoes(session: Session, out: Path) -> None:
    for (run, fid, tid), result in sorted(session.results.items()):
        if result.annotated_image is None:
            continue
        target_dir = out / "echo" / tid
        target_dir.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(target_dir / f"run{run}_{fid:06d}.png"), result.annotated_image.image())


def host_main(argv: Optional[list[str]] = None) -> int:
    """Run one session; return 0 only when it reached ``done``."""
    setup_logging()
    args = host_parser().parse_args(argv)
    try:
        spec = build_run_spec(args)
        spec.validate()
        dataset = load_dataset(spec.dataset, spec.annotations)
        power_logs = {tid: load_power_log(path) for tid, path in spec.power_logs.items()}
        config = spec.session_config()
    except (ValueError, OSError, DatasetError) as exc:
        print(f"edgebench-host: {exc}", file=sys.stderr)
        return 2

    agents: list[TargetAgent] = []
    broker = None
    if spec.broker == "loopback":
        broker = LoopbackBroker(FaultProfile(spec.duplicate_probability, seed=spec.seed))
        agents = _start_loopback_targets(broker, spec, dataset)
        endpoint = broker.endpoint(f"host-{config.session_id}")
    else:
        host, port = parse_address(spec.broker)
        endpoint = MqttEndpoint(f"host-{config.session_id}", host, port, DeliveryPolicy(max_in_flight=spec.max_in_flight))
        try:
            endpoint.connect()
        except BrokerUnreachableError as exc:
            print(f"edgebench-host: {exc}", file=sys.stderr)
            return 1

    session = Session(config, spec.targets)
    out = Path(spec.out)
    try:
        reports = run_session(
            session,
            endpoint,
            dataset,
            power_logs=power_logs,
            idle_watts=spec.idle_watts,
            policy=DeliveryPolicy(max_in_flight=spec.max_in_flight),
            config_timeout=spec.config_timeout,
            drain_timeout=spec.drain_timeout,
            precision_labels=spec.precision_labels,
        )
    except SessionFailed as exc:
        print(f"edgebench-host: session {config.session_id} failed: {exc.reason}", file=sys.stderr)
        return 1
    finally:
        for agent in agents:
            agent.stop()
        endpoint.close()
        if broker is not None:
            broker.close()

    out.mkdir(parents=True, exist_ok=True)
    for tid, report in reports.items():
        write_report(report, out / f"{tid}.json", "json")
        write_report(report, out / f"{tid}.csv", "csv")
    (out / "summary.csv").write_text(render_summary(reports[t] for t in spec.targets))
    _write_echoes(session, out)
    print(render_summary(reports[t] for t in spec.targets), end="")
    return 0


def target_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgebench-target", description="Serve benchmark sessions on a target.")
    p.add_argument("--broker", default="localhost:1883", help="host:port of an MQTT broker, or 'loopback'")
    p.add_argument("--target-id", default="target1")
    p.add_argument("--gt", help="COCO-style annotations the replay mock detector serves from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drop-probability", type=float, default=0.0)
    p.add_argument("--jitter-px", type=float, default=0.0)
    p.add_argument("--infer-ms", type=float, default=0.0, help="synthetic inference latency")
    p.add_argument("--connect-attempts", type=int, default=5)
    p.add_argument("--list-plugins", action="store_true")
    return p


def target_main(
    argv: Optional[list[str]] = None,
    broker: Optional[LoopbackBroker] = None,
    stop_event: Optional[threading.Event] = None,
) -> int:
    """Boot a target agent and serve sessions until stopped.

    ``broker``/``stop_event`` let a loopback target run as a co-process thread;
    from the command line the agent runs until SIGTERM or SIGINT.
    """
    setup_logging()
    args = target_parser().parse_args(argv)
    try:
        gt = load_annotations(args.gt) if args.gt else {}
        mock = MockDetectorConfig(
            gt_source=gt,
            drop_probability=args.drop_probability,
            coordinate_jitter_px=args.jitter_px,
            synthetic_infer_ms=args.infer_ms,
            seed=args.seed,
        )
    except (ValueError, DatasetError) as exc:
        print(f"edgebench-target: {exc}", file=sys.stderr)
        return 2
    registry = default_registry(mock)
    if args.list_plugins:
        print("\n".join(registry.names()))
        return 0

    if args.broker == "loopback":
        if broker is None:
            print("edgebench-target: loopback mode needs an in-process broker", file=sys.stderr)
            return 2
        endpoint = broker.endpoint(args.target_id)
    else:
        host, port = parse_address(args.broker)
        endpoint = MqttEndpoint(args.target_id, host, port, connect_attempts=args.connect_attempts)
        try:
            endpoint.connect()
        except BrokerUnreachableError as exc:
            print(f"edgebench-target: {exc}", file=sys.stderr)
            return 1

    stop = stop_event or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: stop.set())
    agent = TargetAgent(endpoint, args.target_id, registry)
    agent.start()
    log.info("target %s serving on %s", args.target_id, args.broker)
    while not stop.wait(0.5):
        pass
    agent.stop()
    endpoint.close()
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("host", "target"):
        print("usage: python -m edgebench {host|target} [options]", file=sys.stderr)
        return 2
    entry = host_main if argv[0] == "host" else target_main
    return entry(argv[1:])


if __name__ == "__main__":
    sys.exit(main())
