"""Benchmark two simulated boards against one synthetic dataset.

Everything runs in one process: an in-process broker, the host, and two
target agents serving the ground-truth replay detector. One board is
clean; the other loses half its detections and runs slower. Six runs are
averaged, and each board gets a constant synthetic power log.

    python demos/loopback_session.py [--frames 40] [--out demo-out]
"""

import argparse
from pathlib import Path

from edgebench.host import Session, run_session
from edgebench.protocol import SessionConfig
from edgebench.report import render_summary, write_report
from edgebench.synthetic import constant_power_log, make_dataset
from edgebench.target import MockDetectorConfig, TargetAgent, default_registry
from edgebench.transport import FaultProfile, LoopbackBroker

BOARDS = {
    # target_id: (mock knobs, watts under load, idle watts)
    "board-a": ({"synthetic_infer_ms": 2.0, "latency_jitter_ms": 0.5, "seed": 1}, 16.5, 9.5),
    "board-b": ({"synthetic_infer_ms": 4.0, "latency_jitter_ms": 1.0, "drop_probability": 0.5, "seed": 2}, 23.0, 16.0),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=40)
    parser.add_argument("--out", default="demo-out")
    args = parser.parse_args()

    dataset = make_dataset(n_frames=args.frames, n_classes=3, width=160, height=120, seed=0)
    # duplicates exercise the host's at-least-once bookkeeping
    broker = LoopbackBroker(FaultProfile(duplicate_probability=0.2, seed=7))
    agents = []
    for tid, (knobs, _, _) in BOARDS.items():
        registry = default_registry(MockDetectorConfig(gt_source=dataset.annotations, **knobs))
        agent = TargetAgent(broker.endpoint(tid), tid, registry)
        agent.start()
        agents.append(agent)

    config = SessionConfig.for_session(
        "demo", "gt-replay", confidence_threshold=0.25, nms_threshold=0.45, run_count=6,
        model_input_width=416, model_input_height=416,
    )
    session = Session(config, list(BOARDS))
    try:
        reports = run_session(
            session,
            broker.endpoint("host"),
            dataset,
            power_logs={tid: constant_power_log(w, duration_s=60, jitter_w=0.2, seed=3) for tid, (_, w, _) in BOARDS.items()},
            idle_watts={tid: idle for tid, (_, _, idle) in BOARDS.items()},
        )
    finally:
        for agent in agents:
            agent.stop()
        broker.close()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tid, report in reports.items():
        write_report(report, out / f"{tid}.json")
    print(f"session {config.session_id}: {session.state.value}, {len(session.results)} results, "
          f"{session.duplicates_ignored} duplicate deliveries ignored")
    print(render_summary(reports[t] for t in BOARDS), end="")
    print(f"reports written to {out}/")


if __name__ == "__main__":
    main()
