import json
import threading

import numpy as np
import pytest

from edgebench.host import (
    DatasetError,
    Evaluator,
    EvaluatorRegistry,
    Session,
    SessionError,
    SessionFailed,
    SessionState,
    UnknownTargetError,
    load_annotations,
    load_dataset,
    run_session,
)
from edgebench.host.orchestrator import collect_result
from edgebench.metrics import PowerSample
from edgebench.protocol import Kind, ResultMessage, SessionConfig, decode_message
from edgebench.synthetic import constant_power_log, make_dataset, write_dataset
from edgebench.target import DetectorPlugin, MockDetectorConfig, TargetAgent, default_registry
from edgebench.transport import DeliveryPolicy, FaultProfile, LoopbackBroker
from edgebench.vision import Box, Detection


# -- dataset loading -------------------------------------------------------


def coco(images, annotations, categories=({"id": 1, "name": "a"},)):
    return {"images": list(images), "annotations": list(annotations), "categories": list(categories)}


@pytest.fixture
def image_dir(tmp_path):
    import cv2

    d = tmp_path / "img"
    d.mkdir()
    for i in (1, 2, 3):
        cv2.imwrite(str(d / f"{i}.png"), np.full((80, 100, 3), i * 40, np.uint8))
    return d


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


class TestDataset:
    def images(self):
        return [{"id": i, "file_name": f"{i}.png", "width": 100, "height": 80} for i in (3, 1, 2)]

    def test_counts_and_order(self, tmp_path, image_dir):
        anns = [{"image_id": i % 3 + 1, "category_id": 1, "bbox": [1, 1, 5, 5]} for i in range(5)]
        ds = load_dataset(image_dir, write_json(tmp_path / "a.json", coco(self.images(), anns)))
        assert ds.frame_ids == [1, 2, 3]
        assert ds.gt_count() == 5
        assert ds.frames[0].load().shape == (80, 100, 3)

    def test_bbox_to_corners(self, tmp_path, image_dir):
        anns = [{"image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]}]
        ds = load_dataset(image_dir, write_json(tmp_path / "a.json", coco(self.images(), anns)))
        assert ds.annotations[1][0].box == Box(10, 20, 40, 60)

    def test_unknown_image_id_is_named(self, tmp_path, image_dir):
        anns = [{"image_id": 42, "category_id": 1, "bbox": [0, 0, 1, 1]}]
        with pytest.raises(DatasetError, match="42"):
            load_dataset(image_dir, write_json(tmp_path / "a.json", coco(self.images(), anns)))

    def test_missing_image_file(self, tmp_path, image_dir):
        images = self.images() + [{"id": 9, "file_name": "nine.png", "width": 1, "height": 1}]
        with pytest.raises(DatasetError, match="nine.png"):
            load_dataset(image_dir, write_json(tmp_path / "a.json", coco(images, [])))

    def test_unparsable_annotations(self, tmp_path, image_dir):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(DatasetError):
            load_dataset(image_dir, bad)
        with pytest.raises(DatasetError):
            load_dataset(image_dir, write_json(tmp_path / "b.json", {"images": [{"id": 1}]}))
        with pytest.raises(DatasetError):
            load_dataset(image_dir, tmp_path / "absent.json")

    def test_out_of_bounds_box_is_clipped_and_logged(self, tmp_path, image_dir, caplog):
        anns = [{"image_id": 1, "category_id": 1, "bbox": [90, 70, 30, 30]}]
        ds = load_dataset(image_dir, write_json(tmp_path / "a.json", coco(self.images(), anns)))
        assert ds.annotations[1][0].box == Box(90, 70, 100, 80)
        assert "clipped" in caplog.text

    def test_synthetic_round_trip(self, tmp_path):
        ds = make_dataset(n_frames=5, seed=1)
        img_dir, ann = write_dataset(ds, tmp_path)
        back = load_dataset(img_dir, ann)
        assert back.frame_ids == ds.frame_ids
        assert back.ground_truth() == ds.ground_truth()
        for a, b in zip(ds.frames, back.frames):
            np.testing.assert_array_equal(a.load(), b.load())
        assert load_annotations(ann) == ds.annotations


# -- session bookkeeping -----------------------------------------------------


def cfg(sid="s1", **kw):
    kw.setdefault("confidence_threshold", 0.0)
    kw.setdefault("model_input_width", 96)
    kw.setdefault("model_input_height", 64)
    return SessionConfig.for_session(sid, "gt-replay", **kw)


def streaming_session(targets=("t1",), frames=(1, 2, 3)):
    s = Session(cfg(), targets)
    s.frame_ids = frozenset(frames)
    s.transition(SessionState.CONFIGURING)
    s.begin_run(1)
    for f in frames:
        s.mark_published(f)
    return s


def result(fid, tid="t1", infer=1.0, sid="s1"):
    return ResultMessage(sid, tid, fid, (Detection(Box(0, 0, 1, 1), 1, 0.9),), 0.5, infer, 0.25)


class TestSession:
    def test_first_result_stored(self):
        s = streaming_session()
        collect_result(s, result(1))
        assert s.results == {(1, 1, "t1"): result(1)}

    def test_identical_duplicate_ignored(self):
        s = streaming_session()
        s.collect_result(result(1))
        s.collect_result(result(1))
        assert len(s.results) == 1 and s.duplicates_ignored == 1
        assert s.state is SessionState.STREAMING

    def test_conflicting_duplicate_fails_session(self):
        s = streaming_session()
        s.collect_result(result(1, infer=1.0))
        s.collect_result(result(1, infer=2.0))
        assert s.state is SessionState.FAILED
        assert "conflicting" in s.failure and "frame 1" in s.failure
        assert s.results[(1, 1, "t1")].infer_ms == 1.0

    def test_unknown_target(self):
        with pytest.raises(UnknownTargetError):
            streaming_session().collect_result(result(1, tid="intruder"))

    def test_frame_outside_dataset(self):
        with pytest.raises(SessionError):
            streaming_session().collect_result(result(99))

    def test_mismatched_session_id_fails(self):
        s = streaming_session()
        s.collect_result(result(1, sid="other"))
        assert s.state is SessionState.FAILED

    def test_result_for_unpublished_frame_rejected(self):
        s = Session(cfg(), ["t1"])
        s.frame_ids = frozenset({1, 2})
        s.transition(SessionState.CONFIGURING)
        s.begin_run(1)
        s.mark_published(1)
        with pytest.raises(SessionError):
            s.collect_result(result(2))

    def test_late_copy_from_previous_run_is_a_duplicate(self):
        s = streaming_session(frames=(1,))
        s.collect_result(result(1, infer=1.0))
        s.transition(SessionState.DRAINING)
        s.begin_run(2)
        s.collect_result(result(1, infer=1.0))
        assert s.duplicates_ignored == 1 and len(s.results) == 1
        s.mark_published(1)
        s.collect_result(result(1, infer=3.0))
        assert s.results[(2, 1, "t1")].infer_ms == 3.0
        assert s.state is SessionState.STREAMING

    def test_identical_result_in_next_run_is_stored(self):
        # a target with coarse timers can legitimately repeat itself byte for byte
        s = streaming_session(frames=(1,))
        s.collect_result(result(1, infer=1.0))
        s.transition(SessionState.DRAINING)
        s.begin_run(2)
        s.mark_published(1)
        s.collect_result(result(1, infer=1.0))
        assert s.results[(2, 1, "t1")] == result(1, infer=1.0)
        assert s.received_in_run["t1"] == 1

    def test_late_copy_then_genuine_result_in_next_run(self):
        s = streaming_session(frames=(1,))
        s.collect_result(result(1, infer=1.0))
        s.transition(SessionState.DRAINING)
        s.begin_run(2)
        s.mark_published(1)
        s.collect_result(result(1, infer=1.0))  # delayed copy from run 1
        s.collect_result(result(1, infer=2.0))  # the real run 2 result
        assert s.state is SessionState.STREAMING
        assert s.results[(2, 1, "t1")].infer_ms == 2.0
        assert s.results[(1, 1, "t1")].infer_ms == 1.0
        assert s.received_in_run["t1"] == 1
        s.collect_result(result(1, infer=3.0))
        assert s.state is SessionState.FAILED

    def test_state_machine(self):
        s = Session(cfg(), ["t1"])
        with pytest.raises(SessionError):
            s.transition(SessionState.STREAMING)
        with pytest.raises(SessionError):
            s.transition(SessionState.FAILED)
        s.transition(SessionState.CONFIGURING)
        with pytest.raises(SessionError):
            s.transition(SessionState.EVALUATING)
        s.begin_run(1)
        s.transition(SessionState.DRAINING)
        s.begin_run(2)
        s.transition(SessionState.DRAINING)
        s.transition(SessionState.EVALUATING)
        s.transition(SessionState.DONE)
        with pytest.raises(SessionError):
            s.transition(SessionState.FAILED)

    @pytest.mark.parametrize("steps", [0, 1, 2, 3])
    def test_failed_reachable_from_every_active_state(self, steps):
        s = Session(cfg(), ["t1"])
        path = [SessionState.CONFIGURING, SessionState.STREAMING, SessionState.DRAINING, SessionState.EVALUATING]
        for st in path[: steps + 1]:
            s.transition(st)
        s.fail("boom")
        assert s.state is SessionState.FAILED

    def test_session_needs_targets(self):
        with pytest.raises(ValueError):
            Session(cfg(), [])
        with pytest.raises(ValueError):
            Session(cfg(), ["a", "a"])


# -- full sessions over loopback ----------------------------------------------


class Rig:
    """Loopback broker, host endpoint and one agent per target."""

    def __init__(self, dataset, targets=("t1",), faults=None, mocks=None, registries=None):
        self.broker = LoopbackBroker(faults)
        self.published = []
        self.broker.add_tap(lambda pub, topic, payload: self.published.append((pub, topic, payload)))
        self.agents = []
        for tid in targets:
            reg = (registries or {}).get(tid) or default_registry(
                MockDetectorConfig(gt_source=dataset.annotations, **(mocks or {}).get(tid, {}))
            )
            agent = TargetAgent(self.broker.endpoint(tid), tid, reg)
            agent.start()
            self.agents.append(agent)
        self.host = self.broker.endpoint("host")

    def close(self):
        for a in self.agents:
            a.stop()
        self.broker.close()


@pytest.fixture(scope="module")
def ds10():
    return make_dataset(n_frames=10, n_classes=3, seed=21)


def run(dataset, config, targets=("t1",), **kw):
    rig_kw = {k: kw.pop(k) for k in ("faults", "mocks", "registries") if k in kw}
    rig = Rig(dataset, targets, **rig_kw)
    session = Session(config, targets)
    try:
        reports = run_session(session, rig.host, dataset, **kw)
    finally:
        rig.close()
    return session, reports, rig


class TestRunSession:
    def test_golden_single_target(self, ds10):
        session, reports, _ = run(ds10, cfg())
        assert session.state is SessionState.DONE
        r = reports["t1"]
        assert r.map_50_95 == 1.0 and r.per_iou_map == [1.0] * 10
        assert len(r.timing_records) == 10
        assert r.session["config"] == cfg().to_dict()

    def test_two_targets_have_disjoint_stores(self, ds10):
        session, reports, _ = run(ds10, cfg(), targets=("alpha", "beta"))
        assert set(reports) == {"alpha", "beta"}
        assert len(session.results_for("alpha")) == len(session.results_for("beta")) == 10
        assert all(r.target_id == "alpha" for r in session.results_for("alpha").values())
        assert all(r.target_id == "beta" for r in session.results_for("beta").values())

    def test_six_runs(self, ds10):
        session, reports, _ = run(ds10, cfg(run_count=6))
        r = reports["t1"]
        assert len(r.timing_records) == 60 and len(session.results) == 60
        assert sorted({t.run for t in r.timing_records}) == [1, 2, 3, 4, 5, 6]
        direct = np.mean([t.total_ms for t in r.timing_records])
        assert abs(r.mean_total_ms - direct) <= 1e-9
        assert len(r.session["run_windows_s"]) == 6

    def test_duplicates_everywhere_still_complete(self, ds10):
        session, reports, _ = run(ds10, cfg(run_count=3), faults=FaultProfile(1.0, seed=3))
        assert session.state is SessionState.DONE
        assert len(session.results) == 30
        assert session.duplicates_ignored >= 30
        assert reports["t1"].map_50_95 == 1.0

    def test_no_frame_before_every_target_acknowledges(self, ds10):
        _, _, rig = run(ds10, cfg(), targets=("a", "b"), faults=FaultProfile(delay_range=(0, 0.003), seed=1))
        first_input = next(i for i, (_, topic, _) in enumerate(rig.published) if topic.endswith("/input"))
        acks = set()
        for pub, topic, payload in rig.published[:first_input]:
            if "/status/" in topic and decode_message(payload, Kind.STATUS).state.value == "configured":
                acks.add(pub)
        assert acks == {"a", "b"}

    def test_flow_control_window_respected(self, ds10):
        slow = {"t1": {"synthetic_infer_ms": 2.0}}
        for window in (1, 3):
            session, reports, _ = run(ds10, cfg(), mocks=slow, policy=DeliveryPolicy(max_in_flight=window))
            assert 1 <= reports["t1"].session["max_in_flight_seen"] <= window

    def test_config_ack_timeout(self, ds10):
        broker = LoopbackBroker()
        session = Session(cfg(), ["ghost"])
        with pytest.raises(SessionFailed, match="ghost"):
            run_session(session, broker.endpoint("host"), ds10, config_timeout=0.3, config_retry=0.1)
        assert session.state is SessionState.FAILED
        broker.close()

    def test_config_error_fails_session(self, ds10):
        config = SessionConfig.for_session("s1", "nonexistent")
        with pytest.raises(SessionFailed, match="nonexistent"):
            run(ds10, config)

    def test_drain_timeout_lists_missing_frames(self, ds10):
        class Stuck(DetectorPlugin):
            def infer(self, prepared):
                if prepared.frame_id == ds10.frame_ids[-1]:
                    threading.Event().wait(1.0)
                return np.zeros((0, 6))

        from edgebench.target import PluginRegistry

        reg = PluginRegistry().register("gt-replay", Stuck)
        with pytest.raises(SessionFailed) as err:
            run(ds10, cfg(), registries={"t1": reg}, drain_timeout=0.3)
        assert err.value.session.missing == {"t1": [(1, ds10.frame_ids[-1])]}
        assert str(ds10.frame_ids[-1]) in err.value.reason

    def test_empty_dataset_rejected(self):
        from edgebench.host import Dataset

        broker = LoopbackBroker()
        with pytest.raises(ValueError):
            run_session(Session(cfg(), ["t1"]), broker.endpoint("h"), Dataset([]))
        broker.close()

    def test_same_host_code_for_any_target_names(self, ds10):
        names = ("jetson-agx", "zcu104", "x")
        session, reports, _ = run(ds10, cfg(), targets=names)
        assert set(reports) == set(names)
        assert len(session.results) == 30


class TestEvaluators:
    def test_default_sections(self, ds10):
        log = constant_power_log(16.5, duration_s=30, period_s=0.0005)
        _, reports, _ = run(ds10, cfg(), power_logs={"t1": log}, idle_watts={"t1": 9.5})
        r = reports["t1"]
        assert r.map_50_95 is not None and r.mean_total_ms is not None
        assert r.absolute_power_w == 16.5 and r.relative_power_w == 7.0
        assert r.efficiency_fps_per_w == pytest.approx(r.fps / 7.0, rel=1e-12)

    def test_power_absent_without_log(self, ds10):
        _, reports, _ = run(ds10, cfg())
        assert reports["t1"].absolute_power_w is None and reports["t1"].efficiency_fps_per_w is None

    def test_power_window_uses_samples_during_runs(self, ds10):
        seen = {}

        class Recorder(Evaluator):
            def evaluate(self, ctx):
                seen["windows"] = ctx.run_windows
                return {}

        # a ramp, so the reading depends on exactly which samples fall in each window
        log = [PowerSample(k / 1000, 20.0 + k / 1000) for k in range(60_000)]
        reg = EvaluatorRegistry().register("recorder", Recorder())
        _, reports, _ = run(ds10, cfg(run_count=2), evaluators=reg, power_logs={"t1": log}, idle_watts={"t1": 12.0})
        windows = seen["windows"]
        assert len(windows) == 2 and all(0 <= a <= b for a, b in windows)
        assert windows[0][1] <= windows[1][0]
        per_run = [np.mean([p.watts for p in log if a <= p.t <= b]) for a, b in windows]
        assert reports["t1"].absolute_power_w == pytest.approx(np.mean(per_run), rel=1e-12)
        assert reports["t1"].relative_power_w == pytest.approx(np.mean(per_run) - 12.0, rel=1e-12)

    def test_noop_evaluator_gets_empty_fragment(self, ds10):
        class Noop(Evaluator):
            def evaluate(self, ctx):
                return {}

        reg = EvaluatorRegistry().register("noop", Noop())
        _, reports, _ = run(ds10, cfg(), evaluators=reg)
        assert reports["t1"].fragments == {"noop": {}}
        assert reports["t1"].map_50_95 == 1.0

    def test_failing_evaluator_is_recorded_others_unaffected(self, ds10):
        class Broken(Evaluator):
            def evaluate(self, ctx):
                raise RuntimeError("sensor offline")

        reg = EvaluatorRegistry().register("broken", Broken())
        session, reports, _ = run(ds10, cfg(), evaluators=reg)
        assert session.state is SessionState.DONE
        r = reports["t1"]
        assert "sensor offline" in r.evaluator_errors["broken"]
        assert r.map_50_95 == 1.0 and r.mean_total_ms is not None

    def test_evaluators_cannot_mutate_results(self, ds10):
        class Vandal(Evaluator):
            def evaluate(self, ctx):
                ctx.results[(1, 1)] = None

        reg = EvaluatorRegistry().register("vandal", Vandal())
        session, reports, _ = run(ds10, cfg(), evaluators=reg)
        assert "TypeError" in reports["t1"].evaluator_errors["vandal"]
        assert all(v is not None for v in session.results.values())

    def test_duplicate_evaluator_name(self):
        from edgebench.host.evaluators import AccuracyEvaluator

        assert EvaluatorRegistry().names() == ["accuracy", "timing", "power"]
        with pytest.raises(ValueError):
            EvaluatorRegistry().register("accuracy", AccuracyEvaluator())
