"""How the derived report columns follow from measured inputs.

Builds a report from stage latencies and power readings of an embedded
board and prints each derived quantity next to the formula behind it.
"""

from edgebench.metrics import EvaluationReport, TimingRecord, efficiency, split_power

pre, infer, post = 8.78, 22.0, 39.45
record = TimingRecord(frame_id=0, pre_ms=pre, infer_ms=infer, post_ms=post)
print(f"total = {pre} + {infer} + {post} = {record.total_ms} ms")

fps = 1000.0 / record.total_ms
print(f"fps = 1000 / {record.total_ms} = {fps:.3f}")

reading = split_power(16.5, 9.5)
print(f"relative = absolute - idle = {reading.absolute_w} - {reading.idle_w} = {reading.relative_w} W (exact: {reading.relative})")

print(f"efficiency = fps / relative = {efficiency(fps, reading.relative_w):.3f} FPS/W")

report = EvaluationReport(
    target_id="board", run_count=1, map_50_95=0.386,
    mean_pre_ms=pre, mean_infer_ms=infer, mean_post_ms=post, mean_total_ms=record.total_ms,
    absolute_power_w=16.5, idle_power_w=9.5, precision_label="INT8",
)
print(f"report: fps={report.fps:.3f} relative={report.relative_power_w} W efficiency={report.efficiency_fps_per_w:.3f} FPS/W")
