"""
Monitoring and metrics utilities for roadsplat
Per-step loss records, per-epoch snapshots, operation timings and process stats
"""

import json
import os
import time
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import psutil

from roadsplat.core.logging import get_logger
from roadsplat.models import EpochSnapshot, StepRecord

logger = get_logger(__name__)


class MetricsCollector:
    """Collect loss curves and counters of one reconstruction run"""

    def __init__(self):
        self.counters = defaultdict(int)
        self.histograms = defaultdict(list)
        self.gauges = defaultdict(float)
        self.steps: List[StepRecord] = []
        self.epochs: List[EpochSnapshot] = []
        self._start_time = time.time()

    def increment_counter(self, name: str, labels: Optional[Dict[str, str]] = None):
        key = self._build_metric_key(name, labels)
        self.counters[key] += 1
        logger.debug(f"Counter incremented: {key}")

    def record_histogram(self, name: str, value: float, labels: Optional[Dict[str, str]] = None):
        key = self._build_metric_key(name, labels)
        self.histograms[key].append(value)

    def set_gauge(self, name: str, value: float, labels: Optional[Dict[str, str]] = None):
        key = self._build_metric_key(name, labels)
        self.gauges[key] = value

    def record_step(self, record: StepRecord):
        """Keep a step record and feed the loss histograms"""
        self.steps.append(record)
        self.increment_counter("train_steps_total", {"camera": record.camera_id})
        self.record_histogram("loss_total", record.total)
        self.set_gauge("lr_z", record.lr_z)

    def record_epoch(self, snapshot: EpochSnapshot):
        self.epochs.append(snapshot)
        self.set_gauge("epoch", snapshot.epoch)
        logger.info("Epoch finished", extra=snapshot.model_dump())

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """One JSON object per line: every step, then every epoch snapshot"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for record in self.steps:
                handle.write(json.dumps({"type": "step", **record.model_dump()}, sort_keys=True) + "\n")
            for snapshot in self.epochs:
                handle.write(json.dumps({"type": "epoch", **snapshot.model_dump()}, sort_keys=True) + "\n")
        return path

    def get_metrics_summary(self) -> Dict[str, Any]:
        """Get summary of all metrics"""
        return {
            "counters": dict(self.counters),
            "gauges": dict(self.gauges),
            "histograms": {
                key: {
                    "count": len(values),
                    "mean": sum(values) / len(values) if values else 0,
                    "min": min(values) if values else 0,
                    "max": max(values) if values else 0,
                    "p95": _percentile(values, 0.95),
                }
                for key, values in self.histograms.items()
            },
            "uptime_seconds": time.time() - self._start_time,
        }

    def _build_metric_key(self, name: str, labels: Optional[Dict[str, str]] = None) -> str:
        """Build metric key with labels"""
        if not labels:
            return name
        label_str = ",".join(f"{k}={v}" for k, v in sorted(labels.items()))
        return f"{name}{{{label_str}}}"


class PerformanceTracker:
    """Track and analyze operation timings"""

    def __init__(self):
        self.operation_timings = defaultdict(list)
        self.error_counts = defaultdict(int)
        self.success_counts = defaultdict(int)

    def track_operation(self, operation: str, duration: float, success: bool = True):
        self.operation_timings[operation].append(duration)
        if len(self.operation_timings[operation]) > 1000:
            self.operation_timings[operation] = self.operation_timings[operation][-1000:]
        if success:
            self.success_counts[operation] += 1
        else:
            self.error_counts[operation] += 1

    @contextmanager
    def measure(self, operation: str):
        """Time the enclosed block; failures are counted and re-raised"""
        start = time.perf_counter()
        success = True
        try:
            yield
        except Exception:
            success = False
            raise
        finally:
            self.track_operation(operation, time.perf_counter() - start, success)

    def get_performance_summary(self) -> Dict[str, Any]:
        summary = {}
        for operation, durations in self.operation_timings.items():
            if not durations:
                continue
            summary[operation] = {
                "total_operations": len(durations),
                "avg_duration_ms": round(sum(durations) / len(durations) * 1000, 2),
                "min_duration_ms": round(min(durations) * 1000, 2),
                "max_duration_ms": round(max(durations) * 1000, 2),
                "p95_duration_ms": round(_percentile(durations, 0.95) * 1000, 2),
                "errors": self.error_counts[operation],
            }
        return summary


def _percentile(values: list, p: float) -> float:
    if not values:
        return 0
    sorted_values = sorted(values)
    index = int(len(sorted_values) * p)
    if index >= len(sorted_values):
        return sorted_values[-1]
    return sorted_values[index]


def system_snapshot() -> Dict[str, float]:
    """Memory and CPU use of this process"""
    try:
        process = psutil.Process(os.getpid())
        return {
            "memory_usage_mb": round(process.memory_info().rss / 1024 / 1024, 2),
            "cpu_usage_percent": process.cpu_percent(),
            "uptime_seconds": round(time.time() - process.create_time(), 2),
        }
    except Exception as e:
        logger.warning(f"Could not read process stats: {e}")
        return {}


# Global instance
performance_tracker = PerformanceTracker()
