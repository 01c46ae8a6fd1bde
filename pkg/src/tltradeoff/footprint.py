"""Power sampling, energy integration and CO2 conversion.

Power sources expose ``read(t) -> watts``. A ``PowerSampler`` timestamps
readings against an injectable clock, either when polled by the workload or
from a background thread. Hardware-backed sources are best-effort estimates.
"""
from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, SampleError

EU27_2020_G_PER_KWH = 230.7


@dataclass(frozen=True)
class PowerSample:
    t: float
    watts: float


@dataclass(frozen=True)
class FootprintReport:
    energy_kwh: float
    p_avg_watts: float
    e_co2_kg: float
    intensity_g_per_kwh: float
    duration_hours: float
    estimated: bool = True


def integrate_energy(samples):
    """Trapezoidal energy of a power series; returns ``(kwh, p_avg_watts, hours)``."""
    if len(samples) < 2:
        raise SampleError("need at least 2 power samples")
    t = np.array([s.t for s in samples], dtype=np.float64)
    w = np.array([s.watts for s in samples], dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise SampleError("sample times must be non-decreasing")
    if np.any(w < 0):
        raise SampleError("negative power reading")
    joules = float(np.sum(np.diff(t) * (w[1:] + w[:-1]) / 2))
    seconds = float(t[-1] - t[0])
    kwh = joules / 3.6e6
    p_avg = joules / seconds if seconds > 0 else float(w.mean())
    return kwh, p_avg, seconds / 3600.0


def co2_of(energy_kwh, intensity_g_per_kwh=EU27_2020_G_PER_KWH):
    if energy_kwh < 0 or intensity_g_per_kwh < 0:
        raise ConfigError("energy and intensity must be non-negative")
    return energy_kwh * intensity_g_per_kwh / 1000.0


def footprint_report(samples, intensity_g_per_kwh=EU27_2020_G_PER_KWH, estimated=True):
    kwh, p_avg, hours = integrate_energy(samples)
    return FootprintReport(kwh, p_avg, co2_of(kwh, intensity_g_per_kwh), intensity_g_per_kwh, hours, estimated)


def save_samples_csv(samples, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_seconds", "watts"])
        for s in samples:
            writer.writerow([repr(s.t), repr(s.watts)])


def load_samples_csv(path):
    with open(path, newline="") as fh:
        return [PowerSample(float(row["t_seconds"]), float(row["watts"])) for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# sources


class ConstantSource:
    name = "constant"

    def __init__(self, watts):
        self.watts = float(watts)

    def read(self, t):
        return self.watts


class ScriptedSource:
    """Power as a function of seconds since the run started. For tests."""

    name = "scripted"

    def __init__(self, fn):
        self.fn = fn

    def read(self, t):
        return float(self.fn(t))


class CpuEstimateSource:
    """Linear idle-to-peak model over system CPU utilization (needs psutil)."""

    name = "cpu-estimate"

    def __init__(self, idle_watts=40.0, peak_watts=125.0):
        import psutil

        self._psutil = psutil
        self.idle = idle_watts
        self.peak = peak_watts
        psutil.cpu_percent(None)

    def read(self, t):
        util = self._psutil.cpu_percent(None) / 100.0
        return self.idle + (self.peak - self.idle) * util


class RaplSource:
    """Package power from the Linux powercap counters, where readable."""

    name = "rapl"

    def __init__(self, root="/sys/class/powercap"):
        self.files = sorted(Path(root).glob("intel-rapl:*/energy_uj"))
        self.files = [f for f in self.files if f.parent.name.count(":") == 1]
        if not self.files:
            raise ConfigError("no RAPL energy counters found")
        self._last = None

    def _energy_j(self):
        return sum(int(f.read_text()) for f in self.files) / 1e6

    def read(self, t):
        now, e = time.monotonic(), self._energy_j()
        last, self._last = self._last, (now, e)
        if last is None or now <= last[0] or e < last[1]:
            return 0.0
        return (e - last[1]) / (now - last[0])


def make_source(spec):
    """Build a source from a plan entry such as ``{"source": "constant", "watts": 120}``."""
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = {"source": spec}
    kind = spec.get("source", "constant")
    if kind == "constant":
        return ConstantSource(spec.get("watts", 0.0))
    if kind == "cpu-estimate":
        return CpuEstimateSource(spec.get("idle_watts", 40.0), spec.get("peak_watts", 125.0))
    if kind == "rapl":
        return RaplSource()
    raise ConfigError(f"unknown power source {kind!r}")


# --------------------------------------------------------------------------
# sampler


class PowerSampler:
    """Collects ``PowerSample``s for one run.

    The workload calls ``sample()`` at convenient points; with ``interval``
    set, a daemon thread also samples every ``interval`` seconds. Appends go
    through one lock.
    """

    def __init__(self, source, clock=time.perf_counter, interval=None):
        self.source = source
        self.clock = clock
        self.interval = interval
        self._samples = []
        self._lock = threading.Lock()
        self._t0 = None
        self._stop = threading.Event()
        self._thread = None

    def start(self):
        self._samples = []
        self._t0 = self.clock()
        self._append(0.0)
        if self.interval:
            self._stop.clear()
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()
        return self

    def _append(self, t):
        watts = self.source.read(t)
        with self._lock:
            if self._samples and t < self._samples[-1].t:
                t = self._samples[-1].t
            self._samples.append(PowerSample(t, watts))

    def _loop(self):
        while not self._stop.wait(self.interval):
            self._append(self.clock() - self._t0)

    def sample(self):
        if self._t0 is None:
            raise SampleError("sampler not started")
        self._append(self.clock() - self._t0)

    def stop(self):
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
        self.sample()
        with self._lock:
            return list(self._samples)
