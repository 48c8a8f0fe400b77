"""Experiment orchestration: profiling, parameter search, timing sweep, integrity.

Every campaign derives all of its random streams from one integer seed, so
a re-run with the same configuration produces byte-identical reports.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2_contingency

from . import __version__
from .checks import CheckVariant
from .controller import (
    CMD_SEND_EXT_CSD, Device, DeviceProfile, load_device_profile,
)
from .faults import PulseSpec, SimulatedInjector, SusceptibilityProfile, load_fault_profile
from .host import HostSession, connect
from .outcome import CRASH, GLITCH, NORMAL, SUCCESS, Outcome, OutcomeKind, classify_observer
from .protocol import BLOCK_SIZE, ResultCode
from .timeline import TIME_RESOLUTION_NS, MicroOpKind

log = logging.getLogger(__name__)

WINDOW_MERGE_GAP_NS = 50
HEATMAP_COLUMNS = ("x", "y", "normal", "glitch", "crash")
TIMING_COLUMNS = ("delay_ns", "delay_us", "result_value", "outcome")
SEARCH_COLUMNS = ("trial", "voltage_v", "duration_ns", "delay_ns", "outcome")


class InvariantViolation(RuntimeError):
    """A cross-check failed while a campaign was running."""


class ConfigError(ValueError):
    pass


# --- records -------------------------------------------------------------------------

@dataclasses.dataclass
class HeatmapCell:
    x: int
    y: int
    normal: int = 0
    glitch: int = 0
    crash: int = 0

    @property
    def iterations(self) -> int:
        return self.normal + self.glitch + self.crash

    @property
    def glitch_rate(self) -> float:
        return self.glitch / self.iterations if self.iterations else 0.0

    def add(self, outcome: Outcome) -> None:
        if outcome == NORMAL:
            self.normal += 1
        elif outcome == GLITCH:
            self.glitch += 1
        elif outcome == CRASH:
            self.crash += 1
        else:
            raise ValueError(f"{outcome} is not an observer outcome")


@dataclasses.dataclass(frozen=True)
class TimingTracePoint:
    delay_ns: int
    result_value: int
    outcome: Outcome

    @property
    def crashed(self) -> bool:
        return self.outcome == CRASH


@dataclasses.dataclass(frozen=True)
class SearchTrial:
    trial: int
    voltage_v: float
    duration_ns: float
    delay_ns: int
    outcome: Outcome


@dataclasses.dataclass
class SearchResult:
    trials: list[SearchTrial]
    cell: tuple[int, int]
    voltage_bands: dict[str, dict[str, int]]
    duration_bands: dict[str, dict[str, int]]
    duration_chi2_p: float
    voltage_chi2_p: float

    def crash_rate(self, above: bool, threshold_v: float = 200.0) -> float:
        sel = [t for t in self.trials if (t.voltage_v > threshold_v) == above]
        return sum(t.outcome == CRASH for t in sel) / max(1, len(sel))

    def summary(self) -> dict:
        return {
            "trials": len(self.trials),
            "cell": list(self.cell),
            "voltage_bands": self.voltage_bands,
            "duration_bands": self.duration_bands,
            "duration_chi2_p": round(self.duration_chi2_p, 10),
            "voltage_chi2_p": round(self.voltage_chi2_p, 10),
            "crash_rate_above_200v": round(self.crash_rate(True), 10),
            "crash_rate_at_or_below_200v": round(self.crash_rate(False), 10),
        }


@dataclasses.dataclass
class SweepResult:
    points: list[TimingTracePoint]
    windows: list[tuple[int, int]]
    compare_window: tuple[int, int]
    cell: tuple[int, int]

    @property
    def successes(self) -> list[int]:
        return [p.delay_ns for p in self.points if p.outcome == SUCCESS]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.points:
            out[str(p.outcome)] = out.get(str(p.outcome), 0) + 1
        return dict(sorted(out.items()))


@dataclasses.dataclass
class IntegrityReport:
    digest_before: str
    digest_after: str
    digest_after_raw: str
    rpmb_diff: list[int]
    attacked_blocks: list[int]
    counter_before: int
    counter_after: int
    attempts: int
    success: bool
    corrupted_sectors: list[int]
    repaired_sectors: list[int]
    counter_restores: int
    crashes: int

    @property
    def passed(self) -> bool:
        return (self.success and self.digest_before == self.digest_after
                and self.rpmb_diff == self.attacked_blocks
                and self.counter_after - self.counter_before == 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d


# --- helpers ---------------------------------------------------------------------------

def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63))


def resolve_profiles(device_profile: DeviceProfile | str, fault_profile: SusceptibilityProfile | str
                     | None = None, variant: CheckVariant | str | None = None
                     ) -> tuple[DeviceProfile, SusceptibilityProfile]:
    dev = device_profile if isinstance(device_profile, DeviceProfile) \
        else load_device_profile(device_profile)
    if fault_profile is None:
        fault_profile = dev.name
    fp = fault_profile if isinstance(fault_profile, SusceptibilityProfile) \
        else load_fault_profile(fault_profile)
    if variant is not None:
        dev = dev.with_variant(variant)
    return dev, fp


def _pulse_at(fp: SusceptibilityProfile, cell: tuple[int, int], voltage_v: float,
              duration_ns: float, delay_ns: float = 0) -> PulseSpec:
    # aim at the centre of the cell
    x, y = cell
    return PulseSpec((x + 0.5) * fp.pitch_mm, (y + 0.5) * fp.pitch_mm, 0.0,
                     voltage_v, duration_ns, delay_ns)


def best_cell(cells: Iterable[HeatmapCell]) -> tuple[int, int]:
    """Cell with the highest glitch rate; ties go to the first cell in scan order."""
    best = max(cells, key=lambda c: c.glitch_rate)
    return best.x, best.y


def merge_windows(delays: Sequence[int], step: int = TIME_RESOLUTION_NS,
                  gap_ns: int = WINDOW_MERGE_GAP_NS) -> list[tuple[int, int]]:
    """Group success delays into windows.

    Two successes join the same window when the run of non-success delays
    between them spans less than ``gap_ns``.  Windows are (first, last)
    success delays, both inclusive.
    """
    windows: list[list[int]] = []
    for d in sorted(delays):
        if windows and d - windows[-1][1] - step < gap_ns:
            windows[-1][1] = d
        else:
            windows.append([d, d])
    return [(a, b) for a, b in windows]


def _observer_attempt(device: Device, session: HostSession, injector: SimulatedInjector,
                      pulse: PulseSpec) -> Outcome:
    injector.arm(pulse)
    try:
        resp = session.transport.send_command(CMD_SEND_EXT_CSD, 0)
    finally:
        injector.arm(None)
    outcome = classify_observer(resp)
    if outcome == CRASH:
        session.hard_reset()
    return outcome


def _observer_delay(rng: np.random.Generator, device: Device) -> int:
    steps = device.observer_timeline.end_ns // TIME_RESOLUTION_NS
    return int(rng.integers(0, steps)) * TIME_RESOLUTION_NS


# --- profiling ---------------------------------------------------------------------------

def run_profiling(device_profile: DeviceProfile | str = "target1",
                  fault_profile: SusceptibilityProfile | str | None = None,
                  iterations: int = 25, voltage_v: float = 200.0, duration_ns: float = 100.0,
                  seed: int = 0, cells: Sequence[tuple[int, int]] | None = None
                  ) -> list[HeatmapCell]:
    """Observer-based spatial scan; one pulse at a random loop time per iteration."""
    dev_profile, fp = resolve_profiles(device_profile, fault_profile)
    dev_rng, inj_rng, delay_rng = _streams(seed, 3)
    device = Device(dev_profile, seed=_child_seed(dev_rng))
    injector = SimulatedInjector(fp, inj_rng)
    session = connect(device, injector, seed=_child_seed(dev_rng))
    out = []
    for x, y in (cells if cells is not None else fp.cells()):
        session.hard_reset()
        cell = HeatmapCell(x, y)
        for _ in range(iterations):
            pulse = _pulse_at(fp, (x, y), voltage_v, duration_ns, _observer_delay(delay_rng, device))
            cell.add(_observer_attempt(device, session, injector, pulse))
        out.append(cell)
    return out


# --- parameter search ------------------------------------------------------------------------

def _bands(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, n + 1)


def _band_table(values: np.ndarray, outcomes: list[Outcome], edges: np.ndarray
                ) -> tuple[dict[str, dict[str, int]], np.ndarray]:
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    kinds = [NORMAL, GLITCH, CRASH]
    table = np.zeros((len(edges) - 1, 3), dtype=int)
    for i, o in zip(idx, outcomes):
        table[i, kinds.index(o)] += 1
    labels = {f"{edges[i]:g}-{edges[i + 1]:g}": dict(zip(("normal", "glitch", "crash"),
                                                        map(int, table[i])))
              for i in range(len(edges) - 1)}
    return labels, table


def _chi2_p(table: np.ndarray) -> float:
    table = table[:, table.sum(axis=0) > 0]
    table = table[table.sum(axis=1) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return 1.0
    return float(chi2_contingency(table)[1])


def run_parameter_search(device_profile: DeviceProfile | str = "target1",
                         fault_profile: SusceptibilityProfile | str | None = None,
                         trials: int = 1500, voltage_range: tuple[float, float] = (150.0, 250.0),
                         duration_range: tuple[float, float] = (40.0, 1000.0),
                         cell: tuple[int, int] | None = None, seed: int = 0,
                         voltage_bands: int = 4, duration_bands: int = 10) -> SearchResult:
    """Random voltage/duration search at one cell, classified with the observer."""
    dev_profile, fp = resolve_profiles(device_profile, fault_profile)
    cell = tuple(cell) if cell is not None else fp.best_cell()
    dev_rng, inj_rng, param_rng = _streams(seed, 3)
    device = Device(dev_profile, seed=_child_seed(dev_rng))
    injector = SimulatedInjector(fp, inj_rng)
    session = connect(device, injector, seed=_child_seed(dev_rng))
    records = []
    for n in range(trials):
        v = round(float(param_rng.uniform(*voltage_range)), 1)
        d = round(float(param_rng.uniform(*duration_range)), 1)
        delay = _observer_delay(param_rng, device)
        pulse = _pulse_at(fp, cell, v, d, delay)
        records.append(SearchTrial(n, v, d, delay, _observer_attempt(device, session, injector,
                                                                      pulse)))
    outcomes = [r.outcome for r in records]
    v_labels, v_table = _band_table(np.array([r.voltage_v for r in records]), outcomes,
                                    _bands(*voltage_range, voltage_bands))
    d_labels, d_table = _band_table(np.array([r.duration_ns for r in records]), outcomes,
                                    _bands(*duration_range, duration_bands))
    return SearchResult(records, cell, v_labels, d_labels, _chi2_p(d_table), _chi2_p(v_table))


# --- RPMB attacks ------------------------------------------------------------------------------

@dataclasses.dataclass
class _Rig:
    device: Device
    injector: SimulatedInjector
    session: HostSession
    rng: np.random.Generator
    key: bytes
    baseline_block: bytes
    tracked_counter: int
    counter_restores: int = 0
    crashes: int = 0

    def ensure_counter(self) -> None:
        """Put back a counter that a fault corrupted, through the debug interface."""
        if self.session.counter is None:
            self.session.read_counter()
        if self.session.counter != self.tracked_counter:
            log.info("counter corrupted (%#x, expected %#x); restoring",
                     self.session.counter, self.tracked_counter)
            self.device.debug_poke_counter(self.tracked_counter)
            self.counter_restores += 1
            self.session.read_counter()


def _setup_rig(dev_profile: DeviceProfile, fp: SusceptibilityProfile, seed: int,
               user_fill: bool = False) -> _Rig:
    dev_rng, inj_rng, host_rng, data_rng = _streams(seed, 4)
    device = Device(dev_profile, seed=_child_seed(dev_rng))
    if user_fill:
        device.fill_user_area(data_rng.bytes(device.state.user_area.size))
    injector = SimulatedInjector(fp, inj_rng)
    session = connect(device, injector)
    session.rng = host_rng
    key = data_rng.bytes(32)
    if session.program_key(key) != ResultCode.OPERATION_OK:
        raise InvariantViolation("key programming failed on a fresh device")
    baseline = data_rng.bytes(BLOCK_SIZE)
    if session.write_authenticated(0, baseline) != ResultCode.OPERATION_OK:
        raise InvariantViolation("baseline write failed")
    counter, _ = session.read_counter()
    return _Rig(device, injector, session, data_rng, key, baseline, counter)


def _attempt(rig: _Rig, fp: SusceptibilityProfile, cell: tuple[int, int], delay: int,
             voltage_v: float, duration_ns: float, address: int, data: bytes,
             cross_check: bool = True) -> TimingTracePoint:
    rig.ensure_counter()
    before = rig.tracked_counter
    pulse = _pulse_at(fp, cell, voltage_v, duration_ns, delay)
    _, outcome = rig.session.attack_write(address, data, delay, pulse, rig.injector)
    record = rig.session.last_attack
    if outcome == CRASH:
        rig.crashes += 1
        rig.session.hard_reset()
        return TimingTracePoint(delay, record.raw_result, outcome)
    if outcome == SUCCESS:
        rig.tracked_counter = (before + 1) & 0xFFFFFFFF
        if cross_check:
            after = rig.session.counter
            readback = rig.session.read_authenticated(address).data
            if after != rig.tracked_counter:
                raise InvariantViolation(f"success at {delay} ns moved the counter "
                                         f"{before} -> {after}")
            if readback != data:
                raise InvariantViolation(f"success at {delay} ns without attacker data stored")
    return TimingTracePoint(delay, record.raw_result, outcome)


def run_timing_sweep(device_profile: DeviceProfile | str = "target1",
                     fault_profile: SusceptibilityProfile | str | None = None,
                     window: tuple[int, int] = (110_000, 125_000), step: int = TIME_RESOLUTION_NS,
                     cell: tuple[int, int] | None = None, voltage_v: float = 200.0,
                     duration_ns: float = 100.0, seed: int = 0,
                     variant: CheckVariant | str | None = None, address: int = 0,
                     check_confinement: bool = True) -> SweepResult:
    """One wrong-MAC write per delay in ``[start, end)``."""
    start, end = window
    if step <= 0 or end <= start or start < 0:
        raise ConfigError(f"bad sweep window {window} / step {step}")
    dev_profile, fp = resolve_profiles(device_profile, fault_profile, variant)
    cell = tuple(cell) if cell is not None else fp.best_cell()
    rig = _setup_rig(dev_profile, fp, seed)
    attacker = rig.rng.bytes(BLOCK_SIZE)
    nominal = rig.device.nominal_timeline
    compare = nominal.compare_window()
    points = [_attempt(rig, fp, cell, d, voltage_v, duration_ns, address, attacker)
              for d in range(start, end, step)]
    successes = [p.delay_ns for p in points if p.outcome == SUCCESS]
    if check_confinement:
        for d in successes:
            op = nominal.op_at(d)
            if not op or op.kind is not MicroOpKind.HMAC_COMPARE_WORD:
                raise InvariantViolation(f"success at {d} ns outside the HMAC compare window")
    return SweepResult(points, merge_windows(successes, step), compare, cell)


def attack_window(device: Device) -> tuple[int, int]:
    """Span that covers every HMAC compare slot the device's variant can run."""
    timing = device.profile.timing
    start, end = device.nominal_timeline.compare_window()
    if device.profile.variant is CheckVariant.DOUBLE_CHECK:
        end += timing.max_jitter_ns() + 8 * timing.second_check_word_ns
    return start, end


@dataclasses.dataclass
class AttackResult:
    points: list[TimingTracePoint]
    success: bool
    window: tuple[int, int]
    cell: tuple[int, int]


def run_attack(device_profile: DeviceProfile | str = "target1",
               fault_profile: SusceptibilityProfile | str | None = None,
               window: tuple[int, int] | None = None, max_attempts: int = 100,
               cell: tuple[int, int] | None = None, voltage_v: float = 200.0,
               duration_ns: float = 100.0, seed: int = 0,
               variant: CheckVariant | str | None = None, address: int = 0) -> AttackResult:
    """Wrong-MAC writes at random in-window delays until one is accepted."""
    dev_profile, fp = resolve_profiles(device_profile, fault_profile, variant)
    cell = tuple(cell) if cell is not None else fp.best_cell()
    rig = _setup_rig(dev_profile, fp, seed)
    window = tuple(window) if window is not None else attack_window(rig.device)
    start, end = window
    if end <= start:
        raise ConfigError(f"bad attack window {window}")
    attacker = rig.rng.bytes(BLOCK_SIZE)
    steps = max(1, (end - start) // TIME_RESOLUTION_NS)
    points = []
    while len(points) < max_attempts:
        delay = start + int(rig.rng.integers(0, steps)) * TIME_RESOLUTION_NS
        points.append(_attempt(rig, fp, cell, delay, voltage_v, duration_ns, address, attacker))
        if points[-1].outcome == SUCCESS:
            break
    return AttackResult(points, points[-1].outcome == SUCCESS, window, cell)


def run_integrity_campaign(device_profile: DeviceProfile | str = "target1",
                           fault_profile: SusceptibilityProfile | str | None = None,
                           window: tuple[int, int] | None = None, max_attempts: int = 100,
                           cell: tuple[int, int] | None = None, voltage_v: float = 200.0,
                           duration_ns: float = 100.0, seed: int = 0,
                           variant: CheckVariant | str | None = None, address: int = 0,
                           stop_on_success: bool = True) -> IntegrityReport:
    """Attack at random in-window delays, then verify nothing else changed.

    The user area is filled with known data first.  Sectors that pulses
    corrupted are rewritten from the backup before the final digest; the
    digest of the unrepaired image is reported as well.
    """
    dev_profile, fp = resolve_profiles(device_profile, fault_profile, variant)
    cell = tuple(cell) if cell is not None else fp.best_cell()
    rig = _setup_rig(dev_profile, fp, seed, user_fill=True)
    dev = rig.device
    if window is None:
        window = dev.nominal_timeline.compare_window()
    start, end = window
    if end <= start:
        raise ConfigError(f"bad attack window {window}")
    backup = dev.image_user_area()
    digest_before = hashlib.sha256(backup).hexdigest()
    rpmb_before = dev.state.rpmb_blocks.copy()
    counter_before = rig.tracked_counter
    attacker = rig.rng.bytes(BLOCK_SIZE)
    steps = max(1, (end - start) // TIME_RESOLUTION_NS)

    attempts, success = 0, False
    while attempts < max_attempts and not (success and stop_on_success):
        delay = start + int(rig.rng.integers(0, steps)) * TIME_RESOLUTION_NS
        attempts += 1
        point = _attempt(rig, fp, cell, delay, voltage_v, duration_ns, address, attacker)
        success = success or point.outcome == SUCCESS
    rig.ensure_counter()

    image = dev.image_user_area()
    digest_raw = hashlib.sha256(image).hexdigest()
    sector = dev.state.user_area.shape[1]
    corrupted = [i for i in range(dev.state.user_area.shape[0])
                 if image[i * sector:(i + 1) * sector] != backup[i * sector:(i + 1) * sector]]
    for i in corrupted:
        dev.write_user_sector(i, backup[i * sector:(i + 1) * sector])
    digest_after = hashlib.sha256(dev.image_user_area()).hexdigest()
    diff = np.nonzero((dev.state.rpmb_blocks != rpmb_before).any(axis=1))[0]
    counter_after, _ = rig.session.read_counter()
    return IntegrityReport(
        digest_before=digest_before, digest_after=digest_after, digest_after_raw=digest_raw,
        rpmb_diff=[int(b) for b in diff], attacked_blocks=[address] if success else [],
        counter_before=counter_before, counter_after=counter_after, attempts=attempts,
        success=success, corrupted_sectors=corrupted, repaired_sectors=list(corrupted),
        counter_restores=rig.counter_restores, crashes=rig.crashes)


def run_stress(device_profile: DeviceProfile | str = "target1",
               fault_profile: SusceptibilityProfile | str | None = None,
               repeats: int = 100, seed: int = 0, **kw) -> IntegrityReport:
    """Keep pulsing the compare window ``repeats`` times regardless of success."""
    return run_integrity_campaign(device_profile, fault_profile, max_attempts=repeats, seed=seed,
                                  stop_on_success=False, **kw)


def run_parallel(fn: Callable[..., object], seeds: Iterable[int], workers: int | None = None,
                 **kwargs) -> dict[int, object]:
    """Run ``fn(seed=s, **kwargs)`` for each seed; each worker owns its device.

    Results are keyed by seed so merging does not depend on completion order.
    """
    seeds = list(seeds)
    if workers == 1 or len(seeds) <= 1:
        return {s: fn(seed=s, **kwargs) for s in seeds}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {s: pool.submit(fn, seed=s, **kwargs) for s in seeds}
        return {s: futures[s].result() for s in sorted(futures)}


# --- report files -------------------------------------------------------------------------------

def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def heatmap_csv(cells: Iterable[HeatmapCell]) -> str:
    return _csv_text(HEATMAP_COLUMNS, ((c.x, c.y, c.normal, c.glitch, c.crash) for c in cells))


def timing_csv(points: Iterable[TimingTracePoint]) -> str:
    return _csv_text(TIMING_COLUMNS, ((p.delay_ns, f"{p.delay_ns / 1000:.2f}",
                                       f"0x{p.result_value:04x}", str(p.outcome))
                                      for p in points))


def search_csv(trials: Iterable[SearchTrial]) -> str:
    return _csv_text(SEARCH_COLUMNS, ((t.trial, f"{t.voltage_v:.1f}", f"{t.duration_ns:.1f}",
                                       t.delay_ns, str(t.outcome)) for t in trials))


def read_timing_csv(text: str) -> list[TimingTracePoint]:
    rows = csv.DictReader(io.StringIO(text))
    return [TimingTracePoint(int(r["delay_ns"]), int(r["result_value"], 16),
                             Outcome.parse(r["outcome"])) for r in rows]


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def provenance(dev: DeviceProfile, fp: SusceptibilityProfile, seed: int) -> dict:
    return {"artifact_version": __version__, "seed": seed,
            "device_profile": dev.name, "device_profile_sha256": dev.digest(),
            "fault_profile": fp.name, "fault_profile_sha256": fp.digest()}


# --- config -----------------------------------------------------------------------------------

EXPERIMENTS = ("profile", "search", "sweep", "attack", "integrity", "stress")


@dataclasses.dataclass
class CampaignConfig:
    experiment: str
    device_profile: str = "target1"
    fault_profile: str | None = None
    seed: int | None = None
    variant: str | None = None
    window: tuple[int, int] | None = None
    step: int = TIME_RESOLUTION_NS
    iterations: int = 25
    trials: int = 1500
    max_attempts: int = 100
    voltage_v: float = 200.0
    duration_ns: float = 100.0
    cell: tuple[int, int] | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.window is not None:
            self.window = tuple(int(v) for v in self.window)
            if len(self.window) != 2 or self.window[1] <= self.window[0] or self.window[0] < 0:
                raise ConfigError(f"bad window {self.window}")
        if self.cell is not None:
            self.cell = tuple(int(v) for v in self.cell)
        if self.variant is not None:
            try:
                self.variant = CheckVariant.parse(self.variant).value
            except ValueError:
                raise ConfigError(f"unknown check variant {self.variant!r}") from None
        for name in ("step", "iterations", "trials", "max_attempts"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("window", "cell"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> CampaignConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> CampaignConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load campaign config {path}: {exc}") from None


def run_config(config: CampaignConfig, out_dir: str | Path) -> dict[str, Path]:
    """Run one configured experiment and write its report files plus a manifest."""
    if config.seed is None:
        raise ConfigError("config.seed must be set before running")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dev, fp = resolve_profiles(config.device_profile, config.fault_profile, config.variant)
    seed = config.seed
    files: dict[str, str] = {}
    summary: dict = {}
    exp = config.experiment

    if exp == "profile":
        cells = run_profiling(dev, fp, config.iterations, config.voltage_v, config.duration_ns,
                              seed)
        files["heatmap.csv"] = heatmap_csv(cells)
        summary = {"best_cell": list(best_cell(cells)), "cells": len(cells),
                   "iterations": config.iterations}
    elif exp == "search":
        res = run_parameter_search(dev, fp, config.trials, cell=config.cell, seed=seed)
        files["search.csv"] = search_csv(res.trials)
        summary = res.summary()
    elif exp == "attack":
        res = run_attack(dev, fp, config.window, config.max_attempts, config.cell,
                         config.voltage_v, config.duration_ns, seed)
        files["attack.csv"] = timing_csv(res.points)
        summary = {"success": res.success, "attempts": len(res.points),
                   "window_ns": list(res.window), "cell": list(res.cell),
                   "variant": dev.variant.value}
    elif exp == "sweep":
        window = config.window or (110_000, 125_000)
        res = run_timing_sweep(dev, fp, window, config.step, config.cell, config.voltage_v,
                               config.duration_ns, seed)
        files["timing.csv"] = timing_csv(res.points)
        summary = {"window_ns": list(window), "step_ns": config.step,
                   "success_windows_ns": [list(w) for w in res.windows],
                   "success_windows_us": [[a / 1000, b / 1000] for a, b in res.windows],
                   "compare_window_ns": list(res.compare_window),
                   "successes": len(res.successes), "counts": res.counts(),
                   "cell": list(res.cell), "variant": dev.variant.value}
    else:
        if exp == "integrity":
            rep = run_integrity_campaign(dev, fp, config.window, config.max_attempts,
                                         config.cell, config.voltage_v, config.duration_ns, seed)
        else:
            rep = run_stress(dev, fp, config.max_attempts, seed, window=config.window,
                             cell=config.cell)
        files["integrity.json"] = dump_json({"report": rep.to_dict(),
                                             "provenance": provenance(dev, fp, seed)})
        summary = {"passed": rep.passed, "attempts": rep.attempts, "success": rep.success,
                   "corrupted_sectors": len(rep.corrupted_sectors)}

    manifest = {"config": config.to_dict(), "provenance": provenance(dev, fp, seed),
                "summary": summary, "outputs": sorted(files)}
    files["manifest.json"] = dump_json(manifest)
    files["run.log"] = "".join(f"{k}: {json.dumps(v, sort_keys=True)}\n"
                               for k, v in sorted(summary.items()))
    written = {}
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written[name] = path
    return written


def replay(manifest_path: str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Re-run the campaign recorded in a manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    return run_config(CampaignConfig.from_dict(manifest["config"]), out_dir)


__all__ = [
    "AttackResult", "CampaignConfig", "ConfigError", "HeatmapCell", "IntegrityReport", "InvariantViolation",
    "OutcomeKind", "SearchResult", "SweepResult", "TimingTracePoint", "best_cell",
    "heatmap_csv", "merge_windows", "replay", "run_config", "run_integrity_campaign",
    "run_attack", "run_parallel", "run_parameter_search", "run_profiling", "run_stress", "run_timing_sweep",
    "timing_csv",
]
