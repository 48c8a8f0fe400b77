"""Stochastic model of what an EM pulse does to the controller.

A pulse at grid cell (x, y) first draws an outcome class (none, glitch,
crash) from that cell's distribution at the pulse voltage.  Glitches are
then refined into a concrete :class:`FaultPrimitive` by a per-phase
generator: the compare phase of the HMAC check, the rest of the busy
window, or the fault-observer loop.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .timeline import PAST_END, MicroOp, MicroOpTimeline, map_delay_to_microop

M32 = 0xFFFFFFFF

PHASES = ("compare", "busy", "observer")


class FaultEngineError(Exception):
    pass


class OutOfGrid(FaultEngineError, ValueError):
    pass


class PulseOutOfBounds(FaultEngineError, ValueError):
    pass


class InjectorUnavailable(FaultEngineError, RuntimeError):
    pass


class ProfileError(FaultEngineError, ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class PulseSpec:
    x_mm: float
    y_mm: float
    z_mm: float = 0.0
    voltage_v: float = 200.0
    duration_ns: float = 100.0
    delay_ns: float = 0.0

    def __post_init__(self):
        if self.delay_ns < 0:
            raise PulseOutOfBounds("delay_ns must be >= 0")

    def at(self, delay_ns: float) -> PulseSpec:
        return dataclasses.replace(self, delay_ns=delay_ns)


class FaultClass(enum.Enum):
    NONE = "none"
    GLITCH = "glitch"
    CRASH = "crash"


class FaultKind(enum.Enum):
    NONE = "none"
    SKIP_MICRO_OP = "skip_micro_op"
    SKIP_CALL = "skip_call"
    CORRUPT_REGISTER = "corrupt_register"
    CORRUPT_MEMORY = "corrupt_memory"
    CRASH = "crash"


class Register(enum.Enum):
    RETURN = "return"
    LENGTH = "length"
    LOOP_INDEX = "loop_index"
    ACCUMULATOR = "accumulator"
    GENERIC = "generic"


class MemoryRegion(enum.Enum):
    SRAM_COUNTER = "sram_counter"
    USER_SECTOR = "user_sector"


class ValueModel(enum.Enum):
    ZERO = "zero"
    RANDOM32 = "random32"
    BITFLIP = "bitflip"


@dataclasses.dataclass(frozen=True)
class FaultPrimitive:
    """Concrete effect of one pulse.

    ``operand`` is the drawn random word for ``random32``, the bit index
    for ``bitflip`` and the sector selector for user-sector corruption.
    """

    kind: FaultKind = FaultKind.NONE
    register: Register | None = None
    region: MemoryRegion | None = None
    model: ValueModel | None = None
    operand: int = 0

    def corrupt(self, value: int) -> int:
        """Apply this primitive's value model to a 32-bit word."""
        if self.model is ValueModel.ZERO:
            return 0
        if self.model is ValueModel.RANDOM32:
            return self.operand & M32
        if self.model is ValueModel.BITFLIP:
            return (value ^ (1 << (self.operand & 31))) & M32
        raise ValueError(f"{self} has no value model")

    @property
    def is_scenario(self) -> bool:
        """One of the three HMAC-check bypass scenarios."""
        if self.kind is FaultKind.SKIP_CALL:
            return True
        if self.kind is FaultKind.CORRUPT_REGISTER:
            if self.register is Register.LENGTH and self.model is ValueModel.ZERO:
                return True
            if self.register is Register.RETURN and self.model is not ValueModel.ZERO:
                return True
        return False

    def __str__(self) -> str:
        parts = [self.kind.value]
        if self.register:
            parts.append(self.register.value)
        if self.region:
            parts.append(self.region.value)
        if self.model:
            parts.append(self.model.value)
            if self.model is not ValueModel.ZERO:
                parts.append(f"{self.operand:#x}")
        return ":".join(parts)


NO_FAULT = FaultPrimitive()
CRASH = FaultPrimitive(FaultKind.CRASH)
SKIP_CALL = FaultPrimitive(FaultKind.SKIP_CALL)


def skip_micro_op(word: int = 0) -> FaultPrimitive:
    return FaultPrimitive(FaultKind.SKIP_MICRO_OP, operand=word)


def corrupt_register(register: Register | str, model: ValueModel | str = ValueModel.ZERO,
                     operand: int = 0) -> FaultPrimitive:
    return FaultPrimitive(FaultKind.CORRUPT_REGISTER, register=Register(register),
                          model=ValueModel(model), operand=operand)


def corrupt_memory(region: MemoryRegion | str, model: ValueModel | str = ValueModel.BITFLIP,
                   operand: int = 0) -> FaultPrimitive:
    return FaultPrimitive(FaultKind.CORRUPT_MEMORY, region=MemoryRegion(region),
                          model=ValueModel(model), operand=operand)


# --- generators -----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GeneratorEntry:
    weight: float
    kind: FaultKind
    register: Register | None = None
    region: MemoryRegion | None = None
    model: ValueModel | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> GeneratorEntry:
        return cls(weight=float(d["weight"]), kind=FaultKind(d["kind"]),
                   register=Register(d["register"]) if d.get("register") else None,
                   region=MemoryRegion(d["region"]) if d.get("region") else None,
                   model=ValueModel(d["model"]) if d.get("model") else None)

    def to_dict(self) -> dict:
        d = {"weight": self.weight, "kind": self.kind.value}
        if self.register:
            d["register"] = self.register.value
        if self.region:
            d["region"] = self.region.value
        if self.model:
            d["model"] = self.model.value
        return d

    def draw(self, rng: np.random.Generator) -> FaultPrimitive:
        operand = 0
        if self.model is ValueModel.RANDOM32 or self.region is MemoryRegion.USER_SECTOR:
            operand = int(rng.integers(0, 1 << 32))
        elif self.model is ValueModel.BITFLIP:
            operand = int(rng.integers(0, 32))
        return FaultPrimitive(self.kind, self.register, self.region, self.model, operand)


# --- susceptibility profile -------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class SusceptibilityProfile:
    """Per-cell outcome probabilities and per-phase fault generators.

    ``glitch`` and ``crash`` are (height, width) arrays of base rates.
    Above ``threshold_v`` the crash rate grows by ``crash_slope_per_v``
    per volt, capped at ``crash_cap``; the extra crash mass is taken from
    the no-effect class first, then from glitches.
    """

    name: str
    glitch: np.ndarray
    crash: np.ndarray
    generators: Mapping[str, tuple[GeneratorEntry, ...]]
    pitch_mm: float = 1.0
    threshold_v: float | None = None
    crash_slope_per_v: float = 0.0
    crash_cap: float = 1.0
    hotspot: tuple[int, int] | None = None

    def __post_init__(self):
        glitch = np.asarray(self.glitch, dtype=float)
        crash = np.asarray(self.crash, dtype=float)
        if glitch.ndim != 2 or glitch.shape != crash.shape:
            raise ProfileError("glitch and crash grids must be 2-D and the same shape")
        if (glitch < 0).any() or (crash < 0).any() or (glitch + crash > 1 + 1e-12).any():
            raise ProfileError("cell probabilities must be >= 0 and sum to <= 1")
        glitch.setflags(write=False)
        crash.setflags(write=False)
        object.__setattr__(self, "glitch", glitch)
        object.__setattr__(self, "crash", crash)
        gens = {}
        for phase in PHASES:
            entries = tuple(self.generators.get(phase, ()))
            total = sum(e.weight for e in entries)
            if entries and (total <= 0 or any(e.weight < 0 for e in entries)):
                raise ProfileError(f"generator weights for phase {phase!r} are invalid")
            gens[phase] = entries
        object.__setattr__(self, "generators", gens)
        if self.hotspot is not None:
            object.__setattr__(self, "hotspot", tuple(int(v) for v in self.hotspot))
            self.cell_index(*self.hotspot)

    @property
    def width(self) -> int:
        return self.glitch.shape[1]

    @property
    def height(self) -> int:
        return self.glitch.shape[0]

    def cells(self) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width)]

    def cell_index(self, x_mm: float, y_mm: float) -> tuple[int, int]:
        x = int(np.floor(x_mm / self.pitch_mm + 1e-9))
        y = int(np.floor(y_mm / self.pitch_mm + 1e-9))
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise OutOfGrid(f"position ({x_mm}, {y_mm}) mm is outside the "
                            f"{self.width}x{self.height} grid")
        return x, y

    def probabilities(self, x: int, y: int, voltage_v: float) -> tuple[float, float, float]:
        """(p_none, p_glitch, p_crash) for a cell at a given voltage."""
        g = float(self.glitch[y, x])
        c = float(self.crash[y, x])
        if self.threshold_v is not None and voltage_v > self.threshold_v and (g or c):
            c = min(max(c, c + self.crash_slope_per_v * (voltage_v - self.threshold_v)),
                    max(c, self.crash_cap))
            g = min(g, 1.0 - c)
        return 1.0 - g - c, g, c

    def best_cell(self) -> tuple[int, int]:
        if self.hotspot is not None:
            return self.hotspot
        y, x = np.unravel_index(np.argmax(self.glitch), self.glitch.shape)
        return int(x), int(y)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pitch_mm": self.pitch_mm,
            "width": self.width,
            "height": self.height,
            "threshold_v": self.threshold_v,
            "crash_slope_per_v": self.crash_slope_per_v,
            "crash_cap": self.crash_cap,
            "hotspot": list(self.hotspot) if self.hotspot else None,
            "glitch": [[round(float(v), 6) for v in row] for row in self.glitch],
            "crash": [[round(float(v), 6) for v in row] for row in self.crash],
            "generators": {p: [e.to_dict() for e in self.generators[p]] for p in PHASES},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SusceptibilityProfile:
        try:
            glitch = np.array(d["glitch"], dtype=float)
            crash = np.array(d["crash"], dtype=float)
            if "width" in d and glitch.shape[1] != d["width"]:
                raise ProfileError("grid width does not match 'width'")
            if "height" in d and glitch.shape[0] != d["height"]:
                raise ProfileError("grid height does not match 'height'")
            gens = {p: tuple(GeneratorEntry.from_dict(e) for e in entries)
                    for p, entries in d.get("generators", {}).items()}
            unknown = set(gens) - set(PHASES)
            if unknown:
                raise ProfileError(f"unknown generator phases {sorted(unknown)}")
            return cls(name=str(d["name"]), glitch=glitch, crash=crash, generators=gens,
                       pitch_mm=float(d.get("pitch_mm", 1.0)),
                       threshold_v=d.get("threshold_v"),
                       crash_slope_per_v=float(d.get("crash_slope_per_v", 0.0)),
                       crash_cap=float(d.get("crash_cap", 1.0)),
                       hotspot=tuple(d["hotspot"]) if d.get("hotspot") else None)
        except ProfileError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ProfileError(f"malformed fault profile: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_uniform(self, glitch: float = 0.0, crash: float = 0.0) -> SusceptibilityProfile:
        shape = self.glitch.shape
        return dataclasses.replace(self, name=f"{self.name}-uniform",
                                   glitch=np.full(shape, glitch), crash=np.full(shape, crash))


def load_fault_profile(source: str | Path | Mapping) -> SusceptibilityProfile:
    """Load a fault profile by shipped name (``target1``), path or dict."""
    if isinstance(source, Mapping):
        return SusceptibilityProfile.from_dict(source)
    path = Path(source)
    if not path.suffix and not path.exists():
        try:
            text = resources.files("rpmb_emfi.data").joinpath(f"fault_{source}.json").read_text()
        except FileNotFoundError:
            raise ProfileError(f"no shipped fault profile named {source!r}") from None
    else:
        try:
            text = path.read_text()
        except OSError as exc:
            raise ProfileError(f"cannot read fault profile {path}: {exc}") from exc
    try:
        return SusceptibilityProfile.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ProfileError(f"fault profile is not valid JSON: {exc}") from exc


# --- sampling ---------------------------------------------------------------

def sample_class(profile: SusceptibilityProfile, pulse: PulseSpec,
                 rng: np.random.Generator) -> FaultClass:
    x, y = profile.cell_index(pulse.x_mm, pulse.y_mm)
    _, p_glitch, p_crash = profile.probabilities(x, y, pulse.voltage_v)
    u = rng.random()
    if u < p_crash:
        return FaultClass.CRASH
    if u < p_crash + p_glitch:
        return FaultClass.GLITCH
    return FaultClass.NONE


def sample_fault(profile: SusceptibilityProfile, pulse: PulseSpec, rng: np.random.Generator,
                 phase: str = "busy") -> FaultPrimitive:
    """Draw the fault one pulse produces.

    The outcome class is drawn first; glitches are then refined using the
    generator for ``phase``.  The pulse duration does not enter.
    """
    cls = sample_class(profile, pulse, rng)
    if cls is FaultClass.CRASH:
        return CRASH
    if cls is FaultClass.NONE:
        return NO_FAULT
    entries = profile.generators.get(phase, ())
    if not entries:
        raise ProfileError(f"profile {profile.name!r} has no generator for phase {phase!r}")
    weights = np.array([e.weight for e in entries])
    idx = int(np.searchsorted(np.cumsum(weights) / weights.sum(), rng.random(), side="right"))
    return entries[min(idx, len(entries) - 1)].draw(rng)


def fault_class_of(primitive: FaultPrimitive) -> FaultClass:
    if primitive.kind is FaultKind.CRASH:
        return FaultClass.CRASH
    if primitive.kind is FaultKind.NONE:
        return FaultClass.NONE
    return FaultClass.GLITCH


# --- injector ----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Ack:
    pulse: PulseSpec
    cell: tuple[int, int]
    primitive: FaultPrimitive
    micro_op: MicroOp | None


class SimulatedInjector:
    """Software stand-in for the EM pulse generator.

    ``fire`` samples a fault for the pulse and schedules it on the attached
    device.  A hardware backend would expose the same ``arm``/``fire``
    surface and leave the effect to physics.
    """

    def __init__(self, profile: SusceptibilityProfile, rng: np.random.Generator | int | None = None,
                 voltage_bounds: tuple[float, float] = (150.0, 500.0),
                 duration_bounds: tuple[float, float] = (40.0, 1000.0)):
        self.profile = profile
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.voltage_bounds = voltage_bounds
        self.duration_bounds = duration_bounds
        self.device = None
        self.enabled = True
        self.history: list[Ack] = []
        self._armed: PulseSpec | None = None

    def attach(self, device) -> SimulatedInjector:
        self.device = device
        return self

    def arm(self, pulse: PulseSpec | None) -> None:
        """Fire ``pulse`` at the next trigger, once."""
        if pulse is not None:
            self._check(pulse)
        self._armed = pulse

    @property
    def armed(self) -> PulseSpec | None:
        return self._armed

    def on_trigger(self, timeline: MicroOpTimeline) -> None:
        pulse, self._armed = self._armed, None
        if pulse is not None:
            self.fire(pulse, timeline)

    def _check(self, pulse: PulseSpec) -> tuple[int, int]:
        lo, hi = self.voltage_bounds
        if not lo <= pulse.voltage_v <= hi:
            raise PulseOutOfBounds(f"voltage {pulse.voltage_v} V outside [{lo}, {hi}]")
        lo, hi = self.duration_bounds
        if not lo <= pulse.duration_ns <= hi:
            raise PulseOutOfBounds(f"duration {pulse.duration_ns} ns outside [{lo}, {hi}]")
        return self.profile.cell_index(pulse.x_mm, pulse.y_mm)

    def fire(self, pulse: PulseSpec, timeline: MicroOpTimeline | None = None) -> Ack:
        if not self.enabled or self.device is None:
            raise InjectorUnavailable("injector is not attached to a device")
        cell = self._check(pulse)
        if timeline is None:
            timeline = self.device.active_timeline
        op = None
        if timeline is None:
            # device idle: only a crash has an observable effect
            primitive = sample_fault(self.profile, pulse, self.rng, "busy")
            if primitive.kind is not FaultKind.CRASH:
                primitive = NO_FAULT
        else:
            target = map_delay_to_microop(timeline, pulse.delay_ns)
            if target:
                op = target
                primitive = sample_fault(self.profile, pulse, self.rng, op.phase)
            else:
                primitive = NO_FAULT
        self.device.apply_pulse_wear(self.rng)
        if timeline is None:
            if primitive.kind is FaultKind.CRASH:
                self.device.crash()
        elif primitive.kind is not FaultKind.NONE:
            self.device.schedule_fault(pulse.delay_ns, primitive)
        ack = Ack(pulse, cell, primitive, op)
        self.history.append(ack)
        return ack


FaultSchedule = Sequence[tuple[float, FaultPrimitive]]
TriggerHook = Callable[[MicroOpTimeline], None]

__all__ = [
    "Ack", "CRASH", "FaultClass", "FaultKind", "FaultPrimitive", "FaultSchedule",
    "GeneratorEntry", "InjectorUnavailable", "MemoryRegion", "NO_FAULT", "OutOfGrid",
    "PAST_END", "ProfileError", "PulseOutOfBounds", "PulseSpec", "Register", "SKIP_CALL",
    "SimulatedInjector", "SusceptibilityProfile", "ValueModel", "corrupt_memory",
    "corrupt_register", "fault_class_of", "load_fault_profile", "map_delay_to_microop",
    "sample_class", "sample_fault", "skip_micro_op",
]
