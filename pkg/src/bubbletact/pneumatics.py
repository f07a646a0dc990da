"""Pneumatic plant simulation, setpoint control and the serial command protocol.

One plant per bubble: a first-order pressure model with a pump toward a supply
ceiling and an exhaust valve toward ambient, deliberately asymmetric (venting
through a small valve is much slower than pumping). The sensor taps the supply
line close to the bubble, so it reads a flow-dependent gradient on top of the
true bubble pressure: higher than the bubble while inflating, lower while
deflating, exact at rest. The controller is bang-bang with a deadband, fed by
the offset-corrected line reading.

Wire protocol (newline-terminated ASCII, one in-flight command per bubble):

    SET <bubble-id> <hPa>   ->  OK | ERR range
    GET <bubble-id>         ->  P <bubble-id> <hPa>
    VENT <bubble-id>        ->  OK
    anything else           ->  ERR parse

Telemetry is CSV with columns ``time_s,bubble_id,true_hpa,est_hpa,pump,valve``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, PressureBandError
from .membrane import AMBIENT, BAND_MAX, BAND_MIN

TELEMETRY_HEADER = "time_s,bubble_id,true_hpa,est_hpa,pump,valve"

REGIME_STATIC = "static"
REGIME_INFLATING = "inflating"
REGIME_DEFLATING = "deflating"

# Default per-regime line-sensor gradients, hPa (sensor minus bubble).
DEFAULT_OFFSET_TABLE = {
    REGIME_STATIC: 0.0,
    REGIME_INFLATING: 3.0,
    REGIME_DEFLATING: -2.0,
}


@dataclass(frozen=True)
class PlantParams:
    """First-order plant constants; rates are what the pump/valve achieve at
    mid-band (1050 hPa), converted internally to exponential rate constants."""

    supply_pressure: float = 1400.0
    ambient_pressure: float = AMBIENT
    inflate_rate_mid: float = 20.0   # hPa/s at 1050 hPa
    deflate_rate_mid: float = 8.0    # hPa/s at 1050 hPa
    grad_inflate: float = 3.0        # line minus bubble while pumping, hPa
    grad_deflate: float = 2.0        # bubble minus line while venting, hPa
    sensor_sigma: float = 0.3        # line sensor noise, hPa
    rest_volume_ml: float = 180.0
    volume_gain_ml_per_hpa: float = 0.4

    @property
    def k_in(self) -> float:
        return self.inflate_rate_mid / (self.supply_pressure - 1050.0)

    @property
    def k_out(self) -> float:
        return self.deflate_rate_mid / (1050.0 - self.ambient_pressure)

    def offset_table(self) -> dict[str, float]:
        return {
            REGIME_STATIC: 0.0,
            REGIME_INFLATING: self.grad_inflate,
            REGIME_DEFLATING: -self.grad_deflate,
        }


def load_plant_profile(path: str | Path) -> PlantParams:
    """Read plant constants from a flat ``key=value`` file; unknown keys are
    rejected so typos fail loudly."""
    values: dict[str, float] = {}
    fields = {f for f in PlantParams.__dataclass_fields__}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown plant key {key!r}")
        try:
            values[key] = float(val.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad number {val.strip()!r}") from exc
    return PlantParams(**values)


@dataclass
class PlantState:
    """Instantaneous pneumatic state of one bubble."""

    bubble_pressure: float
    line_pressure: float
    pump_on: bool = False
    valve_open: bool = False
    bubble_volume: float = 180.0
    time: float = 0.0


def make_plant(params: PlantParams, pressure: float = 1050.0) -> PlantState:
    return PlantState(
        bubble_pressure=pressure,
        line_pressure=pressure,
        bubble_volume=params.rest_volume_ml
        + params.volume_gain_ml_per_hpa * (pressure - params.ambient_pressure),
        time=0.0,
    )


def flow_regime(pump_on: bool, valve_open: bool) -> str:
    if pump_on and not valve_open:
        return REGIME_INFLATING
    if valve_open and not pump_on:
        return REGIME_DEFLATING
    return REGIME_STATIC


def step_plant(state: PlantState, dt: float, params: PlantParams) -> PlantState:
    """Advance the plant by dt seconds with the current actuation flags.

    The pressure ODE is linear in every actuation combination, so the update
    uses the exact exponential step rather than Euler integration.
    """
    if dt <= 0:
        raise ContractError("dt must be positive")
    p = state.bubble_pressure
    k_in = params.k_in if state.pump_on else 0.0
    k_out = params.k_out if state.valve_open else 0.0
    k = k_in + k_out
    if k > 0:
        equilibrium = (
            k_in * params.supply_pressure + k_out * params.ambient_pressure
        ) / k
        p = equilibrium + (p - equilibrium) * math.exp(-k * dt)
    p = max(p, params.ambient_pressure)

    line = p
    if state.pump_on:
        line += params.grad_inflate
    if state.valve_open:
        line -= params.grad_deflate

    return replace(
        state,
        bubble_pressure=p,
        line_pressure=line,
        bubble_volume=params.rest_volume_ml
        + params.volume_gain_ml_per_hpa * (p - params.ambient_pressure),
        time=state.time + dt,
    )


def offset_correct(
    line_pressure: float,
    pump_on: bool,
    valve_open: bool,
    table: dict[str, float],
) -> float:
    """Bubble-pressure estimate from the line reading: subtract the tabulated
    flow-regime gradient. Static flow carries zero correction."""
    for regime in (REGIME_STATIC, REGIME_INFLATING, REGIME_DEFLATING):
        if regime not in table:
            raise ConfigError(f"offset table missing regime {regime!r}")
    return line_pressure - table[flow_regime(pump_on, valve_open)]


@dataclass(frozen=True)
class ControllerConfig:
    setpoint: float = 1050.0
    deadband: float = 2.0
    sample_period: float = 0.05
    offset_table: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_OFFSET_TABLE)
    )
    deflate_extra_delay: float = 1.0  # extra settle dwell after deflation, s
    settle_dwell: float = 0.5         # in-band time before 'settled', s

    def __post_init__(self) -> None:
        if self.deadband <= 0:
            raise ContractError("deadband must be positive")
        if self.sample_period <= 0:
            raise ContractError("sample period must be positive")
        if not (BAND_MIN <= self.setpoint <= BAND_MAX):
            raise PressureBandError(
                f"setpoint {self.setpoint} outside [{BAND_MIN}, {BAND_MAX}]"
            )


@dataclass(frozen=True)
class Actuation:
    pump_on: bool
    valve_open: bool


def controller_step(estimate: float, config: ControllerConfig) -> Actuation:
    """Bang-bang with deadband; never commands pump and valve together."""
    if estimate < config.setpoint - config.deadband:
        return Actuation(pump_on=True, valve_open=False)
    if estimate > config.setpoint + config.deadband:
        return Actuation(pump_on=False, valve_open=True)
    return Actuation(pump_on=False, valve_open=False)


class BubbleLoop:
    """One closed pressure loop: plant + sensor + controller + telemetry.

    ``step(dt)`` senses, corrects, decides and integrates one sample. The loop
    reports ``settled`` once the estimate has stayed inside the deadband for
    the dwell time (longer when the setpoint was approached by deflation,
    mirroring the slower exhaust path).
    """

    def __init__(
        self,
        bubble_id: int,
        params: PlantParams,
        config: ControllerConfig,
        initial_pressure: float = 1050.0,
        noise_seed: Optional[int] = None,
    ):
        self.bubble_id = bubble_id
        self.params = params
        self.config = config
        self.plant = make_plant(params, initial_pressure)
        self.venting = False
        self._rng = (
            np.random.default_rng(noise_seed) if noise_seed is not None else None
        )
        self._in_band_since: Optional[float] = None
        self._approach_was_deflation = False
        self.telemetry: list[tuple] = []
        self.last_estimate = initial_pressure

    # -- command surface ----------------------------------------------------

    def set_setpoint(self, setpoint: float) -> None:
        if not (BAND_MIN <= setpoint <= BAND_MAX):
            raise PressureBandError(f"setpoint {setpoint} outside the band")
        self.venting = False
        self._approach_was_deflation = setpoint < self.last_estimate
        self.config = replace(self.config, setpoint=setpoint)
        self._in_band_since = None

    def vent(self) -> None:
        """Latch the exhaust open until the pressure reaches the band floor."""
        self.venting = True
        self._in_band_since = None

    # -- loop ---------------------------------------------------------------

    def _sense(self) -> float:
        line = self.plant.line_pressure
        if self._rng is not None and self.params.sensor_sigma > 0:
            line += self._rng.normal(0.0, self.params.sensor_sigma)
        return line

    def step(self, dt: Optional[float] = None) -> None:
        dt = self.config.sample_period if dt is None else dt
        line = self._sense()
        estimate = offset_correct(
            line,
            self.plant.pump_on,
            self.plant.valve_open,
            self.config.offset_table,
        )
        self.last_estimate = estimate

        if self.venting:
            if estimate <= BAND_MIN:
                self.venting = False
                act = Actuation(False, False)
            else:
                act = Actuation(pump_on=False, valve_open=True)
        else:
            act = controller_step(estimate, self.config)

        self.plant = replace(
            self.plant, pump_on=act.pump_on, valve_open=act.valve_open
        )
        self.plant = step_plant(self.plant, dt, self.params)

        if abs(estimate - self.config.setpoint) <= self.config.deadband and not self.venting:
            if self._in_band_since is None:
                self._in_band_since = self.plant.time
        else:
            self._in_band_since = None

        self.telemetry.append(
            (
                self.plant.time,
                self.bubble_id,
                self.plant.bubble_pressure,
                estimate,
                int(act.pump_on),
                int(act.valve_open),
            )
        )

    @property
    def settled(self) -> bool:
        if self._in_band_since is None:
            return False
        dwell = self.config.settle_dwell
        if self._approach_was_deflation:
            dwell += self.config.deflate_extra_delay
        return (self.plant.time - self._in_band_since) >= dwell

    @property
    def time(self) -> float:
        return self.plant.time

    def telemetry_rows(self) -> list[str]:
        return [
            f"{t:.3f},{bid},{true:.4f},{est:.4f},{pump},{valve}"
            for t, bid, true, est, pump, valve in self.telemetry
        ]


# ---------------------------------------------------------------------------
# Command protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Command:
    verb: str                     # SET | GET | VENT
    bubble_id: int
    value: Optional[float] = None


@dataclass(frozen=True)
class Response:
    kind: str                     # ok | pressure | err
    bubble_id: Optional[int] = None
    value: Optional[float] = None
    reason: Optional[str] = None


def parse_command(line: str) -> Command:
    """Parse one newline-terminated protocol record; raises ConfigError with
    reason 'parse' semantics on malformed input."""
    if not line.endswith("\n"):
        raise ConfigError("command must be newline-terminated")
    parts = line.strip().split()
    if not parts:
        raise ConfigError("empty command")
    verb = parts[0]
    try:
        if verb == "SET" and len(parts) == 3:
            return Command("SET", int(parts[1]), float(parts[2]))
        if verb == "GET" and len(parts) == 2:
            return Command("GET", int(parts[1]))
        if verb == "VENT" and len(parts) == 2:
            return Command("VENT", int(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"bad command field: {exc}") from exc
    raise ConfigError(f"unrecognized command {line.strip()!r}")


def format_response(response: Response) -> str:
    if response.kind == "ok":
        return "OK"
    if response.kind == "pressure":
        return f"P {response.bubble_id} {response.value:.1f}"
    if response.kind == "err":
        return f"ERR {response.reason}"
    raise ContractError(f"unknown response kind {response.kind!r}")


class CommandStation:
    """Several independently controlled bubbles on one simulated clock.

    Commands are serialized (one in flight at a time); ``execute`` never
    raises, it answers ``ERR <reason>`` like the firmware would.
    """

    def __init__(
        self,
        n_bubbles: int = 2,
        params: Optional[PlantParams] = None,
        config: Optional[ControllerConfig] = None,
        initial_pressure: float = 1050.0,
        noise_seed: Optional[int] = None,
    ):
        params = params or PlantParams()
        config = config or ControllerConfig()
        self.loops = [
            BubbleLoop(
                i,
                params,
                config,
                initial_pressure=initial_pressure,
                noise_seed=None if noise_seed is None else noise_seed + i,
            )
            for i in range(n_bubbles)
        ]

    def execute(self, line: str) -> str:
        try:
            cmd = parse_command(line)
        except ConfigError:
            return format_response(Response("err", reason="parse"))
        if not (0 <= cmd.bubble_id < len(self.loops)):
            return format_response(Response("err", reason="id"))
        loop = self.loops[cmd.bubble_id]
        if cmd.verb == "SET":
            if not (BAND_MIN <= cmd.value <= BAND_MAX):
                return format_response(Response("err", reason="range"))
            loop.set_setpoint(cmd.value)
            return format_response(Response("ok"))
        if cmd.verb == "GET":
            return format_response(
                Response("pressure", bubble_id=cmd.bubble_id, value=loop.last_estimate)
            )
        loop.vent()
        return format_response(Response("ok"))

    def step(self, dt: Optional[float] = None) -> None:
        for loop in self.loops:
            loop.step(dt)

    def run_until_settled(
        self, bubble_id: int = 0, timeout: float = 120.0
    ) -> bool:
        loop = self.loops[bubble_id]
        start = loop.time
        while not loop.settled:
            if loop.time - start > timeout:
                return False
            self.step()
        return True

    @property
    def time(self) -> float:
        return self.loops[0].time

    def telemetry_rows(self) -> list[str]:
        rows: list[tuple] = []
        for loop in self.loops:
            rows.extend(loop.telemetry)
        rows.sort(key=lambda r: (r[0], r[1]))
        return [
            f"{t:.3f},{bid},{true:.4f},{est:.4f},{pump},{valve}"
            for t, bid, true, est, pump, valve in rows
        ]
