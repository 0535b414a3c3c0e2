"""System instances: UE placement, channel gains, workload partition, constants.

A :class:`Scenario` is an immutable description of one communication round:
the radio constants, the participating FL UEs (sorted by descending squared
channel gain), the coexisting high-bandwidth (HB) downlink UEs, and the
per-UE average-rate floor the HB traffic must keep.

Scenarios are generated deterministically from a seed (UEs uniform over a
disk cell, free-space path loss, the training set split by uniform random
ratios) or loaded from a JSON file; see ``docs/scenario.schema.json`` for
the file layout. All stored quantities are SI units (Hz, W, W/Hz, bit,
bit/s, s, J); helper converters from dBm are provided for convenience.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

__all__ = [
    "RadioConstants",
    "FlWorkload",
    "UeRecord",
    "Scenario",
    "ScenarioError",
    "ScenarioFormatError",
    "dbm_to_watt",
    "freespace_gain_sq",
    "generate",
    "load",
    "save",
    "DEFAULTS",
]

SPEED_OF_LIGHT = 299_792_458.0  # m/s


class ScenarioError(ValueError):
    """Invalid scenario contents (bad parameter values, empty FL set, ...)."""


class ScenarioFormatError(ScenarioError):
    """A scenario document does not match the schema; names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"scenario field '{field_name}': {message}")


def dbm_to_watt(dbm: float) -> float:
    return 1e-3 * 10.0 ** (dbm / 10.0)


def freespace_gain_sq(distance_m: float, carrier_freq_hz: float) -> float:
    """Free-space power gain ``(c / (4*pi*d*f))^2`` (dimensionless)."""
    if distance_m <= 0:
        raise ScenarioError(f"distance must be > 0, got {distance_m}")
    amp = SPEED_OF_LIGHT / (4.0 * math.pi * distance_m * carrier_freq_hz)
    return amp * amp


@dataclass(frozen=True)
class RadioConstants:
    """Cell-wide radio parameters shared by every link."""

    num_rbs: int                 # K, resource blocks shared by all traffic
    subcarrier_bw: float         # B, Hz per RB
    noise_psd: float             # N0, W/Hz
    bs_power_per_rb: float       # Pd, W spent by the BS on each downlink RB
    ue_max_power: float          # Pmax, W, uplink transmit-power cap
    carrier_freq: float          # Hz
    tti_len: float               # slot length of the time-raw model, s

    def __post_init__(self):
        if self.num_rbs < 1:
            raise ScenarioError(f"num_rbs must be >= 1, got {self.num_rbs}")
        for name in ("subcarrier_bw", "noise_psd", "bs_power_per_rb",
                     "ue_max_power", "carrier_freq", "tti_len"):
            value = getattr(self, name)
            if not (value > 0):
                raise ScenarioError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class FlWorkload:
    """Per-UE training task and energy model constants."""

    model_bits: float            # D, bits broadcast down and uploaded back
    epochs: int                  # I
    cycles_per_sample: float     # C, CPU cycles to train one sample
    local_samples: int           # Theta
    f_max: float                 # cycles/s, fastest local CPU speed
    kappa: float                 # J*s^2/cycles^3, switched-capacitance constant
    energy_weight: float         # lambda, 1/J, latency-vs-energy trade-off

    def __post_init__(self):
        if not (self.model_bits > 0):
            raise ScenarioError(f"model_bits must be > 0, got {self.model_bits}")
        if self.local_samples < 1:
            raise ScenarioError(f"local_samples must be >= 1, got {self.local_samples}")
        if not (self.f_max > 0):
            raise ScenarioError(f"f_max must be > 0, got {self.f_max}")
        if not (self.kappa > 0):
            raise ScenarioError(f"kappa must be > 0, got {self.kappa}")
        if self.energy_weight < 0:
            raise ScenarioError(f"energy_weight must be >= 0, got {self.energy_weight}")


@dataclass(frozen=True)
class UeRecord:
    """One UE: id, class ('fl' or 'hb'), position, squared channel gain."""

    id: int
    kind: str                    # 'fl' | 'hb'
    position: tuple[float, float]
    gain_sq: float               # h^2, dimensionless power gain
    workload: FlWorkload | None = None   # present iff kind == 'fl'

    def __post_init__(self):
        if self.kind not in ("fl", "hb"):
            raise ScenarioError(f"kind must be 'fl' or 'hb', got {self.kind!r}")
        if not (self.gain_sq > 0):
            raise ScenarioError(f"gain_sq must be > 0, got {self.gain_sq}")
        if self.kind == "fl" and self.workload is None:
            raise ScenarioError("FL UE needs a workload")


@dataclass(frozen=True)
class Scenario:
    """Immutable system instance; safe to share across threads/processes."""

    radio: RadioConstants
    fl_ues: tuple[UeRecord, ...]         # sorted descending by gain_sq
    hb_ues: tuple[UeRecord, ...]
    hb_threshold: float                  # theta, bit/s average-rate floor per HB UE
    rng_seed: int = 0
    warnings: tuple[str, ...] = field(default_factory=tuple, compare=False)

    def __post_init__(self):
        if len(self.fl_ues) < 1:
            raise ScenarioError("at least one FL UE is required")
        gains = [ue.gain_sq for ue in self.fl_ues]
        if any(g1 < g2 for g1, g2 in zip(gains, gains[1:])):
            raise ScenarioError("fl_ues must be sorted by descending gain_sq")
        if not (self.hb_threshold >= 0):
            raise ScenarioError(f"hb_threshold must be >= 0, got {self.hb_threshold}")

    @property
    def num_fl(self) -> int:
        return len(self.fl_ues)

    @property
    def num_hb(self) -> int:
        return len(self.hb_ues)

    def fl_gains(self) -> np.ndarray:
        return np.array([ue.gain_sq for ue in self.fl_ues])

    def hb_gains(self) -> np.ndarray:
        return np.array([ue.gain_sq for ue in self.hb_ues])

    def with_energy_weight(self, lam: float) -> "Scenario":
        """Copy with every FL UE's energy weight replaced by ``lam``."""
        fl = tuple(
            dataclasses.replace(ue, workload=dataclasses.replace(ue.workload, energy_weight=lam))
            for ue in self.fl_ues
        )
        return dataclasses.replace(self, fl_ues=fl)

    def with_radio(self, **kwargs) -> "Scenario":
        return dataclasses.replace(self, radio=dataclasses.replace(self.radio, **kwargs))

    def with_threshold(self, theta: float) -> "Scenario":
        return dataclasses.replace(self, hb_threshold=theta)


#: Default generation parameters. Radio and workload values follow the
#: common simulation setup for a 10-UE round in a 50 m cell; the HB floor
#: is 600 kbit/s per HB UE.
DEFAULTS: dict[str, Any] = {
    "num_fl": 10,                       # S
    "num_hb": 20,                       # |E|
    "num_rbs": 10,                      # K
    "subcarrier_bw": 60e3,              # B
    "noise_psd": dbm_to_watt(-174.0),   # N0
    "bs_power_per_rb": dbm_to_watt(30.0),
    "ue_max_power": dbm_to_watt(23.0),
    "carrier_freq": 3.5e9,
    "tti_len": 1e-3,
    "cell_radius": 50.0,                # m
    "hb_threshold": 600e3,              # bit/s
    "model_bits": 100e6,                # D
    "epochs": 20,
    "cycles_per_sample": 15 * 32 * 32 * 3 * 32,   # 15 cycles/bit * bits per sample
    "f_max": 2e9,
    "kappa": 1e-28,
    "energy_weight": 0.05,
    "total_samples": 60_000,
    "homogeneous_fl": False,
    "min_distance": 1.0,                # m, keeps the free-space model finite
}


def _split_samples(rng: np.random.Generator, total: int, n: int) -> list[int]:
    # Uniform random ratios, floored; the rounding residual goes to the last UE
    # so the total is conserved exactly. Each UE keeps at least one sample.
    ratios = rng.random(n)
    shares = ratios / ratios.sum() * total
    counts = [max(1, int(math.floor(s))) for s in shares]
    counts[-1] = max(1, total - sum(counts[:-1]))
    return counts


def generate(seed: int, overrides: Mapping[str, Any] | None = None) -> Scenario:
    """Deterministically generate a scenario from ``seed``.

    ``overrides`` may replace any key of :data:`DEFAULTS`. UEs are placed
    uniformly over the disk cell (BS at the center), squared gains follow
    free-space path loss, and the training set is split by uniform random
    ratios. FL UEs are sorted by descending gain after generation. With
    ``homogeneous_fl=True`` all FL UEs get the first UE's gain and an equal
    sample share (remainder to the last UE).
    """
    params = dict(DEFAULTS)
    if overrides:
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ScenarioError(f"unknown override keys: {sorted(unknown)}")
        params.update(overrides)

    if params["num_fl"] < 1:
        raise ScenarioError("num_fl must be >= 1")
    if params["num_hb"] < 0:
        raise ScenarioError("num_hb must be >= 0")
    if params["cell_radius"] <= 0:
        raise ScenarioError("cell_radius must be > 0")
    if params["num_rbs"] < 1:
        raise ScenarioError("num_rbs must be >= 1")

    radio = RadioConstants(
        num_rbs=int(params["num_rbs"]),
        subcarrier_bw=float(params["subcarrier_bw"]),
        noise_psd=float(params["noise_psd"]),
        bs_power_per_rb=float(params["bs_power_per_rb"]),
        ue_max_power=float(params["ue_max_power"]),
        carrier_freq=float(params["carrier_freq"]),
        tti_len=float(params["tti_len"]),
    )

    rng = np.random.default_rng(seed)
    s, e = int(params["num_fl"]), int(params["num_hb"])
    radius, dmin = float(params["cell_radius"]), float(params["min_distance"])

    def draw_positions(n: int) -> list[tuple[float, float]]:
        # Uniform over the disk area: radius ~ R*sqrt(U).
        rr = radius * np.sqrt(rng.random(n))
        ang = 2.0 * math.pi * rng.random(n)
        return [(r * math.cos(a), r * math.sin(a)) for r, a in zip(rr, ang)]

    fl_pos = draw_positions(s)
    hb_pos = draw_positions(e)
    samples = _split_samples(rng, int(params["total_samples"]), s)

    def gain_at(pos: tuple[float, float]) -> float:
        d = max(math.hypot(*pos), dmin)
        return freespace_gain_sq(d, radio.carrier_freq)

    fl_gains = [gain_at(p) for p in fl_pos]
    if params["homogeneous_fl"]:
        fl_gains = [fl_gains[0]] * s
        per = int(params["total_samples"]) // s
        samples = [per] * s
        samples[-1] = int(params["total_samples"]) - per * (s - 1)

    def workload_for(theta_s: int) -> FlWorkload:
        return FlWorkload(
            model_bits=float(params["model_bits"]),
            epochs=int(params["epochs"]),
            cycles_per_sample=float(params["cycles_per_sample"]),
            local_samples=int(theta_s),
            f_max=float(params["f_max"]),
            kappa=float(params["kappa"]),
            energy_weight=float(params["energy_weight"]),
        )

    fl = [
        UeRecord(id=i, kind="fl", position=fl_pos[i], gain_sq=fl_gains[i],
                 workload=workload_for(samples[i]))
        for i in range(s)
    ]
    fl.sort(key=lambda ue: -ue.gain_sq)
    fl = [dataclasses.replace(ue, id=i) for i, ue in enumerate(fl)]
    hb = [
        UeRecord(id=i, kind="hb", position=hb_pos[i], gain_sq=gain_at(hb_pos[i]))
        for i in range(e)
    ]

    return Scenario(
        radio=radio,
        fl_ues=tuple(fl),
        hb_ues=tuple(hb),
        hb_threshold=float(params["hb_threshold"]),
        rng_seed=int(seed),
    )


# ---------------------------------------------------------------------------
# JSON round-trip

_RADIO_FIELDS = {
    "num_rbs": int, "subcarrier_bw": float, "noise_psd": float,
    "bs_power_per_rb": float, "ue_max_power": float, "carrier_freq": float,
    "tti_len": float,
}
_WORKLOAD_FIELDS = {
    "model_bits": float, "epochs": int, "cycles_per_sample": float,
    "local_samples": int, "f_max": float, "kappa": float, "energy_weight": float,
}


def _require(doc: Mapping[str, Any], key: str, ctx: str) -> Any:
    if key not in doc:
        raise ScenarioFormatError(f"{ctx}{key}", "missing")
    return doc[key]


def _coerce(value: Any, typ, field_name: str):
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(field_name, f"expected {typ.__name__}: {exc}") from exc


def _ue_from_doc(doc: Mapping[str, Any], kind: str, ctx: str) -> UeRecord:
    pos = _require(doc, "position", ctx)
    if not (isinstance(pos, (list, tuple)) and len(pos) == 2):
        raise ScenarioFormatError(f"{ctx}position", "expected a 2-element array")
    workload = None
    if kind == "fl":
        wdoc = _require(doc, "workload", ctx)
        workload = FlWorkload(**{
            k: _coerce(_require(wdoc, k, f"{ctx}workload."), t, f"{ctx}workload.{k}")
            for k, t in _WORKLOAD_FIELDS.items()
        })
    return UeRecord(
        id=_coerce(_require(doc, "id", ctx), int, f"{ctx}id"),
        kind=kind,
        position=(float(pos[0]), float(pos[1])),
        gain_sq=_coerce(_require(doc, "gain_sq", ctx), float, f"{ctx}gain_sq"),
        workload=workload,
    )


def scenario_to_dict(sc: Scenario) -> dict[str, Any]:
    def ue_doc(ue: UeRecord) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "id": ue.id, "position": list(ue.position), "gain_sq": ue.gain_sq,
        }
        if ue.workload is not None:
            doc["workload"] = dataclasses.asdict(ue.workload)
        return doc

    return {
        "radio": dataclasses.asdict(sc.radio),
        "fl_ues": [ue_doc(u) for u in sc.fl_ues],
        "hb_ues": [ue_doc(u) for u in sc.hb_ues],
        "hb_threshold": sc.hb_threshold,
        "rng_seed": sc.rng_seed,
    }


def scenario_from_dict(doc: Mapping[str, Any]) -> Scenario:
    rdoc = _require(doc, "radio", "")
    radio = RadioConstants(**{
        k: _coerce(_require(rdoc, k, "radio."), t, f"radio.{k}")
        for k, t in _RADIO_FIELDS.items()
    })
    fl_docs = _require(doc, "fl_ues", "")
    hb_docs = _require(doc, "hb_ues", "")
    if not isinstance(fl_docs, list) or not fl_docs:
        raise ScenarioFormatError("fl_ues", "expected a non-empty array")
    if not isinstance(hb_docs, list):
        raise ScenarioFormatError("hb_ues", "expected an array")
    fl = [_ue_from_doc(d, "fl", f"fl_ues[{i}].") for i, d in enumerate(fl_docs)]
    hb = [_ue_from_doc(d, "hb", f"hb_ues[{i}].") for i, d in enumerate(hb_docs)]

    warnings: list[str] = []
    gains = [ue.gain_sq for ue in fl]
    if any(g1 < g2 for g1, g2 in zip(gains, gains[1:])):
        fl.sort(key=lambda ue: -ue.gain_sq)
        warnings.append("fl_ues were not sorted by descending gain_sq; repaired")

    return Scenario(
        radio=radio,
        fl_ues=tuple(fl),
        hb_ues=tuple(hb),
        hb_threshold=_coerce(_require(doc, "hb_threshold", ""), float, "hb_threshold"),
        rng_seed=int(doc.get("rng_seed", 0)),
        warnings=tuple(warnings),
    )


def save(sc: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(sc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError("<document>", f"invalid JSON: {exc}") from exc
    return scenario_from_dict(doc)
