"""Synthetic smart-home communication traces and CSV ingestion.

Each smart-home device type emits packets with a characteristic repeating
cycle of inter-packet gaps.  This module carries the built-in signature
table, synthesizes labeled event streams from it, and reads/writes the
trace CSV interchange format (header ``device,timestamp,digest``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

__all__ = [
    "BURST_GAP",
    "DEFAULT_JITTER_FRAC",
    "DEFAULT_MANAGEMENT_PROTOCOLS",
    "CommRecord",
    "DeviceProfile",
    "TraceSet",
    "builtin_profiles",
    "format_timestamp",
    "ingest_csv",
    "load_profiles",
    "save_profiles",
    "synth_trace",
    "trace_csv_bytes",
    "write_csv",
]

# Spacing of the near-zero-gap packets inside a burst (50 microseconds).
BURST_GAP = 5e-05

# Multiplicative jitter applied to every gap unless a profile overrides it.
DEFAULT_JITTER_FRAC = 0.02

# Labels dropped on ingestion: network management / discovery chatter that a
# blockchain ledger would never record as device communications.
DEFAULT_MANAGEMENT_PROTOCOLS = frozenset(
    {"SMTP", "DNS", "MDNS", "NTP", "DHCP", "ARP", "ICMP", "IGMP", "SSDP", "LLDP"}
)

_CSV_HEADER = ("device", "timestamp", "digest")

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class DeviceProfile:
    """Cyclic inter-packet gap signature of one device type.

    ``gap_cycle`` lists the repeating gap sequence in seconds.  When
    ``burst_counts`` is given, ``burst_counts[i]`` near-zero-gap packets
    (spaced ``BURST_GAP`` apart) are emitted immediately before gap ``i``;
    it may be shorter than ``gap_cycle`` (missing entries mean no burst).
    """

    name: str
    gap_cycle: tuple[float, ...]
    jitter_frac: float = DEFAULT_JITTER_FRAC
    burst_counts: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "gap_cycle", tuple(float(g) for g in self.gap_cycle))
        object.__setattr__(self, "burst_counts", tuple(int(b) for b in self.burst_counts))
        if not self.name:
            raise ValueError("profile name must be non-empty")
        if not self.gap_cycle:
            raise ValueError(f"{self.name}: gap_cycle must be non-empty")
        if any(g <= 0 for g in self.gap_cycle):
            raise ValueError(f"{self.name}: every gap must be > 0")
        if not 0.0 <= self.jitter_frac < 1.0:
            raise ValueError(f"{self.name}: jitter_frac must be in [0, 1)")
        if len(self.burst_counts) > len(self.gap_cycle):
            raise ValueError(f"{self.name}: burst_counts longer than gap_cycle")
        if any(b < 0 for b in self.burst_counts):
            raise ValueError(f"{self.name}: burst counts must be >= 0")

    def records_per_cycle(self) -> int:
        return len(self.gap_cycle) + sum(self.burst_counts)


@dataclass(frozen=True)
class CommRecord:
    """One device communication event."""

    device: str
    timestamp: float
    payload_digest: bytes | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")


# Built-in signature table.  Rows reading "X or Y" alternate [X, Y]; the
# burst row keeps its 9 sub-millisecond packets as burst_counts.
_BUILTIN_TABLE: tuple[tuple[str, tuple[float, ...], tuple[int, ...]], ...] = (
    ("Smart_Things", (0.207, 58.0), ()),
    ("Amazon_Echo", (0.217, 30.0, 0.004, 30.0), ()),
    ("TPLink_Camera", (0.12, 61.0), ()),
    ("Samsung_Camera", (0.165, 30.0), ()),
    ("Drop_Camera", (1.03, 0.2), ()),
    ("Insteon_Camera2", (0.216, 300.0), (9,)),
    ("Baby_Monitor", (600.0, 0.28), ()),
    ("TPLink_Smartplug_A", (0.24, 236.0), ()),
    ("TPLink_Smartplug_B", (0.12, 236.0), ()),
    ("iHome", (60.0, 0.205), ()),
    ("Nest_Smockalarm", (0.207, 0.015), ()),
    ("Netatmo_Weather", (1.72, 0.33), ()),
    ("Sleep_Sensor", (10.0, 0.276), ()),
    ("Lifx_Smartbulb", (1.92, 60.0), ()),
    ("Triby_Speaker", (120.0, 0.3, 120.0, 0.3, 56.0, 0.3), ()),
    ("Pix_Photoframe", (0.31, 0.3, 65.0, 650.0), ()),
    ("HP_Printer", (90.0,), ()),
)


def builtin_profiles(jitter_frac: float = DEFAULT_JITTER_FRAC) -> list[DeviceProfile]:
    """Return the built-in device signature set (one profile per table row).

    The two identical-named smart plug rows are disambiguated with
    ``_A``/``_B`` suffixes.  ``jitter_frac`` applies to every profile.
    """
    return [
        DeviceProfile(name, cycle, jitter_frac, bursts)
        for name, cycle, bursts in _BUILTIN_TABLE
    ]


class TraceSet:
    """Timestamp-sorted communication events for a set of devices.

    Backed by parallel arrays: ``device_names`` is the label vocabulary
    (sorted), ``codes[i]`` indexes into it, ``timestamps`` is float64
    seconds since trace start.  ``payload_digests`` is a sparse
    ``{row_index: bytes}`` map (empty when no payloads were supplied).
    """

    __slots__ = ("device_names", "codes", "timestamps", "payload_digests")

    def __init__(
        self,
        device_names: tuple[str, ...],
        codes: np.ndarray,
        timestamps: np.ndarray,
        payload_digests: dict[int, bytes] | None = None,
    ):
        self.device_names = tuple(device_names)
        self.codes = np.asarray(codes, dtype=np.int32)
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.payload_digests = dict(payload_digests or {})
        if self.codes.shape != self.timestamps.shape:
            raise ValueError("codes and timestamps must be parallel")
        if len(self.timestamps) and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be sorted non-decreasing")

    @classmethod
    def from_events(
        cls,
        devices: list[str],
        timestamps: np.ndarray,
        payloads: dict[int, bytes] | None = None,
    ) -> "TraceSet":
        """Build a sorted TraceSet from unordered parallel event lists.

        Sort order is (timestamp, device name), ties beyond that keep
        input order.
        """
        timestamps = np.asarray(timestamps, dtype=np.float64)
        if len(devices) != len(timestamps):
            raise ValueError("devices and timestamps must be parallel")
        if len(timestamps) and (not np.all(np.isfinite(timestamps)) or timestamps.min() < 0):
            raise ValueError("timestamps must be finite and >= 0")
        names = tuple(sorted(set(devices)))
        index = {d: i for i, d in enumerate(names)}
        codes = np.fromiter((index[d] for d in devices), dtype=np.int32, count=len(devices))
        order = np.lexsort((codes, timestamps))
        payloads = payloads or {}
        remapped = {}
        if payloads:
            inverse = np.empty(len(order), dtype=np.int64)
            inverse[order] = np.arange(len(order))
            remapped = {int(inverse[i]): v for i, v in payloads.items()}
        return cls(names, codes[order], timestamps[order], remapped)

    @classmethod
    def from_records(cls, records: list[CommRecord]) -> "TraceSet":
        payloads = {
            i: r.payload_digest for i, r in enumerate(records) if r.payload_digest is not None
        }
        return cls.from_events(
            [r.device for r in records],
            np.array([r.timestamp for r in records], dtype=np.float64),
            payloads,
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceSet):
            return NotImplemented
        return (
            self.device_names == other.device_names
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.timestamps, other.timestamps)
            and self.payload_digests == other.payload_digests
        )

    @property
    def devices(self) -> set[str]:
        present = np.unique(self.codes)
        return {self.device_names[c] for c in present}

    @property
    def duration(self) -> float:
        """Observed span: the last event timestamp (0 for an empty trace)."""
        return float(self.timestamps[-1]) if len(self.timestamps) else 0.0

    @property
    def records(self) -> list[CommRecord]:
        return [
            CommRecord(
                self.device_names[c],
                float(t),
                self.payload_digests.get(i),
            )
            for i, (c, t) in enumerate(zip(self.codes, self.timestamps))
        ]

    def filter_devices(self, keep: set[str]) -> "TraceSet":
        """Restrict to events whose device label is in ``keep``."""
        keep_codes = {i for i, d in enumerate(self.device_names) if d in keep}
        mask = np.isin(self.codes, sorted(keep_codes))
        idx = np.nonzero(mask)[0]
        devices = [self.device_names[c] for c in self.codes[idx]]
        payloads = {
            int(j): self.payload_digests[int(i)]
            for j, i in enumerate(idx)
            if int(i) in self.payload_digests
        }
        return TraceSet.from_events(devices, self.timestamps[idx], payloads)


def _emit_profile(profile: DeviceProfile, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Timestamps for one device: phase offset, then jittered cycle gaps."""
    gaps = np.asarray(profile.gap_cycle, dtype=np.float64)
    ncols = len(gaps)
    bursts = np.zeros(ncols, dtype=np.int64)
    bursts[: len(profile.burst_counts)] = profile.burst_counts
    j = profile.jitter_frac

    phase = rng.uniform(0.0, gaps[0])
    if phase > duration:
        return np.empty(0, dtype=np.float64)

    min_cycle = gaps.sum() * (1.0 - j) + bursts.sum() * BURST_GAP
    n_cycles = int(np.ceil((duration - phase) / min_cycle)) + 2
    factors = rng.uniform(1.0 - j, 1.0 + j, size=(n_cycles, ncols)) if j > 0 else None

    per_cycle = int(bursts.sum()) + ncols
    inc = np.empty((n_cycles, per_cycle), dtype=np.float64)
    col = 0
    for i in range(ncols):
        if bursts[i]:
            inc[:, col : col + bursts[i]] = BURST_GAP
            col += int(bursts[i])
        inc[:, col] = gaps[i] * factors[:, i] if factors is not None else gaps[i]
        col += 1

    ts = np.empty(n_cycles * per_cycle + 1, dtype=np.float64)
    ts[0] = phase
    np.cumsum(inc.ravel(), out=ts[1:])
    ts[1:] += phase
    return ts[ts <= duration]


def synth_trace(profiles: list[DeviceProfile], duration: float, seed: int) -> TraceSet:
    """Synthesize a merged multi-device trace.

    Per profile, the first record falls at an independent phase offset
    uniform in [0, first gap); subsequent records advance through the gap
    cycle, each gap scaled by a factor uniform in [1-jitter, 1+jitter].
    Burst entries insert the configured number of extra records spaced
    ``BURST_GAP`` apart before their gap.  Records beyond ``duration`` are
    dropped.  Deterministic for a fixed (profiles, duration, seed).
    """
    if duration <= 0:
        raise ValueError("duration must be > 0")
    if not profiles:
        raise ValueError("profiles must be non-empty")
    devices: list[str] = []
    chunks: list[np.ndarray] = []
    for k, profile in enumerate(profiles):
        rng = np.random.default_rng((seed & _MASK64, k))
        ts = _emit_profile(profile, duration, rng)
        chunks.append(ts)
        devices.extend([profile.name] * len(ts))
    all_ts = np.concatenate(chunks) if chunks else np.empty(0)
    return TraceSet.from_events(devices, all_ts)


def format_timestamp(ts: float) -> str:
    """Exact decimal rendering with at least 6 fractional digits.

    Uses the shortest round-trip form (padded with zeros), falling back to
    the full decimal expansion when repr switches to scientific notation.
    ``float(format_timestamp(x)) == x`` always holds.
    """
    r = repr(float(ts))
    if "e" in r or "E" in r:
        r = format(Decimal(ts), "f")
    if "." not in r:
        r += ".0"
    whole, frac = r.split(".")
    return f"{whole}.{frac.ljust(6, '0')}"


def trace_csv_bytes(trace: TraceSet) -> bytes:
    lines = [",".join(_CSV_HEADER)]
    names = trace.device_names
    for i, (c, t) in enumerate(zip(trace.codes, trace.timestamps)):
        digest = trace.payload_digests.get(i)
        lines.append(
            f"{names[c]},{format_timestamp(float(t))},{digest.hex() if digest else ''}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_csv(trace: TraceSet, path: str | Path) -> None:
    Path(path).write_bytes(trace_csv_bytes(trace))


def ingest_csv(
    path: str | Path,
    blocklist: frozenset[str] | set[str] = DEFAULT_MANAGEMENT_PROTOCOLS,
) -> TraceSet:
    """Read a trace CSV (``device,timestamp[,digest]`` after a header row).

    Rows whose device label is in ``blocklist`` are dropped.  Input rows
    need not be time-sorted.  Malformed rows raise ValueError naming the
    1-based line number.
    """
    devices: list[str] = []
    timestamps: list[float] = []
    payloads: dict[int, bytes] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                header = tuple(col.strip().lower() for col in row)
                if header[:2] != _CSV_HEADER[:2]:
                    raise ValueError(
                        f"line 1: expected header starting 'device,timestamp', got {row!r}"
                    )
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) not in (2, 3):
                raise ValueError(f"line {lineno}: expected 2 or 3 fields, got {len(row)}")
            device = row[0].strip()
            if not device:
                raise ValueError(f"line {lineno}: empty device label")
            try:
                ts = float(row[1])
            except ValueError:
                raise ValueError(f"line {lineno}: bad timestamp {row[1]!r}") from None
            if not np.isfinite(ts) or ts < 0:
                raise ValueError(f"line {lineno}: timestamp must be finite and >= 0")
            if device in blocklist:
                continue
            digest_hex = row[2].strip() if len(row) == 3 else ""
            if digest_hex:
                try:
                    payloads[len(devices)] = bytes.fromhex(digest_hex)
                except ValueError:
                    raise ValueError(f"line {lineno}: bad digest hex") from None
            devices.append(device)
            timestamps.append(ts)
    return TraceSet.from_events(devices, np.array(timestamps, dtype=np.float64), payloads)


def save_profiles(profiles: list[DeviceProfile], path: str | Path) -> None:
    payload = [
        {
            "name": p.name,
            "gap_cycle": list(p.gap_cycle),
            "jitter_frac": p.jitter_frac,
            "burst_counts": list(p.burst_counts),
        }
        for p in profiles
    ]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_profiles(path: str | Path) -> list[DeviceProfile]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("profile file must be a JSON array")
    out = []
    for entry in raw:
        out.append(
            DeviceProfile(
                entry["name"],
                tuple(entry["gap_cycle"]),
                float(entry.get("jitter_frac", DEFAULT_JITTER_FRAC)),
                tuple(entry.get("burst_counts") or ()),
            )
        )
    return out
