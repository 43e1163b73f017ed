"""Timestamp obfuscation transforms and their composition.

Four defenses distort the temporal fingerprint an attacker can read from a
public ledger: random per-transaction delays, ledgers shared by several
devices, multi-packet transactions, and spoofed (fake) transactions.  Every
transform maps to a fresh LedgerSet whose chains are re-derived in the new
commit order and whose provenance records the applied stage.  All transforms
are pure functions of (input, params); randomness comes only from the seeds
carried in the parameter objects.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ledger import Ledger, LedgerSet, _ledger_set_from_events, build_baseline
from .seeds import mix_seed
from .trace import TraceSet

__all__ = [
    "AggregateParams",
    "DelayParams",
    "MergeParams",
    "PipelineStage",
    "SpoofParams",
    "TRANSFORM_NAMES",
    "aggregate_packets",
    "compose",
    "delay_transactions",
    "load_pipeline",
    "merge_ledgers",
    "parse_pipeline",
    "spoof_transactions",
]

_MASK64 = (1 << 64) - 1

# Spoofed-timestamp placement laws: "gap" picks an insertion slot uniformly
# among consecutive transaction pairs (every slot equally likely, so short
# signature gaps get chopped as often as long ones); "interval" draws the
# timestamp uniformly over the ledger's active [min_ts, max_ts] span.
SPOOF_SAMPLERS = ("gap", "interval")
DEFAULT_SPOOF_SAMPLER = "gap"

TRANSFORM_NAMES = ("delay", "merge", "aggregate", "spoof")


@dataclass(frozen=True)
class DelayParams:
    d_max: float
    seed: int

    def __post_init__(self):
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")


@dataclass(frozen=True)
class MergeParams:
    devices_per_ledger: int
    seed: int

    def __post_init__(self):
        if self.devices_per_ledger < 1:
            raise ValueError("devices_per_ledger must be >= 1")


@dataclass(frozen=True)
class AggregateParams:
    packets_per_tx: int
    max_span: float = 0.0

    def __post_init__(self):
        if self.packets_per_tx < 1:
            raise ValueError("packets_per_tx must be >= 1")
        if self.max_span < 0:
            raise ValueError("max_span must be >= 0 (0 disables the span limit)")


@dataclass(frozen=True)
class SpoofParams:
    ratio: float
    seed: int
    sampler: str = DEFAULT_SPOOF_SAMPLER

    def __post_init__(self):
        if self.ratio < 0:
            raise ValueError("ratio must be >= 0")
        if self.sampler not in SPOOF_SAMPLERS:
            raise ValueError(f"sampler must be one of {SPOOF_SAMPLERS}")


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def _reordered_ledger(ledger: Ledger, new_ts: np.ndarray, salts: tuple[bytes, ...]) -> Ledger:
    """Rebuild one ledger with updated timestamps, committed in sorted order."""
    order = np.argsort(new_ts, kind="stable")
    payloads = {}
    if ledger.payloads:
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[order] = np.arange(len(order))
        payloads = {int(inverse[i]): p for i, p in ledger.payloads.items()}
    return Ledger(
        ledger_id=ledger.ledger_id,
        timestamps=new_ts[order],
        device_codes=ledger.device_codes[order],
        spoofed=ledger.spoofed[order],
        key_salt=ledger.key_salt[order],
        key_index=ledger.key_index[order],
        device_names=ledger.device_names,
        salts=salts,
        payloads=payloads,
    )


def delay_transactions(ledger_set: LedgerSet, params: DelayParams) -> LedgerSet:
    """Shift every transaction by an independent delay uniform in [0, d_max].

    Within each ledger, transactions are re-sorted by the delayed timestamp
    and the chain is rebuilt in that commit order (an event pair closer than
    d_max may therefore swap positions).  Public keys stay with their
    transactions.
    """
    rng = np.random.default_rng(params.seed & _MASK64)
    new_ledgers = []
    for ledger in ledger_set.ledgers:
        delays = rng.uniform(0.0, params.d_max, len(ledger)) if params.d_max > 0 else np.zeros(len(ledger))
        new_ledgers.append(_reordered_ledger(ledger, ledger.timestamps + delays, ledger_set.salts))
    provenance = ledger_set.provenance + (
        {"transform": "delay", "params": {"d_max": params.d_max, "seed": params.seed}},
    )
    return LedgerSet(new_ledgers, ledger_set.device_names, ledger_set.salts, provenance)


def merge_ledgers(ledger_set: LedgerSet, params: MergeParams) -> LedgerSet:
    """Randomly group per-device ledgers and interleave each group by time.

    Requires the input to be partitioned per device (one device's
    transactions per ledger).  Devices are shuffled by the seed and chunked
    into groups of ``devices_per_ledger`` (the last group may be smaller; a
    group size exceeding the device count yields a single shared ledger).
    """
    owners = [l.device for l in ledger_set.ledgers]
    if any(owner is None for owner in owners) or len(set(owners)) != len(owners):
        raise ValueError("merge requires a ledger set partitioned per device")
    rng = np.random.default_rng(params.seed & _MASK64)
    order = rng.permutation(len(ledger_set.ledgers))
    k = params.devices_per_ledger
    new_ledgers = []
    for g, start in enumerate(range(0, len(order), k)):
        members = [ledger_set.ledgers[i] for i in order[start : start + k]]
        ts = np.concatenate([m.timestamps for m in members])
        sort = np.argsort(ts, kind="stable")
        offset = 0
        merged_payloads = {}
        for m in members:
            for i, p in m.payloads.items():
                merged_payloads[offset + i] = p
            offset += len(m)
        payloads = {}
        if merged_payloads:
            inverse = np.empty(len(sort), dtype=np.int64)
            inverse[sort] = np.arange(len(sort))
            payloads = {int(inverse[i]): p for i, p in merged_payloads.items()}
        new_ledgers.append(
            Ledger(
                ledger_id=f"L{g:03d}",
                timestamps=ts[sort],
                device_codes=np.concatenate([m.device_codes for m in members])[sort],
                spoofed=np.concatenate([m.spoofed for m in members])[sort],
                key_salt=np.concatenate([m.key_salt for m in members])[sort],
                key_index=np.concatenate([m.key_index for m in members])[sort],
                device_names=ledger_set.device_names,
                salts=ledger_set.salts,
                payloads=payloads,
            )
        )
    provenance = ledger_set.provenance + (
        {"transform": "merge", "params": {"devices_per_ledger": k, "seed": params.seed}},
    )
    return LedgerSet(new_ledgers, ledger_set.device_names, ledger_set.salts, provenance)


def _run_ends(ts: np.ndarray, k: int, max_span: float) -> np.ndarray:
    """Indices of the last record of each aggregation run."""
    n = len(ts)
    if max_span <= 0:
        ends = np.arange(k - 1, n, k)
        if n % k:
            ends = np.append(ends, n - 1)
        return ends
    ends = []
    i = 0
    while i < n:
        j_span = int(np.searchsorted(ts, ts[i] + max_span, side="right"))
        j = min(i + k, max(j_span, i + 1))
        ends.append(j - 1)
        i = j
    return np.asarray(ends, dtype=np.int64)


def aggregate_packets(trace: TraceSet, params: AggregateParams) -> LedgerSet:
    """Collapse runs of consecutive per-device records into one transaction.

    Runs hold ``packets_per_tx`` records; with a nonzero ``max_span``, a
    record starting more than ``max_span`` after the run's first record
    opens a new run.  The transaction timestamp is the run's last record
    time.  With ``packets_per_tx=1`` and no span limit this reproduces the
    baseline build exactly.
    """
    if len(trace) == 0:
        raise ValueError("cannot build a ledger set from an empty trace")
    codes_out = []
    ts_out = []
    payloads_out: list[bytes | None] = []
    for code in np.unique(trace.codes):
        idx = np.nonzero(trace.codes == code)[0]
        ts_d = trace.timestamps[idx]
        ends = _run_ends(ts_d, params.packets_per_tx, params.max_span)
        starts = np.concatenate(([0], ends[:-1] + 1))
        codes_out.append(np.full(len(ends), code, dtype=np.int32))
        ts_out.append(ts_d[ends])
        for s, e in zip(starts, ends):
            run_payloads = [
                trace.payload_digests[int(i)]
                for i in idx[s : e + 1]
                if int(i) in trace.payload_digests
            ]
            if not run_payloads:
                payloads_out.append(None)
            elif e == s:
                payloads_out.append(run_payloads[0])
            else:
                payloads_out.append(hashlib.sha256(b"".join(run_payloads)).digest())
    codes = np.concatenate(codes_out)
    ts = np.concatenate(ts_out)
    order = np.lexsort((codes, ts))
    payload_map = {
        int(j): payloads_out[int(i)]
        for j, i in enumerate(order)
        if payloads_out[int(i)] is not None
    }
    provenance = (
        {
            "transform": "aggregate",
            "params": {"packets_per_tx": params.packets_per_tx, "max_span": params.max_span},
        },
    )
    return _ledger_set_from_events(codes[order], ts[order], payload_map, trace.device_names, provenance)


def spoof_transactions(ledger_set: LedgerSet, params: SpoofParams) -> LedgerSet:
    """Insert fake transactions indistinguishable from genuine ones.

    Each ledger with n genuine transactions gains round-half-away(ratio*n)
    fakes placed by the configured sampler within the ledger's active span.
    Fakes get fresh keys, are flagged only in the sidecar, and are labeled
    (for training purposes) with the device of the transaction they follow.
    """
    rng = np.random.default_rng(params.seed & _MASK64)
    stage_salt = hashlib.sha256(
        b"spoof-keys:"
        + (params.seed & _MASK64).to_bytes(8, "big")
        + len(ledger_set.salts).to_bytes(2, "big")
        + (ledger_set.salts[0] if ledger_set.salts else b"")
    ).digest()
    salts = ledger_set.salts + (stage_salt,)
    salt_id = len(salts) - 1
    next_key = 0
    new_ledgers = []
    for ledger in ledger_set.ledgers:
        n = len(ledger)
        n_genuine = int(np.count_nonzero(~ledger.spoofed))
        k = _round_half_away(params.ratio * n_genuine)
        if params.ratio > 0 and n < 2:
            raise ValueError(
                f"ledger {ledger.ledger_id}: spoofing needs >= 2 transactions "
                "to define a timestamp support interval"
            )
        if k == 0:
            new_ledgers.append(
                Ledger(
                    ledger.ledger_id,
                    ledger.timestamps.copy(),
                    ledger.device_codes.copy(),
                    ledger.spoofed.copy(),
                    ledger.key_salt.copy(),
                    ledger.key_index.copy(),
                    ledger.device_names,
                    salts,
                    dict(ledger.payloads),
                )
            )
            continue
        ts = ledger.timestamps
        if params.sampler == "interval":
            fake_ts = rng.uniform(ts[0], ts[-1], k)
        else:
            slot = rng.integers(0, n - 1, k)
            frac = rng.uniform(0.0, 1.0, k)
            fake_ts = ts[slot] + frac * (ts[slot + 1] - ts[slot])
        anchor = np.clip(np.searchsorted(ts, fake_ts, side="right") - 1, 0, n - 1)
        fake_codes = ledger.device_codes[anchor]
        all_ts = np.concatenate([ts, fake_ts])
        sort = np.argsort(all_ts, kind="stable")
        payloads = {}
        if ledger.payloads:
            inverse = np.empty(len(sort), dtype=np.int64)
            inverse[sort] = np.arange(len(sort))
            payloads = {int(inverse[i]): p for i, p in ledger.payloads.items()}
        new_ledgers.append(
            Ledger(
                ledger_id=ledger.ledger_id,
                timestamps=all_ts[sort],
                device_codes=np.concatenate([ledger.device_codes, fake_codes])[sort],
                spoofed=np.concatenate([ledger.spoofed, np.ones(k, dtype=bool)])[sort],
                key_salt=np.concatenate([ledger.key_salt, np.full(k, salt_id, dtype=np.int16)])[sort],
                key_index=np.concatenate(
                    [ledger.key_index, np.arange(next_key, next_key + k, dtype=np.int64)]
                )[sort],
                device_names=ledger.device_names,
                salts=salts,
                payloads=payloads,
            )
        )
        next_key += k
    provenance = ledger_set.provenance + (
        {
            "transform": "spoof",
            "params": {"ratio": params.ratio, "seed": params.seed, "sampler": params.sampler},
        },
    )
    return LedgerSet(new_ledgers, ledger_set.device_names, salts, provenance)


@dataclass(frozen=True)
class PipelineStage:
    transform: str
    params: dict

    def __post_init__(self):
        if self.transform not in TRANSFORM_NAMES:
            raise ValueError(
                f"unknown transform {self.transform!r}; expected one of {TRANSFORM_NAMES}"
            )


def parse_pipeline(raw: list) -> list[PipelineStage]:
    """Normalize a pipeline spec (list of {transform, params}) to stages."""
    stages = []
    for entry in raw:
        if isinstance(entry, PipelineStage):
            stages.append(entry)
        else:
            stages.append(PipelineStage(entry["transform"], dict(entry.get("params") or {})))
    return stages


def load_pipeline(path: str | Path) -> list[PipelineStage]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("pipeline file must be a JSON array of stages")
    return parse_pipeline(raw)


def _stage_seed(stage: PipelineStage, index: int, seed: int | None) -> int:
    if "seed" in stage.params and stage.params["seed"] is not None:
        return int(stage.params["seed"])
    if seed is None:
        raise ValueError(
            f"stage {index} ({stage.transform}) needs a seed: give params.seed "
            "or pass a pipeline seed"
        )
    return mix_seed(seed, index, stage.transform)


def compose(trace: TraceSet, pipeline: list, seed: int | None = None) -> LedgerSet:
    """Apply an ordered obfuscation pipeline to a trace.

    Aggregation (a trace-level transform) may only appear first; when it is
    absent the baseline build runs first.  Delay, merge, and spoof stages
    then apply in the given order.  Stages missing an explicit ``seed``
    parameter get one derived from ``seed`` and their position.  An empty
    pipeline is the baseline build.
    """
    stages = parse_pipeline(pipeline)
    ledger_set: LedgerSet | None = None
    for i, stage in enumerate(stages):
        try:
            if stage.transform == "aggregate":
                if i != 0:
                    raise ValueError("aggregate operates on the trace and must come first")
                ledger_set = aggregate_packets(
                    trace,
                    AggregateParams(
                        packets_per_tx=int(stage.params["packets_per_tx"]),
                        max_span=float(stage.params.get("max_span", 0.0)),
                    ),
                )
                continue
            if ledger_set is None:
                ledger_set = build_baseline(trace)
            if stage.transform == "delay":
                ledger_set = delay_transactions(
                    ledger_set,
                    DelayParams(float(stage.params["d_max"]), _stage_seed(stage, i, seed)),
                )
            elif stage.transform == "merge":
                ledger_set = merge_ledgers(
                    ledger_set,
                    MergeParams(int(stage.params["devices_per_ledger"]), _stage_seed(stage, i, seed)),
                )
            elif stage.transform == "spoof":
                ledger_set = spoof_transactions(
                    ledger_set,
                    SpoofParams(
                        float(stage.params["ratio"]),
                        _stage_seed(stage, i, seed),
                        stage.params.get("sampler", DEFAULT_SPOOF_SAMPLER),
                    ),
                )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ValueError) and str(exc).startswith("pipeline stage"):
                raise
            detail = f"missing parameter {exc}" if isinstance(exc, KeyError) else exc
            raise ValueError(f"pipeline stage {i} ({stage.transform}): {detail}") from None
    if ledger_set is None:
        ledger_set = build_baseline(trace)
    return ledger_set
