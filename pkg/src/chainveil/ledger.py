"""Hash-chained transaction ledgers built from communication traces.

A transaction is ``<t_id, prev_t_id, timestamp, output, pk, sign>``: t_id is
the SHA-256 of the transaction content, prev_t_id chains transactions stored
in the same ledger, output commits to the public key of the following
transaction, and every transaction carries a fresh public key.  Ground-truth
device labels and spoof flags ride in a private sidecar and never appear in
the public serialization.

Ledgers are array-backed; chain digests are derived lazily from content the
first time they are needed (export, verification, sidecar serialization) and
cached, so bulk transform/attack pipelines never pay for hashing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trace import TraceSet

__all__ = [
    "DIGEST_LEN",
    "Ledger",
    "LedgerSet",
    "PositionalSidecar",
    "PublicLedger",
    "PublicView",
    "TidSidecar",
    "Transaction",
    "build_baseline",
    "find_chain_fault",
    "load_public_view",
    "load_sidecar",
    "public_view",
    "save_public_view",
    "save_sidecar",
    "sidecar_bytes",
    "verify_chain",
]

DIGEST_LEN = 32

_PK_TAG = b"pk:"
_FUTURE_TAG = b"future-pk:"
_SALT_TAG = b"trace-keys:"


def _sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _field(b: bytes) -> bytes:
    # canonical length-prefixed field (all fields are well under 256 bytes)
    return bytes((len(b),)) + b


def _tx_digest(prev: bytes, ts_bytes: bytes, output: bytes, pk: bytes) -> bytes:
    return _sha256(_field(prev) + _field(ts_bytes) + _field(output) + _field(pk))


def _derive_pk(salt: bytes, index: int) -> bytes:
    return _sha256(_PK_TAG + salt + int(index).to_bytes(8, "big", signed=True))


def _signature(pk: bytes, payload_or_tid: bytes) -> bytes:
    return hashlib.sha512(pk + payload_or_tid).digest()


def _trace_salt(codes: np.ndarray, timestamps: np.ndarray, names: tuple[str, ...]) -> bytes:
    h = hashlib.sha256()
    h.update(_SALT_TAG)
    h.update(timestamps.astype("<f8").tobytes())
    h.update(codes.astype("<i4").tobytes())
    h.update("|".join(names).encode("utf-8"))
    return h.digest()


@dataclass(frozen=True)
class Transaction:
    """Materialized view of one chain entry (plus evaluation sidecar fields)."""

    t_id: bytes
    prev_t_id: bytes | None
    timestamp: float
    output: bytes
    pk: bytes
    sign: bytes
    true_device: str
    is_spoofed: bool


class Ledger:
    """One append-ordered transaction chain.

    Array-backed: ``timestamps`` (float64, non-decreasing), ``device_codes``
    into the shared ``device_names`` vocabulary, ``spoofed`` flags, and the
    key coordinates ``key_salt``/``key_index`` that deterministically derive
    each transaction's public key from the shared ``salts`` table.
    """

    __slots__ = (
        "ledger_id",
        "timestamps",
        "device_codes",
        "spoofed",
        "key_salt",
        "key_index",
        "payloads",
        "device_names",
        "salts",
        "_pk",
        "_output",
        "_t_id",
    )

    def __init__(
        self,
        ledger_id: str,
        timestamps: np.ndarray,
        device_codes: np.ndarray,
        spoofed: np.ndarray,
        key_salt: np.ndarray,
        key_index: np.ndarray,
        device_names: tuple[str, ...],
        salts: tuple[bytes, ...],
        payloads: dict[int, bytes] | None = None,
    ):
        self.ledger_id = ledger_id
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.device_codes = np.asarray(device_codes, dtype=np.int32)
        self.spoofed = np.asarray(spoofed, dtype=bool)
        self.key_salt = np.asarray(key_salt, dtype=np.int16)
        self.key_index = np.asarray(key_index, dtype=np.int64)
        self.payloads = dict(payloads or {})
        self.device_names = device_names
        self.salts = salts
        self._pk = None
        self._output = None
        self._t_id = None
        n = len(self.timestamps)
        if not (len(self.device_codes) == len(self.spoofed) == len(self.key_salt) == len(self.key_index) == n):
            raise ValueError("ledger arrays must be parallel")
        if n == 0:
            raise ValueError("a ledger must contain at least one transaction")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("ledger timestamps must be non-decreasing in commit order")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def device(self) -> str | None:
        """The owning device when all transactions share one label, else None."""
        codes = np.unique(self.device_codes)
        return self.device_names[codes[0]] if len(codes) == 1 else None

    def _materialize(self) -> None:
        """Derive pk/output/t_id for every transaction (cached)."""
        if self._t_id is not None:
            return
        n = len(self)
        salts = self.salts
        salt_ids = self.key_salt
        key_idx = self.key_index
        pk = [_derive_pk(salts[salt_ids[i]], key_idx[i]) for i in range(n)]
        future_pk = _sha256(
            _FUTURE_TAG + salts[salt_ids[n - 1]] + int(key_idx[n - 1]).to_bytes(8, "big", signed=True)
        )
        output = [_sha256(pk[i + 1]) for i in range(n - 1)]
        output.append(_sha256(future_pk))
        ts_bytes = self.timestamps.astype(">f8").tobytes()
        t_id: list[bytes] = []
        prev = b""
        for i in range(n):
            d = _tx_digest(prev, ts_bytes[8 * i : 8 * i + 8], output[i], pk[i])
            t_id.append(d)
            prev = d
        self._pk, self._output, self._t_id = pk, output, t_id

    @property
    def pk(self) -> list[bytes]:
        self._materialize()
        return self._pk

    @property
    def output(self) -> list[bytes]:
        self._materialize()
        return self._output

    @property
    def t_id(self) -> list[bytes]:
        self._materialize()
        return self._t_id

    def sign(self, i: int) -> bytes:
        payload = self.payloads.get(i)
        return _signature(self.pk[i], payload if payload is not None else self.t_id[i])

    def transaction(self, i: int) -> Transaction:
        self._materialize()
        return Transaction(
            t_id=self._t_id[i],
            prev_t_id=self._t_id[i - 1] if i > 0 else None,
            timestamp=float(self.timestamps[i]),
            output=self._output[i],
            pk=self._pk[i],
            sign=self.sign(i),
            true_device=self.device_names[self.device_codes[i]],
            is_spoofed=bool(self.spoofed[i]),
        )

    @property
    def transactions(self) -> list[Transaction]:
        return [self.transaction(i) for i in range(len(self))]


class LedgerSet:
    """An ordered collection of ledgers plus provenance and label sidecar."""

    __slots__ = ("ledgers", "device_names", "salts", "provenance")

    def __init__(
        self,
        ledgers: list[Ledger],
        device_names: tuple[str, ...],
        salts: tuple[bytes, ...],
        provenance: tuple[dict, ...],
    ):
        self.ledgers = list(ledgers)
        self.device_names = device_names
        self.salts = salts
        self.provenance = tuple(provenance)

    def __len__(self) -> int:
        return len(self.ledgers)

    @property
    def n_transactions(self) -> int:
        return sum(len(l) for l in self.ledgers)

    @property
    def n_genuine(self) -> int:
        return int(sum(np.count_nonzero(~l.spoofed) for l in self.ledgers))

    def key_coordinates_unique(self) -> bool:
        """True iff every transaction has a distinct (salt, index) key pair.

        Key coordinates determine public keys injectively, so this is the
        cheap equivalent of pk uniqueness across the set.
        """
        pairs = np.concatenate(
            [l.key_salt.astype(np.int64) << 48 | (l.key_index & ((1 << 48) - 1)) for l in self.ledgers]
        )
        return len(np.unique(pairs)) == len(pairs)

    @property
    def label_sidecar(self) -> dict[str, tuple[str, bool]]:
        """t_id (hex) -> (true device, is_spoofed).  Materializes chains."""
        out: dict[str, tuple[str, bool]] = {}
        for ledger in self.ledgers:
            ids = ledger.t_id
            for i in range(len(ledger)):
                out[ids[i].hex()] = (
                    ledger.device_names[ledger.device_codes[i]],
                    bool(ledger.spoofed[i]),
                )
        return out

    def public(self, include_chain: bool = False) -> "PublicView":
        """Attacker-visible view: timestamps per ledger, chain fields on request."""
        publics = []
        for ledger in self.ledgers:
            if include_chain:
                ledger._materialize()
                publics.append(
                    PublicLedger(
                        timestamps=ledger.timestamps.copy(),
                        t_id=list(ledger.t_id),
                        output=list(ledger.output),
                        pk=list(ledger.pk),
                        sign=[ledger.sign(i) for i in range(len(ledger))],
                    )
                )
            else:
                publics.append(PublicLedger(timestamps=ledger.timestamps.copy()))
        return PublicView(publics)

    def sidecar(self) -> "PositionalSidecar":
        return PositionalSidecar(
            [(l.device_codes.copy(), l.spoofed.copy()) for l in self.ledgers],
            self.device_names,
        )


class PublicLedger:
    """Public fields of one ledger as read by the attacker."""

    __slots__ = ("timestamps", "t_id", "output", "pk", "sign")

    def __init__(self, timestamps, t_id=None, output=None, pk=None, sign=None):
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.t_id = t_id
        self.output = output
        self.pk = pk
        self.sign = sign

    def __len__(self) -> int:
        return len(self.timestamps)


class PublicView:
    """Ordered public ledgers; the only surface the attacker consumes."""

    __slots__ = ("ledgers",)

    def __init__(self, ledgers: list[PublicLedger]):
        self.ledgers = list(ledgers)

    def __len__(self) -> int:
        return len(self.ledgers)

    @property
    def n_transactions(self) -> int:
        return sum(len(l) for l in self.ledgers)


class PositionalSidecar:
    """In-memory ground-truth labels aligned with ledger positions."""

    def __init__(self, per_ledger: list[tuple[np.ndarray, np.ndarray]], device_names: tuple[str, ...]):
        self.per_ledger = per_ledger
        self.device_names = np.array(device_names, dtype=object)

    def ledger_labels(self, ledger_index: int, t_ids=None):
        codes, spoofed = self.per_ledger[ledger_index]
        return self.device_names[codes], spoofed


class TidSidecar:
    """Ground-truth labels keyed by transaction id (the on-disk sidecar form)."""

    def __init__(self, mapping: dict[str, tuple[str, bool]]):
        self.mapping = dict(mapping)

    def ledger_labels(self, ledger_index: int, t_ids=None):
        if t_ids is None:
            raise ValueError("t_id-keyed sidecar requires a public view that carries t_ids")
        devices = np.empty(len(t_ids), dtype=object)
        spoofed = np.zeros(len(t_ids), dtype=bool)
        for i, tid in enumerate(t_ids):
            try:
                dev, sp = self.mapping[tid.hex()]
            except KeyError:
                raise ValueError(f"sidecar is missing t_id {tid.hex()}") from None
            devices[i] = dev
            spoofed[i] = sp
        return devices, spoofed


def build_baseline(trace: TraceSet) -> LedgerSet:
    """One ledger per device; one transaction per communication record."""
    if len(trace) == 0:
        raise ValueError("cannot build a ledger set from an empty trace")
    return _ledger_set_from_events(
        trace.codes,
        trace.timestamps,
        trace.payload_digests,
        trace.device_names,
        ({"transform": "baseline", "params": {}},),
    )


def _ledger_set_from_events(
    codes: np.ndarray,
    timestamps: np.ndarray,
    payloads: dict[int, bytes],
    device_names: tuple[str, ...],
    provenance: tuple[dict, ...],
) -> LedgerSet:
    """Partition events by device and chain each partition in time order.

    Key derivation is salted with a digest of the event arrays, so the same
    events always produce the same keys and chain ids.
    """
    salt = _trace_salt(codes, timestamps, device_names)
    salts = (salt,)
    ledgers = []
    next_key = 0
    for ordinal, code in enumerate(np.unique(codes)):
        idx = np.nonzero(codes == code)[0]
        n = len(idx)
        ledger_payloads = {}
        for j, i in enumerate(idx):
            p = payloads.get(int(i))
            if p is not None:
                ledger_payloads[j] = p
        ledgers.append(
            Ledger(
                ledger_id=f"L{ordinal:03d}",
                timestamps=timestamps[idx],
                device_codes=codes[idx],
                spoofed=np.zeros(n, dtype=bool),
                key_salt=np.zeros(n, dtype=np.int16),
                key_index=np.arange(next_key, next_key + n, dtype=np.int64),
                device_names=device_names,
                salts=salts,
                payloads=ledger_payloads,
            )
        )
        next_key += n
    return LedgerSet(ledgers, device_names, salts, provenance)


def find_chain_fault(ledger) -> tuple[int, str] | None:
    """First index at which the chain fails to verify, or None if intact.

    Accepts a :class:`Ledger` (digests derived once, then checked against
    content) or a :class:`PublicLedger` loaded from a serialized view.
    """
    n = len(ledger)
    if isinstance(ledger, Ledger):
        ledger._materialize()
        t_id, output, pk = ledger._t_id, ledger._output, ledger._pk
        prev_ids = [None] + t_id[:-1]
    else:
        t_id, output, pk = ledger.t_id, ledger.output, ledger.pk
        if t_id is None or output is None or pk is None:
            raise ValueError("public ledger lacks chain fields; load a full public view")
        prev_ids = getattr(ledger, "prev_t_id", None) or [None] + t_id[:-1]
    ts_bytes = np.asarray(ledger.timestamps, dtype=np.float64).astype(">f8").tobytes()
    expected_prev = None
    for i in range(n):
        if prev_ids[i] != expected_prev:
            return i, "prev_t_id does not match predecessor t_id"
        recomputed = _tx_digest(
            prev_ids[i] if prev_ids[i] is not None else b"",
            ts_bytes[8 * i : 8 * i + 8],
            output[i],
            pk[i],
        )
        if recomputed != t_id[i]:
            return i, "t_id does not match transaction content"
        expected_prev = t_id[i]
    return None


def verify_chain(ledger) -> bool:
    """True iff every t_id recomputes from content and every link matches."""
    return find_chain_fault(ledger) is None


def _tx_line(t_id, prev, ts, output, pk, sign) -> str:
    record = {
        "t_id": t_id.hex(),
        "prev_t_id": prev.hex() if prev is not None else None,
        "timestamp": float(ts),
        "output": output.hex(),
        "pk": pk.hex(),
        "sign": sign.hex(),
    }
    return json.dumps(record, separators=(",", ":"))


def public_view(ledger_set: LedgerSet) -> bytes:
    """Serialize the attacker-visible ledgers as JSON Lines.

    One transaction per line with exactly the six public fields in fixed
    order; digests lowercase hex; ledgers concatenated in order (each chain
    head is recognizable by its null prev_t_id).  No device labels and no
    spoof flags are present.
    """
    lines = []
    for ledger in ledger_set.ledgers:
        ledger._materialize()
        t_id = ledger._t_id
        for i in range(len(ledger)):
            lines.append(
                _tx_line(
                    t_id[i],
                    t_id[i - 1] if i > 0 else None,
                    ledger.timestamps[i],
                    ledger._output[i],
                    ledger._pk[i],
                    ledger.sign(i),
                )
            )
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def save_public_view(ledger_set: LedgerSet, path: str | Path) -> None:
    Path(path).write_bytes(public_view(ledger_set))


def load_public_view(source: str | Path | bytes) -> PublicView:
    """Parse a JSON Lines public view back into ledgers.

    Chains are reconstructed by following prev_t_id links from each null-
    prev head, which also validates linkage and uniqueness.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        text = Path(source).read_text(encoding="utf-8")
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        rows.append(
            (
                bytes.fromhex(obj["t_id"]),
                bytes.fromhex(obj["prev_t_id"]) if obj["prev_t_id"] else None,
                float(obj["timestamp"]),
                bytes.fromhex(obj["output"]),
                bytes.fromhex(obj["pk"]),
                bytes.fromhex(obj["sign"]),
            )
        )
    by_prev: dict[bytes, int] = {}
    heads = []
    for i, row in enumerate(rows):
        if row[1] is None:
            heads.append(i)
        else:
            if row[1] in by_prev:
                raise ValueError("two transactions claim the same predecessor")
            by_prev[row[1]] = i
    ledgers = []
    seen = 0
    for head in heads:
        chain = [head]
        while rows[chain[-1]][0] in by_prev:
            chain.append(by_prev[rows[chain[-1]][0]])
        seen += len(chain)
        ledgers.append(
            PublicLedger(
                timestamps=np.array([rows[i][2] for i in chain], dtype=np.float64),
                t_id=[rows[i][0] for i in chain],
                output=[rows[i][3] for i in chain],
                pk=[rows[i][4] for i in chain],
                sign=[rows[i][5] for i in chain],
            )
        )
    if seen != len(rows):
        raise ValueError("orphan transactions: not reachable from any chain head")
    return PublicView(ledgers)


def sidecar_bytes(ledger_set: LedgerSet) -> bytes:
    """Flat JSON map t_id (hex) -> {device, spoofed}.  Never part of the public view."""
    mapping = {
        tid: {"device": dev, "spoofed": sp}
        for tid, (dev, sp) in ledger_set.label_sidecar.items()
    }
    return (json.dumps(mapping, indent=0, separators=(",", ":")) + "\n").encode("utf-8")


def save_sidecar(ledger_set: LedgerSet, path: str | Path) -> None:
    Path(path).write_bytes(sidecar_bytes(ledger_set))


def load_sidecar(path: str | Path) -> TidSidecar:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return TidSidecar({tid: (entry["device"], bool(entry["spoofed"])) for tid, entry in raw.items()})
