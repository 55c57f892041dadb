"""Distributor-side registry: issue fingerprints and identify users by Hamming matching.

Records are stored one JSON object per line, append-only.  Matching is an
exact nearest-neighbour search over bit-packed fingerprints with a rejection
threshold ``tau`` (default ``floor(0.25 * d_phi)``).
"""

from __future__ import annotations

import fcntl
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .codec import Fingerprint, sample_fingerprint
from .seeding import rng_for, subseed

NO_MATCH = "no match"
AMBIGUOUS = "ambiguous"
MATCH = "match"


class RegistryError(ValueError):
    pass


def default_threshold(d_phi: int) -> int:
    return int(math.floor(0.25 * d_phi))


@dataclass(frozen=True)
class RegistryRecord:
    user_id: str
    fingerprint: Fingerprint
    model_hash: str = ""
    issued_at: int = 0

    @property
    def d_phi(self) -> int:
        return self.fingerprint.d_phi

    def to_json(self) -> str:
        return json.dumps({"user_id": self.user_id, "fingerprint": self.fingerprint.hex(), "d_phi": self.d_phi,
                           "model_hash": self.model_hash, "issued_at": self.issued_at}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RegistryRecord":
        obj = json.loads(line)
        missing = {"user_id", "fingerprint", "d_phi", "model_hash", "issued_at"} - set(obj)
        if missing:
            raise RegistryError(f"record missing fields {sorted(missing)}")
        fp = Fingerprint.from_hex(obj["fingerprint"], int(obj["d_phi"]))
        return cls(str(obj["user_id"]), fp, str(obj["model_hash"]), int(obj["issued_at"]))


@dataclass
class MatchResult:
    status: str
    user_id: Optional[str] = None
    distance: Optional[int] = None
    margin: Optional[int] = None
    tied: list = field(default_factory=list)
    threshold: int = 0
    decoded: str = ""
    logits: Optional[list] = None

    def to_dict(self) -> dict:
        out = {"status": self.status, "user_id": self.user_id, "distance": self.distance, "margin": self.margin,
               "tied": list(self.tied), "threshold": self.threshold, "decoded": self.decoded}
        if self.logits is not None:
            out["logits"] = self.logits
        return out


# ---------------------------------------------------------------- packed Hamming distance

def pack_bits(bits: np.ndarray) -> np.ndarray:
    """(n, d) 0/1 -> (n, ceil(d/64)) uint64 words, zero padded."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    n, d = bits.shape
    words = (d + 63) // 64
    padded = np.zeros((n, words * 64), dtype=np.uint8)
    padded[:, :d] = bits
    return np.packbits(padded, axis=1).view(">u8").astype(np.uint64)


def hamming(packed_queries: np.ndarray, packed_table: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances, (q, n)."""
    x = packed_queries[:, None, :] ^ packed_table[None, :, :]
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def _nearest(dist: np.ndarray, tau: int):
    """Per query row: (best index, best distance, runner-up distance, tie count, status code).

    Status code 0 = match, 1 = ambiguous, 2 = no match.
    """
    best = dist.min(axis=1)
    idx = dist.argmin(axis=1)
    ties = (dist == best[:, None]).sum(axis=1)
    if dist.shape[1] > 1:
        second = np.partition(dist, 1, axis=1)[:, 1]
    else:
        second = np.full_like(best, -1)
    status = np.where(best > tau, 2, np.where(ties > 1, 1, 0))
    return idx, best, second, ties, status


class Registry:
    """In-memory view of a registry file.  ``path=None`` keeps it in memory only."""

    def __init__(self, d_phi: int, path=None, threshold: Optional[int] = None):
        if d_phi < 1:
            raise RegistryError("d_phi must be >= 1")
        self.d_phi = d_phi
        self.path = Path(path) if path is not None else None
        self.threshold = default_threshold(d_phi) if threshold is None else int(threshold)
        self.records: list = []
        self._by_user: dict = {}
        self._by_hex: dict = {}
        self._packed = np.zeros((0, (d_phi + 63) // 64), dtype=np.uint64)

    # -- loading and persistence

    @classmethod
    def open(cls, path, d_phi: Optional[int] = None, threshold: Optional[int] = None) -> "Registry":
        records = read_records(path)
        if d_phi is None:
            if not records:
                raise RegistryError(f"{path}: empty registry and no d_phi given")
            d_phi = records[0].d_phi
        reg = cls(d_phi, path, threshold)
        for r in records:
            reg._insert(r)
        return reg

    def _insert(self, record: RegistryRecord) -> None:
        if record.d_phi != self.d_phi:
            raise RegistryError(f"record {record.user_id!r} has d_phi={record.d_phi}, registry uses {self.d_phi}")
        if record.user_id in self._by_user:
            raise RegistryError(f"duplicate user_id {record.user_id!r}")
        key = record.fingerprint.hex()
        if key in self._by_hex:
            raise RegistryError(f"fingerprint {key} already issued to {self._by_hex[key]!r}")
        self.records.append(record)
        self._by_user[record.user_id] = record
        self._by_hex[key] = record.user_id
        self._packed = np.concatenate([self._packed, pack_bits(record.fingerprint.bits)])

    def add(self, record: RegistryRecord) -> RegistryRecord:
        self._insert(record)
        if self.path is not None:
            append_record(self.path, record)
        return record

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, user_id) -> bool:
        return user_id in self._by_user

    def get(self, user_id: str) -> RegistryRecord:
        return self._by_user[user_id]

    # -- operations

    def register(self, user_id: str, seed: int, model_hash: str = "", issued_at: Optional[int] = None,
                 max_retries: int = 32) -> RegistryRecord:
        """Issue a fresh fingerprint; collisions with issued ones are resampled."""
        if user_id in self._by_user:
            raise RegistryError(f"user_id {user_id!r} already registered")
        for attempt in range(max_retries):
            fp = sample_fingerprint(self.d_phi, subseed(seed, f"user/{user_id}/{attempt}"))
            if fp.hex() not in self._by_hex:
                break
        else:
            raise RegistryError(f"no free fingerprint after {max_retries} draws; registry is effectively full")
        stamp = int(time.time()) if issued_at is None else int(issued_at)
        return self.add(RegistryRecord(user_id, fp, model_hash, stamp))

    def distances(self, phi_hat) -> np.ndarray:
        bits = phi_hat.bits if isinstance(phi_hat, Fingerprint) else np.asarray(phi_hat, dtype=np.uint8)
        if bits.shape[-1] != self.d_phi:
            raise RegistryError(f"decoded fingerprint has {bits.shape[-1]} bits, registry uses {self.d_phi}")
        return hamming(pack_bits(bits), self._packed)

    def match(self, phi_hat, threshold: Optional[int] = None) -> MatchResult:
        if not self.records:
            raise RegistryError("registry is empty")
        tau = self.threshold if threshold is None else int(threshold)
        fp = phi_hat if isinstance(phi_hat, Fingerprint) else Fingerprint(np.asarray(phi_hat))
        dist = self.distances(fp)
        idx, best, second, ties, status = (v[0] for v in _nearest(dist, tau))
        margin = int(second - best) if len(self.records) > 1 else None
        if status == 2:
            return MatchResult(NO_MATCH, None, int(best), margin, threshold=tau, decoded=fp.hex())
        if status == 1:
            tied = sorted(self.records[i].user_id for i in np.flatnonzero(dist[0] == best))
            return MatchResult(AMBIGUOUS, None, int(best), 0, tied, tau, fp.hex())
        return MatchResult(MATCH, self.records[idx].user_id, int(best), margin, threshold=tau, decoded=fp.hex())

    def match_many(self, bits: np.ndarray, threshold: Optional[int] = None, chunk: int = 4096):
        """Vectorized match for an (n, d) array; returns (index, distance, status) arrays."""
        tau = self.threshold if threshold is None else int(threshold)
        idx, dist, status = [], [], []
        for i in range(0, len(bits), chunk):
            r = _nearest(self.distances(bits[i:i + chunk]), tau)
            idx.append(r[0])
            dist.append(r[1])
            status.append(r[4])
        return np.concatenate(idx), np.concatenate(dist), np.concatenate(status)

    def identify(self, image, fpdec, threshold: Optional[int] = None, with_logits: bool = False) -> MatchResult:
        from . import autodiff as ad
        from .fpdecoder import bits_from_logits, decode_logits

        logits = decode_logits(fpdec, ad.as_tensor(image)).data
        bits = bits_from_logits(logits).reshape(-1)
        result = self.match(Fingerprint(bits), threshold)
        if with_logits:
            result.logits = [float(v) for v in logits.reshape(-1)]
        return result


# ---------------------------------------------------------------- file format

def append_record(path, record: RegistryRecord) -> None:
    """Append one line under an exclusive lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(record.to_json() + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_SH)
        try:
            lines = fh.read().splitlines()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(RegistryRecord.from_json(line))
        except (ValueError, KeyError) as exc:
            raise RegistryError(f"{path}:{n}: {exc}") from None
    return out


def rebuild(path, out_path=None) -> Registry:
    """Validate every record and rewrite the file compactly, sorted by issue time then id."""
    reg = Registry.open(path)
    ordered = sorted(reg.records, key=lambda r: (r.issued_at, r.user_id))
    target = Path(out_path) if out_path is not None else Path(path)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text("".join(r.to_json() + "\n" for r in ordered), encoding="utf-8")
    tmp.replace(target)
    return Registry.open(target)


# ---------------------------------------------------------------- analysis

def _binom_pmf(n: int, p: float) -> np.ndarray:
    k = np.arange(n + 1)
    logc = np.array([math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) for i in k])
    with np.errstate(divide="ignore"):
        logp = logc + k * np.log(p) + (n - k) * np.log1p(-p) if 0 < p < 1 else None
    if logp is None:
        out = np.zeros(n + 1)
        out[0 if p == 0 else n] = 1.0
        return out
    return np.exp(logp)


def identification_rates(n_users: int, d_phi: int, p: float, threshold: Optional[int] = None) -> dict:
    """Binomial model of one query against ``n_users`` random records.

    The true record sits at distance K ~ Bin(d, p); every other record sits at
    an independent Bin(d, 1/2) distance.  A query is correct when K <= tau and
    every other record is strictly farther.
    """
    tau = default_threshold(d_phi) if threshold is None else threshold
    true_pmf = _binom_pmf(d_phi, p)
    half = _binom_pmf(d_phi, 0.5)
    half_cdf = np.cumsum(half)
    others = n_users - 1
    k = np.arange(d_phi + 1)
    beyond_k = np.clip(1 - half_cdf, 0, 1)
    beyond_tau = max(0.0, 1 - half_cdf[tau])
    correct = float(np.sum(true_pmf[k <= tau] * beyond_k[k <= tau] ** others))
    no_match = float(np.sum(true_pmf[k > tau]) * beyond_tau ** others)
    return {
        "correct": correct,
        "no_match": no_match,
        "misattribution": max(0.0, 1 - correct - no_match),
        "unregistered_no_match": beyond_tau ** n_users,
    }


def simulate_identification(n_users: int, d_phi: int, p: float, trials: int, seed: int,
                            threshold: Optional[int] = None, chunk: int = 2048) -> dict:
    """Monte-Carlo counterpart of :func:`identification_rates`.

    Each trial draws a fresh random population, flips bits of one member with
    probability ``p`` and matches.  Populations are redrawn per chunk.
    """
    tau = default_threshold(d_phi) if threshold is None else threshold
    rng = rng_for(seed, "registry/monte-carlo")
    counts = {"correct": 0, "no_match": 0, "misattribution": 0, "unregistered_no_match": 0}
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        table = pack_bits(rng.integers(0, 2, size=(n_users, d_phi), dtype=np.uint8))
        owner = rng.integers(0, n_users, size=m)
        flips = (rng.random((m, d_phi)) < p).astype(np.uint8)
        query = table[owner] ^ pack_bits(flips)
        idx, best, _, ties, status = _nearest(hamming(query, table), tau)
        ok = (status == 0) & (idx == owner)
        counts["correct"] += int(ok.sum())
        counts["no_match"] += int((status == 2).sum())
        counts["misattribution"] += int((~ok & (status != 2)).sum())
        stranger = pack_bits(rng.integers(0, 2, size=(m, d_phi), dtype=np.uint8))
        counts["unregistered_no_match"] += int((_nearest(hamming(stranger, table), tau)[4] == 2).sum())
        done += m
    return {k: v / trials for k, v in counts.items()} | {"trials": trials}


def collision_report(n_users: int, d_phi: int, p: float, trials: int = 20000, seed: int = 0,
                     threshold: Optional[int] = None) -> dict:
    """Birthday bound plus binomial and simulated identification rates."""
    if n_users < 2:
        raise RegistryError("population must have at least 2 users")
    if not 0 <= p < 0.5:
        raise RegistryError(f"bit error rate {p} outside [0, 0.5)")
    expected_pairs = math.comb(n_users, 2) / 2.0 ** d_phi
    analytic = identification_rates(n_users, d_phi, p, threshold)
    report = {
        "n_users": n_users,
        "d_phi": d_phi,
        "bit_error_rate": p,
        "threshold": default_threshold(d_phi) if threshold is None else threshold,
        "expected_colliding_pairs": expected_pairs,
        "collision_probability": -math.expm1(-expected_pairs),
        "analytic": analytic,
    }
    if trials > 0:
        report["simulated"] = simulate_identification(n_users, d_phi, p, trials, seed, threshold)
    return report


def records_from(pairs: Iterable) -> list:
    return [RegistryRecord(u, fp) for u, fp in pairs]
