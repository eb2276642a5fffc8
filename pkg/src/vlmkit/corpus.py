"""JSONL manifests of image-caption records and label balancing."""
from __future__ import annotations

import json
import logging
import math
import os
import random
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator

log = logging.getLogger(__name__)

_KNOWN = ("id", "image", "caption", "logprobs", "label")


class ManifestError(ValueError):
    """A manifest line that cannot be accepted."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class CorpusRecord:
    id: str
    image: str | None = None
    caption: str | None = None
    logprobs: list[float] | None = None
    label: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise ValueError("record needs a non-empty string 'id'")
        for key in ("image", "caption", "label"):
            if obj.get(key) is not None and not isinstance(obj[key], str):
                raise ValueError(f"'{key}' must be a string")
        lp = obj.get("logprobs")
        if lp is not None:
            lp = validate_logprobs(lp)
        return cls(
            id=rid,
            image=obj.get("image"),
            caption=obj.get("caption"),
            logprobs=lp,
            label=obj.get("label"),
            extra={k: v for k, v in obj.items() if k not in _KNOWN},
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"id": self.id}
        for key in ("image", "caption", "logprobs", "label"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out.update(self.extra)
        return out


def validate_logprobs(values) -> list[float]:
    if not isinstance(values, (list, tuple)) or not values:
        raise ValueError("logprobs must be a non-empty list of numbers")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"logprob {v!r} is not a number")
        v = float(v)
        if not math.isfinite(v) or v > 0:
            raise ValueError(f"logprob {v!r} must be finite and <= 0")
        out.append(v)
    return out


@dataclass
class ReadSummary:
    read: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"read": self.read, "skipped": len(self.skipped),
                "errors": [{"line": n, "error": e} for n, e in self.skipped]}


def read_manifest(path: str | os.PathLike, strict: bool = False,
                  summary: ReadSummary | None = None) -> Iterator[CorpusRecord]:
    """Stream records from a JSONL manifest.

    In lenient mode malformed lines and repeated ids are logged, recorded in
    ``summary`` and skipped. In strict mode the first one raises
    :class:`ManifestError`.
    """
    summary = summary if summary is not None else ReadSummary()
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = CorpusRecord.from_dict(json.loads(line))
                if rec.id in seen:
                    raise ValueError(
                        f"duplicate id {rec.id!r} (first on line {seen[rec.id]}, again on line {lineno})")
            except ValueError as exc:  # JSONDecodeError included
                if strict:
                    raise ManifestError(str(exc), path, lineno) from exc
                log.warning("%s:%d: skipped: %s", path, lineno, exc)
                summary.skipped.append((lineno, str(exc)))
                continue
            seen[rec.id] = lineno
            summary.read += 1
            yield rec


def dumps_record(rec: CorpusRecord | dict) -> str:
    obj = rec.to_dict() if isinstance(rec, CorpusRecord) else rec
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def atomic_write(path: str | os.PathLike, writer, mode: str = "w") -> None:
    """Call ``writer(fh)`` on a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        kwargs = {"encoding": "utf-8", "newline": "\n"} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(records: Iterable[CorpusRecord | dict], path: str | os.PathLike) -> int:
    count = 0

    def _write(fh):
        nonlocal count
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
            count += 1

    atomic_write(path, _write)
    return count


def _scaled_count(count: int, fraction: float) -> int:
    # decimal reading of the fraction, half-up: 0.6 * 25 -> 15, not 14.999...
    exact = Fraction(repr(float(fraction))) * count
    return math.floor(exact + Fraction(1, 2))


def overrepresented_labels(counts: Counter, top_k: int = 6) -> set[str]:
    """Labels among the ``top_k`` most frequent whose count is above their mean."""
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    if not top:
        return set()
    mean = Fraction(sum(c for _, c in top), len(top))
    return {label for label, c in top if c > mean}


def balance_manifest(records: list[CorpusRecord], top_k: int = 6, down_to: float = 0.6,
                     seed: int = 0) -> list[CorpusRecord]:
    """Down-sample dominant main-entity labels.

    A label among the ``top_k`` most common is cut to ``round(down_to * count)``
    records when its count exceeds the mean count of those ``top_k`` labels.
    The kept subset is a seeded uniform sample; order is preserved and
    unlabeled records pass through.
    """
    if not 0 < down_to <= 1:
        raise ValueError(f"down_to must be in (0, 1], got {down_to}")
    records = list(records)
    by_label: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        if rec.label is not None:
            by_label.setdefault(rec.label, []).append(i)
    counts = Counter({label: len(idx) for label, idx in by_label.items()})

    dropped: set[int] = set()
    for label in sorted(overrepresented_labels(counts, top_k)):
        idx = by_label[label]
        keep = _scaled_count(len(idx), down_to)
        # string seeds hash deterministically, so each label draws independently
        rng = random.Random(f"{seed}:{label}")
        kept = set(rng.sample(idx, keep))
        dropped.update(i for i in idx if i not in kept)
    return [rec for i, rec in enumerate(records) if i not in dropped]


def balance_summary(before: Iterable[CorpusRecord], after: Iterable[CorpusRecord]) -> dict:
    b = Counter(r.label for r in before if r.label is not None)
    a = Counter(r.label for r in after if r.label is not None)
    return {label: {"before": b[label], "after": a[label]} for label in sorted(b)}
