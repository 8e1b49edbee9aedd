"""Line-delimited JSON manifests.

Each line is one record::

    {"id": "p0001_src", "role": "src", "wav_path": "p0001_src.wav",
     "speaker_id": 3, "text_ids": [4, 17, ...], "pair_id": "p0001", "seed": 11, "n_frames": 97}

``role`` is ``src``, ``tgt`` or ``real``; everything after ``wav_path`` is
optional.  Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

ROLES = ("src", "tgt", "real")


class ManifestError(ValueError):
    pass


@dataclass
class Record:
    id: str
    role: str
    wav_path: str
    speaker_id: int | None = None
    text_ids: list[int] | None = None
    pair_id: str | None = None
    seed: int | None = None
    n_frames: int | None = None  # duration sum of the generating plan

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})


@dataclass
class Manifest:
    path: Path
    records: list[Record] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.path.parent

    def resolve(self, rec: Record) -> Path:
        p = Path(rec.wav_path)
        return p if p.is_absolute() else self.root / p

    def by_role(self, role: str) -> list[Record]:
        return [r for r in self.records if r.role == role]

    def pairs(self) -> list[tuple[Record, Record]]:
        """``(src, tgt)`` record pairs ordered by first appearance."""
        groups: dict[str, dict[str, Record]] = defaultdict(dict)
        for r in self.records:
            if r.pair_id is not None and r.role in ("src", "tgt"):
                groups[r.pair_id][r.role] = r
        return [(g["src"], g["tgt"]) for g in groups.values() if "src" in g and "tgt" in g]

    def __len__(self):
        return len(self.records)


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            records.append(Record(**data))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: unreadable record: {exc}") from exc
    return Manifest(path, records)


class ManifestWriter:
    """Append-only writer; each record is flushed as it is produced."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def append(self, rec: Record):
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def validate_manifest(path) -> list[str]:
    """Return human-readable violations; an empty list means the file is valid.

    Never modifies anything on disk.
    """
    path = Path(path)
    if not path.is_file():
        return [f"manifest not found: {path}"]
    violations = []
    seen: dict[str, int] = {}
    pair_roles: dict[str, list[str]] = defaultdict(list)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            rec = Record(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            violations.append(f"row {lineno}: unreadable record ({exc})")
            continue
        if rec.id in seen:
            violations.append(f"row {lineno}: duplicate id {rec.id!r} (first at row {seen[rec.id]})")
        else:
            seen[rec.id] = lineno
        if rec.role not in ROLES:
            violations.append(f"row {lineno}: unknown role {rec.role!r}")
        wav = Path(rec.wav_path)
        wav = wav if wav.is_absolute() else path.parent / wav
        if not wav.is_file():
            violations.append(f"row {lineno}: missing wav_path {rec.wav_path!r}")
        if rec.pair_id is not None:
            pair_roles[rec.pair_id].append(rec.role)
    for pid, roles in pair_roles.items():
        if Counter(roles) != Counter({"src": 1, "tgt": 1}):
            violations.append(f"pair {pid!r}: expected one src and one tgt row, got {sorted(roles)}")
    return violations
