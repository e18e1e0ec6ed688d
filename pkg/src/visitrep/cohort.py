"""Longitudinal cohort model: ingestion, filtering, vocabularies, encodings,
task labels, task text windows, and patient-keyed fold splitting.

The on-disk form is JSON Lines, one patient per line:

    {"patient_id": "p1",
     "demographics": {"age": 63, "gender": "f", "race": "r0"},
     "visits": [{"admit_time": 0, "discharge_time": 172800,
                 "codes": [{"system": "dx", "code": "428"}],
                 "notes": [{"time": 3600, "kind": null, "text": "..."}],
                 "died_in_visit": false}]}

Timestamps are integer seconds. Within a patient, visits are ordered by
admission time; note times stay inside [admit - 1 day, discharge + 1 day].
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

HOUR = 3600
DAY = 86400
YEAR = 31_557_600  # 365.25 days

SYSTEMS = ("dx", "proc", "med")
READMISSION_WINDOW = 30 * DAY
DISCHARGE_SUMMARY_KIND = "discharge_summary"

TASK_READMISSION = "readmission30"
TASK_MORTALITY = "mortality"
TASK_LOS = "los9"
TASK_CODES = "code_prediction"
TASKS = (TASK_READMISSION, TASK_MORTALITY, TASK_LOS, TASK_CODES)

N_LOS_CLASSES = 9
AGE_BUCKETS = ((18, 30), (30, 50), (50, 70), (70, None))


@dataclass(frozen=True)
class Code:
    """One coded event. group_id equals raw_id until a grouping map is applied."""

    system: str
    raw_id: str
    group_id: str

    @staticmethod
    def make(system: str, raw_id: str) -> "Code":
        return Code(system=system, raw_id=raw_id, group_id=raw_id)

    @property
    def key(self) -> tuple[str, str]:
        return (self.system, self.group_id)


@dataclass(frozen=True)
class Note:
    time: int
    text: str
    kind: Optional[str] = None


@dataclass(frozen=True)
class Visit:
    admit_time: int
    discharge_time: int
    codes: frozenset
    notes: tuple
    died_in_visit: bool = False

    def los_days(self) -> float:
        return (self.discharge_time - self.admit_time) / DAY


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: int
    gender: str
    race: str
    visits: tuple


@dataclass
class Cohort:
    patients: list

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def by_id(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        wanted = set(ids)
        return Cohort([p for p in self.patients if p.patient_id in wanted])

    def n_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)


# -- ingestion -------------------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValidationError(f"{where}: missing field '{key}'")
    return obj[key]


def _as_int(value, what: str, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: {what} must be an integer, got {value!r}")
    return value


def _parse_visit(obj: dict, where: str) -> Visit:
    admit = _as_int(_require(obj, "admit_time", where), "admit_time", where)
    discharge = _as_int(_require(obj, "discharge_time", where), "discharge_time", where)
    if discharge < admit:
        raise ValidationError(f"{where}: discharge_time {discharge} < admit_time {admit}")
    codes = []
    for j, c in enumerate(_require(obj, "codes", where)):
        cwhere = f"{where}, code {j}"
        system = _require(c, "system", cwhere)
        if system not in SYSTEMS:
            raise ValidationError(f"{cwhere}: unknown system {system!r}, expected one of {SYSTEMS}")
        raw = _require(c, "code", cwhere)
        if not isinstance(raw, str) or not raw:
            raise ValidationError(f"{cwhere}: code must be a non-empty string")
        codes.append(Code.make(system, raw))
    notes = []
    for j, n in enumerate(obj.get("notes", [])):
        nwhere = f"{where}, note {j}"
        t = _as_int(_require(n, "time", nwhere), "time", nwhere)
        text = _require(n, "text", nwhere)
        if not isinstance(text, str):
            raise ValidationError(f"{nwhere}: text must be a string")
        if not (admit - DAY <= t <= discharge + DAY):
            raise ValidationError(
                f"{nwhere}: note time {t} outside [admit - 1d, discharge + 1d]"
            )
        kind = n.get("kind")
        if kind is not None and not isinstance(kind, str):
            raise ValidationError(f"{nwhere}: kind must be a string or null")
        notes.append(Note(time=t, text=text, kind=kind))
    died = obj.get("died_in_visit", False)
    if not isinstance(died, bool):
        raise ValidationError(f"{where}: died_in_visit must be a boolean")
    return Visit(
        admit_time=admit,
        discharge_time=discharge,
        codes=frozenset(codes),
        notes=tuple(sorted(notes, key=lambda n: n.time)),
        died_in_visit=died,
    )


def _parse_record(obj: dict, where: str) -> PatientRecord:
    pid = _require(obj, "patient_id", where)
    if not isinstance(pid, str) or not pid:
        raise ValidationError(f"{where}: patient_id must be a non-empty string")
    demo = _require(obj, "demographics", where)
    age = _as_int(_require(demo, "age", where), "age", where)
    if age < 0:
        raise ValidationError(f"{where}: negative age {age}")
    gender = _require(demo, "gender", where)
    race = _require(demo, "race", where)
    raw_visits = _require(obj, "visits", where)
    if not isinstance(raw_visits, list) or not raw_visits:
        raise ValidationError(f"{where}: visits must be a non-empty list")
    visits = [_parse_visit(v, f"{where}, visit {i}") for i, v in enumerate(raw_visits)]
    visits.sort(key=lambda v: v.admit_time)
    for a, b in zip(visits, visits[1:]):
        if b.admit_time <= a.admit_time:
            raise ValidationError(f"{where}: visits are not strictly ordered by admit_time")
    return PatientRecord(
        patient_id=pid, age=age, gender=str(gender), race=str(race), visits=tuple(visits)
    )


def ingest_cohort(path: str, lenient: bool = False) -> Cohort:
    """Parse a JSONL cohort file.

    Strict mode raises on the first bad line; lenient mode drops invalid
    records and logs each one with its line number.
    """
    patients: list[PatientRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValidationError(f"{where}: malformed JSON ({e.msg})")
                record = _parse_record(obj, where)
                if record.patient_id in seen:
                    raise ValidationError(
                        f"{where}: duplicate patient_id {record.patient_id!r}"
                    )
            except ValidationError as e:
                if lenient and "duplicate patient_id" not in str(e):
                    log.warning("skipping record: %s", e)
                    continue
                raise
            seen.add(record.patient_id)
            patients.append(record)
    if not patients:
        raise ValidationError(f"{path}: no valid patient records")
    return Cohort(patients)


def write_cohort_jsonl(cohort: Cohort, path: str) -> None:
    """Inverse of ingest_cohort; code order inside a visit is canonicalized."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in cohort.patients:
            obj = {
                "patient_id": p.patient_id,
                "demographics": {"age": p.age, "gender": p.gender, "race": p.race},
                "visits": [
                    {
                        "admit_time": v.admit_time,
                        "discharge_time": v.discharge_time,
                        "codes": [
                            {"system": c.system, "code": c.raw_id}
                            for c in sorted(v.codes, key=lambda c: (c.system, c.raw_id))
                        ],
                        "notes": [
                            {"time": n.time, "kind": n.kind, "text": n.text} for n in v.notes
                        ],
                        "died_in_visit": v.died_in_visit,
                    }
                    for v in p.visits
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# -- grouping and preprocessing -----------------------------------------------


def load_group_map(path: str) -> dict:
    """CSV with header 'raw_id,group_id' mapping codes onto coarser groups."""
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["raw_id", "group_id"]:
            raise ValidationError(f"{path}: expected header 'raw_id,group_id', got {header}")
        for i, row in enumerate(reader, start=2):
            if len(row) < 2:
                raise ValidationError(f"{path}: row {i} has fewer than two columns")
            mapping[row[0]] = row[1]
    return mapping


def preprocess(
    cohort: Cohort,
    min_code_freq: int = 5,
    min_age: int = 18,
    min_visits: int = 1,
    group_map: Optional[dict] = None,
) -> Cohort:
    """Group codes, drop under-age / short-history patients, drop rare codes.

    Codes missing from the grouping map keep group_id = raw_id. Frequencies
    are counted once per visit occurrence over the corpus that survives the
    patient filters, which makes the whole function idempotent.
    """
    grouped: list[PatientRecord] = []
    for p in cohort.patients:
        if p.age < min_age or len(p.visits) < min_visits:
            continue
        if group_map:
            new_visits = []
            for v in p.visits:
                codes = frozenset(
                    replace(c, group_id=group_map.get(c.raw_id, c.raw_id)) for c in v.codes
                )
                new_visits.append(replace(v, codes=codes))
            grouped.append(replace(p, visits=tuple(new_visits)))
        else:
            grouped.append(p)

    freq: dict[tuple[str, str], int] = {}
    for p in grouped:
        for v in p.visits:
            for key in {c.key for c in v.codes}:
                freq[key] = freq.get(key, 0) + 1

    kept = {k for k, n in freq.items() if n >= min_code_freq}
    out: list[PatientRecord] = []
    for p in grouped:
        new_visits = tuple(
            replace(v, codes=frozenset(c for c in v.codes if c.key in kept)) for v in p.visits
        )
        out.append(replace(p, visits=new_visits))

    if not out:
        raise ValidationError("preprocess: no patients survive the filters")
    return Cohort(out)


# -- vocabulary and encodings ----------------------------------------------------


@dataclass(frozen=True)
class VocabEntry:
    system: str
    group_id: str
    index: int
    freq: int

    @property
    def code_id(self) -> str:
        return f"{self.system}:{self.group_id}"


class CodeVocabulary:
    """Dense, deterministic (system, group_id) <-> index mapping."""

    def __init__(self, entries: list):
        self.entries = list(entries)
        self._index = {(e.system, e.group_id): e.index for e in self.entries}
        if len(self._index) != len(self.entries):
            raise ValidationError("vocabulary: duplicate (system, group_id) entry")
        for i, e in enumerate(self.entries):
            if e.index != i:
                raise ValidationError("vocabulary: indices are not dense and ordered")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._index

    def index_of(self, system: str, group_id: str) -> int:
        try:
            return self._index[(system, group_id)]
        except KeyError:
            raise KeyError(f"code {system}:{group_id} not in vocabulary")

    def system_indices(self, system: str) -> np.ndarray:
        return np.array([e.index for e in self.entries if e.system == system], dtype=np.intp)

    def content_hash(self) -> str:
        payload = json.dumps([[e.system, e.group_id] for e in self.entries])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {
            "entries": [
                {"system": e.system, "group_id": e.group_id, "freq": e.freq}
                for e in self.entries
            ]
        }

    @staticmethod
    def from_json(obj: dict) -> "CodeVocabulary":
        entries = [
            VocabEntry(system=e["system"], group_id=e["group_id"], index=i, freq=e["freq"])
            for i, e in enumerate(obj["entries"])
        ]
        return CodeVocabulary(entries)


def build_vocabulary(cohort: Cohort) -> CodeVocabulary:
    """Vocabulary over every code in the (already preprocessed) cohort,
    ordered by (system, group_id) so indices are reproducible."""
    freq: dict[tuple[str, str], int] = {}
    for p in cohort.patients:
        for v in p.visits:
            for key in {c.key for c in v.codes}:
                freq[key] = freq.get(key, 0) + 1
    if not freq:
        raise ValidationError("build_vocabulary: cohort contains no codes")
    keys = sorted(freq)
    entries = [
        VocabEntry(system=s, group_id=g, index=i, freq=freq[(s, g)])
        for i, (s, g) in enumerate(keys)
    ]
    return CodeVocabulary(entries)


def encode_visit_codes(visit: Visit, vocab: CodeVocabulary) -> np.ndarray:
    """Multi-hot float64 vector; duplicates collapse, unknown codes are ignored."""
    x = np.zeros(len(vocab), dtype=np.float64)
    for c in visit.codes:
        idx = vocab._index.get(c.key)
        if idx is not None:
            x[idx] = 1.0
    return x


class DemographicsCodec:
    """One-hot gender and race (with reserved 'other' slots) plus age buckets.

    The age used for visit t is the recorded age plus whole years elapsed
    since the patient's first admission, so the vector can drift over time.
    """

    def __init__(self, genders: list, races: list):
        self.genders = sorted(set(genders))
        self.races = sorted(set(races))

    @staticmethod
    def from_cohort(cohort: Cohort) -> "DemographicsCodec":
        return DemographicsCodec(
            genders=[p.gender for p in cohort.patients],
            races=[p.race for p in cohort.patients],
        )

    @property
    def dim(self) -> int:
        return (len(self.genders) + 1) + (len(self.races) + 1) + len(AGE_BUCKETS)

    def _one_hot(self, value: str, categories: list) -> np.ndarray:
        v = np.zeros(len(categories) + 1, dtype=np.float64)
        try:
            v[categories.index(value)] = 1.0
        except ValueError:
            v[-1] = 1.0  # reserved 'other' slot
        return v

    def encode(self, record: PatientRecord, visit_index: int) -> np.ndarray:
        if not 0 <= visit_index < len(record.visits):
            raise ValidationError(
                f"demographics: visit index {visit_index} out of range for "
                f"{len(record.visits)} visits"
            )
        elapsed = record.visits[visit_index].admit_time - record.visits[0].admit_time
        age = record.age + elapsed // YEAR
        bucket = np.zeros(len(AGE_BUCKETS), dtype=np.float64)
        slot = 0
        for i, (lo, hi) in enumerate(AGE_BUCKETS):
            if age >= lo and (hi is None or age < hi):
                slot = i
                break
        bucket[slot] = 1.0
        return np.concatenate(
            [
                self._one_hot(record.gender, self.genders),
                self._one_hot(record.race, self.races),
                bucket,
            ]
        )

    def to_json(self) -> dict:
        return {"genders": self.genders, "races": self.races}

    @staticmethod
    def from_json(obj: dict) -> "DemographicsCodec":
        return DemographicsCodec(genders=obj["genders"], races=obj["races"])

    def content_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# -- labels --------------------------------------------------------------------


def los_bucket(stay_days: float) -> int:
    """Length-of-stay class: days 1..7 map to classes 1..7 (ceil, floored at
    1), (7, 14] maps to 8, and anything longer maps to 9."""
    if stay_days < 0:
        raise ValidationError(f"los_bucket: negative stay {stay_days}")
    if stay_days > 14:
        return 9
    if stay_days > 7:
        return 8
    return int(min(max(np.ceil(stay_days), 1), 7))


@dataclass(frozen=True)
class VisitLabel:
    patient_id: str
    visit_index: int
    value: object  # float for binary tasks, int class for los9, ndarray for codes


def extract_labels(
    cohort: Cohort,
    task: str,
    vocab: Optional[CodeVocabulary] = None,
    exclude_codes: Optional[set] = None,
) -> list:
    """Per-visit supervision targets for one task.

    readmission30 labels every non-final visit with whether the next
    admission starts within 30 days of discharge; mortality uses the
    died_in_visit flag (patients carrying a group_id in exclude_codes are
    dropped from that task entirely); los9 buckets the stay length; and
    code_prediction targets the next visit's multi-hot vector.
    """
    if task not in TASKS:
        raise ValidationError(f"extract_labels: unknown task {task!r}, expected one of {TASKS}")
    if task == TASK_CODES and vocab is None:
        raise ValidationError("extract_labels: code_prediction requires a vocabulary")
    out: list[VisitLabel] = []
    for p in cohort.patients:
        if task == TASK_MORTALITY and exclude_codes:
            carried = {c.group_id for v in p.visits for c in v.codes}
            if carried & set(exclude_codes):
                continue
        for i, v in enumerate(p.visits):
            if task == TASK_READMISSION:
                if i + 1 >= len(p.visits):
                    continue
                gap = p.visits[i + 1].admit_time - v.discharge_time
                out.append(VisitLabel(p.patient_id, i, float(gap <= READMISSION_WINDOW)))
            elif task == TASK_MORTALITY:
                out.append(VisitLabel(p.patient_id, i, float(v.died_in_visit)))
            elif task == TASK_LOS:
                out.append(VisitLabel(p.patient_id, i, los_bucket(v.los_days())))
            else:
                if i + 1 >= len(p.visits):
                    continue
                out.append(VisitLabel(p.patient_id, i, encode_visit_codes(p.visits[i + 1], vocab)))
    return out


# -- task text windows ------------------------------------------------------------


def select_task_text(visit: Visit, task: str) -> str:
    """Concatenated note text for one visit under the task's time window."""
    if task not in TASKS:
        raise ValidationError(f"select_task_text: unknown task {task!r}")
    notes = sorted(visit.notes, key=lambda n: n.time)
    if task == TASK_READMISSION:
        summaries = [n for n in notes if n.kind == DISCHARGE_SUMMARY_KIND]
        if summaries:
            chosen = summaries
        else:
            lo = visit.discharge_time - 48 * HOUR
            chosen = [n for n in notes if lo <= n.time <= visit.discharge_time]
    elif task in (TASK_MORTALITY, TASK_LOS):
        hi = visit.admit_time + 24 * HOUR
        chosen = [n for n in notes if visit.admit_time <= n.time <= hi]
    else:
        chosen = notes
    return " ".join(n.text for n in chosen)


# -- folds ------------------------------------------------------------------------


def patient_kfold_split(cohort: Cohort, k: int, seed: int) -> list:
    """Disjoint patient-id folds whose sizes differ by at most one."""
    ids = sorted(cohort.patient_ids())
    if k < 2:
        raise ValidationError(f"patient_kfold_split: k must be at least 2, got {k}")
    if k > len(ids):
        raise ValidationError(
            f"patient_kfold_split: k={k} exceeds the {len(ids)} patients available"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    return folds
