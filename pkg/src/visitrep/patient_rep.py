"""Per-visit patient vectors assembled from the frozen upstream models.

A visit's vector is the concatenation [code; text; demo]. The code segment
comes from the causal encoder over the patient's earlier visits (for the
clinical tasks the current visit's codes are excluded; for next-code
prediction the current visit is included since the target is the following
one). The text segment summarizes the task's note window; a visit with no
usable text gets a zero segment, as does the first visit's code segment.
The demographics segment is the per-visit snapshot (age drifts with time).

Extraction never mutates the upstream models, so segments can be zeroed
after the fact to produce every ablation variant from one pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cohort import (
    TASK_CODES,
    TASKS,
    Cohort,
    CodeVocabulary,
    DemographicsCodec,
    PatientRecord,
    encode_visit_codes,
    select_task_text,
)
from .code_embedder import CodeEmbedderModel, encode_history
from .errors import ValidationError
from .text_embedder import (
    PrecomputedVectorEncoder,
    SummarizerModel,
    sentence_matrix,
    summarize,
    visit_key,
)

SEGMENTS = ("code", "text", "demo")


@dataclass(frozen=True)
class RepresentationSpace:
    """Fixed segment layout of the concatenated vector."""

    d_code: int
    d_enc: int
    d_demo: int

    def __post_init__(self):
        for name in ("d_code", "d_enc", "d_demo"):
            if getattr(self, name) < 1:
                raise ValidationError(f"representation: {name} must be >= 1")

    @property
    def total_dim(self) -> int:
        return self.d_code + self.d_enc + self.d_demo

    def offsets(self) -> dict:
        return {
            "code": (0, self.d_code),
            "text": (self.d_code, self.d_code + self.d_enc),
            "demo": (self.d_code + self.d_enc, self.total_dim),
        }


@dataclass(frozen=True)
class PatientRepresentation:
    patient_id: str
    visit_index: int
    task: str
    vector: np.ndarray


def assemble(space: RepresentationSpace, code_vec, text_vec, demo_vec) -> np.ndarray:
    """Concatenate the three segments, checking each width by name."""
    parts = (("code", code_vec, space.d_code), ("text", text_vec, space.d_enc),
             ("demo", demo_vec, space.d_demo))
    for name, vec, want in parts:
        vec = np.asarray(vec)
        if vec.shape != (want,):
            raise ValidationError(
                f"{name} segment: expected length {want}, got shape {vec.shape}"
            )
    return np.concatenate([code_vec, text_vec, demo_vec]).astype(np.float64)


def read_segment(space: RepresentationSpace, z: np.ndarray, name: str) -> np.ndarray:
    if name not in SEGMENTS:
        raise ValidationError(f"unknown segment {name!r}, expected one of {SEGMENTS}")
    lo, hi = space.offsets()[name]
    return z[..., lo:hi]


def zero_segments(z: np.ndarray, space: RepresentationSpace, keep) -> np.ndarray:
    """Copy of z (vector or matrix) with every segment outside `keep` zeroed."""
    keep = tuple(keep)
    unknown = set(keep) - set(SEGMENTS)
    if unknown:
        raise ValidationError(f"unknown segments {sorted(unknown)}, expected from {SEGMENTS}")
    if not keep:
        raise ValidationError("at least one segment must be kept")
    out = np.array(z, dtype=np.float64, copy=True)
    for name, (lo, hi) in space.offsets().items():
        if name not in keep:
            out[..., lo:hi] = 0.0
    return out


class RepresentationPipeline:
    """Joins the frozen models into per-visit vectors for one cohort."""

    def __init__(
        self,
        code_model: CodeEmbedderModel,
        encoder,
        summarizer: SummarizerModel,
        demo_codec: DemographicsCodec,
        vocab: CodeVocabulary,
    ):
        self.code_model = code_model
        self.encoder = encoder
        self.summarizer = summarizer
        self.demo_codec = demo_codec
        self.vocab = vocab
        self.space = RepresentationSpace(
            d_code=code_model.config.d_code,
            d_enc=summarizer.config.d_enc,
            d_demo=demo_codec.dim,
        )

    def _text_vector(self, record: PatientRecord, vi: int, task: str) -> np.ndarray:
        if isinstance(self.encoder, PrecomputedVectorEncoder):
            # Imported vectors are per visit; task windows do not apply.
            mat = self.encoder.matrix_for(visit_key(record.patient_id, vi))
        else:
            text = select_task_text(record.visits[vi], task)
            mat = sentence_matrix(text, self.encoder, self.summarizer.config.chunk_size)
        if mat is None:
            return np.zeros(self.space.d_enc)
        return summarize(self.summarizer, mat)

    def represent_patient(self, record: PatientRecord, task: str) -> list:
        if task not in TASKS:
            raise ValidationError(f"unknown task {task!r}, expected one of {TASKS}")
        matrix = np.stack([encode_visit_codes(v, self.vocab) for v in record.visits])
        history = encode_history(self.code_model, matrix)
        out = []
        for vi in range(len(record.visits)):
            if task == TASK_CODES:
                code_vec = history[vi]
            elif vi == 0:
                code_vec = np.zeros(self.space.d_code)
            else:
                code_vec = history[vi - 1]
            z = assemble(
                self.space,
                code_vec,
                self._text_vector(record, vi, task),
                self.demo_codec.encode(record, vi),
            )
            out.append(PatientRepresentation(record.patient_id, vi, task, z))
        return out

    def represent_cohort(self, cohort: Cohort, task: str) -> list:
        reps = []
        for record in cohort.patients:
            reps.extend(self.represent_patient(record, task))
        return reps


def write_representations(path, reps) -> None:
    """JSONL export, one visit per line, values rounded to float32."""
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reps:
            row = {
                "patient_id": rep.patient_id,
                "visit_index": rep.visit_index,
                "task": rep.task,
                "z": [float(v) for v in rep.vector.astype(np.float32)],
            }
            fh.write(json.dumps(row) + "\n")


def read_representations(path) -> list:
    reps = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rep = PatientRepresentation(
                    patient_id=obj["patient_id"],
                    visit_index=int(obj["visit_index"]),
                    task=obj["task"],
                    vector=np.asarray(obj["z"], dtype=np.float64),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad representation row ({exc})") from exc
            reps.append(rep)
    return reps


def join_representations(reps, labels):
    """Align representations with labels on (patient_id, visit_index).

    Returns (X, y, keys) for the visits present on both sides, ordered by
    the label list. y is a float vector for scalar targets or a matrix for
    multi-hot targets.
    """
    by_key = {(r.patient_id, r.visit_index): r for r in reps}
    rows, targets, keys = [], [], []
    for label in labels:
        key = (label.patient_id, label.visit_index)
        rep = by_key.get(key)
        if rep is None:
            continue
        rows.append(rep.vector)
        targets.append(label.value)
        keys.append(key)
    if not rows:
        raise ValidationError("no overlap between representations and labels")
    X = np.stack(rows)
    first = targets[0]
    if isinstance(first, np.ndarray):
        y = np.stack(targets)
    else:
        y = np.asarray(targets, dtype=np.float64)
    return X, y, keys
