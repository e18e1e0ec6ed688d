"""Synthetic cohort generator with planted latent structure.

Each patient carries one to three latent conditions. A condition owns a
disjoint set of codes (spread over the dx/proc/med systems) and a token
template for note text; templates share a couple of tokens with a
neighbouring condition so the text signal overlaps but does not duplicate
the code signal. Chronic conditions emit their codes in every visit, acute
ones in exactly one. Mortality and readmission are threshold functions of
per-condition severity weights with labels flipped at a configured noise
rate, and length of stay is drawn from a condition-scaled distribution.

Because every emitted code is owned by exactly one condition, pairwise
"same condition" membership is an exact oracle for what the code embedder
should recover, and the label thresholds bound what any classifier can do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cohort import DAY, HOUR, Cohort, Code, Note, PatientRecord, Visit
from .errors import ValidationError

SYSTEM_PREFIX = {"dx": "D", "proc": "P", "med": "M"}


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    n_conditions: int = 8
    codes_per_condition: int = 6
    chronic_fraction: float = 0.5
    visits_min: int = 2
    visits_max: int = 5
    vocab_sizes: tuple = (("dx", 16), ("proc", 16), ("med", 16))
    tokens_per_condition: int = 8
    shared_tokens: int = 2
    n_noise_tokens: int = 12
    noise_token_rate: float = 0.3
    note_tokens: int = 24
    label_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValidationError(f"synth: n_patients must be positive, got {self.n_patients}")
        if self.n_conditions < 2:
            raise ValidationError("synth: need at least two conditions")
        if not 0.0 <= self.chronic_fraction <= 1.0:
            raise ValidationError(f"synth: chronic_fraction outside [0, 1]: {self.chronic_fraction}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError(f"synth: label_noise must be in [0, 0.5), got {self.label_noise}")
        if not 1 <= self.visits_min <= self.visits_max:
            raise ValidationError(
                f"synth: bad visit range [{self.visits_min}, {self.visits_max}]"
            )
        pool = sum(n for _, n in self.vocab_sizes)
        need = self.n_conditions * self.codes_per_condition
        if need > pool:
            raise ValidationError(
                f"synth: {need} condition codes requested but only {pool} ids available"
            )


@dataclass(frozen=True)
class Condition:
    cid: int
    chronic: bool
    mortality_weight: float
    readmission_weight: float
    los_scale: float
    codes: tuple  # ((system, raw_id), ...)
    tokens: tuple  # note-template tokens, including shared ones


@dataclass
class GroundTruth:
    conditions: list
    patient_conditions: dict  # patient_id -> tuple of condition ids
    mortality_threshold: float
    readmission_threshold: float
    label_noise: float
    seed: int

    def code_condition(self) -> dict:
        """(system, raw_id) -> owning condition id."""
        owner = {}
        for cond in self.conditions:
            for code in cond.codes:
                owner[tuple(code)] = cond.cid
        return owner

    def to_json(self) -> dict:
        return {
            "conditions": [
                {
                    "cid": c.cid,
                    "chronic": c.chronic,
                    "mortality_weight": c.mortality_weight,
                    "readmission_weight": c.readmission_weight,
                    "los_scale": c.los_scale,
                    "codes": [list(code) for code in c.codes],
                    "tokens": list(c.tokens),
                }
                for c in self.conditions
            ],
            "patient_conditions": {k: list(v) for k, v in self.patient_conditions.items()},
            "mortality_threshold": self.mortality_threshold,
            "readmission_threshold": self.readmission_threshold,
            "label_noise": self.label_noise,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "GroundTruth":
        conditions = [
            Condition(
                cid=c["cid"],
                chronic=c["chronic"],
                mortality_weight=c["mortality_weight"],
                readmission_weight=c["readmission_weight"],
                los_scale=c["los_scale"],
                codes=tuple(tuple(code) for code in c["codes"]),
                tokens=tuple(c["tokens"]),
            )
            for c in obj["conditions"]
        ]
        return GroundTruth(
            conditions=conditions,
            patient_conditions={k: tuple(v) for k, v in obj["patient_conditions"].items()},
            mortality_threshold=obj["mortality_threshold"],
            readmission_threshold=obj["readmission_threshold"],
            label_noise=obj["label_noise"],
            seed=obj["seed"],
        )


def write_ground_truth(gt: GroundTruth, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(gt.to_json(), fh, sort_keys=True, indent=1)


def read_ground_truth(path: str) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        return GroundTruth.from_json(json.load(fh))


def _build_conditions(config: SynthConfig, rng: np.random.Generator) -> list:
    # Deal code ids round-robin over systems so each condition spans systems.
    pools = {sys: [f"{SYSTEM_PREFIX[sys]}{i:03d}" for i in range(n)] for sys, n in config.vocab_sizes}
    order = [sys for sys, _ in config.vocab_sizes]
    cursor = {sys: 0 for sys in order}
    n_chronic = int(round(config.chronic_fraction * config.n_conditions))
    chronic_flags = np.zeros(config.n_conditions, dtype=bool)
    chronic_flags[rng.permutation(config.n_conditions)[:n_chronic]] = True

    conditions = []
    wheel = 0
    for cid in range(config.n_conditions):
        codes = []
        for _ in range(config.codes_per_condition):
            for attempt in range(len(order)):
                sys = order[(wheel + attempt) % len(order)]
                if cursor[sys] < len(pools[sys]):
                    codes.append((sys, pools[sys][cursor[sys]]))
                    cursor[sys] += 1
                    wheel += attempt + 1
                    break
            else:
                raise ValidationError("synth: ran out of code ids")
        own = [f"c{cid}t{j}" for j in range(config.tokens_per_condition)]
        neighbour = (cid + 1) % config.n_conditions
        shared = [f"c{neighbour}t{j}" for j in range(config.shared_tokens)]
        conditions.append(
            Condition(
                cid=cid,
                chronic=bool(chronic_flags[cid]),
                mortality_weight=float(rng.uniform(0.0, 1.0)),
                readmission_weight=float(rng.uniform(0.0, 1.0)),
                los_scale=float(rng.uniform(0.5, 1.5)),
                codes=tuple(codes),
                tokens=tuple(own + shared),
            )
        )
    return conditions


def _note_text(config, rng, conditions, active_cids, all_cids) -> str:
    sources = active_cids if active_cids else all_cids
    template = [t for cid in sources for t in conditions[cid].tokens]
    words = []
    for _ in range(config.note_tokens):
        if rng.random() < config.noise_token_rate:
            words.append(f"noise{rng.integers(config.n_noise_tokens)}")
        else:
            words.append(template[rng.integers(len(template))])
    return " ".join(words)


def generate_cohort(config: SynthConfig) -> tuple:
    """Deterministically build (Cohort, GroundTruth) from the config seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    conditions = _build_conditions(config, rng)

    # Draw patient skeletons first so label thresholds can sit at the
    # empirical medians (roughly balanced classes at noise 0).
    patient_conditions = {}
    for i in range(config.n_patients):
        pid = f"s{i:05d}"
        n_cond = min(int(rng.integers(1, 4)), config.n_conditions)
        patient_conditions[pid] = tuple(
            sorted(int(c) for c in rng.choice(config.n_conditions, size=n_cond, replace=False))
        )
    m_sev = {
        pid: sum(conditions[c].mortality_weight for c in cids)
        for pid, cids in patient_conditions.items()
    }
    r_sev = {
        pid: sum(conditions[c].readmission_weight for c in cids)
        for pid, cids in patient_conditions.items()
    }
    m_thr = float(np.median(list(m_sev.values())))
    r_thr = float(np.median(list(r_sev.values())))

    patients = []
    for pid, cids in patient_conditions.items():
        n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))
        chronic_here = [c for c in cids if conditions[c].chronic]
        acute_here = [c for c in cids if not conditions[c].chronic]
        acute_visit = {c: int(rng.integers(n_visits)) for c in acute_here}

        dies = (m_sev[pid] > m_thr) != (rng.random() < config.label_noise)
        readmit_base = r_sev[pid] > r_thr
        los_sev = sum(conditions[c].los_scale for c in cids)

        visits = []
        admit = int(rng.integers(0, 30)) * DAY
        for v in range(n_visits):
            los_days = float(min(30.0, rng.exponential(scale=1.0 + 1.8 * los_sev)))
            discharge = admit + max(HOUR, int(los_days * DAY))

            active = list(chronic_here) + [c for c in acute_here if acute_visit[c] == v]
            codes = frozenset(
                Code.make(sys, raw) for c in active for sys, raw in conditions[c].codes
            )
            notes = (
                Note(time=admit + 2 * HOUR, text=_note_text(config, rng, conditions, active, cids)),
                Note(
                    time=discharge - HOUR if discharge - HOUR > admit else discharge,
                    text=_note_text(config, rng, conditions, active, cids),
                    kind="discharge_summary",
                ),
            )
            visits.append(
                Visit(
                    admit_time=admit,
                    discharge_time=discharge,
                    codes=codes,
                    notes=tuple(sorted(notes, key=lambda n: n.time)),
                    died_in_visit=dies,
                )
            )
            if v + 1 < n_visits:
                readmit = readmit_base != (rng.random() < config.label_noise)
                gap_days = rng.uniform(2.0, 27.0) if readmit else rng.uniform(35.0, 90.0)
                admit = discharge + int(gap_days * DAY)

        # Age tilts with total condition burden so the demographics segment
        # carries real (but weaker-than-code) label signal, the way the
        # other modalities are built to. Gender and race stay uninformative.
        raw_age = int(rng.integers(18, 90))
        burden = m_sev[pid] + r_sev[pid]
        age = int(np.clip(round(0.45 * (raw_age - 18) + 9.0 * burden + 20.0), 18, 90))
        patients.append(
            PatientRecord(
                patient_id=pid,
                age=age,
                gender=str(rng.choice(["f", "m"])),
                race=str(rng.choice(["r0", "r1", "r2"])),
                visits=tuple(visits),
            )
        )

    gt = GroundTruth(
        conditions=conditions,
        patient_conditions=patient_conditions,
        mortality_threshold=m_thr,
        readmission_threshold=r_thr,
        label_noise=config.label_noise,
        seed=config.seed,
    )
    return Cohort(patients), gt


def oracle_code_affinity(gt: GroundTruth) -> tuple:
    """(codes, matrix): matrix[i, j] = 1 iff codes i and j share a condition.

    Codes are listed condition by condition in generation order, so the
    matrix is symmetric with a unit diagonal by construction.
    """
    codes = [code for cond in gt.conditions for code in cond.codes]
    owner = gt.code_condition()
    n = len(codes)
    aff = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            aff[i, j] = 1.0 if owner[tuple(codes[i])] == owner[tuple(codes[j])] else 0.0
    return codes, aff
