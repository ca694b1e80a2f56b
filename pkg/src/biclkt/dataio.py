"""Interaction logs: parsing, canonical CSV, student splits, synthetic data."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CANONICAL_HEADER = ("student_id", "exercise_id", "concept_ids", "correct", "order")


class ConfigError(ValueError):
    """Format configuration does not match the input file."""


class EmptyDatasetError(ValueError):
    """No usable rows were found."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    student_id: str
    exercise_id: str
    concept_ids: tuple
    correct: int
    order: int


@dataclass
class ConceptCatalog:
    concepts: tuple
    exercises: tuple
    membership: dict  # exercise -> tuple of concepts

    @classmethod
    def from_interactions(cls, interactions) -> ConceptCatalog:
        membership = defaultdict(set)
        for it in interactions:
            membership[it.exercise_id].update(it.concept_ids)
        members = {e: tuple(sorted(cs)) for e, cs in sorted(membership.items())}
        concepts = sorted({c for cs in members.values() for c in cs})
        return cls(tuple(concepts), tuple(members), members)

    def exercises_of(self, concept) -> tuple:
        if concept not in self.concepts:
            raise KeyError(f"unknown concept {concept!r}")
        return tuple(e for e in self.exercises if concept in self.membership[e])

    @property
    def exercise_index(self) -> dict:
        return {e: i for i, e in enumerate(self.exercises)}


@dataclass
class FormatConfig:
    """Column mapping for a flat interaction table.

    ``concept_delimiter`` splits multi-concept cells; ``merge_same_order``
    folds several rows sharing (student, order, exercise) into one
    interaction with the union of their concepts, which is how
    ASSISTments exports multi-skill problems.
    """

    student: str = "student_id"
    exercise: str = "exercise_id"
    concepts: str = "concept_ids"
    correct: str = "correct"
    order: str = "order"
    concept_delimiter: str = ";"
    delimiter: str = ","
    correct_values: tuple = ("1",)
    incorrect_values: tuple = ("0",)
    merge_same_order: bool = False
    split_multi_concept: bool = False

    @classmethod
    def load(cls, path) -> FormatConfig:
        """Read ``key = value`` lines; lists are comma separated."""
        fields = cls.__dataclass_fields__
        kwargs = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown format key {key!r}")
            default = fields[key].default
            if isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kwargs[key] = tuple(v.strip() for v in value.split(","))
            elif key in ("delimiter", "concept_delimiter") and value == "\\t":
                kwargs[key] = "\t"
            else:
                kwargs[key] = value
        return cls(**kwargs)


ASSIST2009 = FormatConfig(student="user_id", exercise="problem_id", concepts="skill_id",
                          correct="correct", order="order_id", concept_delimiter="_",
                          merge_same_order=True)


@dataclass
class LogData:
    interactions: list
    catalog: ConceptCatalog
    skipped: int = 0

    def __iter__(self):
        return iter((self.interactions, self.catalog))

    @property
    def students(self) -> tuple:
        return tuple(sorted({it.student_id for it in self.interactions}))


def _order_key(value):
    try:
        return int(value)
    except ValueError:
        return int(float(value))


def parse_log(path, fmt: FormatConfig | None = None) -> LogData:
    """Read an interaction table into per-student ordered interactions.

    Rows with an empty or unparsable field are skipped and counted.
    """
    fmt = fmt or FormatConfig()
    rows, skipped = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=fmt.delimiter)
        header = reader.fieldnames or []
        missing = [c for c in (fmt.student, fmt.exercise, fmt.concepts, fmt.correct) if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing column(s) {missing}; header is {header}")
        has_order = fmt.order in header
        for n, row in enumerate(reader):
            try:
                student = row[fmt.student].strip()
                exercise = row[fmt.exercise].strip()
                concepts = tuple(sorted({c.strip() for c in row[fmt.concepts].split(fmt.concept_delimiter)
                                         if c.strip()}))
                raw_correct = row[fmt.correct].strip()
                if raw_correct in fmt.correct_values:
                    correct = 1
                elif raw_correct in fmt.incorrect_values:
                    correct = 0
                else:
                    raise ValueError(raw_correct)
                order = _order_key(row[fmt.order]) if has_order else n
            except (AttributeError, KeyError, ValueError, TypeError):
                skipped += 1
                continue
            if not student or not exercise or not concepts:
                skipped += 1
                continue
            rows.append((student, order, exercise, concepts, correct))

    if not rows:
        raise EmptyDatasetError(f"{path}: no valid rows ({skipped} skipped)")

    if fmt.merge_same_order:
        merged = {}
        for student, order, exercise, concepts, correct in rows:
            key = (student, order, exercise)
            if key in merged:
                merged[key] = (student, order, exercise,
                               tuple(sorted(set(merged[key][3]) | set(concepts))), merged[key][4])
            else:
                merged[key] = (student, order, exercise, concepts, correct)
        rows = list(merged.values())

    rows.sort(key=lambda r: (r[0], r[1]))
    interactions = []
    last = {}
    for student, order, exercise, concepts, correct in rows:
        if student in last and order <= last[student]:
            # duplicate order index: keep the stream strictly increasing
            order = last[student] + 1
        last[student] = order
        if fmt.split_multi_concept and len(concepts) > 1:
            for c in concepts:
                interactions.append(Interaction(student, exercise, (c,), correct, order))
        else:
            interactions.append(Interaction(student, exercise, concepts, correct, order))
    if skipped:
        log.info("%s: skipped %d malformed row(s)", path, skipped)
    return LogData(interactions, ConceptCatalog.from_interactions(interactions), skipped)


def write_log(path, interactions) -> None:
    """Write the canonical CSV (``;``-joined concept sets)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_HEADER)
        for it in interactions:
            w.writerow((it.student_id, it.exercise_id, ";".join(it.concept_ids), it.correct, it.order))


# -------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


def split(interactions, spec: SplitSpec):
    """Partition interactions by student into ``(train, test)``."""
    students = sorted({it.student_id for it in interactions})
    if len(students) < 2:
        raise SplitError("need at least 2 students to split")
    if not 0 < spec.train_fraction < 1:
        raise SplitError(f"train_fraction must be in (0, 1), got {spec.train_fraction}")
    n_train = int(round(spec.train_fraction * len(students)))
    if n_train == 0 or n_train == len(students):
        raise SplitError(f"train_fraction {spec.train_fraction} leaves one side empty "
                         f"with {len(students)} students")
    perm = np.random.default_rng(spec.seed).permutation(len(students))
    train_ids = {students[i] for i in perm[:n_train]}
    train = [it for it in interactions if it.student_id in train_ids]
    test = [it for it in interactions if it.student_id not in train_ids]
    return train, test


@dataclass(frozen=True)
class Sequence:
    student_id: str
    exercises: tuple
    correct: tuple

    def __len__(self):
        return len(self.exercises)


def to_sequences(interactions, max_len: int = 200) -> list:
    """Group by student; sequences longer than ``max_len`` continue in new chunks."""
    by_student = defaultdict(list)
    for it in interactions:
        by_student[it.student_id].append(it)
    out = []
    for student in sorted(by_student):
        items = sorted(by_student[student], key=lambda it: it.order)
        for start in range(0, len(items), max_len):
            chunk = items[start:start + max_len]
            out.append(Sequence(student, tuple(it.exercise_id for it in chunk),
                                tuple(it.correct for it in chunk)))
    return out


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class MasteryParams:
    """Knobs of the synthetic student model.

    Each student holds a mastery level in [0, 1] per concept, drawn from
    Beta(init_a, init_b) (or pinned to ``fixed_mastery``). Practising a
    concept moves mastery toward 1 by ``learn_rate``. An exercise's
    effective mastery is ``m ** (1 + difficulty)``, where difficulty is
    a concept-wide offset plus a small per-exercise jitter.
    """

    guess: float = 0.2
    slip: float = 0.1
    learn_rate: float = 0.15
    init_a: float = 0.3
    init_b: float = 0.3
    fixed_mastery: float | None = None
    concept_difficulty: float = 1.0
    exercise_jitter: float = 0.2
    multi_concept_prob: float = 0.15
    stay_prob: float = 0.6


@dataclass
class SyntheticData:
    interactions: list
    catalog: ConceptCatalog
    mastery: np.ndarray  # (n_students, seq_len + 1, n_concepts): before each step, and final
    concept_of: dict = field(default_factory=dict)  # exercise -> primary concept


def generate_synthetic(n_students=200, n_concepts=12, n_exercises=60, seq_len=50,
                       params: MasteryParams | None = None, seed=0) -> SyntheticData:
    """Simulate students answering exercises with planted concept structure."""
    p = params or MasteryParams()
    if min(n_students, n_concepts, n_exercises, seq_len) < 1:
        raise ValueError("counts must be >= 1")
    if n_exercises < n_concepts:
        raise ValueError("need at least one exercise per concept")
    for name in ("guess", "slip", "learn_rate", "multi_concept_prob", "stay_prob"):
        if not 0 <= getattr(p, name) <= 1:
            raise ValueError(f"{name} must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    concepts = [f"c{k:02d}" for k in range(n_concepts)]
    exercises = [f"e{k:03d}" for k in range(n_exercises)]
    primary = np.arange(n_exercises) % n_concepts
    members = []
    for k in range(n_exercises):
        cs = {int(primary[k])}
        if n_concepts > 1 and rng.random() < p.multi_concept_prob:
            other = int(rng.integers(n_concepts - 1))
            cs.add(other if other < primary[k] else other + 1)
        members.append(tuple(sorted(cs)))
    concept_offset = rng.uniform(0, p.concept_difficulty, size=n_concepts)
    difficulty = np.array([concept_offset[primary[k]] for k in range(n_exercises)])
    difficulty = np.clip(difficulty + rng.uniform(-p.exercise_jitter, p.exercise_jitter, n_exercises), 0, None)
    by_concept = [np.flatnonzero(primary == c) for c in range(n_concepts)]

    mastery = np.zeros((n_students, seq_len + 1, n_concepts))
    interactions = []
    for s in range(n_students):
        if p.fixed_mastery is not None:
            m = np.full(n_concepts, float(p.fixed_mastery))
        else:
            m = rng.beta(p.init_a, p.init_b, size=n_concepts)
        current = int(rng.integers(n_concepts))
        for t in range(seq_len):
            mastery[s, t] = m
            if rng.random() >= p.stay_prob:
                current = int(rng.integers(n_concepts))
            k = int(rng.choice(by_concept[current]))
            cs = members[k]
            eff = float(np.mean(m[list(cs)])) ** (1.0 + difficulty[k])
            p_correct = eff * (1 - p.slip) + (1 - eff) * p.guess
            correct = int(rng.random() < p_correct)
            interactions.append(Interaction(f"s{s:04d}", exercises[k],
                                            tuple(concepts[c] for c in cs), correct, t))
            if p.fixed_mastery is None:
                for c in cs:
                    m[c] += p.learn_rate * (1 - m[c])
        mastery[s, seq_len] = m

    catalog = ConceptCatalog.from_interactions(interactions)
    concept_of = {exercises[k]: concepts[primary[k]] for k in range(n_exercises)}
    return SyntheticData(interactions, catalog, mastery, concept_of)
