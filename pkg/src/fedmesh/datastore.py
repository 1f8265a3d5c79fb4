"""Node-local datastores.

CSV ingestion for the clinic and insurer tables, heading-anchored parsing of
the specialist guidance extracts, typed lookups, and the protected-value
index that feeds the outbound leak guard. Stores are immutable after load;
concurrent reads need no coordination.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, RowError, SchemaError
from .pseudonym import CanonicalId, CaseToken, SecretSource, derive_token, load_secret, normalize_id

# Appendix-style null marker for empty prerequisite lists.
EMPTY_LIST_MARKER = "—"

OBSERVATION_COLUMNS = (
    "patient_id",
    "symptom_class",
    "duration_weeks",
    "functional_limitation",
    "prior_conservative_tx",
)
PATIENT_COLUMNS = ("patient_id", "full_name", "dob", "notes")
ENROLLMENT_COLUMNS = ("subject_token", "insurance_number", "plan_id", "status")
COVERAGE_RULE_COLUMNS = ("plan_id", "treatment_code", "covered", "prerequisites")


class SymptomClass(str, Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"


class EnrollmentStatus(str, Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


# ---------------------------------------------------------------------------
# Raw tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Table:
    """One CSV file as loaded: header order and raw cell text preserved."""

    name: str
    header: tuple[str, ...]
    rows: tuple[Mapping[str, str], ...]

    def column(self, name: str) -> tuple[str, ...]:
        if name not in self.header:
            raise ConfigError(f"table {self.name!r} has no column {name!r}")
        return tuple(row[name] for row in self.rows)

    def to_csv(self) -> str:
        """Serialise back to CSV; reproduces the source modulo line endings."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow([row[col] for col in self.header])
        return buf.getvalue()


def read_table(path: Path | str, name: str, required: Sequence[str]) -> Table:
    """Load a header-prefixed CSV file, checking the required columns."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(required[0], f"{path.name}: file has no header row") from None
        for col in required:
            if col not in header:
                raise SchemaError(col, f"{path.name}: missing column {col!r}")
        rows: list[dict[str, str]] = []
        for cells in reader:
            if not cells:
                continue
            if len(cells) != len(header):
                raise RowError(reader.line_num, f"{path.name}: expected {len(header)} cells, got {len(cells)}")
            rows.append(dict(zip(header, cells)))
    return Table(name=name, header=tuple(header), rows=tuple(rows))


def _split_codes(cell: str) -> tuple[str, ...]:
    cell = cell.strip()
    if not cell or cell == EMPTY_LIST_MARKER:
        return ()
    return tuple(part.strip() for part in cell.split(";") if part.strip())


def _row_lines(table: Table) -> Sequence[int]:
    # Header is line 1; data rows follow. Good enough for error reporting on
    # the single-line rows these fixtures use.
    return range(2, len(table.rows) + 2)


# ---------------------------------------------------------------------------
# Typed records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalObservation:
    patient_id: CanonicalId
    symptom_class: SymptomClass
    duration_weeks: int
    functional_limitation: str
    prior_conservative_tx: tuple[str, ...]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: CanonicalId
    full_name: str
    dob: dt.date
    notes: str


@dataclass(frozen=True)
class EnrollmentRow:
    subject_token: CaseToken
    insurance_number: str
    plan_id: str
    status: EnrollmentStatus


@dataclass(frozen=True)
class CoverageRule:
    plan_id: str
    treatment_code: str
    covered: bool
    prerequisites: tuple[str, ...]


@dataclass(frozen=True)
class GuidanceDoc:
    doc_id: str
    severity_bands: Mapping[str, str]
    ladder: tuple[str, ...]
    red_flags: tuple[str, ...]


def _parse_observation(row: Mapping[str, str], line: int) -> ClinicalObservation:
    try:
        symptom = SymptomClass(row["symptom_class"].strip())
    except ValueError:
        raise RowError(line, f"invalid symptom_class {row['symptom_class']!r}") from None
    try:
        weeks = int(row["duration_weeks"])
    except ValueError:
        raise RowError(line, f"invalid duration_weeks {row['duration_weeks']!r}") from None
    if weeks < 0:
        raise RowError(line, f"duration_weeks must be non-negative, got {weeks}")
    return ClinicalObservation(
        patient_id=normalize_id(row["patient_id"]),
        symptom_class=symptom,
        duration_weeks=weeks,
        functional_limitation=row["functional_limitation"].strip(),
        prior_conservative_tx=_split_codes(row["prior_conservative_tx"]),
    )


def _parse_patient(row: Mapping[str, str], line: int) -> PatientRecord:
    try:
        dob = dt.date.fromisoformat(row["dob"].strip())
    except ValueError:
        raise RowError(line, f"invalid dob {row['dob']!r}") from None
    return PatientRecord(
        patient_id=normalize_id(row["patient_id"]),
        full_name=row["full_name"].strip(),
        dob=dob,
        notes=row["notes"],
    )


def _parse_enrollment(row: Mapping[str, str], line: int) -> EnrollmentRow:
    try:
        token = CaseToken(row["subject_token"].strip())
    except ValueError as exc:
        raise RowError(line, f"invalid subject_token: {exc}") from None
    try:
        status = EnrollmentStatus(row["status"].strip())
    except ValueError:
        raise RowError(line, f"invalid status {row['status']!r}") from None
    return EnrollmentRow(
        subject_token=token,
        insurance_number=row["insurance_number"].strip(),
        plan_id=row["plan_id"].strip(),
        status=status,
    )


def _parse_coverage_rule(row: Mapping[str, str], line: int) -> CoverageRule:
    covered_cell = row["covered"].strip().lower()
    if covered_cell not in ("yes", "no"):
        raise RowError(line, f"covered must be yes or no, got {row['covered']!r}")
    return CoverageRule(
        plan_id=row["plan_id"].strip(),
        treatment_code=row["treatment_code"].strip(),
        covered=covered_cell == "yes",
        prerequisites=_split_codes(row["prerequisites"]),
    )


# ---------------------------------------------------------------------------
# Stores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClinicStore:
    observations: tuple[ClinicalObservation, ...]
    patients: tuple[PatientRecord, ...]
    tables: Mapping[str, Table]


@dataclass(frozen=True)
class InsurerStore:
    enrollment: tuple[EnrollmentRow, ...]
    rules: tuple[CoverageRule, ...]
    tables: Mapping[str, Table]


def load_clinic_store(observations_path: Path | str, patients_path: Path | str) -> ClinicStore:
    """Load both clinic tables; every observation must reference a patient."""
    patients_table = read_table(patients_path, "patients", PATIENT_COLUMNS)
    obs_table = read_table(observations_path, "observations", OBSERVATION_COLUMNS)

    patients: list[PatientRecord] = []
    seen_ids: set[str] = set()
    for row, line in zip(patients_table.rows, _row_lines(patients_table)):
        rec = _parse_patient(row, line)
        if rec.patient_id.value in seen_ids:
            raise RowError(line, f"duplicate patient_id {rec.patient_id.value!r}")
        seen_ids.add(rec.patient_id.value)
        patients.append(rec)

    observations: list[ClinicalObservation] = []
    obs_ids: set[str] = set()
    for row, line in zip(obs_table.rows, _row_lines(obs_table)):
        obs = _parse_observation(row, line)
        if obs.patient_id.value in obs_ids:
            raise RowError(line, f"duplicate patient_id {obs.patient_id.value!r}")
        if obs.patient_id.value not in seen_ids:
            raise RowError(line, f"observation {obs.patient_id.value!r} has no patient record")
        obs_ids.add(obs.patient_id.value)
        observations.append(obs)

    return ClinicStore(
        observations=tuple(observations),
        patients=tuple(patients),
        tables={"observations": obs_table, "patients": patients_table},
    )


def load_insurer_store(enrollment_path: Path | str, rules_path: Path | str) -> InsurerStore:
    enrollment_table = read_table(enrollment_path, "enrollment", ENROLLMENT_COLUMNS)
    rules_table = read_table(rules_path, "coverage_rules", COVERAGE_RULE_COLUMNS)

    enrollment: list[EnrollmentRow] = []
    seen_tokens: set[str] = set()
    for row, line in zip(enrollment_table.rows, _row_lines(enrollment_table)):
        rec = _parse_enrollment(row, line)
        if rec.subject_token.hex in seen_tokens:
            raise RowError(line, "duplicate subject_token")
        seen_tokens.add(rec.subject_token.hex)
        enrollment.append(rec)

    rules: list[CoverageRule] = []
    seen_rules: set[tuple[str, str]] = set()
    for row, line in zip(rules_table.rows, _row_lines(rules_table)):
        rule = _parse_coverage_rule(row, line)
        key = (rule.plan_id, rule.treatment_code)
        if key in seen_rules:
            raise RowError(line, f"duplicate rule for {key}")
        seen_rules.add(key)
        rules.append(rule)

    return InsurerStore(
        enrollment=tuple(enrollment),
        rules=tuple(rules),
        tables={"enrollment": enrollment_table, "coverage_rules": rules_table},
    )


def lookup_observation(store: ClinicStore, cid: CanonicalId) -> ClinicalObservation | None:
    for obs in store.observations:
        if obs.patient_id == cid:
            return obs
    return None


def lookup_patient(store: ClinicStore, cid: CanonicalId) -> PatientRecord | None:
    for rec in store.patients:
        if rec.patient_id == cid:
            return rec
    return None


def match_enrollment(store: InsurerStore, token: CaseToken | str) -> EnrollmentRow | None:
    """Exact, case-sensitive match on the stored lowercase-hex token."""
    wanted = token.hex if isinstance(token, CaseToken) else token
    for row in store.enrollment:
        if row.subject_token.hex == wanted:
            return row
    return None


def coverage_rule(store: InsurerStore, plan_id: str, treatment_code: str) -> CoverageRule | None:
    """Unique rule for (plan, treatment); absent means not covered."""
    for rule in store.rules:
        if rule.plan_id == plan_id and rule.treatment_code == treatment_code:
            return rule
    return None


# ---------------------------------------------------------------------------
# Guidance extracts
# ---------------------------------------------------------------------------

_HEADING_RE = re.compile(r"^#+\s*(.+?)\s*$")
_BAND_ITEM_RE = re.compile(r"^-\s*([A-Za-z]+)\s*:\s*(.+?)\s*$")
_NUMBERED_ITEM_RE = re.compile(r"^\d+\.\s*(.+?)\s*$")
_BULLET_ITEM_RE = re.compile(r"^-\s*(.+?)\s*$")

GUIDANCE_HEADINGS = ("severity bands", "ladder", "red flags")


def _classify_heading(text: str) -> str | None:
    lowered = text.lower()
    for key in GUIDANCE_HEADINGS:
        if key in lowered:
            return key
    return None


def parse_guidance_text(doc_id: str, text: str) -> GuidanceDoc:
    """Heading-anchored extraction of bands, ladder steps, and red flags.

    Only the heading/list subset the fixtures use is understood; a file with
    no recognised section heading is rejected.
    """
    bands: dict[str, str] = {}
    ladder: list[str] = []
    red_flags: list[str] = []
    section: str | None = None
    recognised = False

    for line in text.split("\n"):
        heading = _HEADING_RE.match(line)
        if heading:
            section = _classify_heading(heading.group(1))
            recognised = recognised or section is not None
            continue
        if section == "severity bands":
            item = _BAND_ITEM_RE.match(line)
            if item:
                bands[item.group(1).lower()] = item.group(2)
        elif section == "ladder":
            item = _NUMBERED_ITEM_RE.match(line) or _BULLET_ITEM_RE.match(line)
            if item:
                ladder.append(item.group(1))
        elif section == "red flags":
            item = _BULLET_ITEM_RE.match(line)
            if item:
                red_flags.append(item.group(1))

    if not recognised:
        raise SchemaError(
            "|".join(GUIDANCE_HEADINGS),
            f"{doc_id}: no recognised guidance heading (expected one of {', '.join(GUIDANCE_HEADINGS)})",
        )
    return GuidanceDoc(
        doc_id=doc_id,
        severity_bands=bands,
        ladder=tuple(ladder),
        red_flags=tuple(red_flags),
    )


def load_guidance(dir_path: Path | str) -> list[GuidanceDoc]:
    """Parse every markdown file in the guidance directory, sorted by name."""
    docs: list[GuidanceDoc] = []
    for path in sorted(Path(dir_path).glob("*.md")):
        docs.append(parse_guidance_text(path.name, path.read_text(encoding="utf-8")))
    return docs


# ---------------------------------------------------------------------------
# Tool-facing text rendering
#
# Tool results are plain text by contract. These renderers and their parsing
# counterparts define the stable key-value format the deterministic policies
# rely on; they never leave the node.
# ---------------------------------------------------------------------------

NO_OBSERVATION = "no matching observation"
NO_ENROLLMENT = "no matching enrollment"
NO_COVERAGE_RULE = "no coverage rule"
NO_GUIDANCE = "no guidance found"


def render_observation_text(obs: ClinicalObservation) -> str:
    return "\n".join(
        [
            f"patient_id: {obs.patient_id.value}",
            f"symptom_class: {obs.symptom_class.value}",
            f"duration_weeks: {obs.duration_weeks}",
            f"functional_limitation: {obs.functional_limitation}",
            f"prior_conservative_tx: {';'.join(obs.prior_conservative_tx)}",
        ]
    )


def render_enrollment_text(row: EnrollmentRow) -> str:
    return "\n".join(
        [
            f"subject_token: {row.subject_token.hex}",
            f"insurance_number: {row.insurance_number}",
            f"plan_id: {row.plan_id}",
            f"status: {row.status.value}",
        ]
    )


def render_rule_text(rule: CoverageRule) -> str:
    return "\n".join(
        [
            f"plan_id: {rule.plan_id}",
            f"treatment_code: {rule.treatment_code}",
            f"covered: {'yes' if rule.covered else 'no'}",
            f"prerequisites: {';'.join(rule.prerequisites)}",
        ]
    )


def render_guidance_text(docs: Sequence[GuidanceDoc]) -> str:
    lines: list[str] = []
    for doc in docs:
        lines.append(f"doc: {doc.doc_id}")
        for band, description in doc.severity_bands.items():
            lines.append(f"band {band}: {description}")
        for step_no, step in enumerate(doc.ladder, start=1):
            lines.append(f"ladder {step_no}: {step}")
        for flag in doc.red_flags:
            lines.append(f"red_flag: {flag}")
    return "\n".join(lines)


def parse_kv_lines(text: str) -> dict[str, str]:
    """Parse ``key: value`` lines as produced by the row renderers."""
    values: dict[str, str] = {}
    for line in text.split("\n"):
        key, sep, value = line.partition(": ")
        if sep and key not in values:
            values[key] = value
    return values


def parse_guidance_result(text: str) -> list[GuidanceDoc]:
    """Reconstruct guidance documents from a guidance_search tool result."""
    docs: list[GuidanceDoc] = []
    doc_id: str | None = None
    bands: dict[str, str] = {}
    ladder: list[str] = []
    flags: list[str] = []

    def flush() -> None:
        nonlocal bands, ladder, flags
        if doc_id is not None:
            docs.append(GuidanceDoc(doc_id, dict(bands), tuple(ladder), tuple(flags)))
        bands, ladder, flags = {}, [], []

    for line in text.split("\n"):
        key, sep, value = line.partition(": ")
        if not sep:
            continue
        if key == "doc":
            flush()
            doc_id = value
        elif key.startswith("band "):
            bands[key[len("band "):]] = value
        elif key.startswith("ladder "):
            ladder.append(value)
        elif key == "red_flag":
            flags.append(value)
    flush()
    return docs


# ---------------------------------------------------------------------------
# Protected-value index
# ---------------------------------------------------------------------------


class MatchMode(str, Enum):
    EXACT = "exact"  # case-sensitive substring (ids, tokens, dates, codes)
    TEXT = "text"  # case-insensitive substring (human names)


@dataclass(frozen=True)
class ProtectedValue:
    value: str
    source_column: str
    match: MatchMode = MatchMode.EXACT
    # Destination nodes where this value may legitimately appear. Empty
    # means the value must never leave the node.
    allowed_to: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ProtectedSpec:
    """One protected-column (or derived-value) declaration from node config."""

    store: str | None = None
    columns: tuple[str, ...] = ()
    derived: str | None = None
    secret: str | None = None
    column: str = "patient_id"
    match: MatchMode = MatchMode.EXACT
    allowed_to: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ProtectedValueIndex:
    node_id: str
    entries: tuple[ProtectedValue, ...]

    def values(self) -> set[str]:
        return {entry.value for entry in self.entries}


def protected_values(
    node_id: str,
    specs: Sequence[ProtectedSpec],
    tables: Mapping[str, Table],
    secrets: SecretSource | None = None,
) -> ProtectedValueIndex:
    """Materialise the protected-value index for a node.

    Every distinct cell of each declared column is indexed. A ``derived:
    case_tokens`` spec additionally indexes the case token of every
    identifier in the named column, so derived pseudonyms are confined to
    their whitelisted edge just like stored values.
    """
    entries: list[ProtectedValue] = []
    seen: set[tuple[str, str, frozenset[str]]] = set()

    def add(value: str, column: str, match: MatchMode, allowed_to: frozenset[str]) -> None:
        value = value.strip()
        if not value:
            return
        key = (value, column, allowed_to)
        if key in seen:
            return
        seen.add(key)
        entries.append(ProtectedValue(value, column, match, allowed_to))

    for spec in specs:
        if spec.derived is None:
            if spec.store is None:
                raise ConfigError("protected entry needs either 'store' or 'derived'")
            table = tables.get(spec.store)
            if table is None:
                raise ConfigError(f"node {node_id!r}: protected entry names unknown store {spec.store!r}")
            for column in spec.columns:
                if column not in table.header:
                    raise ConfigError(
                        f"node {node_id!r}: protected column {column!r} not in store {spec.store!r}"
                    )
                for cell in table.column(column):
                    add(cell, column, spec.match, spec.allowed_to)
        elif spec.derived == "case_tokens":
            if secrets is None or spec.secret is None:
                raise ConfigError(f"node {node_id!r}: derived case_tokens entry needs a secret")
            store_name = spec.store or "patients"
            table = tables.get(store_name)
            if table is None:
                raise ConfigError(f"node {node_id!r}: derived entry names unknown store {store_name!r}")
            if spec.column not in table.header:
                raise ConfigError(
                    f"node {node_id!r}: derived column {spec.column!r} not in store {store_name!r}"
                )
            key = load_secret(spec.secret, secrets)
            for cell in table.column(spec.column):
                if not cell.strip():
                    continue
                token = derive_token(key, normalize_id(cell))
                add(token.hex, "case_token", MatchMode.EXACT, spec.allowed_to)
        else:
            raise ConfigError(f"unknown derived protected kind {spec.derived!r}")

    return ProtectedValueIndex(node_id=node_id, entries=tuple(entries))
