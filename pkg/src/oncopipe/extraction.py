"""Free-text note processing: cleanup, sectioning, and entity extraction.

The pipeline is deliberately lexicon driven.  Every rule reads from a
bundled data file (abbreviations, headings, boilerplate patterns, code
tables) so behaviour is reproducible and auditable.  A pluggable
extractor contract lets an external service replace the baseline rules
while the rest of the system stays unchanged: whatever the backend
returns is re-normalized and re-checked here before anyone else sees it.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable

from . import fhir_core, terminology
from .datafiles import data_path, read_tsv
from .terminology import CodeSystem, is_placeholder, normalize

NOT_DOCUMENTED = "Not Documented"


class EmptyNoteError(Exception):
    """The note contains no content after cleanup."""


class BackendFailureError(Exception):
    """An extractor backend failed or returned unusable output."""


class SourceKind(str, Enum):
    CLINICAL_NOTE = "clinical_note"
    PDF_TEXT = "pdf_text"


@dataclass(frozen=True)
class RawNote:
    text: str
    source_kind: SourceKind = SourceKind.CLINICAL_NOTE
    note_date: str | None = None


@dataclass(frozen=True)
class Section:
    section_id: str
    heading: str
    body: str


@dataclass(frozen=True)
class SectionedNote:
    sections: tuple[Section, ...]
    residual: str
    source_date: str | None = None

    def reconstruct(self) -> str:
        parts = [f"{s.heading}\n{s.body}" for s in self.sections]
        if self.residual:
            parts.append(self.residual)
        return "\n".join(parts)

    def bodies(self, section_id: str) -> list[str]:
        return [s.body for s in self.sections if s.section_id == section_id]


@dataclass(frozen=True)
class DiagnosisEntry:
    term: str
    code: tuple[str, str] | None = None  # (CodeSystem value, code)


@dataclass(frozen=True)
class MedicationEntry:
    name: str
    dosage_text: str = ""


@dataclass(frozen=True)
class ProcedureEntry:
    name: str
    performed_date: str | None = None


@dataclass(frozen=True)
class ObservationEntry:
    name: str
    value_text: str = ""


@dataclass(frozen=True)
class Demographics:
    age: int | None = None
    gender: str | None = None
    marital_status: str | None = None


@dataclass(frozen=True)
class ClinicalVariables:
    """Structured variables lifted out of one note.

    Categorical fields always hold a staging value-set member, "Other",
    or "Not Documented"; they are never empty strings.
    """

    cancer_diagnosis: tuple[DiagnosisEntry, ...] = ()
    diagnosis_date: str | None = None
    metastasis_indication: str = NOT_DOCUMENTED
    metastasis_sites: tuple[str, ...] = ()
    tnm_t: str = NOT_DOCUMENTED
    tnm_n: str = NOT_DOCUMENTED
    tnm_m: str = NOT_DOCUMENTED
    tnm_annotations: tuple[tuple[str, str], ...] = ()
    numerical_stage: str = NOT_DOCUMENTED
    histology: str = NOT_DOCUMENTED
    histology_grade: str = NOT_DOCUMENTED
    laterality: str = NOT_DOCUMENTED
    medications: tuple[MedicationEntry, ...] = ()
    procedures: tuple[ProcedureEntry, ...] = ()
    allergies: tuple[str, ...] = ()
    observations: tuple[ObservationEntry, ...] = ()
    demographics: Demographics = field(default_factory=Demographics)
    specimen_source: str | None = None
    specimen_viability: str | None = None
    collected_datetime: str | None = None
    reported_datetime: str | None = None
    panel_name: str | None = None
    performer: str | None = None
    note_date: str | None = None


@dataclass(frozen=True)
class ExtractorContract:
    """Descriptor plus callable for one extraction backend."""

    name: str
    version: str
    deterministic: bool
    extract: Callable[[RawNote], ClinicalVariables]


# ---------------------------------------------------------------------------
# Lexicon loading


@lru_cache(maxsize=None)
def _abbreviations_cached(path_str: str) -> tuple[tuple[str, str], ...]:
    rows = read_tsv(Path(path_str))
    pairs = []
    for row in rows:
        if len(row) < 2:
            raise ValueError(f"abbreviation row too short: {row!r}")
        pairs.append((row[0], row[1]))
    # Longest abbreviation first so "w/o" wins over "w/".
    pairs.sort(key=lambda p: -len(p[0]))
    return tuple(pairs)


def load_abbreviations(path: Path | None = None) -> dict[str, str]:
    return dict(_abbreviations_cached(str(path or data_path("abbreviations.tsv"))))


@lru_cache(maxsize=None)
def _headings_cached(path_str: str) -> tuple[tuple[str, str], ...]:
    rows = read_tsv(Path(path_str))
    out = []
    for row in rows:
        if len(row) < 2:
            raise ValueError(f"heading row too short: {row!r}")
        out.append((row[0], row[1]))
    return tuple(out)


def load_headings(path: Path | None = None) -> dict[str, str]:
    """Map of casefolded heading synonym -> canonical section id."""
    return {syn.casefold(): canon for canon, syn in _headings_cached(str(path or data_path("headings.tsv")))}


@lru_cache(maxsize=None)
def _boilerplate_cached(path_str: str) -> tuple[re.Pattern[str], ...]:
    patterns = []
    for line in Path(path_str).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        patterns.append(re.compile(line, re.IGNORECASE))
    return tuple(patterns)


def load_boilerplate(path: Path | None = None) -> tuple[re.Pattern[str], ...]:
    return _boilerplate_cached(str(path or data_path("boilerplate.txt")))


@lru_cache(maxsize=None)
def _abbrev_regex(path_str: str) -> re.Pattern[str]:
    # "/" counts as a token character so "w/" will not fire inside "mg/ml".
    # Keys that themselves end in "/" skip the right boundary: "w/mets"
    # must still expand.
    pieces = []
    for key, _ in _abbreviations_cached(path_str):
        piece = re.escape(key)
        if key[-1].isalnum():
            piece += r"(?![A-Za-z0-9_/])"
        pieces.append(piece)
    return re.compile(rf"(?<![A-Za-z0-9_/])(?:{'|'.join(pieces)})", re.IGNORECASE)


# ---------------------------------------------------------------------------
# Preprocessing


def preprocess(note: RawNote) -> RawNote:
    """Clean a note: line endings, boilerplate, abbreviations, whitespace.

    Idempotent; raises EmptyNoteError when nothing but whitespace remains.
    """
    text = note.text.replace("\r\n", "\n").replace("\r", "\n")
    boiler = load_boilerplate()
    kept: list[str] = []
    for line in text.split("\n"):
        line = line.rstrip()
        if any(p.fullmatch(line) for p in boiler):
            continue
        kept.append(line)
    text = "\n".join(kept)

    table = load_abbreviations()
    pattern = _abbrev_regex(str(data_path("abbreviations.tsv")))

    def expand(m: re.Match[str]) -> str:
        exp = table[_abbrev_key(m.group(0), table)]
        end = m.end()
        # An expansion for a "/"-terminated key swallows the separator, so
        # restore one space when a word follows directly ("w/mets").
        if m.group(0).endswith("/") and end < len(m.string) and m.string[end].isalnum():
            exp += " "
        return exp

    # Expansions can uncover further abbreviations ("w/mets"), so run to a
    # fixpoint; the table test guarantees expansions are themselves stable.
    previous = None
    while previous != text:
        previous = text
        text = pattern.sub(expand, text)
    text = re.sub(r"\n{3,}", "\n\n", text).strip("\n")
    if not text.strip():
        raise EmptyNoteError("note is empty after cleanup")
    return replace(note, text=text)


def _abbrev_key(token: str, table: dict[str, str]) -> str:
    folded = token.casefold()
    for key in table:
        if key.casefold() == folded:
            return key
    raise KeyError(token)


# ---------------------------------------------------------------------------
# Section segmentation

_MD_HEADING = re.compile(r"^(#{1,6})\s*(.+?)\s*$")
_PLAIN_HEADING = re.compile(r"^([A-Za-z][A-Za-z &/]{1,40}):\s*$")


def _canonical_heading(text: str, headings: dict[str, str]) -> str | None:
    return headings.get(text.strip().rstrip(":").strip().casefold())


def segment_sections(note: RawNote) -> SectionedNote:
    """Split a preprocessed note into canonical sections plus residual.

    Markdown-style heading lines always end the current chunk; plain
    "Heading:" lines only count when the heading is in the synonym table
    (otherwise they are ordinary content, e.g. lab report key lines).
    """
    headings = load_headings()
    sections: list[Section] = []
    residual_chunks: list[str] = []
    current: list[str] = []
    current_section: tuple[str, str] | None = None  # (canonical id, heading line)

    def close() -> None:
        nonlocal current_section
        body = "\n".join(current).strip("\n")
        if current_section is not None:
            sections.append(Section(current_section[0], current_section[1], body))
        elif body.strip():
            residual_chunks.append(body)
        current.clear()
        current_section = None

    for line in note.text.split("\n"):
        md = _MD_HEADING.match(line)
        plain = _PLAIN_HEADING.match(line)
        if md:
            canon = _canonical_heading(md.group(2), headings)
            close()
            if canon is not None:
                current_section = (canon, line)
            else:
                current.append(line)
            continue
        plain_canon = _canonical_heading(plain.group(1), headings) if plain else None
        if plain_canon is not None:
            close()
            current_section = (plain_canon, line)
        else:
            current.append(line)
    close()

    return SectionedNote(
        sections=tuple(sections),
        residual="\n".join(residual_chunks),
        source_date=note.note_date,
    )


# ---------------------------------------------------------------------------
# Entity extraction helpers

_DATE_LINE = re.compile(r"^\s*(\d{4}-\d{2}-\d{2}|\d{1,2}/\d{1,2}/\d{4})\s*$")
_MDY = re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$")
_ISO_DATE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")


def _parse_date_token(token: str) -> str | None:
    """Normalize a date or timestamp token to ISO form; None if invalid."""
    token = token.strip().rstrip(".,;")
    m = _MDY.match(token)
    if m:
        mo, d, y = int(m.group(1)), int(m.group(2)), int(m.group(3))
        try:
            return date(y, mo, d).isoformat()
        except ValueError:
            return None
    if _ISO_DATE.match(token):
        try:
            date.fromisoformat(token)
            return token
        except ValueError:
            return None
    try:
        return fhir_core.canonical_datetime(token)
    except fhir_core.SchemaError:
        return None


def _find_note_date(text: str) -> str | None:
    for line in text.split("\n"):
        m = _DATE_LINE.match(line)
        if m:
            return _parse_date_token(m.group(1))
    return None


_AGE_GENDER = re.compile(
    r"\bis an? (\d{1,3})[ -]year[ -]old\b([^.\n]*)", re.IGNORECASE
)
_GENDER_WORD = re.compile(r"\b(female|male|woman|man)\b", re.IGNORECASE)
_MARITAL = re.compile(r"\bpatient is (married|single|divorced|widowed)\b", re.IGNORECASE)
_GENDER_MAP = {"female": "female", "male": "male", "woman": "female", "man": "male"}


def _extract_demographics(text: str) -> Demographics:
    age: int | None = None
    gender: str | None = None
    m = _AGE_GENDER.search(text)
    if m:
        candidate = int(m.group(1))
        if candidate <= 150:
            age = candidate
        g = _GENDER_WORD.search(m.group(2))
        if g:
            gender = _GENDER_MAP[g.group(1).lower()]
    if gender is None:
        km = re.search(r"^gender:\s*(\S+)\s*$", text, re.IGNORECASE | re.MULTILINE)
        if km and km.group(1).lower() in ("male", "female", "other", "unknown"):
            gender = km.group(1).lower()
    marital: str | None = None
    mm = _MARITAL.search(text)
    if mm:
        marital = mm.group(1).lower()
    return Demographics(age=age, gender=gender, marital_status=marital)


_NO_ALLERGY = re.compile(r"\bno known (?:drug )?allergies\b", re.IGNORECASE)


def _extract_allergies(sectioned: SectionedNote) -> tuple[str, ...]:
    out: list[str] = []
    for body in sectioned.bodies("allergies"):
        if _NO_ALLERGY.search(body):
            continue
        for raw in re.split(r"[;,\n]", body):
            item = raw.strip().lstrip("-*").strip().rstrip(".")
            if item and not is_placeholder(item):
                out.append(item)
    seen: set[str] = set()
    unique = []
    for a in out:
        if a.casefold() not in seen:
            seen.add(a.casefold())
            unique.append(a)
    return tuple(unique)


def _split_medication(entry: str) -> MedicationEntry | None:
    tokens = entry.split()
    if not tokens:
        return None
    split_at = len(tokens)
    for i, tok in enumerate(tokens):
        if any(ch.isdigit() for ch in tok):
            split_at = i
            break
    if split_at == 0:
        return MedicationEntry(name=entry.strip(), dosage_text="")
    name = " ".join(tokens[:split_at]).rstrip(",")
    dosage = " ".join(tokens[split_at:])
    return MedicationEntry(name=name, dosage_text=dosage)


_PRESCRIBED = re.compile(
    r"prescribed the following medications:?\s*\n((?:[ \t]*[-*][^\n]*\n?)+)",
    re.IGNORECASE,
)


def _extract_medications(sectioned: SectionedNote, text: str) -> tuple[MedicationEntry, ...]:
    entries: list[MedicationEntry] = []
    for body in sectioned.bodies("medications"):
        flat = " ".join(body.split("\n"))
        for raw in flat.split(";"):
            raw = raw.strip().rstrip(".")
            if not raw or is_placeholder(raw):
                continue
            med = _split_medication(raw)
            if med:
                entries.append(med)
    for block in _PRESCRIBED.finditer(text):
        for line in block.group(1).split("\n"):
            item = line.strip().lstrip("-*").strip().rstrip(".")
            if not item:
                continue
            med = _split_medication(item)
            if med:
                entries.append(med)
    seen: set[tuple[str, str]] = set()
    unique = []
    for med in entries:
        key = (med.name.casefold(), med.dosage_text.casefold())
        if key not in seen:
            seen.add(key)
            unique.append(med)
    return tuple(unique)


_PROCEDURE_BLOCK = re.compile(
    r"(?:the )?following procedures were (?:conducted|performed):?\s*\n((?:[ \t]*[-*][^\n]*\n?)+)",
    re.IGNORECASE,
)
_UNDERWENT = re.compile(
    r"\bunderwent ([^.;\n]+?)(?:\s+on\s+(\S+))?[.;\n]", re.IGNORECASE
)


def _extract_procedures(text: str) -> tuple[ProcedureEntry, ...]:
    entries: list[tuple[int, ProcedureEntry]] = []
    for block in _PROCEDURE_BLOCK.finditer(text):
        offset = block.start(1)
        for line in block.group(1).split("\n"):
            item = line.strip().lstrip("-*").strip().rstrip(".")
            if item:
                entries.append((offset, ProcedureEntry(name=item)))
                offset += 1
    for m in _UNDERWENT.finditer(text):
        name = m.group(1).strip()
        when = _parse_date_token(m.group(2)) if m.group(2) else None
        if name:
            entries.append((m.start(), ProcedureEntry(name=name, performed_date=when)))
    entries.sort(key=lambda pair: pair[0])
    seen: set[str] = set()
    unique = []
    for _, proc in entries:
        if proc.name.casefold() not in seen:
            seen.add(proc.name.casefold())
            unique.append(proc)
    return tuple(unique)


_DIAGNOSIS_PATTERNS = (
    re.compile(r"\bdiagnosed with ([^.;\n]+)", re.IGNORECASE),
    re.compile(r"\bpresenting with ([^.;\n]+)", re.IGNORECASE),
    re.compile(r"\bhistory of ([^.;\n]+)", re.IGNORECASE),
    re.compile(r"^diagnosis:\s*(.+)$", re.IGNORECASE | re.MULTILINE),
    re.compile(r"\bconsistent with ([^.;\n]+)", re.IGNORECASE),
)
_ICD_TOKEN = re.compile(r"\b([A-Z]\d{2}(?:\.[A-Za-z0-9]{1,4})?)\b")
_DIAGNOSED_DATE = re.compile(
    r"\bdiagnosed\b[^.;\n]*?\b(?:on|in)\s+(\d{1,2}/\d{1,2}/\d{4}|\d{4}-\d{2}-\d{2})",
    re.IGNORECASE,
)


def _extract_diagnoses(scan_text: str) -> tuple[tuple[DiagnosisEntry, ...], str | None]:
    candidates: list[tuple[int, DiagnosisEntry]] = []
    for pattern in _DIAGNOSIS_PATTERNS:
        for m in pattern.finditer(scan_text):
            phrase = m.group(1).strip().rstrip(".").strip()
            # Trailing date clauses belong to diagnosisDate, not the term.
            phrase = re.sub(
                r"\s+(?:on|in)\s+(?:\d{1,2}/\d{1,2}/\d{4}|\d{4}(?:-\d{2}(?:-\d{2})?)?)$",
                "",
                phrase,
            )
            if not phrase or is_placeholder(phrase):
                continue
            candidates.append((m.start(), DiagnosisEntry(term=phrase)))
    table = terminology.default_codes()
    for m in _ICD_TOKEN.finditer(scan_text):
        entry = table.lookup(CodeSystem.ICD10, m.group(1))
        if entry is not None:
            diag = DiagnosisEntry(term=entry.display, code=(CodeSystem.ICD10.value, entry.code))
            candidates.append((m.start(), diag))
    vs = terminology.valueset("cancer-diagnosis")
    padded = f" {normalize(scan_text)} "
    for member in vs.members:
        if member in ("Other", NOT_DOCUMENTED):
            continue
        nm = normalize(member)
        pos = padded.find(f" {nm} ")
        if nm and pos >= 0:
            candidates.append((pos, DiagnosisEntry(term=member)))

    candidates.sort(key=lambda pair: pair[0])
    by_norm: dict[str, DiagnosisEntry] = {}
    order: list[str] = []
    for _, diag in candidates:
        key = normalize(diag.term)
        if key not in by_norm:
            by_norm[key] = diag
            order.append(key)
        elif diag.code and not by_norm[key].code:
            by_norm[key] = replace(by_norm[key], code=diag.code)

    date_match = _DIAGNOSED_DATE.search(scan_text)
    diagnosis_date = _parse_date_token(date_match.group(1)) if date_match else None
    dm = re.search(r"^diagnosis date:\s*(\S+)\s*$", scan_text, re.IGNORECASE | re.MULTILINE)
    if diagnosis_date is None and dm:
        diagnosis_date = _parse_date_token(dm.group(1))
    return tuple(by_norm[k] for k in order), diagnosis_date


_TNM_TOKEN = re.compile(r"(?<![A-Za-z0-9])[pcyPCY]{0,2}[TNM][0-9][A-Za-z0-9()+]*")
_TNM_SPLIT = re.compile(r"(?=[TNM][0-9])")


def _extract_tnm(scan_text: str) -> tuple[dict[str, str], tuple[tuple[str, str], ...]]:
    values: dict[str, str] = {}
    annotations: dict[str, str] = {}
    for m in _TNM_TOKEN.finditer(scan_text):
        pieces = [p for p in _TNM_SPLIT.split(m.group(0)) if p]
        prefix = ""
        if pieces and not re.match(r"^[TNM][0-9]", pieces[0]):
            prefix = pieces.pop(0)
        for i, piece in enumerate(pieces):
            token = (prefix + piece) if i == 0 else piece
            axis = re.sub(r"^[pcyPCY]+", "", token)[0].upper()
            if axis in values:
                continue
            tnm = terminology.normalize_tnm(token, axis)
            values[axis] = tnm.value
            if tnm.qualifier:
                annotations[axis] = tnm.qualifier
    return values, tuple(sorted(annotations.items()))


_STAGE_KEY = re.compile(r"^(?:numerical )?stage:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_STAGE_INLINE = re.compile(r"\bstage\b[:\s]+([IVXivx]+[A-Ca-c]?[1-3]?i?)\b", re.IGNORECASE)


def _extract_stage(scan_text: str) -> str:
    candidates: list[tuple[int, str]] = []
    for m in _STAGE_KEY.finditer(scan_text):
        candidates.append((m.start(), m.group(1)))
    for m in _STAGE_INLINE.finditer(scan_text):
        candidates.append((m.start(), m.group(1)))
    candidates.sort(key=lambda pair: pair[0])
    vs = terminology.valueset("numerical-stage")
    for _, raw in candidates:
        member = terminology.normalize_categorical(raw, vs)
        if member not in ("Other", NOT_DOCUMENTED):
            return member
    if candidates:
        # Stage was documented but does not map cleanly.
        return terminology.normalize_categorical(candidates[0][1], vs)
    return NOT_DOCUMENTED


_GRADE_KEY = re.compile(r"^(?:histologic |histology )?grade:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_GRADE_INLINE = re.compile(r"\b(?:grade\s+([0-4])|(G[1-4X]))\b", re.IGNORECASE)


def _extract_grade(scan_text: str) -> str:
    vs = terminology.valueset("histology-grade")
    m = _GRADE_KEY.search(scan_text)
    if m:
        # The key supplies the grading context, so "Grade: 3" normalizes
        # like the phrase "grade 3".
        return terminology.normalize_categorical(f"grade {m.group(1)}", vs)
    im = _GRADE_INLINE.search(scan_text)
    if im:
        raw = f"grade {im.group(1)}" if im.group(1) else im.group(2)
        return terminology.normalize_categorical(raw, vs)
    return NOT_DOCUMENTED


_LATERALITY_KEY = re.compile(r"^(?:cancer )?laterality:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
# Only organ pairings that carry cancer-laterality meaning; limbs excluded
# so "left arm numbness" does not set a laterality.
_SIDE_ORGAN = re.compile(
    r"\b(left|right|bilateral)\s+(?:breast|lung|kidney|ovary|ovarian|testis|thyroid lobe)\b",
    re.IGNORECASE,
)


def _extract_laterality(scan_text: str) -> str:
    vs = terminology.valueset("laterality")
    m = _LATERALITY_KEY.search(scan_text)
    if m:
        return terminology.normalize_categorical(m.group(1), vs)
    sm = _SIDE_ORGAN.search(scan_text)
    if sm:
        return terminology.normalize_categorical(sm.group(1), vs)
    return NOT_DOCUMENTED


_HISTOLOGY_KEY = re.compile(r"^histology:\s*(.+)$", re.IGNORECASE | re.MULTILINE)


def _extract_histology(scan_text: str) -> str:
    m = _HISTOLOGY_KEY.search(scan_text)
    if m:
        return terminology.normalize_categorical(m.group(1), terminology.valueset("histology"))
    return NOT_DOCUMENTED


_METS_KEY = re.compile(r"^metastasis(?: indication)?:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_METS_SITES_KEY = re.compile(r"^(?:metastatic|metastasis) sites?:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_METS_NEGATIVE = re.compile(
    r"\bno (?:evidence of )?(?:distant )?metasta\w*\b|\bwithout (?:distant )?metasta\w*\b",
    re.IGNORECASE,
)
_METS_POSITIVE = re.compile(
    r"\bmetasta\w*(?:\s+disease)?(?:\s+(?:to|in|involving)\s+([^.;\n]+))?",
    re.IGNORECASE,
)


def _extract_metastasis(scan_text: str) -> tuple[str, tuple[str, ...]]:
    vs_ind = terminology.valueset("metastasis-indication")
    vs_site = terminology.valueset("metastasis-site")
    indication = NOT_DOCUMENTED
    sites: list[str] = []

    km = _METS_KEY.search(scan_text)
    if km:
        indication = terminology.normalize_categorical(km.group(1), vs_ind)
    elif _METS_NEGATIVE.search(scan_text):
        indication = "No"
    else:
        pm = _METS_POSITIVE.search(scan_text)
        if pm:
            indication = "Yes"
            if pm.group(1):
                sites.extend(re.split(r",|\band\b", pm.group(1)))

    sm = _METS_SITES_KEY.search(scan_text)
    if sm:
        sites.extend(re.split(r",|\band\b", sm.group(1)))
        if indication == NOT_DOCUMENTED:
            indication = "Yes"

    members: list[str] = []
    for raw in sites:
        raw = raw.strip().rstrip(".")
        if not raw or is_placeholder(raw):
            continue
        member = terminology.normalize_categorical(raw, vs_site)
        if member != NOT_DOCUMENTED and member not in members:
            members.append(member)
    return indication, tuple(members)


_BIOMARKER_VALUE = r"(positive|negative|equivocal|amplified|not amplified|\d{1,3}\s?%)"


@lru_cache(maxsize=None)
def _genomics_lexicon(path_str: str) -> tuple[tuple[str, re.Pattern[str]], ...]:
    out = []
    for row in read_tsv(Path(path_str)):
        display = row[2]
        names = [display] + ([s for s in row[3].split("|") if s] if len(row) > 3 and row[3] else [])
        alts = "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))
        pattern = re.compile(
            rf"(?<![A-Za-z0-9])(?:{alts})(?![A-Za-z0-9])[\s:=-]*{_BIOMARKER_VALUE}",
            re.IGNORECASE,
        )
        out.append((display, pattern))
    return tuple(out)


def _extract_biomarkers(scan_text: str) -> list[tuple[int, ObservationEntry]]:
    found: list[tuple[int, ObservationEntry]] = []
    seen: set[str] = set()
    for display, pattern in _genomics_lexicon(str(data_path("genomics_codes.tsv"))):
        m = pattern.search(scan_text)
        if m and display not in seen:
            seen.add(display)
            value = re.sub(r"\s+", " ", m.group(1).strip().lower())
            found.append((m.start(), ObservationEntry(name=display, value_text=value)))
    return found


_DISEASE_STATUS_TERMS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("disease progression", ("disease progression", "progressive disease", "progression of disease")),
    ("disease recurrence", ("disease recurrence", "recurrent disease", "recurrence", "relapse")),
    ("partial response", ("partial response",)),
    ("complete response", ("complete response",)),
    ("stable disease", ("stable disease",)),
    ("no evidence of disease", ("no evidence of disease",)),
)
DISEASE_STATUS_NAME = "Cancer disease status"


def _extract_disease_status(scan_text: str) -> list[tuple[int, ObservationEntry]]:
    found: list[tuple[int, ObservationEntry]] = []
    seen: set[str] = set()
    for canonical, phrases in _DISEASE_STATUS_TERMS:
        best: int | None = None
        for phrase in phrases:
            m = re.search(rf"(?<![A-Za-z0-9]){re.escape(phrase)}(?![A-Za-z0-9])", scan_text, re.IGNORECASE)
            if m and (best is None or m.start() < best):
                best = m.start()
        if best is not None and canonical not in seen:
            seen.add(canonical)
            found.append((best, ObservationEntry(name=DISEASE_STATUS_NAME, value_text=canonical)))
    return found


_KEY_LINE = re.compile(r"^([A-Za-z][A-Za-z0-9 /+().,'-]{0,60}?):[ \t]*(.*)$")
_PANEL_KEYS = {
    "test", "clinical indication", "specimen", "collected", "collection date",
    "reported", "report date", "performed by", "pathologist", "findings",
    "sample description", "interpretation",
}
_NON_OBSERVATION_KEYS = _PANEL_KEYS | {
    "patient", "gender", "diagnosis", "diagnosis date", "clinical indication",
    "stage", "grade", "histology", "histologic grade", "histology grade",
    "laterality", "cancer laterality", "metastasis", "metastasis indication",
    "metastatic sites", "metastasis sites", "numerical stage", "allergies",
    "medications", "marital status", "name", "dob", "date of birth", "mrn",
}


@dataclass
class _PanelContext:
    panel_name: str | None = None
    specimen_source: str | None = None
    specimen_viability: str | None = None
    collected: str | None = None
    reported: str | None = None
    performer: str | None = None
    findings: str | None = None
    sample_description: str | None = None
    interpretation: str | None = None


@lru_cache(maxsize=None)
def _panel_table(path_str: str) -> tuple[tuple[str, str, str, str, str], ...]:
    rows = []
    for row in read_tsv(Path(path_str)):
        if len(row) < 5:
            raise ValueError(f"panel keyword row too short: {row!r}")
        rows.append((row[0], row[1], row[2], row[3], row[4]))
    return tuple(rows)


def panel_for_text(text: str) -> tuple[str, str, str, str, str] | None:
    """First panel-table row whose keyword occurs in the text, else None."""
    norm = f" {normalize(text)} "
    for row in _panel_table(str(data_path("panel_keywords.tsv"))):
        if f" {normalize(row[0])} " in norm:
            return row
    return None


def _parse_specimen_value(value: str) -> tuple[str | None, str | None]:
    viability = None
    vm = re.search(r"(\d{1,3}\s?%)\s*viabilit", value, re.IGNORECASE)
    if vm:
        viability = vm.group(1).replace(" ", "")
    first = re.split(r"[;,]", value)[0].strip()
    source = first if first and not is_placeholder(first) else None
    return source, viability


def _extract_panel_context(text: str) -> _PanelContext:
    ctx = _PanelContext()
    row = panel_for_text(text)
    if row is not None:
        ctx.panel_name = row[1]

    lines = text.split("\n")
    for i, line in enumerate(lines):
        m = _KEY_LINE.match(line.strip())
        if not m:
            continue
        key = m.group(1).strip().casefold()
        value = m.group(2).strip()
        if key == "specimen":
            ctx.specimen_source, ctx.specimen_viability = _parse_specimen_value(value)
        elif key in ("collected", "collection date"):
            ctx.collected = _parse_date_token(value)
        elif key in ("reported", "report date"):
            ctx.reported = _parse_date_token(value)
        elif key in ("performed by", "pathologist"):
            ctx.performer = value or None
        elif key == "findings":
            ctx.findings = value or None
        elif key == "sample description":
            ctx.sample_description = value or None
        elif key == "interpretation":
            if value:
                ctx.interpretation = value
            else:
                block: list[str] = []
                for follow in lines[i + 1:]:
                    stripped = follow.strip()
                    if not stripped or _KEY_LINE.match(stripped):
                        break
                    block.append(stripped)
                ctx.interpretation = " ".join(block) or None
    return ctx


def _extract_key_observations(sectioned: SectionedNote) -> list[tuple[int, ObservationEntry]]:
    """Key-value observation lines from lab/imaging sections plus named studies."""
    found: list[tuple[int, ObservationEntry]] = []
    offset = 0
    table = terminology.default_codes()
    loinc_names: set[str] = set()
    for entry in table.for_system(CodeSystem.LOINC):
        loinc_names.add(normalize(entry.display))
        loinc_names.update(normalize(s) for s in entry.synonyms)

    def scan(body: str, base: int, always: bool) -> None:
        for j, line in enumerate(body.split("\n")):
            m = _KEY_LINE.match(line.strip())
            if not m:
                continue
            key = m.group(1).strip()
            value = m.group(2).strip()
            if not value or key.casefold() in _NON_OBSERVATION_KEYS:
                continue
            if always or normalize(key) in loinc_names:
                found.append((base + j, ObservationEntry(name=key, value_text=value)))

    for section in sectioned.sections:
        scan(section.body, offset, always=section.section_id in ("labs", "imaging"))
        offset += len(section.body.split("\n")) + 1
    scan(sectioned.residual, offset, always=False)
    return found


# ---------------------------------------------------------------------------
# Main extraction

_EXCLUDED_SCAN_SECTIONS = {"family_history", "social_history", "allergies", "medications"}


def _scan_text(sectioned: SectionedNote) -> str:
    parts = [s.body for s in sectioned.sections if s.section_id not in _EXCLUDED_SCAN_SECTIONS]
    if sectioned.residual:
        parts.append(sectioned.residual)
    return "\n".join(parts)


def extract_entities(sectioned: SectionedNote) -> ClinicalVariables:
    """Lexicon/regex extraction over a segmented note."""
    full_text = sectioned.reconstruct()
    scan = _scan_text(sectioned)

    diagnoses, diagnosis_date = _extract_diagnoses(scan)
    tnm, annotations = _extract_tnm(scan)
    indication, sites = _extract_metastasis(scan)
    panel = _extract_panel_context(full_text)

    observations: list[tuple[int, ObservationEntry]] = []
    if panel.findings:
        observations.append((-2, ObservationEntry(name=panel.findings, value_text=panel.interpretation or "")))
    if panel.sample_description:
        observations.append((-1, ObservationEntry(name="Sample Description", value_text=panel.sample_description)))
    observations.extend(_extract_biomarkers(scan))
    observations.extend(_extract_disease_status(scan))
    observations.extend((pos + 10_000, obs) for pos, obs in _extract_key_observations(sectioned))
    observations.sort(key=lambda pair: pair[0])
    seen_obs: set[tuple[str, str]] = set()
    obs_entries: list[ObservationEntry] = []
    for _, obs in observations:
        key = (obs.name.casefold(), obs.value_text.casefold())
        if key not in seen_obs:
            seen_obs.add(key)
            obs_entries.append(obs)

    note_date = sectioned.source_date or _find_note_date(full_text)

    return ClinicalVariables(
        cancer_diagnosis=diagnoses,
        diagnosis_date=diagnosis_date,
        metastasis_indication=indication,
        metastasis_sites=sites,
        tnm_t=tnm.get("T", NOT_DOCUMENTED),
        tnm_n=tnm.get("N", NOT_DOCUMENTED),
        tnm_m=tnm.get("M", NOT_DOCUMENTED),
        tnm_annotations=annotations,
        numerical_stage=_extract_stage(scan),
        histology=_extract_histology(scan),
        histology_grade=_extract_grade(scan),
        laterality=_extract_laterality(scan),
        medications=_extract_medications(sectioned, full_text),
        procedures=_extract_procedures(full_text),
        allergies=_extract_allergies(sectioned),
        observations=tuple(obs_entries),
        demographics=_extract_demographics(full_text),
        specimen_source=panel.specimen_source,
        specimen_viability=panel.specimen_viability,
        collected_datetime=panel.collected,
        reported_datetime=panel.reported,
        panel_name=panel.panel_name,
        performer=panel.performer,
        note_date=note_date,
    )


# ---------------------------------------------------------------------------
# Wire form

_WIRE_ORDER = (
    "cancerDiagnosis", "diagnosisDate", "metastasisIndication", "metastasisSites",
    "tnmT", "tnmN", "tnmM", "tnmAnnotations", "numericalStage", "histology",
    "histologyGrade", "laterality", "medications", "procedures", "allergies",
    "observations", "demographics", "specimenSource", "specimenViability",
    "collectedDateTime", "reportedDateTime", "panelName", "performer", "noteDate",
)


def variables_to_dict(v: ClinicalVariables) -> dict[str, Any]:
    """Wire-shaped dict with a fixed key order; absent optionals omitted."""
    diag = []
    for d in v.cancer_diagnosis:
        item: dict[str, Any] = {"term": d.term}
        if d.code:
            item["code"] = {"system": d.code[0], "code": d.code[1]}
        diag.append(item)
    demo: dict[str, Any] = {}
    if v.demographics.age is not None:
        demo["age"] = v.demographics.age
    if v.demographics.gender is not None:
        demo["gender"] = v.demographics.gender
    if v.demographics.marital_status is not None:
        demo["maritalStatus"] = v.demographics.marital_status
    out: dict[str, Any] = {
        "cancerDiagnosis": diag,
        "diagnosisDate": v.diagnosis_date,
        "metastasisIndication": v.metastasis_indication,
        "metastasisSites": list(v.metastasis_sites),
        "tnmT": v.tnm_t,
        "tnmN": v.tnm_n,
        "tnmM": v.tnm_m,
        "tnmAnnotations": {axis: qual for axis, qual in v.tnm_annotations},
        "numericalStage": v.numerical_stage,
        "histology": v.histology,
        "histologyGrade": v.histology_grade,
        "laterality": v.laterality,
        "medications": [
            {"name": m.name, "dosageText": m.dosage_text} for m in v.medications
        ],
        "procedures": [
            {"name": p.name, **({"performedDate": p.performed_date} if p.performed_date else {})}
            for p in v.procedures
        ],
        "allergies": list(v.allergies),
        "observations": [
            {"name": o.name, "valueText": o.value_text} for o in v.observations
        ],
        "demographics": demo,
        "specimenSource": v.specimen_source,
        "specimenViability": v.specimen_viability,
        "collectedDateTime": v.collected_datetime,
        "reportedDateTime": v.reported_datetime,
        "panelName": v.panel_name,
        "performer": v.performer,
        "noteDate": v.note_date,
    }
    return {k: out[k] for k in _WIRE_ORDER if out[k] is not None}


def variables_from_dict(obj: dict[str, Any]) -> ClinicalVariables:
    """Inverse of variables_to_dict; tolerant of missing keys."""
    if not isinstance(obj, dict):
        raise ValueError("variables wire form must be a JSON object")

    def text(key: str, default: str | None = None) -> str | None:
        val = obj.get(key, default)
        if val is None:
            return None
        if not isinstance(val, str):
            raise ValueError(f"{key} must be a string")
        return val

    diag = []
    for item in obj.get("cancerDiagnosis", []):
        code = None
        if isinstance(item.get("code"), dict):
            code = (str(item["code"].get("system", "")), str(item["code"].get("code", "")))
        diag.append(DiagnosisEntry(term=str(item.get("term", "")), code=code))
    meds = tuple(
        MedicationEntry(name=str(m.get("name", "")), dosage_text=str(m.get("dosageText", "")))
        for m in obj.get("medications", [])
    )
    procs = tuple(
        ProcedureEntry(name=str(p.get("name", "")), performed_date=p.get("performedDate"))
        for p in obj.get("procedures", [])
    )
    obs = tuple(
        ObservationEntry(name=str(o.get("name", "")), value_text=str(o.get("valueText", "")))
        for o in obj.get("observations", [])
    )
    demo_obj = obj.get("demographics", {}) or {}
    age = demo_obj.get("age")
    if age is not None and not isinstance(age, int):
        raise ValueError("demographics.age must be an integer")
    annotations = obj.get("tnmAnnotations", {}) or {}
    return ClinicalVariables(
        cancer_diagnosis=tuple(diag),
        diagnosis_date=text("diagnosisDate"),
        metastasis_indication=text("metastasisIndication", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        metastasis_sites=tuple(str(s) for s in obj.get("metastasisSites", [])),
        tnm_t=text("tnmT", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        tnm_n=text("tnmN", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        tnm_m=text("tnmM", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        tnm_annotations=tuple(sorted((str(k), str(v)) for k, v in annotations.items())),
        numerical_stage=text("numericalStage", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        histology=text("histology", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        histology_grade=text("histologyGrade", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        laterality=text("laterality", NOT_DOCUMENTED) or NOT_DOCUMENTED,
        medications=meds,
        procedures=procs,
        allergies=tuple(str(a) for a in obj.get("allergies", [])),
        observations=obs,
        demographics=Demographics(
            age=age,
            gender=demo_obj.get("gender"),
            marital_status=demo_obj.get("maritalStatus"),
        ),
        specimen_source=text("specimenSource"),
        specimen_viability=text("specimenViability"),
        collected_datetime=text("collectedDateTime"),
        reported_datetime=text("reportedDateTime"),
        panel_name=text("panelName"),
        performer=text("performer"),
        note_date=text("noteDate"),
    )


# ---------------------------------------------------------------------------
# Normalization, validation, and the extractor contract

_CATEGORICAL_SETS = {
    "metastasis_indication": "metastasis-indication",
    "numerical_stage": "numerical-stage",
    "histology": "histology",
    "histology_grade": "histology-grade",
    "laterality": "laterality",
}


def normalize_variables(v: ClinicalVariables) -> ClinicalVariables:
    """Force every categorical field back onto its value set."""
    tnm_values: dict[str, str] = {}
    annotations = dict(v.tnm_annotations)
    for axis, raw in (("T", v.tnm_t), ("N", v.tnm_n), ("M", v.tnm_m)):
        tnm = terminology.normalize_tnm(raw, axis)
        tnm_values[axis] = tnm.value
        if tnm.qualifier:
            annotations[axis] = tnm.qualifier
    updates: dict[str, Any] = {
        "tnm_t": tnm_values["T"],
        "tnm_n": tnm_values["N"],
        "tnm_m": tnm_values["M"],
        "tnm_annotations": tuple(sorted(annotations.items())),
    }
    for attr, vs_name in _CATEGORICAL_SETS.items():
        updates[attr] = terminology.normalize_categorical(getattr(v, attr), terminology.valueset(vs_name))
    site_vs = terminology.valueset("metastasis-site")
    sites: list[str] = []
    for site in v.metastasis_sites:
        member = terminology.normalize_categorical(site, site_vs)
        if member != NOT_DOCUMENTED and member not in sites:
            sites.append(member)
    updates["metastasis_sites"] = tuple(sites)
    if v.demographics.gender is not None:
        gender = v.demographics.gender.strip().lower()
        updates["demographics"] = replace(
            v.demographics,
            gender=gender if gender in ("male", "female", "other", "unknown") else None,
        )
    return replace(v, **updates)


def check_variables(v: ClinicalVariables) -> list[str]:
    """Invariant violations as human-readable strings; empty means valid."""
    problems: list[str] = []

    def check_member(value: str, vs_name: str, label: str) -> None:
        vs = terminology.valueset(vs_name)
        if value not in vs.members and value not in ("Other", NOT_DOCUMENTED):
            problems.append(f"{label}: {value!r} not in value set {vs_name}")

    check_member(v.tnm_t, "tnm-t", "tnmT")
    check_member(v.tnm_n, "tnm-n", "tnmN")
    check_member(v.tnm_m, "tnm-m", "tnmM")
    check_member(v.numerical_stage, "numerical-stage", "numericalStage")
    check_member(v.histology_grade, "histology-grade", "histologyGrade")
    check_member(v.laterality, "laterality", "laterality")
    check_member(v.metastasis_indication, "metastasis-indication", "metastasisIndication")
    for site in v.metastasis_sites:
        check_member(site, "metastasis-site", "metastasisSites")
    for label, value in (
        ("diagnosisDate", v.diagnosis_date),
        ("collectedDateTime", v.collected_datetime),
        ("reportedDateTime", v.reported_datetime),
        ("noteDate", v.note_date),
    ):
        if value is not None:
            try:
                fhir_core.canonical_datetime(value)
            except fhir_core.SchemaError:
                problems.append(f"{label}: {value!r} is not a valid date")
    age = v.demographics.age
    if age is not None and not (0 <= age <= 150):
        problems.append(f"demographics.age: {age} out of range")
    gender = v.demographics.gender
    if gender is not None and gender not in ("male", "female", "other", "unknown"):
        problems.append(f"demographics.gender: {gender!r} invalid")
    for med in v.medications:
        if not med.name.strip():
            problems.append("medications: empty name")
    for proc in v.procedures:
        if not proc.name.strip():
            problems.append("procedures: empty name")
    return problems


def baseline_extractor() -> ExtractorContract:
    """The bundled lexicon pipeline as an extractor contract."""
    from . import __version__

    def run(note: RawNote) -> ClinicalVariables:
        return extract_entities(segment_sections(preprocess(note)))

    return ExtractorContract(
        name="baseline-lexicon", version=__version__, deterministic=True, extract=run
    )


def run_extractor(contract: ExtractorContract, note: RawNote) -> ClinicalVariables:
    """Run a backend, then re-normalize and re-check its output.

    EmptyNoteError passes through (an input problem, not a backend one);
    any other backend exception or contract violation surfaces as
    BackendFailureError.
    """
    try:
        result = contract.extract(note)
    except (EmptyNoteError, BackendFailureError):
        raise
    except Exception as exc:
        raise BackendFailureError(f"extractor backend {contract.name!r} failed: {exc}") from exc
    if isinstance(result, dict):
        try:
            result = variables_from_dict(result)
        except (ValueError, TypeError, AttributeError) as exc:
            raise BackendFailureError(f"backend {contract.name!r} returned malformed variables: {exc}") from exc
    if not isinstance(result, ClinicalVariables):
        raise BackendFailureError(f"backend {contract.name!r} returned {type(result).__name__}")
    normalized = normalize_variables(result)
    problems = check_variables(normalized)
    if problems:
        raise BackendFailureError(
            f"backend {contract.name!r} violated the output contract: " + "; ".join(problems)
        )
    return normalized


DEFAULT_TIMEOUT_MS = 30_000


def http_extractor(url: str, timeout_ms: int | None = None) -> ExtractorContract:
    """Adapter for an external extraction service.

    Posts the note as plain text, expects the variables wire form back.
    Each call is isolated; no session state is shared between calls.
    """
    if timeout_ms is None:
        timeout_ms = int(os.environ.get("ONCO_EXTRACTOR_TIMEOUT_MS", DEFAULT_TIMEOUT_MS))

    def run(note: RawNote) -> ClinicalVariables:
        import requests

        try:
            resp = requests.post(
                url,
                data=note.text.encode("utf-8"),
                headers={"Content-Type": "text/plain; charset=utf-8"},
                timeout=timeout_ms / 1000.0,
            )
            resp.raise_for_status()
            payload = resp.json()
        except BackendFailureError:
            raise
        except Exception as exc:
            raise BackendFailureError(f"extractor service at {url} failed: {exc}") from exc
        return variables_from_dict(payload)

    return ExtractorContract(name="http-adapter", version=url, deterministic=False, extract=run)
