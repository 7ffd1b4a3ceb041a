"""Terminology services: code lookup, term mapping, and value normalization.

Backed by two bundled tab-separated tables: a curated code table
(``codes.tsv``) and the value sets used for staging and categorical
variables (``valuesets.tsv``).  All matching is deterministic; there is no
fuzzy scoring beyond token overlap, so results are reproducible across
runs and platforms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

from .datafiles import data_path, read_tsv


class CodeSystem(str, Enum):
    SNOMED = "SNOMED"
    LOINC = "LOINC"
    RXNORM = "RXNORM"
    ICD10 = "ICD10"


SYSTEM_URI: dict[CodeSystem, str] = {
    CodeSystem.SNOMED: "http://snomed.info/sct",
    CodeSystem.LOINC: "http://loinc.org",
    CodeSystem.RXNORM: "http://www.nlm.nih.gov/research/umls/rxnorm",
    CodeSystem.ICD10: "http://hl7.org/fhir/sid/icd-10-cm",
}

URI_SYSTEM = {uri: sys for sys, uri in SYSTEM_URI.items()}

# Raw values that mean "nothing was recorded".  Compared after normalize(),
# so "N/A" appears here as "n a".
_PLACEHOLDERS = {"", "nan", "n a", "na", "none", "unknown", "unk", "not documented", "not doc"}

# Provenance notes for the bundled value sets, keyed by set name.  Sets not
# listed here default to "curated".
_VALUESET_SOURCES = {
    "cancer-diagnosis": "master-crf",
    "metastasis-indication": "master-crf",
    "metastasis-site": "master-crf",
    "tnm-t": "master-crf",
    "tnm-n": "master-crf",
    "tnm-m": "master-crf",
    "numerical-stage": "master-crf",
    "histology": "master-crf",
    "histology-grade": "master-crf",
    "laterality": "master-crf",
    "gender": "hl7-r4-subset",
    "condition-clinical": "hl7-r4-subset",
    "condition-verification": "hl7-r4-subset",
    "observation-status": "hl7-r4-subset",
    "medication-request-status": "hl7-r4-subset",
    "medication-request-intent": "hl7-r4-subset",
    "procedure-status": "hl7-r4-subset",
    "diagnostic-report-status": "hl7-r4-subset",
    "research-study-status": "hl7-r4-subset",
}


@dataclass(frozen=True)
class CodeEntry:
    system: CodeSystem
    code: str
    display: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValueSet:
    name: str
    members: tuple[str, ...]
    source: str = "curated"

    def __contains__(self, value: str) -> bool:
        return value in self.members

    def index(self, member: str) -> int:
        """Ordinal position of a member; raises ValueError if absent."""
        return self.members.index(member)


@dataclass
class CodeTable:
    entries: list[CodeEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_key: dict[tuple[CodeSystem, str], CodeEntry] = {}
        self._by_system: dict[CodeSystem, list[CodeEntry]] = {s: [] for s in CodeSystem}
        for e in self.entries:
            key = (e.system, e.code)
            if key in self._by_key:
                raise ValueError(f"duplicate code entry {e.system.value}/{e.code}")
            self._by_key[key] = e
            self._by_system[e.system].append(e)

    def lookup(self, system: CodeSystem, code: str) -> CodeEntry | None:
        """Exact lookup; absence is a result, not an error."""
        return self._by_key.get((system, code))

    def for_system(self, system: CodeSystem) -> list[CodeEntry]:
        return list(self._by_system[system])


def normalize(text: str) -> str:
    """Canonical term form: lowercase, alphanumeric tokens, single spaces.

    "(s)" endings fold into plural ("Bone(s)" -> "bones") so raw strings
    like "bones" line up with value-set members.  Idempotent.
    """
    t = text.lower().replace("(s)", "s")
    t = re.sub(r"[^a-z0-9]+", " ", t)
    return " ".join(t.split())


def is_placeholder(text: str) -> bool:
    return normalize(text) in _PLACEHOLDERS or not text.strip().strip("-")


def _tokens(text: str) -> frozenset[str]:
    return frozenset(normalize(text).split())


def _grade_tokens(text: str) -> frozenset[str]:
    # "grade 3" and "3: Intermediate ... grade" should line up with the
    # "G3" members, so bare digits get a g prefix when grading language
    # is present.
    toks = list(normalize(text).split())
    if "grade" in toks:
        toks = [f"g{t}" if t.isdigit() else t for t in toks]
    return frozenset(toks)


def load_codes(path: Path | None = None) -> CodeTable:
    rows = read_tsv(path or data_path("codes.tsv"))
    entries = []
    for row in rows:
        if len(row) < 3:
            raise ValueError(f"codes table row too short: {row!r}")
        system = CodeSystem(row[0])
        synonyms = tuple(s.strip() for s in row[3].split("|") if s.strip()) if len(row) > 3 and row[3] else ()
        entries.append(CodeEntry(system=system, code=row[1], display=row[2], synonyms=synonyms))
    return CodeTable(entries)


def load_valuesets(path: Path | None = None) -> dict[str, ValueSet]:
    rows = read_tsv(path or data_path("valuesets.tsv"))
    grouped: dict[str, list[str]] = {}
    for row in rows:
        if len(row) < 2:
            raise ValueError(f"valueset row too short: {row!r}")
        grouped.setdefault(row[0], []).append(row[1])
    return {
        name: ValueSet(name=name, members=tuple(members), source=_VALUESET_SOURCES.get(name, "curated"))
        for name, members in grouped.items()
    }


@lru_cache(maxsize=None)
def _default_codes_cached(path_str: str) -> CodeTable:
    return load_codes(Path(path_str))


@lru_cache(maxsize=None)
def _default_valuesets_cached(path_str: str) -> dict[str, ValueSet]:
    return load_valuesets(Path(path_str))


def default_codes() -> CodeTable:
    return _default_codes_cached(str(data_path("codes.tsv")))


def default_valuesets() -> dict[str, ValueSet]:
    return _default_valuesets_cached(str(data_path("valuesets.tsv")))


def valueset(name: str) -> ValueSet:
    sets = default_valuesets()
    if name not in sets:
        raise KeyError(f"unknown value set {name!r}")
    return sets[name]


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def map_term(term: str, system: CodeSystem, table: CodeTable | None = None) -> list[tuple[CodeEntry, float]]:
    """Rank code candidates for a free-text term within one system.

    A normalized exact match on display or any synonym scores 1.0;
    otherwise the score is the best Jaccard token overlap against the
    entry's names.  Candidates below 0.5 are dropped.  Ties order by code
    ascending so output is stable.
    """
    table = table or default_codes()
    if is_placeholder(term):
        return []
    norm = normalize(term)
    toks = _tokens(term)
    scored: list[tuple[CodeEntry, float]] = []
    for entry in table.for_system(system):
        names = (entry.display, *entry.synonyms)
        if any(normalize(n) == norm for n in names):
            score = 1.0
        else:
            score = max(_jaccard(toks, _tokens(n)) for n in names)
        if score >= 0.5:
            scored.append((entry, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0].code))
    return scored


def best_code(term: str, system: CodeSystem, table: CodeTable | None = None) -> CodeEntry | None:
    ranked = map_term(term, system, table)
    return ranked[0][0] if ranked else None


@dataclass(frozen=True)
class TnmValue:
    """A normalized TNM axis value plus any qualifier annotation.

    "pN0(sn)" normalizes to value "N0" with qualifier "sn"; qualifiers
    that are themselves part of the vocabulary ("N0(i+)") stay in the
    value.
    """

    value: str
    qualifier: str | None = None


def normalize_tnm(raw: str, axis: str) -> TnmValue:
    """Normalize a raw TNM token onto the axis vocabulary.

    Leading p/c/y/yp prefixes are stripped, case folds onto the member
    casing, unmatched parenthetical qualifiers become annotations, and
    anything else lands on "Other".  Blank and placeholder input yields
    "Not Documented".  Idempotent on its own output values.
    """
    axis = axis.upper()
    if axis not in ("T", "N", "M"):
        raise ValueError(f"unknown TNM axis {axis!r}")
    if is_placeholder(raw):
        return TnmValue("Not Documented")
    vs = valueset(f"tnm-{axis.lower()}")
    by_folded = {m.upper().replace(" ", ""): m for m in vs.members}

    compact = re.sub(r"\s+", "", raw.strip())
    m = re.match(r"^(?:YP|CP|P|C|Y)(?=%s)" % axis, compact, flags=re.IGNORECASE)
    if m:
        compact = compact[m.end():]
    folded = compact.upper()
    if folded in by_folded:
        return TnmValue(by_folded[folded])
    qual = re.match(r"^(.*?)\(([^()]*)\)$", compact)
    if qual and qual.group(1).upper() in by_folded:
        return TnmValue(by_folded[qual.group(1).upper()], qual.group(2))
    return TnmValue("Other")


def normalize_categorical(raw: str, vs: ValueSet) -> str:
    """Snap a raw string onto a value-set member.

    Exact match after normalization wins; otherwise the best token-overlap
    coverage of at least 0.5 wins (ties resolve to the earlier member);
    otherwise "Other" where the set has one, else "Not Documented".
    Idempotent: members map to themselves.
    """
    if is_placeholder(raw):
        return "Not Documented"
    norm = normalize(raw)
    for member in vs.members:
        if normalize(member) == norm:
            return member
    raw_toks = _grade_tokens(raw)
    best_member = None
    best_score = 0.0
    for member in vs.members:
        mem_toks = _grade_tokens(member)
        if not raw_toks or not mem_toks:
            continue
        score = len(raw_toks & mem_toks) / min(len(raw_toks), len(mem_toks))
        if score > best_score:
            best_member, best_score = member, score
    if best_member is not None and best_score >= 0.5:
        return best_member
    if "Other" in vs.members:
        return "Other"
    return "Not Documented"
