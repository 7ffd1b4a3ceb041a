"""Profile validation and accuracy metrics over gold-annotated corpora.

Validation checks cardinality, value-set bindings, and fixed code
systems against shipped profile constraint tables.  Scoring rebuilds a
bundle from each note's predicted variables and measures weighted
per-system code accuracy, the rate of cleanly validating bundles, and
accuracy restricted to revised annotations.  All arithmetic is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

from . import fhir_builder, mcode, terminology
from .datafiles import data_path, read_tsv
from .extraction import ClinicalVariables, variables_from_dict
from .fhir_core import Bundle, Resource
from .mcode import McodeProfileId
from .terminology import SYSTEM_URI, URI_SYSTEM, CodeSystem


class TypeMismatchError(Exception):
    """Resource type does not match the profile's base type."""


class EmptyCorpusError(Exception):
    """Scoring requires at least one annotated note."""


class CorpusFormatError(Exception):
    """A gold corpus directory or file is malformed."""


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class ValidationIssue:
    severity: Severity
    path: str
    rule: str
    message: str


@dataclass(frozen=True)
class Constraint:
    path: str
    min_count: int
    max_count: int | None  # None = unbounded
    binding: str | None = None
    fixed_system: CodeSystem | None = None


@dataclass(frozen=True)
class ProfileDefinition:
    profile: McodeProfileId
    constraints: tuple[Constraint, ...]


@dataclass(frozen=True)
class ExpectedCode:
    system: CodeSystem
    code: str
    weight: int
    original: str | None = None  # earlier annotation label, when one existed


@dataclass(frozen=True)
class GoldAnnotation:
    note_id: str
    expected: ClinicalVariables
    expected_codes: tuple[ExpectedCode, ...]
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class MetricsReport:
    per_system_accuracy: dict[CodeSystem, Fraction]
    conformance_rate: Fraction
    disagreement_accuracy: Fraction


@dataclass(frozen=True)
class ValidationReport:
    entry_issues: tuple[tuple[str, tuple[ValidationIssue, ...]], ...]
    bundle_issues: tuple[ValidationIssue, ...]

    @property
    def issues(self) -> tuple[ValidationIssue, ...]:
        collected = list(self.bundle_issues)
        for _, entry in self.entry_issues:
            collected.extend(entry)
        return tuple(collected)

    @property
    def conformant(self) -> bool:
        return all(i.severity is not Severity.ERROR for i in self.issues)


# === profile loading ===

def _parse_cardinality(text: str) -> tuple[int, int | None]:
    low, _, high = text.partition("..")
    min_count = int(low)
    max_count = None if high == "*" else int(high)
    if max_count is not None and min_count > max_count:
        raise ValueError(f"cardinality {text!r}: min exceeds max")
    return min_count, max_count


@lru_cache(maxsize=4)
def _profiles_cached(path_str: str) -> tuple[ProfileDefinition, ...]:
    from .fhir_core import SCHEMAS

    grouped: dict[str, list[Constraint]] = {}
    for row in read_tsv(Path(path_str)):
        row = list(row) + [""] * (5 - len(row))
        name, path, card, binding, fixed = (cell.strip() for cell in row[:5])
        if name not in mcode.PROFILES:
            raise ValueError(f"unknown profile {name!r}")
        base = mcode.PROFILES[name].base_resource_type
        head = path.split(".", 1)[0]
        if head not in SCHEMAS[base].elements and head not in ("meta", "extension"):
            raise ValueError(f"{name}: path {path!r} not valid for {base}")
        min_count, max_count = _parse_cardinality(card)
        if binding:
            try:
                terminology.valueset(binding)
            except KeyError as exc:
                raise ValueError(f"{name}: unknown value set {binding!r}") from exc
        grouped.setdefault(name, []).append(
            Constraint(
                path=path,
                min_count=min_count,
                max_count=max_count,
                binding=binding or None,
                fixed_system=CodeSystem(fixed) if fixed else None,
            )
        )
    return tuple(
        ProfileDefinition(profile=mcode.PROFILES[name], constraints=tuple(cs))
        for name, cs in grouped.items()
    )


def load_profiles(path: Path | None = None) -> dict[str, ProfileDefinition]:
    resolved = path or data_path("profiles.tsv")
    return {p.profile.name: p for p in _profiles_cached(str(resolved))}


def default_profiles() -> dict[str, ProfileDefinition]:
    return load_profiles()


# === validation ===

def _leaf_values(node, segments: list[str]) -> list:
    """Values reached by a dotted path, fanning out over lists."""
    if isinstance(node, list):
        out = []
        for item in node:
            out.extend(_leaf_values(item, segments))
        return out
    if not segments:
        return [node]
    if isinstance(node, dict) and segments[0] in node:
        return _leaf_values(node[segments[0]], segments[1:])
    return []


def _bound_values(value) -> list[str]:
    """Strings a binding constrains: plain value, coding codes, or CC text."""
    if isinstance(value, str):
        return [value]
    if isinstance(value, dict):
        codings = value.get("coding")
        if isinstance(codings, list) and codings:
            return [c.get("code", "") for c in codings if isinstance(c, dict)]
        text = value.get("text")
        if isinstance(text, str):
            return [text]
    return []


def _codings_of(value) -> list[dict]:
    if isinstance(value, dict) and isinstance(value.get("coding"), list):
        return [c for c in value["coding"] if isinstance(c, dict)]
    return []


def validate(r: Resource, definition: ProfileDefinition) -> list[ValidationIssue]:
    if r.resource_type != definition.profile.base_resource_type:
        raise TypeMismatchError(
            f"{r.resource_type} validated against "
            f"{definition.profile.name} ({definition.profile.base_resource_type})"
        )
    issues: list[ValidationIssue] = []
    for c in definition.constraints:
        segments = c.path.split(".")
        values = _leaf_values(r.body, segments)
        count = len(values)
        if count < c.min_count:
            issues.append(
                ValidationIssue(
                    severity=Severity.ERROR,
                    path=c.path,
                    rule="cardinality",
                    message=f"{c.path}: expected at least {c.min_count}, found {count}",
                )
            )
        if c.max_count is not None and count > c.max_count:
            issues.append(
                ValidationIssue(
                    severity=Severity.ERROR,
                    path=c.path,
                    rule="cardinality",
                    message=f"{c.path}: expected at most {c.max_count}, found {count}",
                )
            )
        if c.binding:
            vs = terminology.valueset(c.binding)
            for value in values:
                for candidate in _bound_values(value):
                    if candidate not in vs:
                        issues.append(
                            ValidationIssue(
                                severity=Severity.ERROR,
                                path=c.path,
                                rule="binding",
                                message=(
                                    f"{c.path}: {candidate!r} not in value set "
                                    f"{c.binding}"
                                ),
                            )
                        )
        if c.fixed_system is not None:
            expected_uri = SYSTEM_URI[c.fixed_system]
            for value in values:
                for cd in _codings_of(value):
                    if cd.get("system") != expected_uri:
                        issues.append(
                            ValidationIssue(
                                severity=Severity.ERROR,
                                path=c.path,
                                rule="fixed-system",
                                message=(
                                    f"{c.path}: coding system "
                                    f"{cd.get('system')!r} is not {expected_uri}"
                                ),
                            )
                        )
    issues.sort(key=lambda i: (i.path, i.rule))
    return issues


def validate_bundle(
    b: Bundle, profiles: dict[str, ProfileDefinition] | None = None
) -> ValidationReport:
    profiles = profiles if profiles is not None else default_profiles()
    entry_issues: list[tuple[str, tuple[ValidationIssue, ...]]] = []
    present = {f"{r.resource_type}/{r.id}" for r in b.resources}
    bundle_issues: list[ValidationIssue] = []
    from .fhir_core import reference_targets

    for r in b.resources:
        issues: list[ValidationIssue] = []
        tagged = mcode.tagged_profile(r)
        if tagged is None:
            issues.append(
                ValidationIssue(
                    severity=Severity.WARNING,
                    path="meta.profile",
                    rule="profile-tag",
                    message=f"{r.resource_type}/{r.id}: no profile tag",
                )
            )
        else:
            definition = profiles.get(tagged.name)
            if definition is not None:
                issues.extend(validate(r, definition))
        for target in reference_targets(r):
            if target not in present:
                bundle_issues.append(
                    ValidationIssue(
                        severity=Severity.ERROR,
                        path=f"{r.resource_type}/{r.id}",
                        rule="closure",
                        message=f"{r.resource_type}/{r.id}: dangling reference {target}",
                    )
                )
        entry_issues.append((f"{r.resource_type}/{r.id}", tuple(issues)))
    return ValidationReport(
        entry_issues=tuple(entry_issues), bundle_issues=tuple(bundle_issues)
    )


# === gold corpus ===

def corpus_dir() -> Path:
    return data_path("corpus")


def _parse_gold(note_id: str, obj: dict) -> GoldAnnotation:
    if not isinstance(obj, dict) or "expected" not in obj:
        raise CorpusFormatError(f"{note_id}: gold annotation needs an 'expected' object")
    expected = variables_from_dict(obj["expected"])
    codes: list[ExpectedCode] = []
    for row in obj.get("expectedCodes", []):
        weight = row.get("weight", 1)
        if not isinstance(weight, int) or weight <= 0:
            raise CorpusFormatError(f"{note_id}: weights must be positive integers")
        codes.append(
            ExpectedCode(
                system=CodeSystem(row["system"]),
                code=row["code"],
                weight=weight,
                original=row.get("original"),
            )
        )
    tags = tuple(obj.get("tags", []))
    return GoldAnnotation(
        note_id=note_id, expected=expected, expected_codes=tuple(codes), tags=tags
    )


def load_corpus(root: Path | None = None) -> list[tuple[str, GoldAnnotation]]:
    """(note text, gold annotation) pairs, ordered by note id."""
    root = root or corpus_dir()
    out: list[tuple[str, GoldAnnotation]] = []
    seen: set[str] = set()
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        note_path = entry / "note.txt"
        gold_path = entry / "gold.json"
        if not note_path.exists() or not gold_path.exists():
            raise CorpusFormatError(f"{entry.name}: needs note.txt and gold.json")
        if entry.name in seen:
            raise CorpusFormatError(f"duplicate note id {entry.name}")
        seen.add(entry.name)
        gold = _parse_gold(entry.name, json.loads(gold_path.read_text()))
        out.append((note_path.read_text(), gold))
    return out


# === metrics ===

def emitted_codes(b: Bundle) -> set[tuple[CodeSystem, str]]:
    """Every (system, code) pair appearing in any coding of the bundle."""
    found: set[tuple[CodeSystem, str]] = set()

    def walk(node) -> None:
        if isinstance(node, dict):
            system = URI_SYSTEM.get(node.get("system", ""))
            if system is not None and "code" in node:
                found.add((system, node["code"]))
            for value in node.values():
                walk(value)
        elif isinstance(node, list):
            for item in node:
                walk(item)

    for r in b.resources:
        walk(r.body)
    return found


def score(corpus: list[tuple[ClinicalVariables, GoldAnnotation]]) -> MetricsReport:
    if not corpus:
        raise EmptyCorpusError("no annotated notes to score")
    ordered = sorted(corpus, key=lambda pair: pair[1].note_id)
    system_hits: dict[CodeSystem, Fraction] = {}
    system_totals: dict[CodeSystem, Fraction] = {}
    conformant = 0
    disagreement_hits = Fraction(0)
    disagreement_total = Fraction(0)
    for predicted, gold in ordered:
        bundle = mcode.to_mcode_bundle(fhir_builder.build_bundle(predicted))
        emitted = emitted_codes(bundle)
        if validate_bundle(bundle).conformant:
            conformant += 1
        for test in gold.expected_codes:
            weight = Fraction(test.weight)
            hit = (test.system, test.code) in emitted
            system_totals[test.system] = system_totals.get(test.system, Fraction(0)) + weight
            if hit:
                system_hits[test.system] = system_hits.get(test.system, Fraction(0)) + weight
            if test.original is not None and not (test.original == test.code and hit):
                # Tally restricted to tests whose prediction departed from the
                # earlier annotation label (a miss counts as a departure).
                disagreement_total += weight
                if hit:
                    disagreement_hits += weight
    per_system = {
        system: system_hits.get(system, Fraction(0)) / total
        for system, total in system_totals.items()
    }
    disagreement = (
        disagreement_hits / disagreement_total if disagreement_total else Fraction(1)
    )
    return MetricsReport(
        per_system_accuracy=per_system,
        conformance_rate=Fraction(conformant, len(ordered)),
        disagreement_accuracy=disagreement,
    )
