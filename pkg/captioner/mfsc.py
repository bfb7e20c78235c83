"""
MFSC document model: parsing, validation and canonical serialization.

Documents are parsed from the JSON wire format (see captioner.schemas) into
immutable dataclasses. Attribute and vocabulary maps are held in name order so
that every in-memory document has one canonical layout.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from pydantic import ValidationError

from captioner.schemas import MFSCWire
from detector.constants import MFSC_VERSION

logger = logging.getLogger(__name__)

CONNECTORS = ("single", "and", "or", "with")


class MFSCError(Exception):
    """Base exception for MFSC documents; carries the validation report."""

    def __init__(self, message: str, report: Optional["ValidationReport"] = None):
        super().__init__(message)
        self.report = report if report is not None else ValidationReport()


class MFSCSyntaxError(MFSCError):
    """Input is not well-formed JSON."""
    pass


class MFSCSchemaError(MFSCError):
    """Input does not follow the wire schema or breaks a document invariant."""
    pass


class MFSCVocabularyError(MFSCSchemaError):
    """An attribute value is missing from its vocabulary."""
    pass


@dataclass(frozen=True)
class Violation:
    """One broken rule, located by a field path."""
    path: str
    rule_id: str
    message: str = ""

    def __str__(self) -> str:
        text = f"{self.rule_id} at {self.path}"
        return f"{text}: {self.message}" if self.message else text


@dataclass
class ValidationReport:
    """List of violations; empty means valid."""
    violations: List[Violation] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def add(self, path: str, rule_id: str, message: str = "") -> None:
        self.violations.append(Violation(path, rule_id, message))

    def rule_ids(self) -> List[str]:
        return [v.rule_id for v in self.violations]

    def to_text(self) -> str:
        """Human-readable listing, one violation per line."""
        if not self.violations:
            return "no violations"
        return "\n".join(f"- {v}" for v in self.violations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "valid": self.is_valid,
            "violations": [
                {"path": v.path, "rule_id": v.rule_id, "message": v.message}
                for v in self.violations
            ],
        }


@dataclass(frozen=True)
class AttributeValue:
    base_values: Tuple[str, ...]
    connector: str

    def render(self) -> str:
        """Text form used inside prompts, e.g. 'green and glossy'."""
        if self.connector == "single" or len(self.base_values) == 1:
            return self.base_values[0] if self.base_values else ""
        return f" {self.connector} ".join(self.base_values)


@dataclass(frozen=True)
class ComponentCaption:
    name: str
    attributes: Dict[str, AttributeValue]
    caption_text: str


@dataclass(frozen=True)
class ForegroundRelation:
    component_counts: Dict[str, int]
    relation_text: str


@dataclass(frozen=True)
class MFSCDocument:
    """Three-view caption of one object category plus its attribute vocabulary."""
    category: str
    summary: str
    background: str
    foreground: ForegroundRelation
    components: Tuple[ComponentCaption, ...]
    attribute_vocabulary: Dict[str, Tuple[str, ...]]

    @property
    def num_components(self) -> int:
        return len(self.components)

    @property
    def component_names(self) -> List[str]:
        return [c.name for c in self.components]


def _pydantic_path(loc: Tuple[Any, ...]) -> str:
    return "/".join(str(part) for part in loc) or "$"


def _report_from_pydantic(exc: ValidationError) -> ValidationReport:
    report = ValidationReport()
    for err in exc.errors():
        loc = err.get("loc", ())
        path = _pydantic_path(loc)
        kind = err.get("type", "")
        if kind == "missing":
            report.add(path, "missing-field", f"missing field: {path}")
        elif loc and loc[-1] == "connector":
            report.add(path, "connector/enum", f"connector must be one of {', '.join(CONNECTORS)}")
        elif loc and loc[0] == "mfsc_version":
            report.add(path, "version", f"unsupported mfsc_version, expected {MFSC_VERSION}")
        elif kind == "extra_forbidden":
            report.add(path, "unknown-field", f"unexpected field: {path}")
        else:
            report.add(path, "schema/type", err.get("msg", kind))
    return report


def _from_wire(wire: MFSCWire) -> MFSCDocument:
    components = tuple(
        ComponentCaption(
            name=c.name,
            attributes={
                name: AttributeValue(tuple(value.base_values), value.connector)
                for name, value in sorted(c.attributes.items())
            },
            caption_text=c.caption_text,
        )
        for c in wire.components
    )
    return MFSCDocument(
        category=wire.category,
        summary=wire.summary,
        background=wire.background,
        foreground=ForegroundRelation(
            component_counts=dict(sorted(wire.foreground.counts.items())),
            relation_text=wire.foreground.relation_text,
        ),
        components=components,
        attribute_vocabulary={k: tuple(v) for k, v in sorted(wire.vocabulary.items())},
    )


def _to_wire_dict(doc: MFSCDocument) -> Dict[str, Any]:
    return {
        "mfsc_version": MFSC_VERSION,
        "category": doc.category,
        "summary": doc.summary,
        "background": doc.background,
        "foreground": {
            "counts": dict(doc.foreground.component_counts),
            "relation_text": doc.foreground.relation_text,
        },
        "components": [
            {
                "name": c.name,
                "attributes": {
                    name: {"base_values": list(v.base_values), "connector": v.connector}
                    for name, v in c.attributes.items()
                },
                "caption_text": c.caption_text,
            }
            for c in doc.components
        ],
        "vocabulary": {k: list(v) for k, v in doc.attribute_vocabulary.items()},
    }


def validate(doc: MFSCDocument) -> ValidationReport:
    """
    Checks every document invariant.

    Never raises: each broken invariant becomes a Violation with a field path
    and rule id.
    """
    report = ValidationReport()
    if not doc.category.strip():
        report.add("category", "category/empty", "category must be nonempty")
    if not doc.summary.strip():
        report.add("summary", "summary/empty", "summary must be nonempty")
    if not doc.components:
        report.add("components", "components/empty", "at least one component is required")

    for attr, values in doc.attribute_vocabulary.items():
        if not values:
            report.add(f"vocabulary/{attr}", "vocabulary/empty", f"vocabulary for '{attr}' is empty")

    seen = set()
    for i, comp in enumerate(doc.components):
        base = f"components/{i}"
        if not comp.name.strip():
            report.add(f"{base}/name", "component/name-empty", "component name must be nonempty")
        elif comp.name in seen:
            report.add(f"{base}/name", "component/duplicate-name", f"duplicate component '{comp.name}'")
        seen.add(comp.name)
        if not comp.caption_text.strip():
            report.add(f"{base}/caption_text", "component/caption-empty", "caption_text must be nonempty")

        for attr, value in comp.attributes.items():
            apath = f"{base}/attributes/{attr}"
            if value.connector not in CONNECTORS:
                report.add(f"{apath}/connector", "connector/enum", f"unknown connector '{value.connector}'")
            if not value.base_values:
                report.add(f"{apath}/base_values", "attribute/empty", "base_values must be nonempty")
                continue
            if (value.connector == "single") != (len(value.base_values) == 1):
                report.add(
                    f"{apath}/connector", "connector/arity",
                    f"connector '{value.connector}' with {len(value.base_values)} base value(s)"
                )
            vocab = doc.attribute_vocabulary.get(attr)
            if vocab is None:
                report.add(apath, "vocabulary/unknown-attribute", f"no vocabulary for attribute '{attr}'")
                continue
            for j, bv in enumerate(value.base_values):
                if bv not in vocab:
                    report.add(f"{apath}/base_values/{j}", "vocabulary/unknown-value",
                               f"'{bv}' is not in the '{attr}' vocabulary")

    for name, count in doc.foreground.component_counts.items():
        cpath = f"foreground/counts/{name}"
        if name not in seen:
            report.add(cpath, "foreground/unknown-component", f"'{name}' is not a captioned component")
        if count < 1:
            report.add(cpath, "foreground/count", f"count must be >= 1, got {count}")
    return report


def _raise_for_report(report: ValidationReport) -> None:
    if report.is_valid:
        return
    if all(r.startswith("vocabulary/") for r in report.rule_ids()):
        raise MFSCVocabularyError(f"vocabulary violation:\n{report.to_text()}", report)
    raise MFSCSchemaError(f"schema violation:\n{report.to_text()}", report)


def parse_document(text: str) -> MFSCDocument:
    """
    Parses and validates an MFSC JSON document.

    Args:
        text: UTF-8 JSON text (bytes are decoded as UTF-8)

    Returns:
        Validated MFSCDocument

    Raises:
        MFSCSyntaxError: If the text is not JSON (line/column reported)
        MFSCSchemaError: If a field is missing, mistyped or breaks an invariant
        MFSCVocabularyError: If an attribute value is outside its vocabulary
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        report = ValidationReport([Violation("$", "syntax", f"line {e.lineno} column {e.colno}: {e.msg}")])
        raise MFSCSyntaxError(f"syntax error at line {e.lineno} column {e.colno}: {e.msg}", report) from e

    try:
        wire = MFSCWire.model_validate(raw)
    except ValidationError as e:
        report = _report_from_pydantic(e)
        raise MFSCSchemaError(f"schema violation:\n{report.to_text()}", report) from e

    doc = _from_wire(wire)
    _raise_for_report(validate(doc))
    logger.debug(f"[MFSC] parsed category={doc.category} components={doc.num_components}")
    return doc


def serialize(doc: MFSCDocument) -> str:
    """
    Canonical JSON text: sorted keys, two-space indent, trailing newline.

    Raises:
        MFSCSchemaError: If the document does not validate
    """
    _raise_for_report(validate(doc))
    return json.dumps(_to_wire_dict(doc), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def content_hash(doc: MFSCDocument) -> str:
    """SHA256 of the canonical serialization."""
    return hashlib.sha256(serialize(doc).encode("utf-8")).hexdigest()


def load_document(path) -> MFSCDocument:
    """Reads and parses an MFSC file."""
    with open(path, "r", encoding="utf-8") as f:
        return parse_document(f.read())
