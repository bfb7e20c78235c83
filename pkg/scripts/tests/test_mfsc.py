"""
MFSC parsing, validation and canonical serialization.
"""

import json

import numpy as np
import pytest

from captioner.mfsc import (
    AttributeValue,
    ComponentCaption,
    ForegroundRelation,
    MFSCDocument,
    MFSCSchemaError,
    MFSCSyntaxError,
    MFSCVocabularyError,
    content_hash,
    load_document,
    parse_document,
    serialize,
    validate,
)
from scripts.tests.base import PCB_DOCUMENT, SINGLE_DOCUMENT, mutate, pcb_document, wire_dict

WORDS = ["red", "blue", "matte", "glossy", "copper", "wood", "é", 'quote"d', "line\nbreak", "ring"]


def _rule_ids(exc_info):
    return exc_info.value.report.rule_ids()


def _parse_wire(raw):
    return parse_document(json.dumps(raw))


def test_shipped_fixtures_are_canonical():
    for path in (PCB_DOCUMENT, SINGLE_DOCUMENT):
        doc = load_document(path)
        assert serialize(doc) == path.read_text(encoding="utf-8")
        assert validate(doc).is_valid


def test_pcb_fixture_content():
    doc = pcb_document()
    assert doc.component_names == ["capacitor", "led", "pins"]
    pins = doc.components[2].attributes["material"]
    assert pins.connector == "and"
    assert pins.render() == "gold and silver"
    assert doc.foreground.component_counts == {"capacitor": 1, "led": 1, "pins": 1}


def test_missing_summary_is_reported_by_path():
    raw = mutate(wire_dict(), ["summary"], delete=True)
    with pytest.raises(MFSCSchemaError) as exc_info:
        _parse_wire(raw)
    report = exc_info.value.report
    assert report.rule_ids() == ["missing-field"]
    assert report.violations[0].path == "summary"
    assert "missing field: summary" in report.to_text()


def test_unknown_connector():
    raw = mutate(wire_dict(), ["components", 0, "attributes", "color", "connector"], "plus")
    with pytest.raises(MFSCSchemaError) as exc_info:
        _parse_wire(raw)
    assert "connector/enum" in _rule_ids(exc_info)
    assert exc_info.value.report.violations[0].path == "components/0/attributes/color/connector"


def test_value_outside_vocabulary():
    raw = mutate(wire_dict(), ["components", 1, "attributes", "color", "base_values"], ["purple"])
    with pytest.raises(MFSCVocabularyError) as exc_info:
        _parse_wire(raw)
    assert _rule_ids(exc_info) == ["vocabulary/unknown-value"]
    assert exc_info.value.report.violations[0].path == "components/1/attributes/color/base_values/0"


def test_attribute_without_vocabulary():
    raw = mutate(wire_dict(), ["vocabulary"], {"color": ["black", "blue", "red", "white"]})
    with pytest.raises(MFSCVocabularyError) as exc_info:
        _parse_wire(raw)
    assert _rule_ids(exc_info) == ["vocabulary/unknown-attribute"]


def test_not_json_reports_position():
    with pytest.raises(MFSCSyntaxError) as exc_info:
        parse_document('{"category": "pcb",\n  oops}')
    assert _rule_ids(exc_info) == ["syntax"]
    assert "line 2" in str(exc_info.value)


@pytest.mark.parametrize("path,value,rule", [
    (["components", 1, "name"], "capacitor", "component/duplicate-name"),
    (["components", 0, "caption_text"], "   ", "component/caption-empty"),
    (["components", 2, "attributes", "material", "connector"], "single", "connector/arity"),
    (["components", 0, "attributes", "color", "connector"], "and", "connector/arity"),
    (["components"], [], "components/empty"),
    (["summary"], "", "summary/empty"),
    (["category"], " ", "category/empty"),
    (["foreground", "counts", "resistor"], 1, "foreground/unknown-component"),
    (["foreground", "counts", "led"], 0, "foreground/count"),
    (["vocabulary", "finish"], [], "vocabulary/empty"),
    (["mfsc_version"], 2, "version"),
    (["extra"], "field", "unknown-field"),
    (["foreground", "counts", "led"], "one", "schema/type"),
])
def test_invariant_violations(path, value, rule):
    raw = mutate(wire_dict(), path, value)
    with pytest.raises(MFSCSchemaError) as exc_info:
        _parse_wire(raw)
    assert rule in _rule_ids(exc_info)


def test_validate_never_raises():
    doc = MFSCDocument(
        category="",
        summary="",
        background="",
        foreground=ForegroundRelation({"ghost": 0}, ""),
        components=(
            ComponentCaption("a", {"color": AttributeValue((), "plus")}, ""),
            ComponentCaption("a", {}, "x"),
        ),
        attribute_vocabulary={},
    )
    report = validate(doc)
    assert not report.is_valid
    assert {"category/empty", "summary/empty", "connector/enum", "attribute/empty",
            "component/caption-empty", "component/duplicate-name",
            "foreground/unknown-component", "foreground/count"} <= set(report.rule_ids())
    with pytest.raises(MFSCSchemaError):
        serialize(doc)


def test_serialize_is_independent_of_map_order():
    doc = pcb_document()
    shuffled = MFSCDocument(
        category=doc.category,
        summary=doc.summary,
        background=doc.background,
        foreground=ForegroundRelation(
            dict(reversed(list(doc.foreground.component_counts.items()))), doc.foreground.relation_text
        ),
        components=doc.components,
        attribute_vocabulary=dict(reversed(list(doc.attribute_vocabulary.items()))),
    )
    assert serialize(shuffled) == serialize(doc)
    assert content_hash(shuffled) == content_hash(doc)


def _random_document(rng: np.random.Generator, i: int) -> MFSCDocument:
    n_attrs = int(rng.integers(1, 4))
    vocab = {
        f"attr{j}": tuple(str(w) for w in rng.choice(WORDS, size=int(rng.integers(1, 5)), replace=False))
        for j in range(n_attrs)
    }
    components = []
    for c in range(int(rng.integers(1, 5))):
        attrs = {}
        for name, values in vocab.items():
            if rng.random() < 0.5:
                continue
            k = int(rng.integers(1, len(values) + 1))
            picked = tuple(str(v) for v in rng.choice(values, size=k, replace=False))
            connector = "single" if k == 1 else str(rng.choice(["and", "or", "with"]))
            attrs[name] = AttributeValue(picked, connector)
        components.append(ComponentCaption(f"part {c} é", attrs, f"caption {i}.{c} \"q\""))
    counts = {comp.name: int(rng.integers(1, 4)) for comp in components if rng.random() < 0.7}
    return MFSCDocument(
        category=f"category-{i}",
        summary=f"summary of {i}\twith tab",
        background="back\\ground" if i % 2 else "",
        foreground=ForegroundRelation(counts, f"relation {i}"),
        components=tuple(components),
        attribute_vocabulary=vocab,
    )


def test_generated_documents_round_trip():
    rng = np.random.default_rng(20240601)
    for i in range(1000):
        doc = _random_document(rng, i)
        assert validate(doc).is_valid, validate(doc).to_text()
        text = serialize(doc)
        back = parse_document(text)
        assert back == doc
        assert serialize(back) == text
