"""
Multi-level prompt construction, placeholders and Attr-MoE gates.
"""

import numpy as np
import pytest

from detector.core import is_unit
from detector.encoder import get_encoder
from detector.prompt_bank import (
    ABNORMAL_HANDCRAFTED,
    ABNORMAL_LEARNABLE,
    BACKGROUND,
    FOREGROUND,
    IMAGE,
    NORMAL,
    AttrMoEGates,
    PlaceholderTable,
    PromptBankError,
    PromptLevel,
    build_prompt_set,
    component_level,
    encode_all,
    encode_prompt,
    family_levels,
    init_parameters,
)
from scripts.tests.base import pcb_document, single_document, small_spec

THREE_WORDS = ["damaged", "broken", "with defect"]


def _counts(pset, level):
    return tuple(len(pset.select(level, pol)) for pol in (NORMAL, ABNORMAL_HANDCRAFTED, ABNORMAL_LEARNABLE))


def test_single_component_prompt_counts():
    pset = build_prompt_set(single_document(), THREE_WORDS, n_ab=4, seed=0)
    assert _counts(pset, component_level(0)) == (1, 4, 4)
    assert _counts(pset, IMAGE) == (1, 4, 4)
    # "one capacitor" names no attribute value
    assert _counts(pset, FOREGROUND) == (1, 3, 4)
    assert _counts(pset, BACKGROUND) == (1, 0, 0)


def test_alp_placeholders_replace_attribute_values():
    pset = build_prompt_set(single_document(), THREE_WORDS, n_ab=4, seed=0)
    alp = pset.select(component_level(0), ABNORMAL_LEARNABLE)
    assert alp[0].text == "[component:0/alp0/capacitor/color] capacitor"
    assert len({s for t in alp for s in t.slot_ids}) == 4
    fg = pset.select(FOREGROUND, ABNORMAL_LEARNABLE)
    assert fg[1].text == "one capacitor [foreground/alp1/extra]"
    assert set(pset.gate_slots()) == {s for t in alp for s in t.slot_ids}


def test_single_valued_vocabulary_falls_back_to_negation():
    pset = build_prompt_set(single_document(), THREE_WORDS, n_ab=1, seed=0)
    replaced = [t for t in pset.select(component_level(0), ABNORMAL_HANDCRAFTED) if t.replaced]
    assert [t.text for t in replaced] == ["without green capacitor"]


def test_replacement_values_come_from_the_vocabulary():
    doc = pcb_document()
    pset = build_prompt_set(doc, THREE_WORDS, n_ab=2, seed=11)
    (cap,) = [t for t in pset.select(component_level(0), ABNORMAL_HANDCRAFTED) if t.replaced]
    _, attr, old, new = cap.replaced
    assert (attr, old) == ("color", "blue")
    assert new in ("black", "red", "white")
    (pins,) = [t for t in pset.select(component_level(2), ABNORMAL_HANDCRAFTED) if t.replaced]
    assert pins.replaced[2:] == ("gold and silver", "copper")
    assert pins.text == "copper pins pins"


def test_prompt_set_is_deterministic():
    a = build_prompt_set(pcb_document(), THREE_WORDS, 4, seed=3).to_dict()
    b = build_prompt_set(pcb_document(), THREE_WORDS, 4, seed=3).to_dict()
    assert a == b


def test_build_errors():
    with pytest.raises(PromptBankError):
        build_prompt_set(single_document(), THREE_WORDS, n_ab=0, seed=0)
    with pytest.raises(PromptBankError):
        build_prompt_set(single_document(), [], n_ab=4, seed=0)


def test_levels():
    assert [lvl.key for lvl in family_levels(2)] == ["image", "foreground", "component:0", "component:1"]
    assert PromptLevel.from_key("component:3") == component_level(3)
    with pytest.raises(PromptBankError):
        PromptLevel("component")
    with pytest.raises(PromptBankError):
        PromptLevel("texture")


def test_init_parameters():
    pset = build_prompt_set(pcb_document(), THREE_WORDS, 4, seed=0)
    table, gates = init_parameters(pset, 48, seed=0)
    assert set(table.embeddings) == set(pset.parameter_slots())
    stacked = np.stack(list(table.embeddings.values()))
    assert stacked.shape[1] == 48
    assert 0.01 < stacked.std() < 0.03
    assert all(gates.gate(s) == 0.5 for s in pset.gate_slots())


def test_encode_all_banks_are_unit_norm():
    spec = small_spec()
    enc = get_encoder(spec)
    pset = build_prompt_set(pcb_document(), THREE_WORDS, 4, seed=0)
    table, gates = init_parameters(pset, enc.embedding_dim, seed=0)
    encoded = encode_all(pset, table, gates, enc)
    for level in encoded.levels:
        bank = encoded.bank(level)
        for row in np.concatenate([bank.nhp, bank.ahp, bank.alp]):
            assert is_unit(row)
    assert encoded.bank(IMAGE).abnormal.shape == (len(THREE_WORDS) + 3 + 4, spec.feature_dim)
    assert is_unit(encoded.p_b)
    with pytest.raises(PromptBankError):
        pset.bank(IMAGE)


def test_gates_only_touch_component_prompts():
    spec = small_spec()
    enc = get_encoder(spec)
    pset = build_prompt_set(pcb_document(), THREE_WORDS, 2, seed=0)
    table, gates = init_parameters(pset, enc.embedding_dim, seed=0)
    before = encode_all(pset, table, gates, enc)
    shifted = AttrMoEGates({s: v + 2.0 for s, v in gates.raw.items()})
    after = encode_all(pset, table, shifted, enc)
    for level in (IMAGE, FOREGROUND, BACKGROUND):
        np.testing.assert_array_equal(before.bank(level).alp, after.bank(level).alp)
    assert not np.allclose(before.bank(component_level(0)).alp, after.bank(component_level(0)).alp)
    np.testing.assert_array_equal(before.bank(component_level(0)).ahp, after.bank(component_level(0)).ahp)


def test_encode_prompt_reports_missing_slot():
    spec = small_spec()
    enc = get_encoder(spec)
    pset = build_prompt_set(single_document(), THREE_WORDS, 1, seed=0)
    _, gates = init_parameters(pset, enc.embedding_dim, seed=0)
    alp = pset.select(IMAGE, ABNORMAL_LEARNABLE)[0]
    with pytest.raises(PromptBankError, match="missing placeholder"):
        encode_prompt(alp, PlaceholderTable(), gates, enc)
