"""
Multi-level prompt construction and encoding.

From one MFSC document this module builds, for every level (image,
foreground, background, each component):
- NHP: the level's caption as fixed words
- AHP: concatenation of each anomaly word, plus one attribute-replacement
  variant per located attribute (another vocabulary value, or the negation
  "without <value>")
- ALP: N_ab templates where every located attribute value becomes one
  learnable placeholder

Background only has its NHP. Component-level placeholders are scaled by an
Attr-MoE gate sigmoid(raw) before the text encoder.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from captioner.mfsc import MFSCDocument
from detector.constants import NEGATION_PREFIX, PLACEHOLDER_INIT_STD
from detector.core import l2_normalize, sigmoid
from detector.encoder import keyed_rng, tokenize

logger = logging.getLogger(__name__)

NORMAL = "NormalHandcrafted"
ABNORMAL_HANDCRAFTED = "AbnormalHandcrafted"
ABNORMAL_LEARNABLE = "AbnormalLearnable"
POLARITIES = (NORMAL, ABNORMAL_HANDCRAFTED, ABNORMAL_LEARNABLE)


class PromptBankError(Exception):
    """Exception for prompt construction and encoding errors."""
    pass


class TextEncoder(Protocol):
    """What prompt encoding needs from a text encoder."""

    @property
    def embedding_dim(self) -> int: ...

    @property
    def feature_dim(self) -> int: ...

    def embed_word(self, word: str) -> np.ndarray: ...

    def encode(self, sequence: Sequence[np.ndarray]) -> np.ndarray: ...

    def encode_vjp(self, sequence: Sequence[np.ndarray], grad_out: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, order=True)
class PromptLevel:
    kind: str
    index: int = -1

    def __post_init__(self):
        if self.kind not in ("image", "foreground", "background", "component"):
            raise PromptBankError(f"unknown prompt level '{self.kind}'")
        if (self.kind == "component") != (self.index >= 0):
            raise PromptBankError("only component levels carry an index")

    @property
    def key(self) -> str:
        return f"component:{self.index}" if self.kind == "component" else self.kind

    @property
    def is_component(self) -> bool:
        return self.kind == "component"

    @classmethod
    def from_key(cls, key: str) -> "PromptLevel":
        if key.startswith("component:"):
            return cls("component", int(key.split(":", 1)[1]))
        return cls(key)


IMAGE = PromptLevel("image")
FOREGROUND = PromptLevel("foreground")
BACKGROUND = PromptLevel("background")


def component_level(i: int) -> PromptLevel:
    return PromptLevel("component", i)


def family_levels(num_components: int) -> List[PromptLevel]:
    """Prompt families in index order: Image, Foreground, Component(0..Nc-1)."""
    return [IMAGE, FOREGROUND] + [component_level(i) for i in range(num_components)]


@dataclass(frozen=True)
class FixedWord:
    word: str


@dataclass(frozen=True)
class Placeholder:
    slot_id: str


Token = Union[FixedWord, Placeholder]


@dataclass(frozen=True)
class PromptTemplate:
    tokens: Tuple[Token, ...]
    level: PromptLevel
    polarity: str
    # (component, attribute, old phrase, new phrase) for replacement AHPs
    replaced: Optional[Tuple[str, str, str, str]] = None

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise PromptBankError(f"unknown polarity '{self.polarity}'")
        slots = self.slot_ids
        if self.polarity == ABNORMAL_LEARNABLE and not slots:
            raise PromptBankError("learnable prompt without placeholders")
        if len(set(slots)) != len(slots):
            raise PromptBankError("duplicate slot ids in one template")

    @property
    def slot_ids(self) -> List[str]:
        return [t.slot_id for t in self.tokens if isinstance(t, Placeholder)]

    @property
    def text(self) -> str:
        return " ".join(t.word if isinstance(t, FixedWord) else f"[{t.slot_id}]" for t in self.tokens)

    def to_dict(self) -> Dict:
        return {
            "level": self.level.key,
            "polarity": self.polarity,
            "text": self.text,
            "slots": self.slot_ids,
        }


@dataclass
class PlaceholderTable:
    embeddings: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "PlaceholderTable":
        return PlaceholderTable({k: v.copy() for k, v in self.embeddings.items()})


@dataclass
class AttrMoEGates:
    raw: Dict[str, float] = field(default_factory=dict)

    def gate(self, slot_id: str) -> float:
        return sigmoid(self.raw[slot_id])

    def copy(self) -> "AttrMoEGates":
        return AttrMoEGates(dict(self.raw))


@dataclass
class LevelBank:
    """Encoded features of one level; every row unit-norm."""
    nhp: np.ndarray
    ahp: np.ndarray
    alp: np.ndarray

    @property
    def p_n(self) -> np.ndarray:
        """Mean NHP feature, re-normalized."""
        return l2_normalize(self.nhp.mean(axis=0))

    @property
    def abnormal(self) -> np.ndarray:
        """AHP and ALP features stacked (the set used as negatives)."""
        return np.concatenate([self.ahp, self.alp]) if len(self.alp) else self.ahp

    @property
    def p_a_mean(self) -> np.ndarray:
        """Mean of AHP and ALP features, re-normalized."""
        return l2_normalize(self.abnormal.mean(axis=0))


@dataclass
class PromptSet:
    templates: List[PromptTemplate]
    n_ab: int
    num_components: int
    component_names: List[str]
    banks: Dict[str, LevelBank] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_ab < 1:
            raise PromptBankError("N_ab must be >= 1")

    def select(self, level: PromptLevel, polarity: Optional[str] = None) -> List[PromptTemplate]:
        return [t for t in self.templates
                if t.level == level and (polarity is None or t.polarity == polarity)]

    @property
    def levels(self) -> List[PromptLevel]:
        return [IMAGE, FOREGROUND, BACKGROUND] + [component_level(i) for i in range(self.num_components)]

    def parameter_slots(self) -> List[str]:
        """Every placeholder slot in template order."""
        return [s for t in self.templates for s in t.slot_ids]

    def gate_slots(self) -> List[str]:
        return [s for t in self.templates if t.level.is_component for s in t.slot_ids]

    def bank(self, level: PromptLevel) -> LevelBank:
        if level.key not in self.banks:
            raise PromptBankError(f"no encoded bank for level {level.key}; call encode_all first")
        return self.banks[level.key]

    @property
    def p_b(self) -> np.ndarray:
        return self.bank(BACKGROUND).nhp[0]

    def to_dict(self) -> Dict:
        return {
            "n_ab": self.n_ab,
            "num_components": self.num_components,
            "component_names": list(self.component_names),
            "templates": [t.to_dict() for t in self.templates],
        }


def _locate(words: List[str], phrase: List[str], claimed: set) -> Optional[int]:
    n = len(phrase)
    if n == 0:
        return None
    for i in range(len(words) - n + 1):
        if words[i:i + n] == phrase and not any(j in claimed for j in range(i, i + n)):
            return i
    return None


def _level_attributes(doc: MFSCDocument, level: PromptLevel) -> List[Tuple[str, str, List[str]]]:
    comps = doc.components if not level.is_component else [doc.components[level.index]]
    return [
        (c.name, attr, tokenize(value.render()))
        for c in comps for attr, value in c.attributes.items()
    ]


def _level_text(doc: MFSCDocument, level: PromptLevel) -> str:
    if level.kind == "image":
        return doc.summary
    if level.kind == "foreground":
        return doc.foreground.relation_text
    if level.kind == "background":
        return doc.background
    return doc.components[level.index].caption_text


def _replacement_value(
    doc: MFSCDocument, comp_name: str, attr: str, level: PromptLevel, seed: int
) -> List[str]:
    comp = next(c for c in doc.components if c.name == comp_name)
    current = comp.attributes[attr]
    choices = [v for v in doc.attribute_vocabulary.get(attr, ()) if v not in current.base_values]
    if not choices:
        return [NEGATION_PREFIX] + tokenize(current.render())
    rng = keyed_rng(seed, "replace", level.key, comp_name, attr)
    return tokenize(choices[int(rng.integers(len(choices)))])


def build_prompt_set(
    doc: MFSCDocument,
    anomaly_words: List[str],
    n_ab: int,
    seed: int,
) -> PromptSet:
    """
    Builds every prompt template for a document.

    Args:
        doc: Validated MFSC document
        anomaly_words: State words concatenated to each NHP
        n_ab: Number of ALPs per level
        seed: Seed for the replacement-value choice

    Returns:
        PromptSet without encoded banks

    Raises:
        PromptBankError: On empty components, empty anomaly words or n_ab < 1
    """
    if not doc.components:
        raise PromptBankError("document has no components")
    if not anomaly_words:
        raise PromptBankError("anomaly word list is empty")
    if n_ab < 1:
        raise PromptBankError("N_ab must be >= 1")

    templates: List[PromptTemplate] = []
    levels = [IMAGE, FOREGROUND, BACKGROUND] + [component_level(i) for i in range(doc.num_components)]
    for level in levels:
        words = tokenize(_level_text(doc, level))
        if not words:
            raise PromptBankError(f"empty text at level {level.key}")
        templates.append(PromptTemplate(tuple(FixedWord(w) for w in words), level, NORMAL))
        if level.kind == "background":
            continue

        for aw in anomaly_words:
            extra = tokenize(aw)
            templates.append(PromptTemplate(tuple(FixedWord(w) for w in words + extra), level, ABNORMAL_HANDCRAFTED))

        located: List[Tuple[int, int, str, str]] = []
        claimed: set = set()
        for comp_name, attr, phrase in _level_attributes(doc, level):
            pos = _locate(words, phrase, claimed)
            if pos is None:
                log = logger.warning if level.is_component else logger.debug
                log(f"[PROMPTS] '{' '.join(phrase)}' ({comp_name}.{attr}) not found in {level.key} text")
                continue
            claimed.update(range(pos, pos + len(phrase)))
            located.append((pos, len(phrase), comp_name, attr))
            new = _replacement_value(doc, comp_name, attr, level, seed)
            replaced_words = words[:pos] + new + words[pos + len(phrase):]
            templates.append(PromptTemplate(
                tuple(FixedWord(w) for w in replaced_words), level, ABNORMAL_HANDCRAFTED,
                replaced=(comp_name, attr, " ".join(phrase), " ".join(new)),
            ))

        starts = {pos: (length, comp_name, attr) for pos, length, comp_name, attr in located}
        for j in range(n_ab):
            tokens: List[Token] = []
            i = 0
            while i < len(words):
                if i in starts:
                    length, comp_name, attr = starts[i]
                    tokens.append(Placeholder(f"{level.key}/alp{j}/{comp_name}/{attr}"))
                    i += length
                else:
                    tokens.append(FixedWord(words[i]))
                    i += 1
            if not starts:
                tokens.append(Placeholder(f"{level.key}/alp{j}/extra"))
            templates.append(PromptTemplate(tuple(tokens), level, ABNORMAL_LEARNABLE))

    pset = PromptSet(templates, n_ab, doc.num_components, doc.component_names)
    logger.info(
        f"[PROMPTS] built {len(templates)} templates for {doc.category}: "
        f"{len(pset.parameter_slots())} placeholders, {len(pset.gate_slots())} gated"
    )
    return pset


def init_parameters(
    prompt_set: PromptSet, embedding_dim: int, seed: int
) -> Tuple[PlaceholderTable, AttrMoEGates]:
    """Placeholders ~ N(0, 0.02^2) per slot; component gates start at raw 0 (g = 0.5)."""
    table = PlaceholderTable()
    for slot in prompt_set.parameter_slots():
        table.embeddings[slot] = keyed_rng(seed, "placeholder", slot).normal(
            0.0, PLACEHOLDER_INIT_STD, size=embedding_dim
        )
    gates = AttrMoEGates({slot: 0.0 for slot in prompt_set.gate_slots()})
    return table, gates


def _slot_scale(t: PromptTemplate, slot: str, gates: AttrMoEGates) -> float:
    if not t.level.is_component:
        return 1.0
    if slot not in gates.raw:
        raise PromptBankError(f"missing gate for slot '{slot}'")
    return gates.gate(slot)


def embedding_sequence(
    t: PromptTemplate, table: PlaceholderTable, gates: AttrMoEGates, enc: TextEncoder
) -> List[np.ndarray]:
    seq = []
    for tok in t.tokens:
        if isinstance(tok, FixedWord):
            seq.append(enc.embed_word(tok.word))
            continue
        emb = table.embeddings.get(tok.slot_id)
        if emb is None:
            raise PromptBankError(f"missing placeholder slot '{tok.slot_id}'")
        if emb.shape != (enc.embedding_dim,):
            raise PromptBankError(
                f"slot '{tok.slot_id}' has dimension {emb.shape}, encoder expects {enc.embedding_dim}"
            )
        seq.append(_slot_scale(t, tok.slot_id, gates) * emb)
    return seq


def encode_prompt(
    t: PromptTemplate, table: PlaceholderTable, gates: AttrMoEGates, enc: TextEncoder
) -> np.ndarray:
    """Unit-norm feature of one template."""
    return enc.encode(embedding_sequence(t, table, gates, enc))


def prompt_vjp(
    t: PromptTemplate,
    table: PlaceholderTable,
    gates: AttrMoEGates,
    enc: TextEncoder,
    grad_feature: np.ndarray,
) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    """
    Pulls a feature gradient back to the template's parameters.

    Returns:
        (placeholder gradients by slot, raw gate gradients by slot)
    """
    slots = t.slot_ids
    if not slots:
        return {}, {}
    seq = embedding_sequence(t, table, gates, enc)
    rows = enc.encode_vjp(seq, grad_feature)
    g_emb: Dict[str, np.ndarray] = {}
    g_raw: Dict[str, float] = {}
    for pos, tok in enumerate(t.tokens):
        if not isinstance(tok, Placeholder):
            continue
        scale = _slot_scale(t, tok.slot_id, gates)
        g_emb[tok.slot_id] = scale * rows[pos]
        if t.level.is_component:
            g_raw[tok.slot_id] = float(rows[pos] @ table.embeddings[tok.slot_id]) * scale * (1.0 - scale)
    return g_emb, g_raw


def encode_all(
    prompt_set: PromptSet, table: PlaceholderTable, gates: AttrMoEGates, enc: TextEncoder
) -> PromptSet:
    """Returns a copy of the prompt set with every level bank encoded."""
    banks: Dict[str, LevelBank] = {}
    empty = np.zeros((0, enc.feature_dim))
    for level in prompt_set.levels:
        def stack(polarity: str) -> np.ndarray:
            feats = [encode_prompt(t, table, gates, enc) for t in prompt_set.select(level, polarity)]
            return np.stack(feats) if feats else empty
        banks[level.key] = LevelBank(nhp=stack(NORMAL), ahp=stack(ABNORMAL_HANDCRAFTED), alp=stack(ABNORMAL_LEARNABLE))
    if len(banks[BACKGROUND.key].nhp) != 1:
        raise PromptBankError("expected exactly one background NHP")
    return replace(prompt_set, banks=banks)
