"""
Seeded synthetic scenes and benchmark suites.

A category is described by a SceneLayout (rectangular component placements on
the native grid). Shots are normal scenes that differ only in their noise
seed; anomalous test scenes carry a connected blob of perturbed foreground
cells. Perturbations lean toward the concept of defect words so that the
prompt branch has something to see, mirroring how defects are describable in
language for a real vision-language backbone.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from detector.constants import DEFAULT_ANOMALY_WORDS, NATIVE_GRID
from detector.encoder import EncoderSpec, SyntheticScene, get_encoder, keyed_rng, tokenize

logger = logging.getLogger(__name__)


class ComponentPlacement(BaseModel):
    """Boxes covered by one component; boxes are [row0, col0, row1, col1) on the native grid."""
    model_config = ConfigDict(extra="forbid")

    name: str
    boxes: List[Tuple[int, int, int, int]]
    attribute: List[float] = Field(default_factory=list, description="Attribute vector; zeros if empty")


class SceneLayout(BaseModel):
    """Fixed component layout of a category."""
    model_config = ConfigDict(extra="forbid")

    height: int = Field(default=NATIVE_GRID, ge=1)
    width: int = Field(default=NATIVE_GRID, ge=1)
    background: str = Field(default="background", description="Concept name of the background")
    components: List[ComponentPlacement]


class SuiteConfig(BaseModel):
    """Shape of a synthetic benchmark suite."""
    model_config = ConfigDict(extra="forbid")

    n_shots: int = Field(default=4, ge=1)
    n_test_normal: int = Field(default=20, ge=0)
    n_test_anomalous: int = Field(default=20, ge=0)
    anomaly_cells: int = Field(default=4, ge=1, description="Cells per anomalous blob")
    perturbation_magnitude: float = Field(default=0.15, ge=0.0, description="Norm of each perturbation")
    defect_alignment: float = Field(
        default=0.6, ge=0.0, le=1.0,
        description="Share of the perturbation direction along the defect-word concept"
    )
    defect_words: List[str] = Field(default_factory=lambda: list(DEFAULT_ANOMALY_WORDS))


@dataclass
class Suite:
    """Training shots and a labeled test set for one category."""
    category: str
    shots: List[SyntheticScene]
    tests: List[SyntheticScene] = field(default_factory=list)

    @property
    def image_labels(self) -> List[bool]:
        return [bool(s.anomaly_mask.any()) for s in self.tests]


def layout_arrays(layout: SceneLayout, attribute_dim: int) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """
    Rasterizes a layout.

    Returns:
        (component_ids, attributes, concepts); later boxes overwrite earlier ones
    """
    ids = np.zeros((layout.height, layout.width), dtype=np.int64)
    attrs = np.zeros((layout.height, layout.width, attribute_dim))
    for k, comp in enumerate(layout.components, start=1):
        vec = np.zeros(attribute_dim)
        if comp.attribute:
            vec[:len(comp.attribute)] = comp.attribute[:attribute_dim]
        for r0, c0, r1, c1 in comp.boxes:
            ids[r0:r1, c0:c1] = k
            attrs[r0:r1, c0:c1] = vec
    concepts = [layout.background] + [c.name for c in layout.components]
    return ids, attrs, concepts


def defect_direction(spec: EncoderSpec, words: List[str]) -> np.ndarray:
    enc = get_encoder(spec)
    vocab = [w for phrase in words for w in tokenize(phrase)]
    vec = np.sum([enc.concept(w) for w in vocab], axis=0)
    return vec / np.linalg.norm(vec)


def sample_perturbation(
    rng: np.random.Generator,
    spec: EncoderSpec,
    magnitude: float,
    defect_alignment: float,
    defect_words: List[str],
) -> np.ndarray:
    """Vector of norm `magnitude` leaning toward the defect concept."""
    if magnitude == 0.0:
        return np.zeros(spec.feature_dim)
    rand = rng.normal(size=spec.feature_dim)
    rand /= np.linalg.norm(rand)
    direction = defect_alignment * defect_direction(spec, defect_words) + np.sqrt(1 - defect_alignment ** 2) * rand
    return magnitude * direction / np.linalg.norm(direction)


def sample_blob(rng: np.random.Generator, ids: np.ndarray, n_cells: int) -> List[Tuple[int, int]]:
    """Connected set of up to n_cells foreground cells grown from a random seed cell."""
    fg = np.argwhere(ids > 0)
    if len(fg) == 0:
        fg = np.argwhere(ids >= 0)
    start = tuple(int(x) for x in fg[rng.integers(len(fg))])
    blob = [start]
    frontier = [start]
    h, w = ids.shape
    while len(blob) < n_cells and frontier:
        r, c = frontier[rng.integers(len(frontier))]
        options = [
            (r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= r + dr < h and 0 <= c + dc < w and ids[r + dr, c + dc] > 0 and (r + dr, c + dc) not in blob
        ]
        if not options:
            frontier.remove((r, c))
            continue
        cell = options[rng.integers(len(options))]
        blob.append(cell)
        frontier.append(cell)
    return blob


def make_scene(
    layout: SceneLayout,
    spec: EncoderSpec,
    noise_seed: int,
    category: str = "",
    anomalies: Optional[List[Tuple[Tuple[int, int], np.ndarray]]] = None,
) -> SyntheticScene:
    """Builds a scene from a layout with optional (cell, perturbation) anomalies."""
    ids, attrs, concepts = layout_arrays(layout, spec.attribute_dim)
    mask = np.zeros(ids.shape, dtype=bool)
    perts = np.zeros(ids.shape + (spec.feature_dim,))
    for (r, c), vec in anomalies or []:
        mask[r, c] = True
        perts[r, c] = vec
    return SyntheticScene(
        component_ids=ids,
        attributes=attrs,
        anomaly_mask=mask,
        perturbations=perts,
        category=category,
        concepts=concepts,
        noise_seed=noise_seed,
    )


def _noise_seed(seed: int, split: str, index: int) -> int:
    return int(keyed_rng(seed, "scene", split, index).integers(2 ** 31))


def build_suite(
    layout: SceneLayout,
    suite: SuiteConfig,
    spec: EncoderSpec,
    seed: int,
    category: str = "",
) -> Suite:
    """
    Generates shots and test scenes deterministically from `seed`.

    Test order is all normal scenes followed by all anomalous ones.
    """
    shots = [make_scene(layout, spec, _noise_seed(seed, "shot", i), category) for i in range(suite.n_shots)]
    tests = [make_scene(layout, spec, _noise_seed(seed, "normal", i), category)
             for i in range(suite.n_test_normal)]
    ids, _, _ = layout_arrays(layout, spec.attribute_dim)
    for i in range(suite.n_test_anomalous):
        rng = keyed_rng(seed, "anomaly", i)
        cells = sample_blob(rng, ids, suite.anomaly_cells)
        anomalies = [
            (cell, sample_perturbation(rng, spec, suite.perturbation_magnitude,
                                       suite.defect_alignment, suite.defect_words))
            for cell in cells
        ]
        tests.append(make_scene(layout, spec, _noise_seed(seed, "anomalous", i), category, anomalies))
    logger.info(
        f"[SUITE] category={category} shots={len(shots)} normal={suite.n_test_normal} "
        f"anomalous={suite.n_test_anomalous} magnitude={suite.perturbation_magnitude}"
    )
    return Suite(category=category, shots=shots, tests=tests)
