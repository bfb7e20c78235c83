"""
Language-guided progressive region aggregation.

A density-peaks style clusterer where cluster centers are chosen by prompt
similarity instead of local density, distances are measured between rows of
the token/prompt cosine matrix, and clustering runs in two stages
(foreground/background, then components inside the foreground) on
high-resolution tokens. The resulting map is downsampled to native
resolution for training.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from detector.core import cosine_matrix
from detector.encoder import TokenGrid

logger = logging.getLogger(__name__)


class AggregationError(Exception):
    """Exception for region aggregation errors."""
    pass


class DegenerateForegroundError(AggregationError):
    """Stage 1 assigned no token to the foreground."""
    pass


@dataclass
class RegionMap:
    """Labels per token: 0 = background, 1..Nc = components."""
    labels: np.ndarray
    num_components: int
    resolution_tag: str = "native"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise AggregationError(f"labels must be 2-D, got {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() > self.num_components:
            raise AggregationError(f"labels must lie in [0, {self.num_components}]")

    @property
    def h(self) -> int:
        return self.labels.shape[0]

    @property
    def w(self) -> int:
        return self.labels.shape[1]

    def accuracy(self, truth: np.ndarray) -> float:
        """Share of tokens whose label equals `truth`."""
        truth = np.asarray(truth)
        if truth.shape != self.labels.shape:
            raise AggregationError(f"shape mismatch {truth.shape} vs {self.labels.shape}")
        return float(np.mean(self.labels == truth))


def build_reference(tokens: TokenGrid, prompts: Sequence[np.ndarray]) -> np.ndarray:
    """
    Reference matrix: entry (i, k) = cosine(token_i, prompt_k), tokens row-major.

    Raises:
        AggregationError: If no prompt is given
    """
    if len(prompts) == 0:
        raise AggregationError("build_reference needs at least one prompt")
    return cosine_matrix(tokens.flat(), np.stack(prompts))


def select_centers(ref: np.ndarray) -> List[int]:
    """
    Center token per prompt column: the argmax (lowest index on ties). A column
    whose best token is already taken by an earlier column falls back to its
    next best token.
    """
    ref = np.asarray(ref)
    T, P = ref.shape
    if T < P:
        raise AggregationError(f"need at least as many tokens as prompts ({T} < {P})")
    centers: List[int] = []
    taken = set()
    for k in range(P):
        # stable sort keeps lower indices first among equal values
        order = np.argsort(-ref[:, k], kind="stable")
        for idx in order:
            if int(idx) not in taken:
                centers.append(int(idx))
                taken.add(int(idx))
                break
    return centers


def assign_nearest(ref: np.ndarray, centers: List[int]) -> np.ndarray:
    """Index of the nearest center (Euclidean over reference rows); ties to the lower index."""
    center_rows = ref[centers]
    d2 = ((ref[:, None, :] - center_rows[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    # a center always belongs to its own cluster, even if rows coincide
    labels[centers] = np.arange(len(centers))
    return labels


def cluster_two_stage(
    highres: TokenGrid,
    fg_prompt: np.ndarray,
    bg_prompt: np.ndarray,
    component_prompts: Sequence[np.ndarray],
) -> RegionMap:
    """
    Two-stage clustering of a token grid.

    Stage 1 splits tokens into foreground and background around the centers of
    the foreground and background prompts. Stage 2 clusters only the foreground
    tokens around the centers of the component prompts.

    Returns:
        RegionMap at the grid's resolution; label k+1 follows component_prompts[k]

    Raises:
        AggregationError: If component_prompts is empty
        DegenerateForegroundError: If stage 1 leaves the foreground empty
    """
    if len(component_prompts) == 0:
        raise AggregationError("cluster_two_stage needs at least one component prompt")
    nc = len(component_prompts)

    ref1 = build_reference(highres, [fg_prompt, bg_prompt])
    centers1 = select_centers(ref1)
    stage1 = assign_nearest(ref1, centers1)
    fg_idx = np.flatnonzero(stage1 == 0)
    if fg_idx.size == 0:
        raise DegenerateForegroundError("stage 1 assigned no token to the foreground")

    labels = np.zeros(highres.num_tokens, dtype=np.int64)
    if nc == 1:
        labels[fg_idx] = 1
    else:
        ref2 = build_reference(highres, component_prompts)[fg_idx]
        if fg_idx.size < nc:
            raise DegenerateForegroundError(f"foreground has {fg_idx.size} tokens for {nc} components")
        centers2 = select_centers(ref2)
        labels[fg_idx] = assign_nearest(ref2, centers2) + 1
    logger.debug(f"[AGGREGATE] fg tokens={fg_idx.size}/{highres.num_tokens} components={nc}")
    return RegionMap(labels.reshape(highres.h, highres.w), nc, highres.resolution_tag)


def cluster_one_stage(highres: TokenGrid, component_prompts: Sequence[np.ndarray]) -> RegionMap:
    """Stage 2 alone over every token (no background); used for ablations."""
    if len(component_prompts) == 0:
        raise AggregationError("cluster_one_stage needs at least one component prompt")
    ref = build_reference(highres, component_prompts)
    labels = assign_nearest(ref, select_centers(ref)) + 1
    return RegionMap(labels.reshape(highres.h, highres.w), len(component_prompts), highres.resolution_tag)


def downsample_region_map(region_map: RegionMap, factor: int) -> RegionMap:
    """
    Majority label per factor x factor block; ties go to the lower label.

    Raises:
        AggregationError: If the map dimensions are not divisible by factor
    """
    if factor < 1:
        raise AggregationError(f"factor must be >= 1, got {factor}")
    h, w = region_map.h, region_map.w
    if h % factor or w % factor:
        raise AggregationError(f"{h}x{w} map is not divisible by {factor}")
    if factor == 1:
        return RegionMap(region_map.labels.copy(), region_map.num_components, "native")
    blocks = region_map.labels.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, factor * factor)
    counts = np.stack([(blocks == k).sum(axis=2) for k in range(region_map.num_components + 1)], axis=2)
    # argmax returns the first maximum, i.e. the lowest label
    return RegionMap(np.argmax(counts, axis=2), region_map.num_components, "native")
