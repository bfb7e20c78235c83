"""
Inference branches.

Vision branch: nearest-neighbour cosine distance to the normal memory bank.
Prompt branch: each token is matched to a prompt family through the Query
Former intrinsics, scored against that family's normal and mean abnormal
prompt features, re-weighted by the image-level anomaly distribution, and
fused with the vision branch by a harmonic combination.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from detector.core import (
    ScoreMap,
    check_logit_scale,
    cosine_matrix,
    harmonic_combine,
    sigmoid,
    token_softmax_weights,
)
from detector.encoder import TokenGrid
from detector.prompt_bank import IMAGE, PromptSet, family_levels

logger = logging.getLogger(__name__)


class ScoringError(Exception):
    """Exception for scoring input errors."""
    pass


class ScoringConfig(BaseModel):
    """Inference switches."""
    model_config = ConfigDict(extra="forbid")

    reweight_scale: float = Field(
        default=1.0, gt=0,
        description="Multiplier on the image-level probabilities s(z, p_img) inside the token softmax; "
                    "the cosines inside s already carry the logit scale",
    )
    dynamic_assignment: bool = Field(default=True, description="False averages every family's score per token")


@dataclass
class NormalMemory:
    """Bank R of normal token features, shot order then row-major."""
    bank: np.ndarray

    def __post_init__(self):
        self.bank = np.atleast_2d(np.asarray(self.bank, dtype=np.float64))
        if self.bank.shape[0] == 0:
            raise ScoringError("normal memory is empty")

    @property
    def size(self) -> int:
        return self.bank.shape[0]


@dataclass(frozen=True)
class FamilyPrompts:
    """Normal feature p_n and mean abnormal feature p_a of one prompt family."""
    p_n: np.ndarray
    p_a: np.ndarray


def build_memory(shots: Sequence[TokenGrid]) -> NormalMemory:
    if len(shots) == 0:
        raise ScoringError("build_memory needs at least one shot")
    return NormalMemory(np.concatenate([g.flat() for g in shots]))


def score_vad(query: TokenGrid, mem: NormalMemory) -> ScoreMap:
    """Per token: min over the bank of (1 - cos) / 2."""
    if query.dim != mem.bank.shape[1]:
        raise ScoringError(f"query dim {query.dim} != memory dim {mem.bank.shape[1]}")
    sims = cosine_matrix(query.flat(), mem.bank)
    scores = 0.5 * (1.0 - sims.max(axis=1))
    return ScoreMap(np.clip(scores, 0.0, 1.0).reshape(query.h, query.w))


def assign_prompts(query: TokenGrid, intrinsics: np.ndarray) -> np.ndarray:
    """Per token: index of the most similar intrinsic feature (lowest index on ties)."""
    intrinsics = np.atleast_2d(intrinsics)
    if intrinsics.shape[0] == 0:
        raise ScoringError("assign_prompts needs at least one family")
    sims = cosine_matrix(query.flat(), intrinsics)
    return np.argmax(sims, axis=1).reshape(query.h, query.w)


def anomaly_probability(z: np.ndarray, p_n: np.ndarray, p_a: np.ndarray, scale: float) -> np.ndarray:
    """
    exp(s*<z,p_a>) / (exp(s*<z,p_n>) + exp(s*<z,p_a>)) for each row of z.

    Higher means more anomalous.
    """
    check_logit_scale(scale)
    sims = cosine_matrix(np.atleast_2d(z), np.stack([p_n, p_a]))
    return sigmoid(scale * (sims[:, 1] - sims[:, 0]))


def family_prompts(prompt_set: PromptSet) -> List[FamilyPrompts]:
    return [
        FamilyPrompts(prompt_set.bank(level).p_n, prompt_set.bank(level).p_a_mean)
        for level in family_levels(prompt_set.num_components)
    ]


def image_prompts(prompt_set: PromptSet) -> FamilyPrompts:
    bank = prompt_set.bank(IMAGE)
    return FamilyPrompts(bank.p_n, bank.p_a_mean)


def _prob_map(query: TokenGrid, probs: np.ndarray) -> ScoreMap:
    # exp underflow can land exactly on 0 or 1; keep scores inside [0, 1]
    return ScoreMap(np.clip(probs, 0.0, 1.0).reshape(query.h, query.w))


def score_pad(
    query: TokenGrid, assign: np.ndarray, families: Sequence[FamilyPrompts], scale: float
) -> ScoreMap:
    """Prompt-guided map: each token scored against its assigned family."""
    assign = np.asarray(assign).ravel()
    if assign.size != query.num_tokens:
        raise ScoringError("assignment map does not match the query grid")
    if assign.min() < 0 or assign.max() >= len(families):
        raise ScoringError("assignment index out of range")
    Z = query.flat()
    probs = np.empty(query.num_tokens)
    for k, fam in enumerate(families):
        mask = assign == k
        if mask.any():
            probs[mask] = anomaly_probability(Z[mask], fam.p_n, fam.p_a, scale)
    return _prob_map(query, probs)


def score_pad_average(query: TokenGrid, families: Sequence[FamilyPrompts], scale: float) -> ScoreMap:
    """Ablation without token-wise assignment: mean score over every family."""
    Z = query.flat()
    probs = np.mean([anomaly_probability(Z, f.p_n, f.p_a, scale) for f in families], axis=0)
    return _prob_map(query, probs)


def reweight_image_level(
    m_hat: ScoreMap,
    query: TokenGrid,
    image: FamilyPrompts,
    scale: float,
    reweight_scale: float = 1.0,
) -> ScoreMap:
    """
    M_p = clamp(T * softmax_T(s(z, p_img)) * M_hat, 0, 1).

    Args:
        m_hat: Prompt-guided map
        query: Query tokens
        image: Image-level prompt features
        scale: Logit scale on the cosines inside s(z, p)
        reweight_scale: Multiplier on s(z, p_img) in the softmax over tokens
    """
    if m_hat.shape != (query.h, query.w):
        raise ScoringError("score map does not match the query grid")
    s = anomaly_probability(query.flat(), image.p_n, image.p_a, scale)
    w = token_softmax_weights(s, reweight_scale)
    T = query.num_tokens
    return ScoreMap(np.clip(T * w.reshape(query.h, query.w) * m_hat.scores, 0.0, 1.0))


def fuse_pixel(m_v: ScoreMap, m_p: ScoreMap) -> ScoreMap:
    if m_v.shape != m_p.shape:
        raise ScoringError(f"shape mismatch {m_v.shape} vs {m_p.shape}")
    return ScoreMap(harmonic_combine(m_v.scores, m_p.scores))


def image_score(query: TokenGrid, image: FamilyPrompts, m_pix: ScoreMap, scale: float) -> float:
    """harmonic_combine(max M_pix, s(class token, image prompts))."""
    s_i = float(anomaly_probability(query.class_token, image.p_n, image.p_a, scale)[0])
    return float(harmonic_combine(m_pix.max(), s_i))


@dataclass
class InferenceResult:
    m_v: ScoreMap
    m_hat: ScoreMap
    m_p: ScoreMap
    m_pix: ScoreMap
    assignment: np.ndarray
    image_score: float


def infer(
    query: TokenGrid,
    mem: NormalMemory,
    intrinsics: np.ndarray,
    prompt_set: PromptSet,
    scale: float,
    reweight_scale: float = 1.0,
    dynamic_assignment: bool = True,
) -> InferenceResult:
    """Both branches, fusion and the image score for one query."""
    families = family_prompts(prompt_set)
    img = image_prompts(prompt_set)
    m_v = score_vad(query, mem)
    assignment = assign_prompts(query, intrinsics)
    if dynamic_assignment:
        m_hat = score_pad(query, assignment, families, scale)
    else:
        m_hat = score_pad_average(query, families, scale)
    m_p = reweight_image_level(m_hat, query, img, scale, reweight_scale)
    m_pix = fuse_pixel(m_v, m_p)
    score = image_score(query, img, m_pix, scale)
    logger.debug(f"[INFER] {query.h}x{query.w} tokens, max pixel={m_pix.max():.4f} image={score:.4f}")
    return InferenceResult(m_v, m_hat, m_p, m_pix, assignment, score)
