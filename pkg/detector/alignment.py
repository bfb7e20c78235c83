"""
Multi-level alignment training of the learnable prompts.

Four objectives per few-shot normal image:
- clip: cross-entropy of each token's normal prompt against the level's
  abnormal prompts (AHP and ALP), tokens weighted by region (gamma)
- trip: triplet hinge between the level anchor, mean normal and mean abnormal
  prompt features
- mean: keeps each ALP near the mean AHP of its level
- reg: the image-level ALP mean minus the component ALP means should equal
  the background NHP

All gradients are hand-derived: losses return gradients with respect to
prompt features, which prompt_bank.prompt_vjp pulls back to placeholder
embeddings and Attr-MoE gates. Optimization is plain SGD.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from detector.constants import (
    DEFAULT_EPSILON,
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA_REG,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOGIT_SCALE,
    DEFAULT_N_AB,
)
from detector.core import NumericDomainError, check_logit_scale, l2_normalize, normalize_vjp
from detector.encoder import TokenGrid, keyed_rng
from detector.prompt_bank import (
    ABNORMAL_HANDCRAFTED,
    ABNORMAL_LEARNABLE,
    BACKGROUND,
    IMAGE,
    NORMAL,
    AttrMoEGates,
    PlaceholderTable,
    PromptLevel,
    PromptSet,
    TextEncoder,
    component_level,
    encode_prompt,
    family_levels,
    prompt_vjp,
)
from detector.region_aggregation import RegionMap

logger = logging.getLogger(__name__)

TERMS = ("l_clip", "l_trip", "l_mean", "l_reg")


class TrainingError(Exception):
    """Exception for training failures; `term` names the offending loss."""

    def __init__(self, message: str, term: Optional[str] = None):
        super().__init__(message)
        self.term = term


class TrainConfig(BaseModel):
    """Alignment training settings."""
    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(default=DEFAULT_EPSILON, gt=0, description="Triplet margin")
    lambda_reg: float = Field(default=DEFAULT_LAMBDA_REG, ge=0, description="Weight of the decoupling term")
    gamma: float = Field(default=DEFAULT_GAMMA, ge=1, description="Weight of tokens inside a prompt's region")
    n_ab: int = Field(default=DEFAULT_N_AB, ge=1, description="ALPs per level")
    learning_rate: float = Field(default=DEFAULT_LEARNING_RATE, gt=0)
    epochs: int = Field(default=200, ge=0)
    logit_scale: float = Field(default=DEFAULT_LOGIT_SCALE, gt=0)
    seed: int = 0
    use_clip: bool = True
    use_trip: bool = True
    use_mean: bool = True
    use_reg: bool = True
    log_every: int = Field(default=50, ge=1)


# Token weighting ---------------------------------------------------------------

def token_weights(labels: np.ndarray, level: PromptLevel, gamma: float) -> np.ndarray:
    """
    gamma for tokens inside the level's region, 1 elsewhere, scaled to mean 1.

    Image level covers every token, foreground every nonzero label, background
    label 0 and component i label i + 1.
    """
    labels = np.asarray(labels).ravel()
    if level.kind == "image":
        inside = np.ones(labels.shape, dtype=bool)
    elif level.kind == "foreground":
        inside = labels > 0
    elif level.kind == "background":
        inside = labels == 0
    else:
        inside = labels == level.index + 1
    w = np.where(inside, gamma, 1.0)
    return w / w.mean()


# Losses ---------------------------------------------------------------------------

def loss_clip(
    tokens: np.ndarray,
    weights: np.ndarray,
    p_n: np.ndarray,
    abnormal: np.ndarray,
    scale: float = DEFAULT_LOGIT_SCALE,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Weighted mean over tokens of -log softmax of the normal prompt against
    the abnormal set, cosines times `scale`.

    Args:
        tokens: (T, d) unit-norm token features
        weights: (T,) positive weights
        p_n: (d,) normal prompt feature
        abnormal: (m, d) abnormal prompt features
        scale: Logit scale

    Returns:
        (loss, gradient wrt p_n, gradient wrt abnormal)
    """
    check_logit_scale(scale)
    tokens = np.atleast_2d(tokens)
    abnormal = np.atleast_2d(abnormal)
    if tokens.shape[0] == 0 or abnormal.shape[0] == 0:
        raise NumericDomainError("loss_clip needs tokens and a nonempty abnormal set")
    weights = np.asarray(weights, dtype=np.float64)
    P = np.vstack([p_n, abnormal])
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    Ph = P / norms
    logits = scale * (tokens @ Ph.T)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    probs = ex / ex.sum(axis=1, keepdims=True)
    per_token = (mx[:, 0] + np.log(ex.sum(axis=1))) - logits[:, 0]
    wsum = weights.sum()
    loss = float(weights @ per_token / wsum)

    G = probs.copy()
    G[:, 0] -= 1.0
    G *= (scale * weights / wsum)[:, None]
    g_hat = G.T @ tokens
    g_P = (g_hat - Ph * np.sum(Ph * g_hat, axis=1, keepdims=True)) / norms
    return loss, g_P[0], g_P[1:]


def loss_triplet(
    z: np.ndarray, p_n: np.ndarray, p_a: np.ndarray, epsilon: float = DEFAULT_EPSILON
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    max(d(z, p_n) - d(z, p_a) + epsilon, 0) with Euclidean d.

    Returns:
        (loss, gradient wrt z, wrt p_n, wrt p_a); zero gradients when the margin holds
    """
    dn_vec = z - p_n
    da_vec = z - p_a
    dn = float(np.linalg.norm(dn_vec))
    da = float(np.linalg.norm(da_vec))
    margin = dn - da + epsilon
    zero = np.zeros_like(z, dtype=np.float64)
    if margin <= 0.0:
        return 0.0, zero, zero.copy(), zero.copy()
    un = dn_vec / dn if dn > 0 else zero
    ua = da_vec / da if da > 0 else zero
    return margin, un - ua, -un, ua


def loss_mean(ahp_mean: np.ndarray, alp: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Squared distance between the normalized mean AHP feature and a normalized ALP.

    Returns:
        (loss, gradient wrt ahp_mean, gradient wrt alp)
    """
    if np.linalg.norm(ahp_mean) == 0 or np.linalg.norm(alp) == 0:
        raise NumericDomainError("loss_mean is undefined for zero-norm inputs")
    a = l2_normalize(ahp_mean)
    b = l2_normalize(alp)
    diff = a - b
    return float(diff @ diff), normalize_vjp(ahp_mean, 2 * diff), normalize_vjp(alp, -2 * diff)


def loss_reg(
    p_a_img: np.ndarray,
    component_alp_means: Sequence[np.ndarray],
    p_b: np.ndarray,
    lambda_reg: float = DEFAULT_LAMBDA_REG,
) -> Tuple[float, np.ndarray, List[np.ndarray]]:
    """
    lambda_reg * |(p_a_img - sum_i p_a_ci) - p_b|; p_b receives no gradient.

    Returns:
        (loss, gradient wrt p_a_img, gradients wrt each component mean)
    """
    if len(component_alp_means) == 0:
        raise NumericDomainError("loss_reg needs at least one component")
    residual = p_a_img - np.sum(component_alp_means, axis=0) - p_b
    norm = float(np.linalg.norm(residual))
    if lambda_reg == 0.0 or norm == 0.0:
        zero = np.zeros_like(residual)
        return lambda_reg * norm, zero, [zero.copy() for _ in component_alp_means]
    g = lambda_reg * residual / norm
    return lambda_reg * norm, g, [-g for _ in component_alp_means]


# Objective -----------------------------------------------------------------------

@dataclass
class StepResult:
    terms: Dict[str, float]
    grad_embeddings: Dict[str, np.ndarray]
    grad_gates: Dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))


def level_anchor(grid: TokenGrid, labels: np.ndarray, level: PromptLevel) -> Optional[np.ndarray]:
    """Class token for the image level, normalized region mean otherwise (None if the region is empty)."""
    if level.kind == "image":
        return grid.class_token
    flat = labels.ravel()
    mask = flat > 0 if level.kind == "foreground" else flat == level.index + 1
    if not mask.any():
        return None
    return l2_normalize(grid.flat()[mask].mean(axis=0))


class AlignmentObjective:
    """Loss terms and parameter gradients for one prompt set."""

    def __init__(self, prompt_set: PromptSet, enc: TextEncoder, cfg: TrainConfig):
        self.prompt_set = prompt_set
        self.enc = enc
        self.cfg = cfg
        self.families = family_levels(prompt_set.num_components)
        self.index = {
            level.key: {pol: [i for i, t in enumerate(prompt_set.templates)
                              if t.level == level and t.polarity == pol]
                        for pol in (NORMAL, ABNORMAL_HANDCRAFTED, ABNORMAL_LEARNABLE)}
            for level in prompt_set.levels
        }

    def features(self, table: PlaceholderTable, gates: AttrMoEGates) -> np.ndarray:
        return np.stack([encode_prompt(t, table, gates, self.enc) for t in self.prompt_set.templates])

    def evaluate(
        self,
        grid: TokenGrid,
        labels: np.ndarray,
        table: PlaceholderTable,
        gates: AttrMoEGates,
        with_grad: bool = True,
    ) -> StepResult:
        cfg = self.cfg
        feats = self.features(table, gates)
        g_feat = np.zeros_like(feats)
        terms = {name: 0.0 for name in TERMS}
        Z = grid.flat()

        alp_means: Dict[str, np.ndarray] = {}
        for level in self.families:
            idx = self.index[level.key]
            nhp, ahp, alp = idx[NORMAL], idx[ABNORMAL_HANDCRAFTED], idx[ABNORMAL_LEARNABLE]
            abn = ahp + alp
            p_n_raw = feats[nhp].mean(axis=0)
            p_n = l2_normalize(p_n_raw)
            alp_means[level.key] = feats[alp].mean(axis=0)

            if cfg.use_clip:
                w = token_weights(labels, level, cfg.gamma)
                value, _, g_abn = loss_clip(Z, w, p_n, feats[abn], cfg.logit_scale)
                terms["l_clip"] += value
                g_feat[abn] += g_abn

            if cfg.use_trip:
                anchor = level_anchor(grid, labels, level)
                if anchor is not None:
                    abn_mean = feats[abn].mean(axis=0)
                    value, _, _, g_pa = loss_triplet(anchor, p_n, l2_normalize(abn_mean), cfg.epsilon)
                    terms["l_trip"] += value
                    if value > 0:
                        g_feat[abn] += normalize_vjp(abn_mean, g_pa) / len(abn)

            if cfg.use_mean and ahp:
                ahp_mean = feats[ahp].mean(axis=0)
                for j in alp:
                    value, _, g_alp = loss_mean(ahp_mean, feats[j])
                    terms["l_mean"] += value / len(alp)
                    g_feat[j] += g_alp / len(alp)

        if cfg.use_reg:
            comp_keys = [component_level(i).key for i in range(self.prompt_set.num_components)]
            p_b = feats[self.index[BACKGROUND.key][NORMAL][0]]
            value, g_img, g_comps = loss_reg(
                alp_means[IMAGE.key], [alp_means[k] for k in comp_keys], p_b, cfg.lambda_reg
            )
            terms["l_reg"] = value
            img_alp = self.index[IMAGE.key][ABNORMAL_LEARNABLE]
            g_feat[img_alp] += g_img / len(img_alp)
            for k, g in zip(comp_keys, g_comps):
                comp_alp = self.index[k][ABNORMAL_LEARNABLE]
                g_feat[comp_alp] += g / len(comp_alp)

        for name, value in terms.items():
            if not np.isfinite(value):
                raise TrainingError(f"non-finite {name}: {value}", term=name)

        grad_emb: Dict[str, np.ndarray] = {}
        grad_gates: Dict[str, float] = {}
        if with_grad:
            for i, t in enumerate(self.prompt_set.templates):
                if not t.slot_ids:
                    continue
                ge, gr = prompt_vjp(t, table, gates, self.enc, g_feat[i])
                for slot, g in ge.items():
                    grad_emb[slot] = grad_emb.get(slot, 0.0) + g
                for slot, g in gr.items():
                    grad_gates[slot] = grad_gates.get(slot, 0.0) + g
        return StepResult(terms, grad_emb, grad_gates)


# Training ------------------------------------------------------------------------

@dataclass
class EpochLoss:
    epoch: int
    l_clip: float
    l_trip: float
    l_mean: float
    l_reg: float

    @property
    def total(self) -> float:
        return self.l_clip + self.l_trip + self.l_mean + self.l_reg


@dataclass
class TrainResult:
    table: PlaceholderTable
    gates: AttrMoEGates
    trace: List[EpochLoss] = field(default_factory=list)


def train_align(
    shots: Sequence[TokenGrid],
    region_maps: Sequence[RegionMap],
    prompt_set: PromptSet,
    table: PlaceholderTable,
    gates: AttrMoEGates,
    enc: TextEncoder,
    cfg: TrainConfig,
) -> TrainResult:
    """
    Plain SGD over the k shots, one step per shot, shots shuffled per epoch.

    Args:
        shots: Native token grids of the normal shots
        region_maps: Native region maps, one per shot
        prompt_set: Prompt templates
        table: Initial placeholder embeddings (not modified)
        gates: Initial Attr-MoE gates (not modified)
        enc: Text encoder
        cfg: Training configuration

    Returns:
        TrainResult with trained copies and the per-epoch mean loss trace

    Raises:
        TrainingError: On a non-finite loss term
    """
    if len(shots) == 0:
        raise TrainingError("train_align needs at least one shot")
    if len(region_maps) != len(shots):
        raise TrainingError(f"{len(shots)} shots but {len(region_maps)} region maps")
    for grid, rmap in zip(shots, region_maps):
        if (grid.h, grid.w) != (rmap.h, rmap.w):
            raise TrainingError(f"region map {rmap.h}x{rmap.w} does not match grid {grid.h}x{grid.w}")

    table = table.copy()
    gates = gates.copy()
    objective = AlignmentObjective(prompt_set, enc, cfg)
    trace: List[EpochLoss] = []
    for epoch in range(cfg.epochs):
        order = keyed_rng(cfg.seed, "epoch", epoch).permutation(len(shots))
        sums = {name: 0.0 for name in TERMS}
        for i in order:
            step = objective.evaluate(shots[i], region_maps[i].labels, table, gates)
            for name in TERMS:
                sums[name] += step.terms[name]
            for slot, g in step.grad_embeddings.items():
                table.embeddings[slot] = table.embeddings[slot] - cfg.learning_rate * g
            for slot, g in step.grad_gates.items():
                gates.raw[slot] = gates.raw[slot] - cfg.learning_rate * g
        entry = EpochLoss(epoch, *(sums[name] / len(shots) for name in TERMS))
        trace.append(entry)
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            logger.info(
                f"[TRAIN] epoch={epoch} clip={entry.l_clip:.4f} trip={entry.l_trip:.4f} "
                f"mean={entry.l_mean:.4f} reg={entry.l_reg:.4f} total={entry.total:.4f}"
            )
    return TrainResult(table, gates, trace)


def write_trace_csv(trace: Sequence[EpochLoss], path) -> None:
    """CSV with columns epoch, l_clip, l_trip, l_mean, l_reg, total."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", *TERMS, "total"])
        for e in trace:
            writer.writerow([e.epoch, repr(e.l_clip), repr(e.l_trip), repr(e.l_mean), repr(e.l_reg), repr(e.total)])
