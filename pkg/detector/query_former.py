"""
Query Former: one learnable intrinsic query per prompt family, read through
two parallel single-head cross-attention layers (normal and abnormal prompt
banks) and fused by a linear projection.

Trained after prompt alignment on frozen banks, maximizing the cosine between
each intrinsic feature and the family's mean normal and mean abnormal prompt
features.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from detector.constants import QUERY_INIT_STD
from detector.core import l2_normalize, normalize_vjp
from detector.encoder import keyed_rng
from detector.prompt_bank import PromptSet, family_levels

logger = logging.getLogger(__name__)

BRANCHES = ("normal", "abnormal")


class QueryFormerError(Exception):
    """Exception for Query Former errors."""
    pass


class QueryFormerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.1, gt=0)
    epochs: int = Field(default=300, ge=0)
    seed: int = 0


@dataclass
class CrossAttentionParams:
    """W_q, W_k, W_v per branch (d x d), fusion W_f (d x 2d) and bias (d)."""
    W_q: Dict[str, np.ndarray]
    W_k: Dict[str, np.ndarray]
    W_v: Dict[str, np.ndarray]
    W_f: np.ndarray
    bias: np.ndarray

    @property
    def dim(self) -> int:
        return self.W_f.shape[0]

    def copy(self) -> "CrossAttentionParams":
        return CrossAttentionParams(
            {b: m.copy() for b, m in self.W_q.items()},
            {b: m.copy() for b, m in self.W_k.items()},
            {b: m.copy() for b, m in self.W_v.items()},
            self.W_f.copy(),
            self.bias.copy(),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat name -> array mapping in a stable order."""
        out: Dict[str, np.ndarray] = {}
        for b in BRANCHES:
            out[f"W_q_{b}"] = self.W_q[b]
            out[f"W_k_{b}"] = self.W_k[b]
            out[f"W_v_{b}"] = self.W_v[b]
        out["W_f"] = self.W_f
        out["bias"] = self.bias
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "CrossAttentionParams":
        return cls(
            {b: np.asarray(arrays[f"W_q_{b}"], dtype=np.float64) for b in BRANCHES},
            {b: np.asarray(arrays[f"W_k_{b}"], dtype=np.float64) for b in BRANCHES},
            {b: np.asarray(arrays[f"W_v_{b}"], dtype=np.float64) for b in BRANCHES},
            np.asarray(arrays["W_f"], dtype=np.float64),
            np.asarray(arrays["bias"], dtype=np.float64),
        )


@dataclass
class IntrinsicQuery:
    """One query row per family: Image, Foreground, Component(0..Nc-1)."""
    queries: np.ndarray

    @property
    def num_families(self) -> int:
        return self.queries.shape[0]


def init_query_former(dim: int, num_components: int, seed: int) -> Tuple[CrossAttentionParams, IntrinsicQuery]:
    """Projections ~ N(0, 1/d), queries ~ N(0, 0.02^2), bias zero."""
    std = 1.0 / np.sqrt(dim)

    def mat(name: str, shape: Tuple[int, int]) -> np.ndarray:
        return keyed_rng(seed, "qf", name).normal(0.0, std, size=shape)

    params = CrossAttentionParams(
        {b: mat(f"W_q_{b}", (dim, dim)) for b in BRANCHES},
        {b: mat(f"W_k_{b}", (dim, dim)) for b in BRANCHES},
        {b: mat(f"W_v_{b}", (dim, dim)) for b in BRANCHES},
        mat("W_f", (dim, 2 * dim)),
        np.zeros(dim),
    )
    queries = keyed_rng(seed, "qf", "queries").normal(0.0, QUERY_INIT_STD, size=(num_components + 2, dim))
    return params, IntrinsicQuery(queries)


@dataclass
class _BranchCache:
    bank: np.ndarray
    Q: np.ndarray
    Kp: np.ndarray
    V: np.ndarray
    attn: np.ndarray
    out: np.ndarray


def _branch_forward(q: np.ndarray, bank: np.ndarray, params: CrossAttentionParams, branch: str) -> _BranchCache:
    if bank.shape[0] == 0:
        raise QueryFormerError(f"empty {branch} bank")
    d = params.dim
    Q = params.W_q[branch] @ q
    Kp = bank @ params.W_k[branch].T
    V = bank @ params.W_v[branch].T
    logits = Kp @ Q / np.sqrt(d)
    e = np.exp(logits - logits.max())
    attn = e / e.sum()
    return _BranchCache(bank, Q, Kp, V, attn, attn @ V)


def family_forward(
    q: np.ndarray, normal_bank: np.ndarray, abnormal_bank: np.ndarray, params: CrossAttentionParams
) -> Tuple[np.ndarray, Tuple[_BranchCache, _BranchCache, np.ndarray]]:
    """Intrinsic feature of one family plus the cache needed for backprop."""
    cn = _branch_forward(q, np.atleast_2d(normal_bank), params, "normal")
    ca = _branch_forward(q, np.atleast_2d(abnormal_bank), params, "abnormal")
    u = params.W_f @ np.concatenate([cn.out, ca.out]) + params.bias
    return l2_normalize(u), (cn, ca, u)


def qf_forward(
    queries: IntrinsicQuery,
    normal_banks: Sequence[np.ndarray],
    abnormal_banks: Sequence[np.ndarray],
    params: CrossAttentionParams,
) -> np.ndarray:
    """
    Intrinsic features of every family.

    Returns:
        (num_families, d) unit-norm rows
    """
    if not (len(normal_banks) == len(abnormal_banks) == queries.num_families):
        raise QueryFormerError("bank count does not match the number of families")
    return np.stack([
        family_forward(queries.queries[k], normal_banks[k], abnormal_banks[k], params)[0]
        for k in range(queries.num_families)
    ])


def attention_weights(q: np.ndarray, bank: np.ndarray, params: CrossAttentionParams, branch: str) -> np.ndarray:
    return _branch_forward(q, np.atleast_2d(bank), params, branch).attn


def family_banks(prompt_set: PromptSet) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Per family: NHP features and AHP plus ALP features."""
    normal, abnormal = [], []
    for level in family_levels(prompt_set.num_components):
        bank = prompt_set.bank(level)
        normal.append(bank.nhp)
        abnormal.append(bank.abnormal)
    return normal, abnormal


def family_loss(
    q: np.ndarray,
    normal_bank: np.ndarray,
    abnormal_bank: np.ndarray,
    params: CrossAttentionParams,
) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """
    -0.5 * [cos(y, mean normal) + cos(y, mean abnormal)] for y = intrinsic feature.

    Returns:
        (loss, gradients by parameter name, gradient wrt the query)
    """
    y, (cn, ca, u) = family_forward(q, normal_bank, abnormal_bank, params)
    t_n = l2_normalize(np.atleast_2d(normal_bank).mean(axis=0))
    t_a = l2_normalize(np.atleast_2d(abnormal_bank).mean(axis=0))
    loss = -0.5 * float(y @ t_n + y @ t_a)

    d = params.dim
    g_u = normalize_vjp(u, -0.5 * (t_n + t_a))
    concat = np.concatenate([cn.out, ca.out])
    grads: Dict[str, np.ndarray] = {"W_f": np.outer(g_u, concat), "bias": g_u.copy()}
    g_concat = params.W_f.T @ g_u
    g_q = np.zeros_like(q)
    for branch, cache, g_o in (("normal", cn, g_concat[:d]), ("abnormal", ca, g_concat[d:])):
        grads[f"W_v_{branch}"] = np.outer(g_o, cache.attn @ cache.bank)
        g_attn = cache.V @ g_o
        g_logits = cache.attn * (g_attn - cache.attn @ g_attn)
        g_Q = cache.Kp.T @ g_logits / np.sqrt(d)
        grads[f"W_k_{branch}"] = np.outer(cache.Q / np.sqrt(d), g_logits @ cache.bank)
        grads[f"W_q_{branch}"] = np.outer(g_Q, q)
        g_q += params.W_q[branch].T @ g_Q
    return loss, grads, g_q


@dataclass
class QueryFormerResult:
    params: CrossAttentionParams
    queries: IntrinsicQuery
    trace: List[float] = field(default_factory=list)


def train_queryformer(
    prompt_set: PromptSet,
    params: CrossAttentionParams,
    queries: IntrinsicQuery,
    cfg: QueryFormerConfig,
) -> QueryFormerResult:
    """
    SGD on the projections and queries, one step per family per epoch in a
    seeded shuffled order. Prompt features stay frozen.

    Returns:
        Trained copies and the per-epoch mean family loss

    Raises:
        QueryFormerError: On a non-finite loss
    """
    params = params.copy()
    queries = IntrinsicQuery(queries.queries.copy())
    normal, abnormal = family_banks(prompt_set)
    trace: List[float] = []
    for epoch in range(cfg.epochs):
        order = keyed_rng(cfg.seed, "qf-epoch", epoch).permutation(queries.num_families)
        total = 0.0
        for k in order:
            loss, grads, g_q = family_loss(queries.queries[k], normal[k], abnormal[k], params)
            if not np.isfinite(loss):
                raise QueryFormerError(f"non-finite Query Former loss for family {k}")
            total += loss
            for name, arr in params.arrays().items():
                arr -= cfg.learning_rate * grads[name]
            queries.queries[k] -= cfg.learning_rate * g_q
        trace.append(total / queries.num_families)
        if epoch % 100 == 0 or epoch == cfg.epochs - 1:
            logger.info(f"[QF] epoch={epoch} loss={trace[-1]:.6f}")
    return QueryFormerResult(params, queries, trace)


def qf_loss_total(
    prompt_set: PromptSet, params: CrossAttentionParams, queries: IntrinsicQuery
) -> float:
    """Mean family loss at the given parameters."""
    normal, abnormal = family_banks(prompt_set)
    return float(np.mean([
        family_loss(queries.queries[k], normal[k], abnormal[k], params)[0]
        for k in range(queries.num_families)
    ]))
