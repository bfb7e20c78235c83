"""
Finite-difference gradient checks for every hand-derived gradient.

Each check draws seeded random points, compares the analytic gradient with
central differences and records the worst relative error per parameter.
Points whose finite-difference stencil would straddle a nonsmooth locus (the
triplet hinge, a zero reg residual) are redrawn.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from detector.alignment import AlignmentObjective, loss_clip, loss_mean, loss_reg, loss_triplet
from detector.constants import DEFAULT_LOGIT_SCALE, FD_STEP, GRAD_CHECK_TOLERANCE
from detector.encoder import EncoderSpec, SyntheticEncoder, TokenGrid, keyed_rng
from detector.prompt_bank import AttrMoEGates, PlaceholderTable
from detector.query_former import family_loss, init_query_former

logger = logging.getLogger(__name__)

CHECK_DIM = 16
CHECK_EMBEDDING_DIM = 24
NONSMOOTH_MARGIN = 1e-3

# (analytic, finite-difference) per parameter name
PointResult = Dict[str, Tuple[np.ndarray, np.ndarray]]


def relative_error(analytic, numeric) -> float:
    """|a - n| / max(|a|, |n|, 1e-8)"""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-8)
    return float(np.linalg.norm(a - n)) / denom


def fd_gradient(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of f() with respect to x, perturbed in place and restored."""
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@dataclass
class GradEntry:
    """Worst point of one parameter within one check."""
    check: str
    parameter: str
    points: int
    max_rel_error: float
    analytic_norm: float
    numeric_norm: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_CHECK_TOLERANCE

    def to_dict(self) -> Dict:
        return {
            "check": self.check,
            "parameter": self.parameter,
            "points": self.points,
            "max_rel_error": self.max_rel_error,
            "analytic_norm": self.analytic_norm,
            "numeric_norm": self.numeric_norm,
            "passed": self.passed,
        }


@dataclass
class GradReport:
    entries: List[GradEntry] = field(default_factory=list)
    tolerance: float = GRAD_CHECK_TOLERANCE
    step: float = FD_STEP

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(e.passed for e in self.entries)

    def failures(self) -> List[GradEntry]:
        return [e for e in self.entries if not e.passed]

    def to_dict(self) -> Dict:
        return {
            "tolerance": self.tolerance,
            "step": self.step,
            "passed": self.passed,
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _summarize(check: str, results: List[PointResult]) -> List[GradEntry]:
    entries = []
    for name in results[0]:
        worst = max(results, key=lambda r: relative_error(*r[name]))
        a, n = worst[name]
        entries.append(GradEntry(
            check=check,
            parameter=name,
            points=len(results),
            max_rel_error=relative_error(a, n),
            analytic_norm=float(np.linalg.norm(a)),
            numeric_norm=float(np.linalg.norm(n)),
        ))
    return entries


def _run_points(check: str, point_fn: Callable[[int], PointResult], points: int, workers: int) -> List[GradEntry]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(point_fn, range(points)))
    else:
        results = [point_fn(k) for k in range(points)]
    entries = _summarize(check, results)
    worst = max(e.max_rel_error for e in entries)
    logger.info(f"[GRADCHECK] {check}: {points} points, max rel error {worst:.2e}")
    return entries


# Loss-level points ---------------------------------------------------------------

def clip_point(seed: int, k: int, scale: float = DEFAULT_LOGIT_SCALE) -> PointResult:
    rng = keyed_rng(seed, "gradcheck", "l_clip", k)
    tokens = _unit_rows(rng, 12, CHECK_DIM)
    weights = rng.uniform(1.0, 1.5, size=12)
    p_n = rng.normal(size=CHECK_DIM)
    abnormal = rng.normal(size=(5, CHECK_DIM))
    _, g_pn, g_abn = loss_clip(tokens, weights, p_n, abnormal, scale)
    f = lambda: loss_clip(tokens, weights, p_n, abnormal, scale)[0]
    return {"p_n": (g_pn, fd_gradient(f, p_n)), "abnormal": (g_abn, fd_gradient(f, abnormal))}


def triplet_point(seed: int, k: int, epsilon: float = 1.0) -> PointResult:
    attempt = 0
    while True:
        rng = keyed_rng(seed, "gradcheck", "l_trip", k, attempt)
        z, p_n, p_a = _unit_rows(rng, 3, CHECK_DIM)
        margin = np.linalg.norm(z - p_n) - np.linalg.norm(z - p_a) + epsilon
        if margin > NONSMOOTH_MARGIN:
            break
        attempt += 1
    _, g_z, g_pn, g_pa = loss_triplet(z, p_n, p_a, epsilon)
    f = lambda: loss_triplet(z, p_n, p_a, epsilon)[0]
    return {
        "z": (g_z, fd_gradient(f, z)),
        "p_n": (g_pn, fd_gradient(f, p_n)),
        "p_a": (g_pa, fd_gradient(f, p_a)),
    }


def mean_point(seed: int, k: int) -> PointResult:
    rng = keyed_rng(seed, "gradcheck", "l_mean", k)
    ahp_mean = rng.normal(size=CHECK_DIM)
    alp = rng.normal(size=CHECK_DIM)
    _, g_ahp, g_alp = loss_mean(ahp_mean, alp)
    f = lambda: loss_mean(ahp_mean, alp)[0]
    return {"ahp_mean": (g_ahp, fd_gradient(f, ahp_mean)), "alp": (g_alp, fd_gradient(f, alp))}


def reg_point(seed: int, k: int, lambda_reg: float = 1.0) -> PointResult:
    attempt = 0
    while True:
        rng = keyed_rng(seed, "gradcheck", "l_reg", k, attempt)
        p_img = rng.normal(size=CHECK_DIM)
        comps = [rng.normal(size=CHECK_DIM) for _ in range(3)]
        p_b = _unit_rows(rng, 1, CHECK_DIM)[0]
        if np.linalg.norm(p_img - np.sum(comps, axis=0) - p_b) > NONSMOOTH_MARGIN:
            break
        attempt += 1
    _, g_img, g_comps = loss_reg(p_img, comps, p_b, lambda_reg)
    f = lambda: loss_reg(p_img, comps, p_b, lambda_reg)[0]
    out = {"p_a_img": (g_img, fd_gradient(f, p_img))}
    for i, (c, g) in enumerate(zip(comps, g_comps)):
        out[f"component_{i}"] = (g, fd_gradient(f, c))
    return out


def encoder_point(seed: int, k: int) -> PointResult:
    """Text-encoder chain: d/dX of <g, encode(X)> for a random sequence X."""
    enc = SyntheticEncoder(EncoderSpec(seed=seed, feature_dim=CHECK_DIM, token_embedding_dim=CHECK_EMBEDDING_DIM))
    rng = keyed_rng(seed, "gradcheck", "encode", k)
    seq = rng.normal(size=(4, CHECK_EMBEDDING_DIM))
    g = rng.normal(size=CHECK_DIM)
    analytic = enc.encode_vjp(list(seq), g)
    f = lambda: float(g @ enc.encode(list(seq)))
    return {"sequence": (analytic, fd_gradient(f, seq))}


def family_point(seed: int, k: int) -> PointResult:
    """Query Former family loss with respect to W_f, the bias and the query."""
    params, _ = init_query_former(CHECK_DIM, 1, seed * 100003 + k)
    rng = keyed_rng(seed, "gradcheck", "qf", k)
    q = rng.normal(0.0, 1.0 / np.sqrt(CHECK_DIM), size=CHECK_DIM)
    normal = _unit_rows(rng, 3, CHECK_DIM)
    abnormal = _unit_rows(rng, 6, CHECK_DIM)
    _, grads, g_q = family_loss(q, normal, abnormal, params)
    f = lambda: family_loss(q, normal, abnormal, params)[0]
    out = {
        "W_f": (grads["W_f"], fd_gradient(f, params.W_f)),
        "bias": (grads["bias"], fd_gradient(f, params.bias)),
        "query": (g_q, fd_gradient(f, q)),
    }
    # Projections along one random direction each
    arrays = params.arrays()
    for name in ("W_q_normal", "W_k_normal", "W_v_normal", "W_q_abnormal", "W_k_abnormal", "W_v_abnormal"):
        x = arrays[name]
        v = rng.normal(size=x.shape)
        v /= np.linalg.norm(v)
        orig = x.copy()
        x[...] = orig + FD_STEP * v
        fp = f()
        x[...] = orig - FD_STEP * v
        fm = f()
        x[...] = orig
        out[name] = (np.array([np.sum(grads[name] * v)]), np.array([(fp - fm) / (2 * FD_STEP)]))
    return out


# Full chain -------------------------------------------------------------------------

def chain_point(
    objective: AlignmentObjective,
    grid: TokenGrid,
    labels: np.ndarray,
    table: PlaceholderTable,
    gates: AttrMoEGates,
    seed: int,
    k: int,
) -> PointResult:
    """
    Directional derivative of the summed alignment objective along a random
    unit direction over every placeholder embedding and gate.
    """
    rng = keyed_rng(seed, "gradcheck", "chain", k)
    slots = sorted(table.embeddings)
    gate_slots = sorted(gates.raw)
    v_emb = {s: rng.normal(size=table.embeddings[s].shape) for s in slots}
    v_gate = {s: float(rng.normal()) for s in gate_slots}
    norm = np.sqrt(sum(float(v @ v) for v in v_emb.values()) + sum(v * v for v in v_gate.values()))

    def shifted(t: float) -> float:
        tbl = PlaceholderTable({s: table.embeddings[s] + t * v_emb[s] / norm for s in slots})
        gts = AttrMoEGates({s: gates.raw[s] + t * v_gate[s] / norm for s in gate_slots})
        return objective.evaluate(grid, labels, tbl, gts, with_grad=False).total

    step = objective.evaluate(grid, labels, table, gates)
    analytic = sum(float(g @ v_emb[s]) for s, g in step.grad_embeddings.items())
    analytic += sum(step.grad_gates.get(s, 0.0) * v_gate[s] for s in gate_slots)
    numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2 * FD_STEP)
    return {"placeholders+gates": (np.array([analytic / norm]), np.array([numeric]))}


def run_grad_check(
    seed: int = 0,
    points: int = 100,
    workers: int = 1,
    chain: Optional[Tuple[AlignmentObjective, TokenGrid, np.ndarray, PlaceholderTable, AttrMoEGates]] = None,
    chain_points: int = 10,
) -> GradReport:
    """
    Runs every loss-level check and, when `chain` is given, the full
    placeholder/gate chain on a real objective.
    """
    report = GradReport()
    checks = {
        "l_clip": clip_point,
        "l_trip": triplet_point,
        "l_mean": mean_point,
        "l_reg": reg_point,
        "encode_text": encoder_point,
        "qf_family_loss": family_point,
    }
    for name, fn in checks.items():
        report.entries.extend(_run_points(name, lambda k, fn=fn: fn(seed, k), points, workers))
    if chain is not None:
        objective, grid, labels, table, gates = chain
        report.entries.extend(_run_points(
            "alignment_chain",
            lambda k: chain_point(objective, grid, labels, table, gates, seed, k),
            chain_points,
            1,
        ))
    if report.passed:
        logger.info(f"[GRADCHECK] all {len(report.entries)} entries below {GRAD_CHECK_TOLERANCE:g}")
    else:
        for e in report.failures():
            logger.warning(f"[GRADCHECK] {e.check}/{e.parameter} rel error {e.max_rel_error:.2e}")
    return report
