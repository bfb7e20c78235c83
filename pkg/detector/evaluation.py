"""
Metrics and benchmark reporting.

AUROC is the normalized Mann-Whitney U statistic with ties counted half.
Reports are deterministic given seeds; wall-clock timings are kept apart
from the scores so repeated runs produce identical score reports.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


class MetricError(Exception):
    """Exception for undefined metrics (e.g. a single-class label set)."""
    pass


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pixel_pooling: Literal["pooled", "per_image"] = Field(
        default="pooled", description="Pool all pixels of a category, or average per-image AUROCs"
    )
    workers: int = Field(default=1, ge=1, description="Threads for per-scene scoring")
    include_timing: bool = Field(default=False, description="Write wall-clock timings into the report")


@dataclass
class TimingMetrics:
    """Wall-clock timing for one operation."""
    start_time: float = 0.0
    end_time: float = 0.0
    duration_ms: float = 0.0

    def start(self) -> None:
        self.start_time = time.perf_counter()

    def stop(self) -> None:
        self.end_time = time.perf_counter()
        self.duration_ms = (self.end_time - self.start_time) * 1000


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=bool).ravel()
        if self.scores.shape != self.labels.shape:
            raise MetricError(f"{self.scores.size} scores but {self.labels.size} labels")


def auroc(data: LabeledScores) -> float:
    """
    Area under the ROC curve via the rank-sum statistic.

    Raises:
        MetricError: If only one class is present
    """
    n_pos = int(data.labels.sum())
    n_neg = int(data.labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined without both classes")
    ranks = rankdata(data.scores, method="average")
    u = ranks[data.labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], pooling: str = "pooled") -> float:
    """Pooled pixel AUROC, or the mean AUROC over images whose mask has both classes."""
    if pooling == "pooled":
        return auroc(LabeledScores(
            np.concatenate([np.ravel(m) for m in maps]),
            np.concatenate([np.ravel(k) for k in masks]),
        ))
    values = [
        auroc(LabeledScores(m, k)) for m, k in zip(maps, masks)
        if np.any(k) and not np.all(k)
    ]
    if not values:
        raise MetricError("no image has both normal and anomalous pixels")
    return float(np.mean(values))


@dataclass
class SeedResult:
    seed: int
    image_auroc: float
    pixel_auroc: float
    n_images: int
    wall_clock_ms: float = 0.0


@dataclass
class CategoryReport:
    category: str
    image_auroc: float
    pixel_auroc: float
    per_seed: List[SeedResult] = field(default_factory=list)
    wall_clock_ms: float = 0.0


@dataclass
class BenchmarkReport:
    categories: Dict[str, CategoryReport] = field(default_factory=dict)

    def add(self, category: str, results: List[SeedResult]) -> CategoryReport:
        report = CategoryReport(
            category=category,
            image_auroc=float(np.mean([r.image_auroc for r in results])),
            pixel_auroc=float(np.mean([r.pixel_auroc for r in results])),
            per_seed=list(results),
            wall_clock_ms=float(sum(r.wall_clock_ms for r in results)),
        )
        self.categories[category] = report
        return report

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for name, cat in sorted(self.categories.items()):
            entry = asdict(cat)
            if not include_timing:
                entry.pop("wall_clock_ms")
                for s in entry["per_seed"]:
                    s.pop("wall_clock_ms")
            out[name] = entry
        return {"categories": out}

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Aligned text table: one row per category and seed."""
        header = ("category", "seed", "image_auroc", "pixel_auroc", "images")
        rows = []
        for name, cat in sorted(self.categories.items()):
            for r in cat.per_seed:
                rows.append((name, str(r.seed), f"{r.image_auroc:.4f}", f"{r.pixel_auroc:.4f}", str(r.n_images)))
            rows.append((name, "mean", f"{cat.image_auroc:.4f}", f"{cat.pixel_auroc:.4f}", ""))
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
        return "\n".join(lines) + "\n"


def evaluate_dataset(
    score_fn: Callable[[Any], Any],
    scenes: Sequence[Any],
    masks: Sequence[np.ndarray],
    cfg: EvalConfig,
    seed: int = 0,
) -> SeedResult:
    """
    Scores every scene and computes image and pixel AUROC.

    Args:
        score_fn: Maps a scene to an object with `m_pix` (ScoreMap) and `image_score`
        scenes: Test scenes (normal and anomalous)
        masks: Ground-truth pixel masks, one per scene
        cfg: Evaluation settings
        seed: Seed recorded in the result

    Returns:
        SeedResult
    """
    if len(scenes) != len(masks):
        raise MetricError(f"{len(scenes)} scenes but {len(masks)} masks")
    timer = TimingMetrics()
    timer.start()
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(score_fn, scenes))
    else:
        results = [score_fn(s) for s in scenes]
    image_labels = [bool(np.any(m)) for m in masks]
    img = auroc(LabeledScores([r.image_score for r in results], image_labels))
    pix = pixel_auroc([r.m_pix.scores for r in results], masks, cfg.pixel_pooling)
    timer.stop()
    logger.info(f"[EVAL] seed={seed} images={len(scenes)} image_auroc={img:.4f} pixel_auroc={pix:.4f}")
    return SeedResult(seed, img, pix, len(scenes), timer.duration_ms)
