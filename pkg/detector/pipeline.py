"""
End-to-end orchestration: prompts, region aggregation, alignment training,
Query Former training, memory construction, inference and benchmarking.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from captioner.mfsc import MFSCDocument
from detector.alignment import EpochLoss, train_align
from detector.config import RunConfig
from detector.encoder import (
    SyntheticScene,
    TokenGrid,
    encode_scene,
    encode_scene_highres,
    get_encoder,
    load_feature_file,
)
from detector.evaluation import BenchmarkReport, SeedResult, TimingMetrics, evaluate_dataset
from detector.prompt_bank import (
    BACKGROUND,
    FOREGROUND,
    AttrMoEGates,
    PlaceholderTable,
    PromptSet,
    build_prompt_set,
    component_level,
    encode_all,
    init_parameters,
)
from detector.query_former import (
    CrossAttentionParams,
    IntrinsicQuery,
    family_banks,
    init_query_former,
    qf_forward,
    train_queryformer,
)
from detector.region_aggregation import (
    RegionMap,
    cluster_one_stage,
    cluster_two_stage,
    downsample_region_map,
)
from detector.scoring import InferenceResult, NormalMemory, build_memory, infer
from detector.synthetic import Suite, build_suite

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """Exception for inconsistent pipeline inputs."""
    pass


@dataclass
class FittedModel:
    """Everything inference needs, plus training artifacts."""
    config: RunConfig
    document: MFSCDocument
    prompt_set: PromptSet
    table: PlaceholderTable
    gates: AttrMoEGates
    qf_params: CrossAttentionParams
    queries: IntrinsicQuery
    intrinsics: np.ndarray
    memory: NormalMemory
    region_maps: List[RegionMap] = field(default_factory=list)
    trace: List[EpochLoss] = field(default_factory=list)
    qf_trace: List[float] = field(default_factory=list)

    def score(self, grid: TokenGrid) -> InferenceResult:
        return infer(
            grid,
            self.memory,
            self.intrinsics,
            self.prompt_set,
            self.config.train.logit_scale,
            self.config.scoring.reweight_scale,
            self.config.scoring.dynamic_assignment,
        )

    def score_scene(self, scene: SyntheticScene) -> InferenceResult:
        return self.score(encode_scene(scene, self.config.encoder))


def guiding_prompts(prompt_set: PromptSet):
    """(foreground NHP, background NHP, component NHPs) used for clustering."""
    comps = [prompt_set.bank(component_level(i)).p_n for i in range(prompt_set.num_components)]
    return prompt_set.bank(FOREGROUND).p_n, prompt_set.bank(BACKGROUND).p_n, comps


def aggregate_regions(cfg: RunConfig, prompt_set: PromptSet, grid: TokenGrid, factor: int) -> RegionMap:
    """Clusters one (possibly high-resolution) grid and returns a native region map."""
    fg, bg, comps = guiding_prompts(prompt_set)
    if cfg.one_stage:
        rmap = cluster_one_stage(grid, comps)
    else:
        rmap = cluster_two_stage(grid, fg, bg, comps)
    return downsample_region_map(rmap, factor) if factor > 1 else rmap


def aggregate_scene(cfg: RunConfig, prompt_set: PromptSet, scene: SyntheticScene) -> RegionMap:
    factor = cfg.highres_factor if cfg.use_highres else 1
    grid = encode_scene_highres(scene, cfg.encoder, factor, cfg.workers)
    return aggregate_regions(cfg, prompt_set, grid, factor)


def fit_alignment(
    cfg: RunConfig,
    doc: MFSCDocument,
    shots: Sequence[TokenGrid],
    region_maps: Sequence[RegionMap],
) -> FittedModel:
    """Trains the prompts; the Query Former keeps its initial parameters."""
    enc = get_encoder(cfg.encoder)
    pset = build_prompt_set(doc, cfg.anomaly_words, cfg.train.n_ab, cfg.seed)
    table, gates = init_parameters(pset, enc.embedding_dim, cfg.seed)
    result = train_align(shots, region_maps, pset, table, gates, enc, cfg.train)
    encoded = encode_all(pset, result.table, result.gates, enc)
    params, queries = init_query_former(enc.feature_dim, pset.num_components, cfg.query_former.seed)
    normal, abnormal = family_banks(encoded)
    return FittedModel(
        config=cfg,
        document=doc,
        prompt_set=encoded,
        table=result.table,
        gates=result.gates,
        qf_params=params,
        queries=queries,
        intrinsics=qf_forward(queries, normal, abnormal, params),
        memory=build_memory(shots),
        region_maps=list(region_maps),
        trace=result.trace,
    )


def fit_query_former(model: FittedModel) -> FittedModel:
    """Trains the Query Former on the model's frozen prompt banks."""
    result = train_queryformer(model.prompt_set, model.qf_params, model.queries, model.config.query_former)
    normal, abnormal = family_banks(model.prompt_set)
    return replace(
        model,
        qf_params=result.params,
        queries=result.queries,
        intrinsics=qf_forward(result.queries, normal, abnormal, result.params),
        qf_trace=result.trace,
    )


def initial_prompt_set(cfg: RunConfig, doc: MFSCDocument) -> PromptSet:
    """Prompt set encoded with the initial parameters (NHPs do not depend on them)."""
    enc = get_encoder(cfg.encoder)
    pset = build_prompt_set(doc, cfg.anomaly_words, cfg.train.n_ab, cfg.seed)
    table, gates = init_parameters(pset, enc.embedding_dim, cfg.seed)
    return encode_all(pset, table, gates, enc)


def fit_scenes(cfg: RunConfig, doc: MFSCDocument, shots: Sequence[SyntheticScene]) -> FittedModel:
    """Full fit on synthetic shots."""
    if not shots:
        raise PipelineError("no training shots")
    timer = TimingMetrics()
    timer.start()
    pset = initial_prompt_set(cfg, doc)
    region_maps = [aggregate_scene(cfg, pset, s) for s in shots]
    grids = [encode_scene(s, cfg.encoder) for s in shots]
    model = fit_query_former(fit_alignment(cfg, doc, grids, region_maps))
    timer.stop()
    logger.info(f"[TRAIN] fitted {cfg.category} on {len(shots)} shots in {timer.duration_ms:.0f} ms")
    return model


def fit_grids(
    cfg: RunConfig,
    doc: MFSCDocument,
    shots: Sequence[TokenGrid],
    shots_highres: Optional[Sequence[TokenGrid]] = None,
) -> FittedModel:
    """Full fit on imported token grids (clustered at high resolution when given)."""
    if not shots:
        raise PipelineError("no training shots")
    shots = [g.normalized() for g in shots]
    pset = initial_prompt_set(cfg, doc)
    if shots_highres:
        if len(shots_highres) != len(shots):
            raise PipelineError(f"{len(shots)} shots but {len(shots_highres)} high-resolution shots")
        region_maps = []
        for native, big in zip(shots, shots_highres):
            if big.h % native.h or big.w % native.w or big.h // native.h != big.w // native.w:
                raise PipelineError(f"high-resolution grid {big.h}x{big.w} does not tile {native.h}x{native.w}")
            region_maps.append(aggregate_regions(cfg, pset, big.normalized(), big.h // native.h))
    else:
        region_maps = [aggregate_regions(cfg, pset, g, 1) for g in shots]
    return fit_query_former(fit_alignment(cfg, doc, shots, region_maps))


def make_suite(cfg: RunConfig, null: bool = False) -> Suite:
    if cfg.layout is None:
        raise PipelineError("synthetic mode needs a layout")
    suite_cfg = cfg.null_suite if null else cfg.suite
    if suite_cfg is None:
        raise PipelineError("no null suite configured")
    return build_suite(cfg.layout, suite_cfg, cfg.encoder, cfg.seed, cfg.category)


def evaluate_suite(model: FittedModel, suite: Suite, seed: int) -> SeedResult:
    masks = [s.anomaly_mask for s in suite.tests]
    return evaluate_dataset(model.score_scene, suite.tests, masks, model.config.eval, seed)


def run_benchmark(cfg: RunConfig, doc: MFSCDocument, seeds: Sequence[int]) -> BenchmarkReport:
    """
    Fits and evaluates one model per seed on the synthetic suite (and the
    null suite when configured, reported as '<category>/null').
    """
    report = BenchmarkReport()
    main: List[SeedResult] = []
    null: List[SeedResult] = []
    for seed in seeds:
        run = cfg.with_seed(seed)
        suite = make_suite(run)
        model = fit_scenes(run, doc, suite.shots)
        main.append(evaluate_suite(model, suite, seed))
        if run.null_suite is not None:
            null.append(evaluate_suite(model, make_suite(run, null=True), seed))
    report.add(cfg.category, main)
    if null:
        report.add(f"{cfg.category}/null", null)
    return report


# Feature-import mode -----------------------------------------------------------

def load_feature_shots(cfg: RunConfig) -> Tuple[List[TokenGrid], List[TokenGrid]]:
    """(native shots, high-resolution shots or empty) from cfg.features."""
    if cfg.features is None or not cfg.features.shots:
        raise PipelineError("feature-import mode needs features.shots")
    shots = [load_feature_file(cfg.resolve(p)) for p in cfg.features.shots]
    highres = [load_feature_file(cfg.resolve(p), resolution_tag="highres") for p in cfg.features.shots_highres]
    return shots, highres


def load_feature_queries(cfg: RunConfig) -> Tuple[List[TokenGrid], List[np.ndarray]]:
    """Query grids and their pixel masks (all-zero for normal queries without a mask file)."""
    if cfg.features is None or not cfg.features.queries:
        raise PipelineError("feature-import mode needs features.queries")
    grids, masks = [], []
    for q in cfg.features.queries:
        grid = load_feature_file(cfg.resolve(q.path)).normalized()
        if q.mask is not None:
            with open(cfg.resolve(q.mask), "r", encoding="utf-8") as f:
                mask = np.asarray(json.load(f), dtype=bool)
        elif q.anomalous:
            raise PipelineError(f"anomalous query {q.path} has no mask")
        else:
            mask = np.zeros((grid.h, grid.w), dtype=bool)
        if mask.shape != (grid.h, grid.w):
            raise PipelineError(f"mask for {q.path} is {mask.shape}, grid is {grid.h}x{grid.w}")
        if q.anomalous != bool(mask.any()):
            raise PipelineError(f"query {q.path}: anomalous flag disagrees with its mask")
        grids.append(grid)
        masks.append(mask)
    return grids, masks


def evaluate_features(model: FittedModel, seed: int) -> BenchmarkReport:
    grids, masks = load_feature_queries(model.config)
    report = BenchmarkReport()
    report.add(model.config.category, [evaluate_dataset(model.score, grids, masks, model.config.eval, seed)])
    return report


def fit_from_config(cfg: RunConfig, doc: MFSCDocument) -> FittedModel:
    """Fits on synthetic suite shots or imported feature grids, per cfg.mode."""
    if cfg.mode == "feature-import":
        shots, highres = load_feature_shots(cfg)
        return fit_grids(cfg, doc, shots, highres or None)
    return fit_scenes(cfg, doc, make_suite(cfg).shots)
