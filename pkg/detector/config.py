"""
Centralized run configuration.

Paths are module-level constants; everything that shapes a run lives in
RunConfig, which is loaded from JSON and snapshotted into every bundle.
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from detector.alignment import TrainConfig
from detector.constants import DEFAULT_ANOMALY_WORDS, HIGHRES_FACTOR, NATIVE_GRID
from detector.encoder import EncoderSpec
from detector.evaluation import EvalConfig
from detector.query_former import QueryFormerConfig
from detector.scoring import ScoringConfig
from detector.synthetic import SceneLayout, SuiteConfig

logger = logging.getLogger(__name__)

# Project base directory
BASE_DIR = Path(__file__).parent.parent

FIXTURES_DIR = BASE_DIR / "fixtures"
DOCUMENTS_DIR = FIXTURES_DIR / "mfsc"
BUNDLES_DIR = BASE_DIR / "bundles"
REPORTS_DIR = BASE_DIR / "reports"


class ConfigError(Exception):
    """Exception for unreadable or invalid run configurations."""
    pass


class FeatureQuery(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str
    anomalous: bool = False
    mask: Optional[str] = Field(default=None, description="JSON file holding an h x w 0/1 grid")


class FeatureImportConfig(BaseModel):
    """Externally computed FGADFEAT grids used instead of synthetic scenes."""
    model_config = ConfigDict(extra="forbid")

    shots: List[str] = Field(default_factory=list, description="Native-resolution shot grids")
    shots_highres: List[str] = Field(default_factory=list, description="Optional high-resolution shot grids")
    queries: List[FeatureQuery] = Field(default_factory=list)


class RunConfig(BaseModel):
    """Everything needed to reproduce a run."""
    model_config = ConfigDict(extra="forbid")

    category: str = "pcb_fixture"
    seed: int = 0
    mode: Literal["synthetic", "feature-import"] = "synthetic"
    document: str = Field(default="fixtures/mfsc/pcb_fixture.json", description="MFSC document path")
    anomaly_words: List[str] = Field(default_factory=lambda: list(DEFAULT_ANOMALY_WORDS))
    native_grid: int = Field(default=NATIVE_GRID, ge=1)
    highres_factor: int = Field(default=HIGHRES_FACTOR, ge=1)
    use_highres: bool = Field(default=True, description="False clusters at native resolution")
    one_stage: bool = Field(default=False, description="Skip the foreground/background stage")
    workers: int = Field(default=1, ge=1)

    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    query_former: QueryFormerConfig = Field(default_factory=QueryFormerConfig)
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    layout: Optional[SceneLayout] = None
    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    null_suite: Optional[SuiteConfig] = Field(default=None, description="Optional zero-perturbation suite")
    features: Optional[FeatureImportConfig] = None

    cache_dir: str = "captions_cache"
    bundles_dir: str = "bundles"

    def resolve(self, path: str) -> Path:
        """Relative paths are taken from the project base directory."""
        p = Path(path)
        return p if p.is_absolute() else BASE_DIR / p

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy whose every seed derives from `seed`."""
        return self.model_copy(update={
            "seed": seed,
            "encoder": self.encoder.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
            "query_former": self.query_former.model_copy(update={"seed": seed}),
        })

    def snapshot(self) -> str:
        """Canonical JSON used inside bundles."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def load_run_config(path) -> RunConfig:
    """
    Loads a RunConfig from JSON.

    Raises:
        ConfigError: If the file is missing, not JSON or fails validation
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.debug(f"[CONFIG] loaded {path} category={cfg.category} mode={cfg.mode}")
    return cfg
