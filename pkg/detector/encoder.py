"""
Feature providers.

SyntheticEncoder is a deterministic stand-in for a vision-language backbone:
text words map to seeded "concept" directions in one half of the feature
space, components get a private appearance direction in the other half, and a
component's visual prototype mixes its name concept with its private
appearance (EncoderSpec.text_alignment). The text encoder is a mean-pool,
affine map and normalization, so every gradient through it is closed-form.

FGADFEAT files import externally computed token grids bit-exactly.
"""

import hashlib
import logging
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from detector.constants import FEATURE_DIM, TOKEN_EMBEDDING_DIM
from detector.core import l2_normalize, l2_normalize_rows, normalize_vjp

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"FGADFEAT"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<8s5I")  # magic, version, T, d, h, w


class EncoderError(Exception):
    """Exception for encoder input errors."""
    pass


class FeatureFormatError(Exception):
    """Exception for malformed feature files; `field` names the bad header field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class EncoderSpec(BaseModel):
    """Parameters of the synthetic encoder pair."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, description="Seed for every projection and concept vector")
    feature_dim: int = Field(default=FEATURE_DIM, description="Feature dimension d")
    token_embedding_dim: int = Field(default=TOKEN_EMBEDDING_DIM, description="Token embedding dimension e")
    attribute_dim: int = Field(default=8, description="Dimension a of per-cell attribute vectors")
    noise_sigma: float = Field(default=0.0, ge=0.0, description="Expected norm of per-token noise")
    text_alignment: float = Field(
        default=0.5, ge=0.0, le=1.0,
        description="Weight of the name concept in a component's visual prototype"
    )
    text_bias: float = Field(default=0.01, ge=0.0, description="Norm of the text encoder bias b")

    @field_validator("feature_dim", "token_embedding_dim")
    @classmethod
    def _at_least_eight(cls, v: int) -> int:
        if v < 8:
            raise ValueError("dimensions must be >= 8")
        return v

    @field_validator("attribute_dim")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("attribute_dim must be >= 1")
        return v


def _key_seed(*parts: Any) -> np.random.SeedSequence:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    return np.random.SeedSequence(words)


def keyed_rng(*parts: Any) -> np.random.Generator:
    """Generator seeded from an arbitrary tuple of keys."""
    return np.random.default_rng(_key_seed(*parts))


_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    """Lowercased alphanumeric words; punctuation is dropped."""
    return _WORD_RE.findall(text.lower())


@dataclass
class SyntheticScene:
    """
    Categorical scene on an H x W cell grid.

    component_ids: (H, W) ints, 0 = background, components 1..Nc
    attributes: (H, W, a) attribute vectors
    anomaly_mask: (H, W) bools
    perturbations: (H, W, d) vectors; zero wherever anomaly_mask is False
    concepts: name of every component id, index 0 = background
    """
    component_ids: np.ndarray
    attributes: np.ndarray
    anomaly_mask: np.ndarray
    perturbations: np.ndarray
    category: str = ""
    concepts: List[str] = field(default_factory=list)
    noise_seed: int = 0

    def __post_init__(self):
        self.component_ids = np.asarray(self.component_ids, dtype=np.int64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.anomaly_mask = np.asarray(self.anomaly_mask, dtype=bool)
        self.perturbations = np.asarray(self.perturbations, dtype=np.float64)
        h, w = self.component_ids.shape
        if self.attributes.shape[:2] != (h, w) or self.attributes.ndim != 3:
            raise EncoderError(f"attributes must be ({h}, {w}, a), got {self.attributes.shape}")
        if self.anomaly_mask.shape != (h, w):
            raise EncoderError(f"anomaly_mask must be ({h}, {w}), got {self.anomaly_mask.shape}")
        if self.perturbations.shape[:2] != (h, w) or self.perturbations.ndim != 3:
            raise EncoderError(f"perturbations must be ({h}, {w}, d), got {self.perturbations.shape}")
        if np.any(self.perturbations[~self.anomaly_mask] != 0.0):
            raise EncoderError("perturbation present on a cell without the anomaly flag")
        ids = np.unique(self.component_ids)
        if ids.min() < 0 or not np.array_equal(ids, np.arange(ids.min(), ids.max() + 1)):
            raise EncoderError(f"component ids must be contiguous, got {ids.tolist()}")
        if self.concepts and len(self.concepts) <= ids.max():
            raise EncoderError(f"concepts name {len(self.concepts)} ids, scene uses up to {ids.max()}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.component_ids.shape

    @property
    def num_components(self) -> int:
        return int(self.component_ids.max())

    def concept_name(self, component_id: int) -> str:
        if component_id < len(self.concepts):
            return self.concepts[component_id]
        return f"component:{component_id}"

    def upsample(self, factor: int) -> "SyntheticScene":
        """Nearest-neighbour cell replication."""
        rep = lambda a: np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)
        return SyntheticScene(
            component_ids=rep(self.component_ids),
            attributes=rep(self.attributes),
            anomaly_mask=rep(self.anomaly_mask),
            perturbations=rep(self.perturbations),
            category=self.category,
            concepts=list(self.concepts),
            noise_seed=self.noise_seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        flagged = np.argwhere(self.anomaly_mask)
        return {
            "category": self.category,
            "concepts": list(self.concepts),
            "noise_seed": self.noise_seed,
            "component_ids": self.component_ids.tolist(),
            "attributes": self.attributes.tolist(),
            "anomalies": [
                {"row": int(r), "col": int(c), "perturbation": self.perturbations[r, c].tolist()}
                for r, c in flagged
            ],
            "feature_dim": int(self.perturbations.shape[2]),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticScene":
        ids = np.asarray(data["component_ids"], dtype=np.int64)
        h, w = ids.shape
        d = int(data["feature_dim"])
        mask = np.zeros((h, w), dtype=bool)
        perts = np.zeros((h, w, d))
        for cell in data.get("anomalies", []):
            mask[cell["row"], cell["col"]] = True
            perts[cell["row"], cell["col"]] = cell["perturbation"]
        return cls(
            component_ids=ids,
            attributes=np.asarray(data["attributes"], dtype=np.float64),
            anomaly_mask=mask,
            perturbations=perts,
            category=data.get("category", ""),
            concepts=list(data.get("concepts", [])),
            noise_seed=int(data.get("noise_seed", 0)),
        )


@dataclass
class TokenGrid:
    """h x w patch features plus a class token."""
    tokens: np.ndarray
    class_token: np.ndarray
    resolution_tag: str = "native"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.class_token = np.asarray(self.class_token, dtype=np.float64)
        if self.tokens.ndim != 3:
            raise EncoderError(f"tokens must be (h, w, d), got {self.tokens.shape}")
        if self.class_token.shape != (self.tokens.shape[2],):
            raise EncoderError("class token dimension does not match tokens")
        if self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise EncoderError("token grid must be at least 1x1")
        if self.resolution_tag not in ("native", "highres"):
            raise EncoderError(f"unknown resolution tag '{self.resolution_tag}'")

    @property
    def h(self) -> int:
        return self.tokens.shape[0]

    @property
    def w(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.h * self.w

    def flat(self) -> np.ndarray:
        """(T, d) row-major view of the tokens."""
        return self.tokens.reshape(-1, self.dim)

    def normalized(self) -> "TokenGrid":
        return TokenGrid(
            tokens=l2_normalize_rows(self.tokens),
            class_token=l2_normalize(self.class_token),
            resolution_tag=self.resolution_tag,
        )


class SyntheticEncoder:
    """Seeded projections and concept tables for one EncoderSpec."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        d, e, a = spec.feature_dim, spec.token_embedding_dim, spec.attribute_dim
        self.concept_dims = d // 2
        self.W = keyed_rng(spec.seed, "text-W").normal(0.0, 1.0 / np.sqrt(e), size=(d, e))
        self.W_pinv = np.linalg.pinv(self.W)
        bias_dir = keyed_rng(spec.seed, "text-b").normal(size=d)
        self.b = spec.text_bias * bias_dir / np.linalg.norm(bias_dir)
        # Attribute appearance lives in the private half only.
        self.A = np.zeros((d, a))
        self.A[self.concept_dims:] = keyed_rng(spec.seed, "attr-A").normal(
            0.0, 1.0 / np.sqrt(d - self.concept_dims), size=(d - self.concept_dims, a)
        )
        self._concepts: Dict[str, np.ndarray] = {}
        self._embeddings: Dict[str, np.ndarray] = {}
        self._prototypes: Dict[str, np.ndarray] = {}

    def concept(self, word: str) -> np.ndarray:
        """Unit direction of one word in the semantic half of feature space."""
        vec = self._concepts.get(word)
        if vec is None:
            vec = np.zeros(self.spec.feature_dim)
            vec[:self.concept_dims] = keyed_rng(self.spec.seed, "concept", word).normal(size=self.concept_dims)
            vec = vec / np.linalg.norm(vec)
            self._concepts[word] = vec
        return vec

    def name_concept(self, name: str) -> np.ndarray:
        words = tokenize(name) or [name]
        return l2_normalize(np.sum([self.concept(w) for w in words], axis=0))

    def private(self, name: str) -> np.ndarray:
        vec = np.zeros(self.spec.feature_dim)
        vec[self.concept_dims:] = keyed_rng(self.spec.seed, "private", name).normal(
            size=self.spec.feature_dim - self.concept_dims
        )
        return vec / np.linalg.norm(vec)

    def prototype(self, name: str) -> np.ndarray:
        """alpha * concept(name) + sqrt(1 - alpha^2) * private(name)."""
        vec = self._prototypes.get(name)
        if vec is None:
            alpha = self.spec.text_alignment
            vec = alpha * self.name_concept(name) + np.sqrt(1.0 - alpha ** 2) * self.private(name)
            self._prototypes[name] = vec
        return vec

    def embed_word(self, word: str) -> np.ndarray:
        """Fixed token embedding with W @ embedding == concept(word)."""
        emb = self._embeddings.get(word)
        if emb is None:
            emb = self.W_pinv @ self.concept(word)
            self._embeddings[word] = emb
        return emb

    # Text side -----------------------------------------------------------

    @property
    def embedding_dim(self) -> int:
        return self.spec.token_embedding_dim

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def pre_normalize(self, sequence: Sequence[np.ndarray]) -> np.ndarray:
        seq = self._check_sequence(sequence)
        return self.W @ seq.mean(axis=0) + self.b

    def encode(self, sequence: Sequence[np.ndarray]) -> np.ndarray:
        return l2_normalize(self.pre_normalize(sequence))

    def encode_vjp(self, sequence: Sequence[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
        """
        Gradient of <grad_out, encode(sequence)> with respect to every embedding.

        Returns:
            (n, e) array; row i is the gradient for sequence[i]
        """
        seq = self._check_sequence(sequence)
        u = self.W @ seq.mean(axis=0) + self.b
        g_mean = self.W.T @ normalize_vjp(u, np.asarray(grad_out, dtype=np.float64))
        return np.tile(g_mean / seq.shape[0], (seq.shape[0], 1))

    def _check_sequence(self, sequence: Sequence[np.ndarray]) -> np.ndarray:
        if len(sequence) == 0:
            raise EncoderError("encode_text needs a nonempty embedding sequence")
        seq = np.asarray(sequence, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[1] != self.spec.token_embedding_dim:
            raise EncoderError(
                f"embedding dimension mismatch: expected {self.spec.token_embedding_dim}, got {seq.shape}"
            )
        return seq

    # Vision side ---------------------------------------------------------

    def encode_cells(
        self,
        scene: SyntheticScene,
        noise_key: Tuple[Any, ...],
        rows: slice = slice(None),
        cols: slice = slice(None),
    ) -> TokenGrid:
        """Encodes the cells scene[rows, cols] with noise drawn from noise_key."""
        d = self.spec.feature_dim
        if scene.perturbations.shape[2] != d:
            raise EncoderError(f"perturbation dimension {scene.perturbations.shape[2]} != feature dim {d}")
        if scene.attributes.shape[2] != self.spec.attribute_dim:
            raise EncoderError(
                f"attribute dimension {scene.attributes.shape[2]} != {self.spec.attribute_dim}"
            )
        ids = scene.component_ids[rows, cols]
        h, w = ids.shape
        protos = np.stack([self.prototype(scene.concept_name(k)) for k in range(scene.num_components + 1)])
        raw = protos[ids] + scene.attributes[rows, cols] @ self.A.T + scene.perturbations[rows, cols]
        if self.spec.noise_sigma > 0:
            noise = keyed_rng(self.spec.seed, "noise", *noise_key).normal(
                0.0, self.spec.noise_sigma / np.sqrt(d), size=(h, w, d)
            )
            raw = raw + noise
        tokens = l2_normalize_rows(raw)
        class_token = l2_normalize(tokens.reshape(-1, d).mean(axis=0))
        return TokenGrid(tokens=tokens, class_token=class_token, resolution_tag="native")


@lru_cache(maxsize=8)
def get_encoder(spec: EncoderSpec) -> SyntheticEncoder:
    """Shared encoder instance per spec."""
    logger.debug(f"[ENCODER] building synthetic encoder d={spec.feature_dim} e={spec.token_embedding_dim}")
    return SyntheticEncoder(spec)


def encode_scene(scene: SyntheticScene, spec: EncoderSpec) -> TokenGrid:
    """Encodes a scene at native resolution; deterministic given (scene, spec)."""
    return get_encoder(spec).encode_cells(scene, (scene.noise_seed,))


def encode_text(sequence: Sequence[np.ndarray], spec: EncoderSpec) -> np.ndarray:
    """l2_normalize(W @ mean(sequence) + b)."""
    return get_encoder(spec).encode(sequence)


def encode_scene_highres(
    scene: SyntheticScene,
    spec: EncoderSpec,
    factor: int = 4,
    workers: int = 1,
) -> TokenGrid:
    """
    Upsamples the scene by `factor`, encodes factor x factor tiles of the
    native size independently and reassembles them.

    Args:
        scene: Native scene
        spec: Encoder spec
        factor: Upsampling factor; 1 returns encode_scene(scene, spec)
        workers: Threads used for tile encoding; output does not depend on it

    Returns:
        (factor*h) x (factor*w) TokenGrid tagged 'highres'
    """
    if factor < 1:
        raise EncoderError(f"highres factor must be >= 1, got {factor}")
    if factor == 1:
        return encode_scene(scene, spec)

    enc = get_encoder(spec)
    big = scene.upsample(factor)
    h, w = scene.shape
    tiles = [(ti, tj) for ti in range(factor) for tj in range(factor)]

    def encode_tile(tile: Tuple[int, int]) -> TokenGrid:
        ti, tj = tile
        rs, cs = slice(ti * h, (ti + 1) * h), slice(tj * w, (tj + 1) * w)
        return enc.encode_cells(big, (scene.noise_seed, "tile", factor, ti, tj), rs, cs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grids = list(pool.map(encode_tile, tiles))
    else:
        grids = [encode_tile(t) for t in tiles]

    d = spec.feature_dim
    tokens = np.empty((factor * h, factor * w, d))
    for (ti, tj), g in zip(tiles, grids):
        tokens[ti * h:(ti + 1) * h, tj * w:(tj + 1) * w] = g.tokens
    class_token = l2_normalize(np.mean([g.class_token for g in grids], axis=0))
    return TokenGrid(tokens=tokens, class_token=class_token, resolution_tag="highres")


# Feature files --------------------------------------------------------------

def feature_bytes(grid: TokenGrid) -> bytes:
    """FGADFEAT encoding of a token grid (little-endian f32 payload)."""
    T, d = grid.num_tokens, grid.dim
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, d, grid.h, grid.w)
    payload = np.concatenate([grid.class_token.reshape(1, d), grid.flat()]).astype("<f4")
    return header + payload.tobytes()


def save_feature_file(grid: TokenGrid, path: Union[str, Path]) -> None:
    """Writes a token grid as FGADFEAT."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(feature_bytes(grid))
    tmp.replace(path)


def parse_feature_bytes(data: bytes, resolution_tag: str = "native") -> TokenGrid:
    """
    Decodes FGADFEAT bytes.

    Raises:
        FeatureFormatError: Naming the offending header field
    """
    if len(data) < FEATURE_HEADER.size:
        raise FeatureFormatError("header", f"truncated: {len(data)} bytes < {FEATURE_HEADER.size}")
    magic, version, T, d, h, w = FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError("magic", f"expected {FEATURE_MAGIC!r}, got {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError("version", f"unsupported version {version}")
    if T != h * w:
        raise FeatureFormatError("T", f"T != h*w ({T} != {h}*{w})")
    if T == 0 or d == 0:
        raise FeatureFormatError("T" if T == 0 else "d", "empty grid")
    expected = FEATURE_HEADER.size + 4 * d + 4 * T * d
    if len(data) != expected:
        raise FeatureFormatError("length", f"expected {expected} bytes for T={T} d={d}, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=FEATURE_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FeatureFormatError("payload", "non-finite values")
    return TokenGrid(
        tokens=values[d:].reshape(h, w, d),
        class_token=values[:d].copy(),
        resolution_tag=resolution_tag,
    )


def load_feature_file(path: Union[str, Path], resolution_tag: str = "native") -> TokenGrid:
    """Reads an FGADFEAT file; values are the stored f32 numbers widened to f64."""
    with open(path, "rb") as f:
        data = f.read()
    return parse_feature_bytes(data, resolution_tag=resolution_tag)
