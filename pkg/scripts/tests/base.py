"""
Helpers shared by the test modules: fixture loaders, small configs and fake
HTTP transports for the caption client.
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from captioner.mfsc import MFSCDocument, load_document
from detector.config import RunConfig, load_run_config
from detector.encoder import EncoderSpec, TokenGrid

BASE_DIR = Path(__file__).resolve().parent.parent.parent
FIXTURES_DIR = BASE_DIR / "fixtures"
PCB_CONFIG = FIXTURES_DIR / "configs" / "pcb.json"
SINGLE_CONFIG = FIXTURES_DIR / "configs" / "single_component.json"
PCB_DOCUMENT = FIXTURES_DIR / "mfsc" / "pcb_fixture.json"
SINGLE_DOCUMENT = FIXTURES_DIR / "mfsc" / "single_component.json"


def get_base_dir() -> Path:
    """Gets the project base directory."""
    return BASE_DIR


def pcb_document() -> MFSCDocument:
    return load_document(PCB_DOCUMENT)


def single_document() -> MFSCDocument:
    return load_document(SINGLE_DOCUMENT)


def wire_dict(path: Path = PCB_DOCUMENT) -> Dict[str, Any]:
    """Raw JSON of a fixture document, for mutation tests."""
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def isolated_config(source: Path, tmp_path: Path, **updates) -> RunConfig:
    """
    Loads a shipped run config with bundles and caches redirected into tmp_path.

    Keyword arguments replace top-level fields.
    """
    cfg = load_run_config(source)
    return cfg.model_copy(update={
        "bundles_dir": str(tmp_path / "bundles"),
        "cache_dir": str(tmp_path / "cache"),
        **updates,
    })


def write_config(cfg: RunConfig, path: Path) -> Path:
    """Writes a RunConfig as JSON and returns the path."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path


def small_spec(**overrides) -> EncoderSpec:
    """Encoder small enough for fast unit tests."""
    values = {"feature_dim": 32, "token_embedding_dim": 48, "seed": 3}
    values.update(overrides)
    return EncoderSpec(**values)


def random_grid(seed: int, h: int = 3, w: int = 4, d: int = 8) -> TokenGrid:
    """Grid of random unit tokens."""
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(h, w, d))
    tokens /= np.linalg.norm(tokens, axis=2, keepdims=True)
    cls = tokens.reshape(-1, d).mean(axis=0)
    return TokenGrid(tokens, cls / np.linalg.norm(cls))


def mutate(doc: Dict[str, Any], path: List[Any], value: Any = None, delete: bool = False) -> Dict[str, Any]:
    """Deep copy of a wire dict with one field replaced or deleted."""
    out = copy.deepcopy(doc)
    node = out
    for key in path[:-1]:
        node = node[key]
    if delete:
        del node[path[-1]]
    else:
        node[path[-1]] = value
    return out


# Fake HTTP transport ------------------------------------------------------------------

@dataclass
class FakeResponse:
    status_code: int
    payload: Any = None

    def json(self):
        if isinstance(self.payload, Exception):
            raise self.payload
        return self.payload


def chat_payload(content: str) -> Dict[str, Any]:
    """Minimal chat-completion response body."""
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


class NoNetworkSession:
    """Session whose every request fails the test."""

    def post(self, *args, **kwargs):
        raise AssertionError("network access attempted")


@dataclass
class ScriptedSession:
    """Replays a fixed list of responses (or exceptions) and records each request body."""
    responses: List[Any]
    calls: List[Dict[str, Any]] = field(default_factory=list)

    def post(self, url: str, json: Optional[Dict[str, Any]] = None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": copy.deepcopy(json), "headers": dict(headers or {})})
        if not self.responses:
            raise AssertionError("more requests than scripted responses")
        nxt = self.responses.pop(0)
        if isinstance(nxt, Exception):
            raise nxt
        return nxt
