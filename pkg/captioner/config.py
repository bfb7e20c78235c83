"""
Centralized captioner configuration.
"""

import os
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, SecretStr, field_validator

# Project base directory
BASE_DIR = Path(__file__).parent.parent

# Fixture paths
FIXTURES_DIR = BASE_DIR / "fixtures"
TEMPLATES_DIR = FIXTURES_DIR / "templates"
CAPTION_FIXTURES_DIR = FIXTURES_DIR / "mfsc"

# Cache of generated documents: captions_cache/<category>/<sha256>.json
CAPTIONS_CACHE_DIR = BASE_DIR / "captions_cache"

API_KEY_ENV = "FGAD_API_KEY"
MAX_RETRIES_LIMIT = 10
DEFAULT_TEMPLATE_ID = "system_prompt_v1"


def api_key_from_env() -> Optional[SecretStr]:
    """Returns the endpoint key from FGAD_API_KEY, or None when unset."""
    value = os.environ.get(API_KEY_ENV)
    return SecretStr(value) if value else None


def get_templates_dir() -> Path:
    """Returns the system-prompt template directory."""
    return TEMPLATES_DIR


def get_cache_dir() -> Path:
    """Returns the caption cache directory."""
    return CAPTIONS_CACHE_DIR


class EndpointConfig(BaseModel):
    """
    OpenAI-compatible chat-completion endpoint.

    The key is never read from or written to disk; it comes from FGAD_API_KEY.
    """
    model_config = ConfigDict(extra="forbid")

    mode: str = Field(default="fixture", description="'fixture' (offline) or 'live'")
    base_url: str = Field(default="", description="Endpoint base URL, e.g. https://host/v1")
    model_name: str = Field(default="gpt-4o", description="Multimodal model used for captioning")
    api_key: Optional[SecretStr] = Field(default_factory=api_key_from_env, exclude=True)
    timeout: float = Field(default=60.0, gt=0, description="Per-request timeout in seconds")
    max_retries: int = Field(default=3, ge=0, le=MAX_RETRIES_LIMIT)
    temperature: float = Field(default=0.0, ge=0.0)
    backoff_seconds: float = Field(default=1.0, ge=0.0, description="Base of the exponential retry backoff")

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in ("fixture", "live"):
            raise ValueError(f"mode must be 'fixture' or 'live', got '{v}'")
        return v

    def check_live(self) -> None:
        """Raises ValueError if live mode lacks a URL or key."""
        if not self.base_url:
            raise ValueError("base_url is required in live mode")
        if self.api_key is None:
            raise ValueError(f"{API_KEY_ENV} is not set")

    @property
    def completions_url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"
