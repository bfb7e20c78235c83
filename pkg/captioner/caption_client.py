"""
MFSC generation through an OpenAI-compatible chat-completion endpoint.

Live mode posts the rendered system prompt and one normal image (base64 data
URL) to {base_url}/chat/completions. Responses that fail validation are
re-prompted with the validation report appended, up to max_retries times.
Fixture mode serves the in-tree document for the category without any
network I/O. Every accepted document is cached under
captions_cache/<category>/<sha256>.json.
"""

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import requests

from captioner.config import CAPTION_FIXTURES_DIR, DEFAULT_TEMPLATE_ID, EndpointConfig, get_cache_dir
from captioner.mfsc import MFSCDocument, MFSCError, ValidationReport, Violation, parse_document, serialize
from captioner.templates import render_system_prompt, template_fingerprint

logger = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"^\s*```(?:json)?\s*\n(?P<body>.*)\n\s*```\s*$", re.DOTALL)
_TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}

REPROMPT_TEMPLATE = (
    "The previous response failed validation:\n{report}\n"
    "Return the corrected JSON document only."
)


class EndpointError(Exception):
    """Exception for transport failures and unusable endpoint responses."""
    pass


class CaptionSchemaError(Exception):
    """Exception for responses still invalid after every re-prompt; carries the last report."""

    def __init__(self, message: str, report: ValidationReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str = "image/png"

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class CaptionRequest:
    """One normal image (or, in fixture mode, a scene reference) of a category."""
    category: str
    image_payload: Optional[ImagePayload] = None
    scene_ref: Optional[str] = None
    system_prompt_template_id: str = DEFAULT_TEMPLATE_ID

    def __post_init__(self):
        if (self.image_payload is None) == (self.scene_ref is None):
            raise ValueError("exactly one of image_payload and scene_ref must be given")
        if not self.category:
            raise ValueError("category must not be empty")

    def source_digest(self) -> str:
        if self.image_payload is not None:
            return "image:" + hashlib.sha256(self.image_payload.data).hexdigest()
        return f"scene:{self.scene_ref}"


def strip_code_fence(raw: str) -> str:
    """Removes a surrounding ```json fence if the model added one."""
    m = _FENCE_RE.match(raw)
    return m.group("body") if m else raw


def check_schema(raw_response: Any) -> ValidationReport:
    """
    Validates a raw model response without raising.

    Returns:
        Empty report when the text is a valid MFSC document
    """
    try:
        text = raw_response.decode("utf-8") if isinstance(raw_response, bytes) else str(raw_response)
        parse_document(strip_code_fence(text))
    except MFSCError as e:
        return e.report
    except Exception as e:
        return ValidationReport([Violation("$", "syntax", str(e))])
    return ValidationReport()


class CaptionClient:
    """
    Caption generator bound to one endpoint configuration.

    Args:
        cfg: Endpoint settings
        session: Object with a requests-compatible post(); defaults to requests.Session()
        cache_dir: Override of captions_cache/
        fixtures_dir: Where fixture mode finds <category>.json
        templates_dir: Override of the template directory
        sleep: Backoff sleeper, replaceable in tests
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        session: Optional[Any] = None,
        cache_dir: Optional[Path] = None,
        fixtures_dir: Optional[Path] = None,
        templates_dir: Optional[Path] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self._session = session
        self.cache_dir = Path(cache_dir) if cache_dir is not None else get_cache_dir()
        self.fixtures_dir = Path(fixtures_dir) if fixtures_dir is not None else CAPTION_FIXTURES_DIR
        self.templates_dir = templates_dir
        self.sleep = sleep

    @property
    def session(self):
        if self._session is None:
            self._session = requests.Session()
        return self._session

    # Cache -----------------------------------------------------------------

    def cache_key(self, req: CaptionRequest, system_prompt: str) -> str:
        material = {
            "mode": self.cfg.mode,
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "template": template_fingerprint(system_prompt),
            "source": req.source_digest(),
        }
        return hashlib.sha256(json.dumps(material, sort_keys=True).encode("utf-8")).hexdigest()

    def cache_path(self, req: CaptionRequest, key: str) -> Path:
        return self.cache_dir / req.category.replace("/", "_") / f"{key}.json"

    def _read_cache(self, path: Path) -> Optional[MFSCDocument]:
        if not path.exists():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            doc = parse_document(entry["document"])
        except (MFSCError, KeyError, json.JSONDecodeError) as e:
            logger.warning(f"[CACHE] ignoring unreadable entry {path.name}: {e}")
            return None
        logger.info(f"[CACHE] hit {path.parent.name}/{path.name[:16]}")
        return doc

    def _write_cache(self, path: Path, raw: str, doc: MFSCDocument, attempts: int) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {"raw_response": raw, "document": serialize(doc), "attempts": attempts}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(entry, f, sort_keys=True, indent=2)
        os.replace(tmp, path)

    # Transport ---------------------------------------------------------------

    def _post(self, messages: List[Dict[str, Any]]) -> str:
        body = {
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": messages,
        }
        headers = {
            "Authorization": f"Bearer {self.cfg.api_key.get_secret_value()}",
            "Content-Type": "application/json",
        }
        last_error = ""
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self.sleep(self.cfg.backoff_seconds * 2 ** (attempt - 1))
            try:
                response = self.session.post(
                    self.cfg.completions_url, json=body, headers=headers, timeout=self.cfg.timeout
                )
            except requests.exceptions.RequestException as e:
                last_error = f"{type(e).__name__}: {e}"
                logger.warning(f"[CAPTIONS] transport error (attempt {attempt + 1}): {last_error}")
                continue
            if response.status_code in _TRANSIENT_STATUS:
                last_error = f"HTTP {response.status_code}"
                logger.warning(f"[CAPTIONS] {last_error} (attempt {attempt + 1})")
                continue
            if response.status_code != 200:
                raise EndpointError(f"endpoint returned HTTP {response.status_code}")
            return self._content(response)
        raise EndpointError(f"endpoint unreachable after {self.cfg.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _content(response) -> str:
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise EndpointError(f"malformed chat-completion response: {e}") from e
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        if not isinstance(content, str):
            raise EndpointError("chat-completion content is not text")
        return content

    # Generation --------------------------------------------------------------

    def _fixture_response(self, req: CaptionRequest) -> str:
        name = req.scene_ref or req.category
        path = self.fixtures_dir / f"{name}.json"
        if not path.exists():
            raise EndpointError(f"no caption fixture registered for '{name}' ({path})")
        return path.read_text(encoding="utf-8")

    def _live_messages(self, req: CaptionRequest, system_prompt: str) -> List[Dict[str, Any]]:
        if req.image_payload is None:
            raise EndpointError("live mode needs an image payload")
        return [
            {"role": "system", "content": system_prompt},
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": f"Describe this normal {req.category} image."},
                    {"type": "image_url", "image_url": {"url": req.image_payload.data_url()}},
                ],
            },
        ]

    def generate(self, req: CaptionRequest) -> MFSCDocument:
        """
        Returns a validated MFSC document for the request.

        Raises:
            EndpointError: On transport failure after retries or a missing fixture
            CaptionSchemaError: If the response is still invalid after max_retries re-prompts
        """
        system_prompt = render_system_prompt(req.system_prompt_template_id, req.category, self.templates_dir)
        key = self.cache_key(req, system_prompt)
        path = self.cache_path(req, key)
        cached = self._read_cache(path)
        if cached is not None:
            return cached

        if self.cfg.mode == "fixture":
            raw = self._fixture_response(req)
            report = check_schema(raw)
            if not report.is_valid:
                raise CaptionSchemaError(f"fixture for '{req.category}' is invalid", report)
            doc = parse_document(strip_code_fence(raw))
            self._write_cache(path, raw, doc, 0)
            logger.info(f"[CAPTIONS] fixture document for {req.category}")
            return doc

        try:
            self.cfg.check_live()
        except ValueError as e:
            raise EndpointError(str(e)) from e
        messages = self._live_messages(req, system_prompt)
        report = ValidationReport()
        for attempt in range(self.cfg.max_retries + 1):
            raw = self._post(messages)
            report = check_schema(raw)
            if report.is_valid:
                doc = parse_document(strip_code_fence(raw))
                self._write_cache(path, raw, doc, attempt + 1)
                logger.info(f"[CAPTIONS] {req.category}: valid document after {attempt + 1} response(s)")
                return doc
            logger.warning(f"[CAPTIONS] {req.category}: response {attempt + 1} invalid: {report.rule_ids()}")
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": REPROMPT_TEMPLATE.format(report=report.to_text())},
            ]
        raise CaptionSchemaError(
            f"{req.category}: no valid document after {self.cfg.max_retries} re-prompts", report
        )


def generate_captions(req: CaptionRequest, cfg: EndpointConfig, **kwargs) -> MFSCDocument:
    """Convenience wrapper around CaptionClient(cfg, **kwargs).generate(req)."""
    return CaptionClient(cfg, **kwargs).generate(req)
