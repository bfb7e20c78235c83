"""
System-prompt template loading.

Templates are versioned text assets under fixtures/templates named
`<template_id>.txt`; `{category}` is the only substitution.
"""

import hashlib
import logging
from pathlib import Path
from typing import List, Optional

from captioner.config import get_templates_dir

logger = logging.getLogger(__name__)


class TemplateError(Exception):
    """Exception for missing or malformed prompt templates."""
    pass


def available_templates(templates_dir: Optional[Path] = None) -> List[str]:
    templates_dir = templates_dir or get_templates_dir()
    if not templates_dir.exists():
        return []
    return sorted(p.stem for p in templates_dir.glob("*.txt"))


def load_template(template_id: str, templates_dir: Optional[Path] = None) -> str:
    """
    Loads a system-prompt template.

    Args:
        template_id: Template name, e.g. "system_prompt_v1"
        templates_dir: Override of the template directory

    Returns:
        Raw template text

    Raises:
        TemplateError: If the template is not found or lacks the {category} slot
    """
    templates_dir = templates_dir or get_templates_dir()
    path = templates_dir / f"{template_id}.txt"
    logger.debug(f"Loading template: id={template_id}, path={path}")
    if not path.exists():
        raise TemplateError(
            f"Template '{template_id}' not found. "
            f"Looked for: {path.absolute()}, "
            f"Available: {available_templates(templates_dir)}"
        )
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TemplateError(f"Error loading template from {path}: {e}")
    if "{category}" not in text:
        raise TemplateError(f"Template '{template_id}' has no {{category}} slot")
    return text


def render_system_prompt(template_id: str, category: str, templates_dir: Optional[Path] = None) -> str:
    # str.replace keeps the JSON braces in the template intact
    return load_template(template_id, templates_dir).replace("{category}", category)


def template_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
