"""
Pydantic schemas for the MFSC JSON wire format (mfsc_version 1).
"""

from typing import Dict, List, Literal

from pydantic import BaseModel, ConfigDict, Field

Connector = Literal["single", "and", "or", "with"]


class AttributeValueWire(BaseModel):
    """One attribute value: base values plus the connector that joins them."""
    model_config = ConfigDict(extra="forbid", strict=True)

    base_values: List[str] = Field(..., description="Base values drawn from the attribute vocabulary")
    connector: Connector = Field(..., description="single, and, or, with")


class ComponentWire(BaseModel):
    """Component-view caption."""
    model_config = ConfigDict(extra="forbid", strict=True)

    name: str = Field(..., description="Component name, e.g. 'capacitor'")
    attributes: Dict[str, AttributeValueWire] = Field(..., description="attribute name -> value")
    caption_text: str = Field(..., description="Free-text component caption")


class ForegroundWire(BaseModel):
    """Foreground-view logical relation."""
    model_config = ConfigDict(extra="forbid", strict=True)

    counts: Dict[str, int] = Field(..., description="component name -> number of instances")
    relation_text: str = Field(..., description="Positions and logic between components")


class MFSCWire(BaseModel):
    """
    Multi-level fine-grained semantic caption as exchanged with the caption
    endpoint and stored in fixtures, caches and bundles.
    """
    model_config = ConfigDict(extra="forbid", strict=True)

    mfsc_version: Literal[1] = Field(..., description="Wire format version")
    category: str = Field(..., description="Object category")
    summary: str = Field(..., description="Image-view summary")
    background: str = Field(..., description="Background description")
    foreground: ForegroundWire
    components: List[ComponentWire]
    vocabulary: Dict[str, List[str]] = Field(..., description="attribute name -> allowed base values")
