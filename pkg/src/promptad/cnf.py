"""Class name filtering: drop numeric suffixes, swap low-affinity names.

Dataset class labels like "pcb2" or "02" carry little visual meaning.  The
filter first strips trailing digits (and a trailing separator), then asks the
*frozen* encoders whether the image is closer to a sentence naming the class
or to one naming a generic term, and keeps whichever wins.  The comparison is
strict: ties keep the class name.  Filtering applies only to the
vision-enhanced inference branch; training and the query-only branch never
see it.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


@dataclass(frozen=True)
class CnfConfig:
    generic_term: str = "object"
    enabled: bool = True
    per_class: bool = False

    def __post_init__(self):
        if not self.generic_term:
            raise ValueError("generic_term must be nonempty")


def strip_numeric(class_name: str) -> str:
    """Remove trailing digits, then a trailing '_' or '-' run.

    Never returns an empty string: if stripping would consume the whole
    name, the original is kept.
    """
    if not class_name:
        raise ValueError("class name must be nonempty")
    stripped = class_name.rstrip("0123456789").rstrip("_-")
    return stripped or class_name


def class_sentence(class_name: str) -> str:
    return f"a photo of a {class_name.replace('_', ' ')}"


def generic_sentence(generic_term: str) -> str:
    # The canonical generic sentence keeps its indefinite article as-is.
    if generic_term == "object":
        return "a photo of an object"
    return f"a photo of a {generic_term}"


def filter_class_name(image, class_name: str, cnf_config: CnfConfig, encoder) -> str:
    """Return the generic term iff the image matches it strictly better.

    ``class_name`` is expected to be numeric-stripped already.  Disabled
    filtering is the identity.  Uses only the frozen paths: the encoder's
    global image embedding and its vanilla sentence embeddings.
    """
    if not cnf_config.enabled:
        return class_name
    img = encoder.encode_image_global(image)
    sim_class = float(img @ encoder.encode_sentence(class_sentence(class_name)))
    sim_generic = float(img @ encoder.encode_sentence(generic_sentence(cnf_config.generic_term)))
    return cnf_config.generic_term if sim_generic > sim_class else class_name


@dataclass(frozen=True)
class CnfDecision:
    original: str
    stripped: str
    final: str


def apply_cnf(image, class_name: str, cnf_config: CnfConfig, encoder) -> CnfDecision:
    """Full per-image decision: strip, then similarity-filter."""
    stripped = strip_numeric(class_name)
    final = filter_class_name(image, stripped, cnf_config, encoder)
    return CnfDecision(original=class_name, stripped=stripped, final=final)


def majority_filter(images, class_name: str, cnf_config: CnfConfig, encoder) -> str:
    """Per-class vote over per-image decisions; ties keep the class name."""
    stripped = strip_numeric(class_name)
    if not cnf_config.enabled:
        return stripped
    votes = Counter(
        filter_class_name(img, stripped, cnf_config, encoder) for img in images
    )
    generic = votes.get(cnf_config.generic_term, 0)
    return cnf_config.generic_term if generic > votes.get(stripped, 0) else stripped
