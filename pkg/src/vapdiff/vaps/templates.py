"""Question templates for the three-turn attribute prompting protocol.

Only the dermatologic set is canonical.  The colorectal and chest X-ray
sets follow the same structure with modality-appropriate vocabulary and
are placeholders until published versions exist.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ValidationError

MODALITIES = ("dermatologic", "colorectal", "chest_xray")


@dataclass(frozen=True)
class PromptTemplateSet:
    modality: str
    q1: str
    q2: str
    q3: str
    canonical: bool = False

    def __post_init__(self):
        for name in ("q1", "q2", "q3"):
            if not getattr(self, name).strip():
                raise ValidationError("template must be non-empty", field=name)


DERMATOLOGIC = PromptTemplateSet(
    modality="dermatologic",
    q1=(
        "You are an AI visual assistant observing a skin lesion image. "
        "Describe the information you observe from the image without providing any conclusions."
    ),
    q2=(
        "Skin lesions may present with diverse shapes, colors, sizes, and texture features. "
        "The surrounding skin may also appear normal or show signs of inflammation, pigmentation, "
        "or other changes. Can you provide the specific aspects of these features and how they "
        "manifest in different ways?"
    ),
    q3=(
        "Based on this image itself, please describe it shortly and concisely, according to the "
        "shape, color, size (due to the unavailability of quantitative dimensions, you can just "
        "describe their approximate proportion in the whole image), and texture of the lesion and "
        "skin background."
    ),
    canonical=True,
)

COLORECTAL = PromptTemplateSet(
    modality="colorectal",
    q1=(
        "You are an AI visual assistant observing a colonoscopy image. "
        "Describe the information you observe from the image without providing any conclusions."
    ),
    q2=(
        "Colorectal findings such as polyps may present with diverse shapes, colors, sizes, surface "
        "patterns, and vascular features. The surrounding mucosa may also appear normal or show signs "
        "of inflammation, bleeding, or other changes. Can you provide the specific aspects of these "
        "features and how they manifest in different ways?"
    ),
    q3=(
        "Based on this image itself, please describe it shortly and concisely, according to the "
        "shape, color, size (due to the unavailability of quantitative dimensions, you can just "
        "describe their approximate proportion in the whole image), and surface texture of the "
        "finding and mucosal background."
    ),
)

CHEST_XRAY = PromptTemplateSet(
    modality="chest_xray",
    q1=(
        "You are an AI visual assistant observing a chest X-ray image. "
        "Describe the information you observe from the image without providing any conclusions."
    ),
    q2=(
        "Chest X-ray findings may present with diverse locations, shapes, densities, sizes, and "
        "margins. The lung fields, heart silhouette, and surrounding structures may also appear "
        "normal or show opacities, effusions, or other changes. Can you provide the specific aspects "
        "of these features and how they manifest in different ways?"
    ),
    q3=(
        "Based on this image itself, please describe it shortly and concisely, according to the "
        "location, shape, density, size (due to the unavailability of quantitative dimensions, you "
        "can just describe their approximate proportion in the whole image), and texture of any "
        "finding and the surrounding anatomy."
    ),
)

TEMPLATES = {t.modality: t for t in (DERMATOLOGIC, COLORECTAL, CHEST_XRAY)}


def get_templates(modality: str) -> PromptTemplateSet:
    try:
        return TEMPLATES[modality]
    except KeyError:
        raise ValidationError(
            f"no templates for modality {modality!r}; known: {', '.join(MODALITIES)}", field="modality"
        ) from None
