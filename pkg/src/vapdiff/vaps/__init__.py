from .clients import HttpChatClient, LookupClient, MllmClient, MockClient, image_part, text_part
from .pipeline import DescribeRecord, MllmTranscript, batch_describe, load_transcripts, run_vaps
from .providers import BagOfWordsProvider, HashProvider, TextEmbedding, encode_description, get_provider
from .templates import MODALITIES, TEMPLATES, PromptTemplateSet, get_templates

__all__ = [
    "HttpChatClient",
    "LookupClient",
    "MllmClient",
    "MockClient",
    "image_part",
    "text_part",
    "DescribeRecord",
    "MllmTranscript",
    "batch_describe",
    "load_transcripts",
    "run_vaps",
    "BagOfWordsProvider",
    "HashProvider",
    "TextEmbedding",
    "encode_description",
    "get_provider",
    "MODALITIES",
    "TEMPLATES",
    "PromptTemplateSet",
    "get_templates",
]
