"""Insight-driven retrieval-augmented generation toolkit.

Sub-modules follow the pipeline order: :mod:`corpus` ingestion,
:mod:`triples` extraction, :mod:`benchbuild` benchmark construction,
:mod:`gateway` model access, :mod:`retrieval` dense baselines,
:mod:`pipelines` answer generation, :mod:`evalkit` scoring, and
:mod:`cli` to drive the stages from the shell.
"""

__version__ = "0.1.0"

from .corpus import CorpusHandle, Document, bfs_sample, ingest_corpus
from .gateway import ModelHandle, chat, make_handle
from .pipelines import RunRecord, run_suite
from .triples import Triple, TripleIndex, extract_triples, index_triples

__all__ = [
    "__version__",
    "CorpusHandle",
    "Document",
    "ModelHandle",
    "RunRecord",
    "Triple",
    "TripleIndex",
    "bfs_sample",
    "chat",
    "extract_triples",
    "index_triples",
    "ingest_corpus",
    "make_handle",
    "run_suite",
]
