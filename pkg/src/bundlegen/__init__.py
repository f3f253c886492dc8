"""Personalized bundle list generation at desk scale.

A trainable sequence quality model (convolutional context encoder, stacked
LSTM decoder with attention, feature-aware softmax head), masked beam
search for candidate bundles, and greedy determinantal selection that
balances quality against cross-bundle diversity.
"""

from .core import (
    Bundle,
    BundleList,
    DegenerateInput,
    Item,
    UnknownItem,
    UserContext,
    Vocabulary,
    bundle_as_set,
    canonicalize_bundle,
    jaccard,
)
from .data import (
    CorpusStats,
    DatasetSplit,
    RawEvent,
    TrainingExample,
    compute_stats,
    ingest_bundle_corpus,
    ingest_events,
    load_events,
    load_split,
    make_synthetic_corpus,
    save_split,
)
from .generate import (
    BeamEntry,
    CandidateSet,
    GenerationConfig,
    Generator,
    ShortList,
    beam_search,
    dpp_select,
    generate,
    mask_vector,
    similarity,
)
from .model import (
    DecoderState,
    ModelConfig,
    QualityModel,
    VocabMismatch,
    desk_config,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
