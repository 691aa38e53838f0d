"""gradlab: a desk-scale laboratory for gradient-inversion experiments.

Train or initialize a miniature transformer classifier, capture the
parameter gradients a federated client would share, restrict them to any
sub-module granularity, run the gradient-matching reconstruction attack,
apply a differential-privacy defense, and score the reconstructions.
"""

from .attack import (
    AttackAbort,
    AttackConfig,
    ReconstructionResult,
    attack_cell,
    cosine_distance,
    infer_labels,
    matching_loss,
    project_to_tokens,
    reconstruct,
    reorder,
)
from .corpus import BigramScorer, Corpus, generate_corpus
from .defense import NO_CLIP, DpConfig, defended_victim_gradients, dp_transform
from .errors import (
    ConfigError,
    DegenerateTargetError,
    GradlabError,
    InputError,
    OracleError,
    ShapeError,
    UsageError,
)
from .metrics import (
    RougeScores,
    align_and_score,
    binary_f1,
    mcc,
    random_rouge_baseline,
    rouge,
)
from .model import (
    BERT_BASE_CONFIG,
    TOY_CONFIG,
    BlockStore,
    GradStore,
    ModelConfig,
    ParamStore,
    count_params,
    forward,
    init_params,
    per_example_gradients,
    train,
    victim_gradients,
)
from .selection import ModuleKey, Selection, resolve, used_ratio, view_weights
from .autodiff import (
    Tensor,
    cross_entropy_with_logits,
    finite_diff_check,
    gelu,
    grad,
    layer_norm,
    replay,
    softmax_rowwise,
    tensor,
)

__version__ = "0.1.0"
