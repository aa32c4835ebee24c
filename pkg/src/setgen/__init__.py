"""Set-to-generative-model embeddings with exact backprop through ML fitting.

A trainable embedding maps a set of examples to unit-norm descriptors; a
diagonal Gaussian or Gaussian mixture is fitted to the descriptor set by
maximum likelihood, and new items are ranked by their density under the
fitted model.  The embedding is meta-trained end to end by differentiating
through the fitting step.
"""

from .embedding import (
    AffineLayer,
    EmbeddingNet,
    GradientTape,
    embed,
    embed_backward,
    embed_backward_many,
    embed_many,
    init_net,
    load_net,
    save_net,
)
from .gaussian import (
    VAR_FLOOR,
    GaussianFitGrads,
    GaussianModel,
    fit_gaussian,
    gaussian_fit_grads,
    gaussian_logpdf,
    gaussian_logpdf_many,
)
from .gmm import (
    WEIGHT_FLOOR,
    EmTrace,
    GmmModel,
    ModelSpec,
    bic_score,
    fit_concept_model,
    fit_gmm_em,
    from_gaussian,
    gmm_logpdf,
    gmm_logpdf_many,
    load_model,
    responsibilities,
    save_model,
    select_by_bic,
)
from .histloss import (
    DEFAULT_BINS,
    DegenerateScoreRange,
    HistogramPair,
    RelevanceSets,
    build_histograms,
    histogram_loss,
    histogram_loss_backward,
    loss_and_grads,
    triangular_kernel,
)
from .implicit import (
    FitGradients,
    HessianBlocks,
    ImplicitSolveError,
    ParamLayout,
    SingularSystemError,
    StationarityError,
    backprop_through_fit,
    coordinate_derivatives,
    cross_hessian_data,
    loglik_grad,
    loglik_hessian,
    solve_implicit,
)
from .datasynth import (
    Dataset,
    DatasetFormatError,
    SynthSpec,
    generate,
    load_dataset,
    sample_noisy_concept_set,
    save_dataset,
)
from .retrieval import (
    LinearScorer,
    RankedList,
    average_precision,
    classify_few_shot,
    evaluate_split_map,
    mean_average_precision,
    rank_avg,
    rank_density,
    rank_nn,
    rank_svm,
    run_fewshot_episodes,
)
from .trainer import (
    AdamState,
    LearningTuple,
    TrainResult,
    TrainerConfig,
    TrainingAborted,
    TupleResult,
    WarmStartCache,
    adam_step,
    sample_tuple,
    train,
    tuple_forward,
    tuple_forward_backward,
)

__version__ = "0.1.0"
