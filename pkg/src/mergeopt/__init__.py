"""Online merging optimizers, offline model merging, and a toy DPO harness."""

from .errors import (
    EmptyInput,
    FormatError,
    IndexOutOfRange,
    InvalidBeta,
    InvalidConfig,
    InvalidProbability,
    MergeOptError,
    MisalignedSets,
    MissingBaseModel,
    NonFiniteGradient,
    NonFiniteLoss,
)
from .kernels import (
    MergeMethod,
    MergeSpec,
    linear_combine,
    offline_merge,
    sign_consensus,
    sparsify_random,
    sparsify_top_p,
)
from .masks import MaskKey, bernoulli_mask, mask_uniforms
from .optim import (
    AdamHyper,
    MergeVariant,
    OnlineMergeConfig,
    OptimizerState,
    adam_delta,
    adam_step,
    childtuning_step,
    ema_update,
    full_merge_step,
    load_optimizer_state,
    ondare_step,
    onties_step,
    save_optimizer_state,
    stepk_step,
)
from .params import (
    DeltaSet,
    ParameterSet,
    apply_delta,
    check_aligned,
    delta,
    load_checkpoint,
    save_checkpoint,
)
from .policy import (
    PreferencePair,
    ToyPolicy,
    class_loss_and_grad,
    dpo_grad,
    dpo_loss,
    dpo_loss_and_grad,
    dpo_margins,
    log_softmax,
    policy_logprob,
)
from .tasks import (
    LabeledSet,
    PreferenceSet,
    SuiteSizes,
    TaskSuite,
    gen_task_suite,
    load_suite,
    oracle_pretrain_accuracy,
    save_suite,
)
from .training import (
    MetricsRecord,
    RunConfig,
    RunMetrics,
    TrainResult,
    make_suite,
    train_run,
)

__version__ = "0.1.0"
