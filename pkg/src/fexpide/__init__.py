"""Finite-expression search for closed-form solutions of jump-diffusion PIDEs."""

import jax

# Loss thresholds near 1e-14 are meaningless in single precision.
jax.config.update("jax_enable_x64", True)

from fexpide.expression import (  # noqa: E402
    BINARY_OPS,
    UNARY_OPS,
    Expression,
    GroupedLeafParams,
    Jet,
    LeafParams,
    OperatorSet,
    StructureError,
    TreeTemplate,
    build_expression,
    derivatives,
    evaluate,
    to_string,
)
from fexpide.grouping import cluster_weights, default_eta, group_rescore, regroup_expression  # noqa: E402
from fexpide.integral import (  # noqa: E402
    IntegralConfigError,
    JumpSpec,
    QuadratureRule,
    expected_shift_taylor,
    expected_shift_trapezoid_1d,
    levy_operator,
)
from fexpide.optim import (  # noqa: E402
    LossTrace,
    OptimizerConfig,
    coarse_tune,
    finetune,
    grad_loss,
    run_adam,
    run_bfgs,
    score_from_loss,
    score_sequence,
)
from fexpide.problems import (  # noqa: E402
    BUILTINS,
    ProblemError,
    ProblemSpec,
    SampleBatch,
    builtin_problem,
    loss,
    make_problem,
    relative_error,
    residual,
    sample_points,
)
from fexpide.search import (  # noqa: E402
    Candidate,
    ControllerState,
    Pool,
    SearchConfig,
    SolveReport,
    pool_insert,
    sample_sequences,
    search,
    solve,
    update_controller,
)

__version__ = "0.1.0"
