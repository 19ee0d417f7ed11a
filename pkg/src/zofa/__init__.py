"""zofa: two-forward zeroth-order test-time adaptation on small networks."""

from .data import CorruptionSpec, Dataset, StreamProtocol, build_protocol, corrupt, make_source_task
from .engine import AdaptConfig, OnlineState, RunReport, StepRecord, adapt_step, run_stream
from .errors import CapabilityError, ConfigError, NumericalError, ShapeError, ZofaError
from .grads import grad_backprop, grad_finite_diff, pretrain_source
from .net import (
    ForwardTally,
    Layer,
    Network,
    forward,
    load_model,
    make_mlp,
    quantize_weights,
    save_model,
)
from .objectives import (
    OnlineCenter,
    SourceStats,
    TargetMoments,
    combined_loss,
    moment_alignment_loss,
    scale_invariant_entropy,
    update_center,
    update_moments,
)
from .perturb import PerturbationSpec, accumulate_update, draw_layer_perturbation, symmetric_forward
from .zo import (
    AnchorState,
    BalanceState,
    anchor_direction,
    balance_update,
    relax_weights,
    sgd_step,
    shortcut_variance_probe,
    spsa_one_sided,
    spsa_two_sided,
    update_anchor,
)

__version__ = "0.1.0"
