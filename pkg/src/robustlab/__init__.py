"""Small-scale robust training lab: attacks, certified bounds, and the
closed-form theory they are compared against."""

from .attacks import (AttackConfig, adv_train, evaluate, line_search_attack,
                      pgd_attack)
from .bounds import (BoundState, StabilityPartition, first_layer_bounds,
                     ibp_bounds, ibp_certified_margin, ibp_loss_grad,
                     ibp_robust_loss, ibp_train, interval_affine,
                     interval_relu, unstable_fraction)
from .data import (LabeledSet, LinsepParams, SpheresParams, linsep_signal,
                   sample_linsep, sample_spheres, spheres_signal)
from .dual import (DualState, MarginQuery, certify, coap_certified_margin,
                   coap_layer_bounds, coap_loss_grad, coap_robust_loss,
                   coap_train, dual_bound, margin_bound_matrix)
from .experiments import (AblationResult, RunConfig, RunResult, ablate,
                          load_config, read_csv, run, run_seed, write_csv)
from .nets import (DenseNet, Layer, TrainConfig, TrainTrace, backward,
                   cross_entropy, class_margin, init_net, input_gradient,
                   sgd_step, train_standard, zero_grads)
from .theory import (OneNeuronConfig, at_gradient, coap_gradient,
                     coap_objective, f_of_r, gauss_cdf_diff_lower_bound_check,
                     one_step_separation, r_star, robust_risk,
                     verification_report)
from .threat import (ThreatModel, ThreatSpec, alignment, make_directions,
                     margin, project, support, support_gradient)

__version__ = "0.1.0"

__all__ = [
    "AblationResult", "AttackConfig", "BoundState", "DenseNet", "DualState",
    "LabeledSet", "Layer", "LinsepParams", "MarginQuery", "OneNeuronConfig",
    "RunConfig", "RunResult", "SpheresParams", "StabilityPartition",
    "ThreatModel", "ThreatSpec", "TrainConfig", "TrainTrace", "ablate",
    "adv_train", "alignment", "at_gradient", "backward", "certify",
    "class_margin", "coap_certified_margin", "coap_gradient",
    "coap_layer_bounds", "coap_loss_grad", "coap_objective",
    "coap_robust_loss", "coap_train", "cross_entropy", "dual_bound",
    "evaluate", "f_of_r", "first_layer_bounds",
    "gauss_cdf_diff_lower_bound_check", "ibp_bounds", "ibp_certified_margin",
    "ibp_loss_grad", "ibp_robust_loss", "ibp_train", "init_net",
    "input_gradient", "interval_affine", "interval_relu",
    "line_search_attack", "linsep_signal", "load_config", "make_directions",
    "margin", "margin_bound_matrix", "one_step_separation", "pgd_attack",
    "project", "r_star", "read_csv", "robust_risk", "run", "run_seed",
    "sample_linsep", "sample_spheres", "sgd_step", "spheres_signal",
    "support", "support_gradient", "train_standard", "unstable_fraction",
    "verification_report", "write_csv", "zero_grads",
]
