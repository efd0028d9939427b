"""Heat-semigroup Besov norms on concrete unimodular Lie groups."""

from .besov import (
    BesovParams,
    NormBreakdown,
    TGrid,
    besov_norm,
    difference_functional,
    dyadic_convolution_bound,
    dyadic_norm,
    lambda_functional,
    lp_norm,
    recursive_norm,
    schur_bound,
    slice_l1_norm,
    xsup_norm,
)
from .groups import (
    Grid,
    GridFunction,
    GroupModel,
    apply_field,
    apply_multi_field,
    ball_volume_fit,
    cc_norm,
    default_grid,
    euclid_line,
    euclid_plane,
    group_inverse,
    group_mul,
    heisenberg,
    torus,
)
from .heat import (
    HeatOperator,
    delta_power_heat,
    field_heat,
    gaussian_bound_check,
    analyticity_check,
    heat_apply,
    kernel_eval,
    make_heat,
)
from .paraproduct import (
    calderon_decompose,
    calderon_scalar_identity,
    leibniz_ratio,
    paraproduct_decompose,
    phi_apply,
    psi_apply,
)
from .verify import (
    FamilySpec,
    build_family,
    embedding_check,
    equivalence_report,
    fourier_oracle_norm,
    refinement_stability,
    standard_suite,
)

__version__ = "0.1.0"
