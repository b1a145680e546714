"""Finite-population lineage simulation and exact verification toolkit.

Forward simulation of a labeled population with selection and
type-dependent mutation, keeping whole ancestral paths; an enriched
backward process over tagged sites and active type sets; exact
weighted-semigroup identities connecting the two on small populations;
conditioned (survival-reweighted) path samplers; and reduced chains for
the common-ancestor type and the pair genealogical distance, with
equilibrium and survival solvers plus diffusion-limit variants.
"""
from .model import (BudgetError, MixedMomentTable, ModelParams, ParamError,
                    StationaryTypeLaw, finite_stationary_law,
                    moment_recurrence_residuals, pn_probability,
                    resampling_rate, two_type_mutation_rates, validate_params,
                    wf_mixed_moments, wf_single_moment)
from .forward import (HmmEvent, LineageForest, cat_fixation_type,
                      genealogical_distance, init_forest,
                      neutral_pair_distance_samples, path_value, run_until,
                      simulate_types, step_forest)
from .backward import (BpPath, BpState, BpTransition, LinePath,
                       TRANSITION_KINDS, canonical_start,
                       enumerate_transitions, feynman_kac_V, make_state,
                       path_V_integral, reverse_to_lines, simulate_bp)
from .exact import (DualityReport, GeneratorMatrix, build_bp_generator,
                    build_type_generator, check_duality, compute_h,
                    compute_hT, config_law_vector, duality_reports,
                    expm_apply, h_star, harmonic_residual, permute_bp_state,
                    permute_type_config)
from .transformed import (ConditionedSample, FunctionalCheck, HTTable,
                          HTransformedKernel, conditioned_functional_check,
                          first_coalescence_time, forest_line,
                          make_homogeneous_kernel, make_inhomogeneous_kernel,
                          sample_conditioned_lines, sample_config,
                          sample_transformed_path, transformed_rates)
from .reduced import (CatChainSpec, CatEquilibrium, ChainVsBpReport,
                      DistChainSpec, LemmaResidualReport, SurvivalTable,
                      TaylorCoeffs, Y_STATES, cat_chain_vs_bp,
                      cat_equilibrium, cat_generator, dist_chain_vs_bp,
                      dist_generator, dist_survival, dist_taylor_coeffs,
                      lemma_ode_residual)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # model
    "BudgetError", "MixedMomentTable", "ModelParams", "ParamError",
    "StationaryTypeLaw", "finite_stationary_law",
    "moment_recurrence_residuals", "pn_probability", "resampling_rate",
    "two_type_mutation_rates", "validate_params", "wf_mixed_moments",
    "wf_single_moment",
    # forward
    "HmmEvent", "LineageForest", "cat_fixation_type", "genealogical_distance",
    "init_forest", "neutral_pair_distance_samples", "path_value", "run_until",
    "simulate_types", "step_forest",
    # backward
    "BpPath", "BpState", "BpTransition", "LinePath", "TRANSITION_KINDS",
    "canonical_start", "enumerate_transitions", "feynman_kac_V", "make_state",
    "path_V_integral", "reverse_to_lines", "simulate_bp",
    # exact
    "DualityReport", "GeneratorMatrix", "build_bp_generator",
    "build_type_generator", "check_duality", "compute_h", "compute_hT",
    "config_law_vector", "duality_reports", "expm_apply", "h_star",
    "harmonic_residual", "permute_bp_state", "permute_type_config",
    # transformed
    "ConditionedSample", "FunctionalCheck", "HTTable", "HTransformedKernel",
    "conditioned_functional_check", "first_coalescence_time", "forest_line",
    "make_homogeneous_kernel", "make_inhomogeneous_kernel",
    "sample_conditioned_lines", "sample_config", "sample_transformed_path",
    "transformed_rates",
    # reduced
    "CatChainSpec", "CatEquilibrium", "ChainVsBpReport", "DistChainSpec",
    "LemmaResidualReport", "SurvivalTable", "TaylorCoeffs", "Y_STATES",
    "cat_chain_vs_bp",
    "cat_equilibrium", "cat_generator", "dist_chain_vs_bp", "dist_generator",
    "dist_survival", "dist_taylor_coeffs", "lemma_ode_residual",
]
