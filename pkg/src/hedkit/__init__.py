"""Simulation and analysis tools for hybrid experimental designs
(factorial-SMART, factorial-MRT and SMART-MRT trials)."""

from .design import (DesignSpec, FactorDef, enumerate_cells, enumerate_embedded_ais, figure1_design,
                     figure2_design, figure3_design, illustrative_design, validate_design)
from .estimands import (ai_contrast, conditional_from_marginal, figure4_surface, interaction_effect,
                        main_effect, moderated_effect_at_rate, render_table)
from .estimator import ModelFit, ModelSpec, build_design_matrix, fit_preset, fit_weighted_glm, preset_model, wald
from .power import PowerRequest, PowerResult, inflate_for_missingness, monte_carlo_power, relative_power_profile
from .restructure import WRDataset, weight_and_replicate_distal, weight_and_replicate_proximal
from .simulate import DGPSpec, TrialDataset, illustrative_dgp, simulate_trial

__version__ = "0.1.0"
