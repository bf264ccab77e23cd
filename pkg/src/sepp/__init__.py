"""Self-exciting spatio-temporal point processes: simulation, EM fitting,
stochastic declustering, inference and residual diagnostics."""
from ._backend import BACKEND
from .catalog import (
    CatalogError, DomainError, Event, EventCatalog, ObservationDomain, Polygon, Rectangle,
    load_catalog, save_catalog,
)
from .decluster import misd_fit, sample_family_tree, thin_to_background
from .diagnostics import (
    information_criteria, k_envelope, k_function, quadrat_test, select_model, sign_test,
    super_thin, thin_residuals, voronoi_residuals,
)
from .fit_em import (
    ZeroIntensityError, branching_probabilities, em_fit, flp_fit, log_likelihood,
    semiparametric_fit,
)
from .inference import asymptotic_covariance, parametric_bootstrap
from .intensity import (
    Constant, EtasPowerLaw, GaussianExponential, GridField, Histogram, IntensityModel,
    WeightedKde, eval_intensity, eval_triggering, integrated_intensity, triggering_mass,
)
from .simulate import SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CatalogError", "DomainError", "Event", "EventCatalog", "ObservationDomain",
    "Polygon", "Rectangle", "load_catalog", "save_catalog", "misd_fit", "sample_family_tree",
    "thin_to_background", "information_criteria", "k_envelope", "k_function", "quadrat_test",
    "select_model", "sign_test", "super_thin", "thin_residuals", "voronoi_residuals",
    "ZeroIntensityError", "branching_probabilities", "em_fit", "flp_fit", "log_likelihood",
    "semiparametric_fit", "asymptotic_covariance", "parametric_bootstrap", "Constant",
    "EtasPowerLaw", "GaussianExponential", "GridField", "Histogram", "IntensityModel",
    "WeightedKde", "eval_intensity", "eval_triggering", "integrated_intensity",
    "triggering_mass", "SimConfig", "simulate", "__version__",
]
