"""Class proportion estimation and anomaly rejection via ROC right-endpoint slopes."""

from classprop.dataio import CpeTrial, Dataset, load_csv, load_sparse, make_cpe_trial, standardize
from classprop.mpe import estimate_nu, nu_star_discrete
from classprop.cpe import (
    ProportionEstimate,
    estimate_baseline,
    estimate_binary_rescaled,
    estimate_em,
    estimate_incomplete,
    estimate_joint,
    estimate_l2_kde,
    estimate_projected,
    project_to_simplex,
)

__version__ = "0.1.0"

__all__ = [
    "CpeTrial",
    "Dataset",
    "ProportionEstimate",
    "estimate_baseline",
    "estimate_binary_rescaled",
    "estimate_em",
    "estimate_incomplete",
    "estimate_joint",
    "estimate_l2_kde",
    "estimate_nu",
    "estimate_projected",
    "load_csv",
    "load_sparse",
    "make_cpe_trial",
    "nu_star_discrete",
    "project_to_simplex",
    "standardize",
]
