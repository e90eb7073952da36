"""Bayesian spatially varying coefficient regression with block and areal
change-of-support prediction."""

from .covariance import (CovarianceParams, Location, NotPositiveDefiniteError, build_cov,
                         chol, cross_cov, distance, distance_matrix, effective_range,
                         exponential_corr, matern_corr)
from .diagnostics import (CvReport, FitReport, crps_from_samples, cv_report, dic, fit_report,
                          loo_cv, mspe, pointwise_loglik, waic, waic_from_pointwise)
from .geo import (Cell, CellPartition, Circle, IngestError, Polygon, Raster, parse_plots,
                  parse_polygons, parse_raster, partition_cells, polygon_area,
                  polygon_centroid, raster_mean)
from .mcmc import (McmcConfig, PosteriorSamples, effective_sample_size, gelman_rubin,
                   mc_standard_error, parameter_summary, run_mcmc, summary_table)
from .model import (Dataset, ModelSpec, ParamVector, Priors, default_priors, design_matrix,
                    log_posterior, marginal_cov, marginal_loglik)
from .prediction import (PpdSamples, PpdSummary, PredictionUnit, aggregate_totals,
                         areal_total, block_total, joint_ppd, recover_effect_surfaces,
                         summarize)
from .selection import SelectionConfig, SelectionTrace, backward_select, loo_mspe

__version__ = "0.1.0"
