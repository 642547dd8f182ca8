"""Mean-field theory of Bayesian weight posteriors in wide non-lazy networks.

Submodules
----------
numerics          quadrature, Gaussian expectations, self-consistent solver
tasks             toy tasks, dataset loading and preprocessing
linear_theory     closed-form posterior of deep linear networks
sigmoidal_theory  branch (coding scheme) saddle points for erf networks
relu_theory       outlier/bulk saddle points for ReLU networks
gp_baseline       lazy-limit Gaussian process kernels and predictor
sampler           Langevin sampling of the weight posterior
analysis          code extraction, scheme labels, kernels and errors
cli               experiment driver
"""
__version__ = "0.1.0"

__all__ = ["numerics", "tasks", "linear_theory", "sigmoidal_theory", "relu_theory",
           "gp_baseline", "sampler", "analysis", "cli"]
