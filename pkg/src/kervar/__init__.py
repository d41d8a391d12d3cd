"""Kernel ridge regression for nonlinear vector autoregressive time series.

Subpackages: kernels (kernel families and Gram assembly), mercer
(multi-index eigen-systems and their numerical predicates), dynamics
(simulation and lag embedding), krr (the regularized estimator),
concentration (rate functions and quadratic-form statistics), experiments
(desk-scale studies), cli (command-line interface).
"""

__version__ = "0.1.0"
