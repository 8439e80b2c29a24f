"""lgmfit: Laplace-approximation estimation for latent Gaussian models.

Submodules
----------
tape       recorded-tape reverse-mode automatic differentiation
sparse     symmetric sparse matrices and simplicial Cholesky
laplace    marginal likelihood approximation and nested optimization
inference  post-fit covariances, bias corrections, joint sampling
spde       continuous-space Matern / finite-element machinery
gmrf       discrete-space ICAR / BYM2 machinery
models     the concrete spatial models wired as objectives
simulate   simulation-study harness and metrics
cli        batch command-line front door
"""

__version__ = "0.1.0"
