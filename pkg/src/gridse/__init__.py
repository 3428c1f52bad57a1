"""Power-grid state estimation: simulated measurements, classical solvers,
a learned unrolled estimator, and adversarial robustness evaluation.

Kept import-light on purpose: submodules pull in the numeric stack only when
they are actually used (the CLI relies on this to pin thread pools first).
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff", "case_io", "cli", "errors", "grid_model", "kernels",
    "measurement", "metrics", "powerflow", "robust", "solvers", "unrolled",
]
