"""Reaction-Eikonal cardiac digital twin: activation, repolarisation, pseudo-ECG,
ABC inference, Sobol sensitivity and drug-block dose response."""
import warnings

# numba probes for TBB on import of parallel kernels and warns when the
# system copy is too old; the workqueue/omp layers are used instead.
warnings.filterwarnings("ignore", message=".*TBB.*")

__version__ = "0.1.0"
