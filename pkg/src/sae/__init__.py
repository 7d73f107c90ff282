"""Small-area estimation with spatial Fay-Herriot models and VAE-emulated spatial priors."""

from .exceptions import SaeError, SamplingError, ValidationError
from .graph import CarPrecision, RegionGraph, car_precision, lattice_graph, load_edge_list
from .hmc import HmcConfig, PosteriorDraws, diagnostics, run_chain
from .models import DirectEstimateTable, ModelSpec, build_target, fit, summarize_theta
from .vae import BetaVAE, DecoderArtifact, load_decoder, save_decoder

__version__ = "0.1.0"

__all__ = [
    "BetaVAE", "CarPrecision", "DecoderArtifact", "DirectEstimateTable", "HmcConfig",
    "ModelSpec", "PosteriorDraws", "RegionGraph", "SaeError", "SamplingError",
    "ValidationError", "build_target", "car_precision", "diagnostics", "fit",
    "lattice_graph", "load_decoder", "load_edge_list", "run_chain", "save_decoder",
    "summarize_theta",
]
