"""Pseudospectral simulation of SPDEs with transport noise on the torus."""

from .noise import (NoiseConfig, ThetaSpectrum, make_theta_ball, make_theta_band, make_theta_kraichnan,
                    sample_increment)
from .solvers import (Boussinesq, KellerSegel, LinearTransport, MSQG, NavierStokes, SimConfig, TransportDiffusion,
                      run_pair, simulate)
from .spectral import FourierGrid, SpectralField

__version__ = "0.1.0"
