"""flapkit: flapping-wing vehicle dynamics, blade-element aerodynamics, and
online neural-network force estimation with a square-root cubature Kalman
filter.

The package is organized around a scalar expression-graph engine:

- :mod:`flapkit.exprgraph` builds scalar expression DAGs with reverse-mode
  differentiation, dual-number forward mode, and structural CSE.
- :mod:`flapkit.tape` compiles a graph to a flat evaluation tape.
- :mod:`flapkit.multibody` derives manipulator-form dynamics for articulated
  rigid-body models described in YAML files.
- :mod:`flapkit.aero` is the blade-element aerodynamic ground truth with
  two-pole lag states.
- :mod:`flapkit.simulate` integrates the coupled system and extracts
  training samples by inverse dynamics.
- :mod:`flapkit.neuralnet` is a small softplus MLP over flat weight vectors.
- :mod:`flapkit.ckf` holds the cubature rule and the square-root cubature
  Kalman filter that trains the network online.
"""

__version__ = "0.1.0"

from . import aero, ckf, csvio, exprgraph, multibody, neuralnet, simulate, tape

__all__ = ["aero", "ckf", "csvio", "exprgraph", "multibody", "neuralnet",
           "simulate", "tape", "__version__"]
