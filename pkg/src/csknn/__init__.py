"""Cost-sensitive k-nearest-neighbour classification on embedded manifolds.

Modules: ``cost_geometry`` (cost matrices and margins), ``projection``
(random projections and distortion), ``neighbours`` (exact and projected
k-NN search), ``classifier`` (plug-in rule and risk evaluation),
``manifold_lab`` (circle and sphere geometry, nets, coverings),
``hard_family`` (synthetic distributions and validators) and ``bench``
(rate experiments and the invariant battery behind the CLI).
"""

from .cost_geometry import CostMatrix, ProbVector, calibrate, margin, optimal_labels
from .projection import ProjectionSpec, sample_projection
from .neighbours import Dataset, NeighbourIndex
from .classifier import Schedule, classify, evaluate, k_schedule
from .manifold_lab import EmbeddedManifold, RegularityParams
from .hard_family import BenignFamily, HardFamily, build_hard

__version__ = "0.1.0"
