"""Random sequential adsorption of convex solids, run to saturation.

Infinite input of a fixed convex solid arrives uniformly on a cube; each
arrival is accepted iff it overlaps nothing accepted before.  The package
packs to saturation efficiently, and provides the measurement machinery for
the large-volume limit theory: jamming ratios, variance ratios, Gaussian
fluctuation diagnostics, stabilization radii, and jamming variability under
boundary conditioning.
"""

from .engine import (
    ENGINE_VERSION,
    PackingState,
    PointSet,
    RunRecord,
    SaturationResult,
    SpaceTimePoint,
    pack_finite_input,
    pack_sequence,
    pack_sequence_naive,
    pack_to_saturation,
    pack_with_boundary,
    poisson_spacetime,
    rejection_until_jam_1d,
    saturate_region,
)
from .geometry import (
    Box,
    ConvexSolid,
    GaugeBall,
    ball,
    box,
    clipped_volume,
    gauge_norm,
    max_packing_bound,
    overlaps,
    parse_solid_spec,
    symmetric_polygon,
)
from .measures import (
    BoundedCallback,
    BoxIndicator,
    PackingPointMeasure,
    PackingVolumeMeasure,
    PiecewiseConstant,
    integrate_point,
    integrate_volume,
    point_measure,
    volume_measure,
)
from .stats import (
    CovarianceResult,
    RateFit,
    SweepResult,
    covariance_experiment,
    ks_normal,
    normal_cdf,
    rate_fit,
    sweep_jamming,
)
from .vacancy import SATURATED, IntervalVacancy, VacancyTree, is_blocked, sample_vacant, update_on_accept

__version__ = "0.1.0"
