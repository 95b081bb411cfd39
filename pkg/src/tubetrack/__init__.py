"""tubetrack: tree-shaped tubular structure extraction from 3-D volumes.

Tracks airway-like trees with deferred (multiple-hypothesis) decisions over
tube template fits, supports both thresholded-SNR and rank-based scoring,
ships region-growing baselines, a synthetic phantom generator with exact
ground truth, and a bidirectional centerline distance for evaluation.
"""

from .baseline import RegionGrowResult, SeedPredicateFailed, region_grow
from .evaluate import (
    CenterlineSet,
    Chain,
    EmptyCenterline,
    ErrorReport,
    centerline_distance,
    densify_chain,
    densify_set,
    read_centerline_csv,
    write_centerline_csv,
)
from .fitting import (
    FitConfig,
    FitFailed,
    FitResult,
    NonpositiveStd,
    SingularDesign,
    fit_template,
    solve_linear_photometry,
    t_statistic,
)
from .hypothesis import (
    EmptyHypothesisSet,
    GlobalHypothesis,
    HypothesisTree,
    LocalHypothesis,
    ScoringMode,
    global_score,
    rank_siblings,
)
from .phantom import DoesNotFit, GroundTruth, PhantomSpec, generate_phantom
from .template import (
    DegenerateStencil,
    SampleStencil,
    TubeTemplate,
    axis_distance_sq,
    build_stencil,
    template_value,
)
from .tracker import (
    Branch,
    SeedFitFailed,
    TerminationReason,
    TrackedTree,
    TrackerConfig,
    candidate_directions,
    detect_bifurcation,
    extract_centerlines,
    load_config,
    parse_config,
    step_branch,
    track_tree,
)
from .volume import (
    OutOfBounds,
    ParseError,
    UnsupportedElementType,
    Volume3D,
    load_volume,
    sample_trilinear,
    save_volume,
    world_to_voxel,
)

__version__ = "0.1.0"
