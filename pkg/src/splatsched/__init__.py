"""Locality-aware placement and communication simulator for distributed
point-based rendering training."""

from .errors import (
    ComparisonError,
    ConfigurationError,
    ConsistencyError,
    ConstraintError,
    DatasetFormatError,
    DatasetVersionError,
    InfeasiblePartitionError,
    InstanceTooLargeError,
    ParameterError,
    SplatSchedError,
)
from .scene import (
    CameraView,
    Point3,
    PointCloud,
    SceneDataset,
    WorkloadProfile,
    generate_aerial_scene,
    generate_street_scene,
    load_dataset,
    save_dataset,
)
from .visibility import (
    Frustum,
    GroupedCloud,
    PointGroup,
    build_access_matrix,
    cull_group,
    cull_point,
    frustum_from_view,
    morton_code,
    zorder_group,
)
from .partition import (
    BipartiteGraph,
    PartitionAssignment,
    PartitionQuality,
    build_bipartite_graph,
    evaluate_partition,
    hierarchical_partition,
    image_ownership,
    partition_graph,
)
from .placement import (
    CostCoefficients,
    ObjectiveBreakdown,
    PlacementSolution,
    ProfilerStats,
    auto_coefficients,
    brute_force_optimal,
    hierarchical_place,
    local_search,
    lsa_assign,
    objective,
)
from .simulator import (
    ClusterTopology,
    EpochReport,
    IterationTrace,
    LocalityAwareStrategy,
    RandomStrategy,
    comm_reduction,
    estimate_step_time,
    run_training_sim,
)

__version__ = "0.1.0"
