"""Shape from mixed polarization: multiview diffuse/specular separation for polarization normals."""
from ._backend import BACKEND
from .errors import (
    DegenerateSampling,
    DomainError,
    EmptyIntersection,
    EmptyMask,
    InsufficientViews,
    MalformedHeader,
    NegativeClamp,
    OutOfRange,
    PolarSfPError,
    SchemaError,
    TruncatedData,
    ZeroIntensity,
)
from .pipeline import Metrics, Mode, NormalMap, PipelineConfig, PipelineResult, compose_normal, evaluate, run_pipeline
from .polar import (
    IntensityDecomposition,
    PolarizerSample,
    SinusoidFit,
    brewster_angle,
    degree_of_polarization,
    diffuse_dop,
    diffuse_from_view,
    eval_sinusoid,
    fit_sinusoid,
    mixed_dop,
    specular_dop,
)
from .scene import (
    CorrespondenceMap,
    GroundTruth,
    MaterialSpec,
    Plane,
    PolarizedStack,
    SceneSpec,
    Sphere,
    ViewSpec,
    camera_ring,
    render_views,
)
from .solver import (
    PointTrack,
    SeparationResult,
    SolverConfig,
    Status,
    ViewObservation,
    estimate_zenith_naive,
    residual_vector,
    solve_image,
    solve_point,
)

__version__ = "0.1.0"
