"""Rotation-equivariant point-cloud encoding via distances to anchor points.

A cloud is described by its distances to ``k`` anchor points picked from the
cloud itself. The distances do not change under rigid motion; decoding them
back against the (moved) anchors yields coordinates that move with the input.
"""

from ._backend import BACKEND, set_backend
from .anchors import (
    AnchorSet,
    CurvatureField,
    curvature,
    deterministic_fps,
    load_anchors,
    normal_laplacian,
    save_anchors,
    select_anchors,
)
from .cloud import (
    KnnIndex,
    PointCloud,
    RigidTransform,
    apply_rigid,
    estimate_normals,
    kabsch_align,
    knn,
    load_cloud,
    random_rigid,
    random_rotation,
    rotation_from_euler,
    save_cloud,
)
from .codec import (
    DecodeResult,
    DistanceMatrix,
    SolverOptions,
    check_general_position,
    decode,
    decode_point,
    dmcd,
    encode,
    read_escd,
    write_escd,
)
from .completion import (
    CompletionConfig,
    PredictorSpec,
    complete,
    predict_distances,
    resample,
)
from .evaluation import (
    EvalReport,
    add_gaussian_noise,
    chamfer_l1,
    chamfer_l2,
    equivariance_report,
    fidelity,
    pca_canonicalize,
    remove_points,
)

__version__ = "0.1.0"
