"""Semantic-driven adaptive level-of-detail selection for Gaussian-splat scenes.

The package labels splats by semantic class, profiles per-class rendering
quality across training snapshots, fits a distance-dependent quality model,
selects the cheapest per-class snapshot meeting a target SSIM, and renders
the composed mixed-LOD scene with full memory accounting.
"""

__version__ = "0.1.0"

from .splats import (  # noqa: F401
    Gaussian3D,
    SplatCloud,
    CheckpointSet,
    parse_splat_ply,
    write_splat_ply,
    occupancy_bytes,
    load_checkpoint_catalog,
)
from .cameras import (  # noqa: F401
    CameraModel,
    ViewPose,
    ViewSet,
    parse_colmap,
    project_point,
    min_label_distance,
)
from .semantics import (  # noqa: F401
    LabelMap,
    LabeledCloud,
    SemanticMask,
    assign_labels,
    backproject_mask,
    load_mask,
)
from .render import (  # noqa: F401
    Image,
    RenderOptions,
    CompositionManifest,
    ManifestEntry,
    eval_sh,
    project_gaussian,
    render,
    render_composed,
    subset_by_label,
)
from .metrics import (  # noqa: F401
    QualityProfile,
    QualitySample,
    build_quality_profile,
    masked_psnr,
    masked_ssim,
    psnr,
    ssim,
)
from .lod import (  # noqa: F401
    LodCurveParams,
    SelectionPlan,
    compose_selection,
    fit_lod_curve,
    predict_ssim,
    select_iterations,
    transfer_plan,
)
from .synth import (  # noqa: F401
    SceneSpec,
    ObjectSpec,
    OrbitSpec,
    degrade,
    emit_checkpoint_series,
    generate_scene,
)
