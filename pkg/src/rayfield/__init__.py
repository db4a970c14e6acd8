"""rayfield: joint camera-pose and neural SDF field optimization via matched rays."""

from .geometry import (
    Intrinsics,
    PoseParam,
    Ray,
    RigidPose,
    SimilarityTransform,
    perturb_pose,
    procrustes_align,
    ray_through_pixel,
    rotation_from_6d,
)
from .fieldvol import FeatureVolume, HashGridConfig, ProgressiveMask, active_levels, masked_feature
from .nets import (
    DensityParams,
    FieldConfig,
    FieldModel,
    GeometryNet,
    TextureNet,
    sdf_normal,
    sdf_to_alpha,
    sh_encode,
)
from .render import RayOutput, RaySamples, SamplingConfig, integrate, render_rays, sample_ray
from .correspond import (
    AuxPatch,
    Correspondence,
    Keypoint,
    aux_patch,
    inject_mismatches,
    load_external_matches,
    oracle_detect_and_match,
    save_matches,
)
from .raymatch import enrich_key_feature, fuse_matched_colors, matchability
from .losses import (
    LossWeights,
    backproject,
    epipolar_context,
    epipolar_loss,
    photometric_loss,
    point_alignment_loss,
    ssim_patch_loss,
    total_loss,
)
from .pipeline import TrainConfig, TrainState, assemble_batch, build_state, learning_rate, train
from .scenes import (
    Dataset,
    Scene,
    View,
    build_scene,
    load_dataset,
    load_nerf_synthetic,
    make_dataset,
    make_rig,
    render_ground_truth,
    save_dataset,
    sphere_trace,
)
from .evaluation import (
    chamfer_and_hausdorff,
    extract_mesh,
    precision_recall_f,
    psnr,
    ssim_metric,
    test_time_refine,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
