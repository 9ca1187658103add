"""Multi-view object removal: propagate a single-view prompt to masks
for every view, then refit a voxel radiance field to inpainting priors
so the object disappears from the whole scene."""

from .colmap_model import (
    NO_POINT3D,
    Point3D,
    PosedImage,
    SparseModel,
    masked_keypoints,
    models_equal,
    parse_binary_model,
    parse_model,
    parse_text_model,
    write_binary_model,
    write_text_model,
)
from .errors import (
    DanglingReferenceError,
    DataError,
    EmptyMaskError,
    ExternalToolError,
    ModelFormatError,
    NoDetectionError,
    NoSparseCorrespondenceError,
    TrainingDivergedError,
)
from .field import (
    RenderResult,
    VoxelField,
    load_checkpoint,
    render_image,
    render_rays,
    render_rays_backward,
    sample_field,
    save_checkpoint,
)
from .geometry import (
    BEHIND,
    OUT,
    CameraIntrinsics,
    Pose,
    Ray,
    camera_ray_grid,
    pixel_to_ray,
    project_normalized,
    project_points_to_pixels,
    project_to_pixel,
    rasterize,
)
from .masks import Mask, load_mask_png, mask_filename, save_mask_png
from .metrics import mask_accuracy, mask_iou, psnr
from .propagation import (
    MaskStack,
    PointPrompt,
    PromptSet,
    ViewImage,
    load_prompts,
    nearest_keypoints,
    predict_masks,
    propagate_points,
    run_text_prompt,
    sample_points_from_mask,
    save_prompts,
)
from .synthetic import (
    SceneSpec,
    emit_sparse_model,
    ground_truth_mask,
    oracle_box_detector,
    oracle_mask_predictor,
    render_analytic,
    write_dataset,
)
from .train import (
    DepthMode,
    SupervisionSet,
    TrainConfig,
    color_loss,
    depth_loss,
    perceptual_patch_loss,
    sample_mask_patches,
    total_loss,
    train_removal,
)

__all__ = [name for name in dir() if not name.startswith("_")]
