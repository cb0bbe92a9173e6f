"""Two-stage multi-view human synthesis at desk scale.

Stage 1 turns one front image into six views with a multi-view diffusion
UNet that borrows appearance features from a single-view reference network
and follows body normal maps. Stage 2 refines the three front-facing faces
with identity and morphable-face tokens, then pastes them back.
"""

from .body import DEFAULT_LAYOUT, BodyParams, NormalMap, ViewLayout, build_body, camera_for_view, render_normal_map
from .data import SceneSample, generate_scene, read_scene, write_scene
from .denoiser import ConditionBundle, DenoiserConfig, MultiViewUNet, ViewBatch
from .diffusion import NoiseSchedule, build_schedule, cfg_predict, ddim_sample, ddpm_loss, forward_sample
from .errors import (ConfigError, DetectionError, LookupFailure, MVHumanError, NumericError, ShapeError,
                     ValidationError)
from .face import FaceCoeffs, MorphableFace, build_morphable_face, face_shape, face_texture, render_face
from .facecrop import FaceBox, FaceCrop, crop_and_upscale, detect_face, paste_back, select_face_views
from .metrics import MetricReport, perceptual_distance, psnr, ssim
from .model import HumanMV, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .pipeline import generate_views, infer, refine_faces
from .train import TrainConfig, condition_dropout, train_body_phase, train_face_phase
from .transfer import MemoryBox, capture, read_expand

__version__ = "0.1.0"
