"""Condition-image diffusion synthesis and rail segmentation augmentation at desk scale."""

from .conditioning import Scheme, build_condition, canny_edges, combine_condition, normalize_condition, replicate_channels
from .control import ControlledDenoiser, attach_control, control_training_step, controlled_predict, encode_condition
from .dataset import ScenePair, center_crop, generate_toy_dataset, load_scene_pairs, resize_pair, split_dataset
from .diffusion import dm_loss, forward_step, make_schedule, reverse_step, sample, training_step
from .metrics import fid, frechet_distance, gaussian_stats, iou, make_desk_extractor
from .prompting import PromptBundle, Regime, build_prompt_bundle, decorate, stub_caption
from .segmentation import binarize_mask, build_setup, run_setup_grid, train_segmenter

__version__ = "0.1.0"
