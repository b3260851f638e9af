"""Multi-agent trajectory forecasting with a context-conditioned low-rank VQ codebook and a discrete diffusion prior."""

from .config import Config, load_config, save_config
from .data import Scene, AgentTrack, load_scenes, save_scenes, synthesize_dataset
from .model import ModelBundle, Prior, VQVAE
from .checkpoint import load_bundle, load_stage_one
from .sampler import displacement_metrics, evaluate_dataset, generate_guesses, kmeans_reduce
from .training import run_ablation, train_stage_one, train_stage_two

__version__ = "0.1.0"
