"""
Default configuration for fusion_lab.
"""

from typing import Dict, Optional, Any
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

_PROJECT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "."))

LAB_CONFIG: Dict[str, Any] = {
    # Project directories
    "project_dir": _PROJECT_DIR,
    "data_dir": os.environ.get(
        "FUSION_LAB_DATA_DIR", os.path.join(_PROJECT_DIR, "..", "lab_data")
    ),
    "results_dir": os.environ.get(
        "FUSION_LAB_RESULTS_DIR", os.path.join(_PROJECT_DIR, "..", "lab_results")
    ),
    "single_thread": os.environ.get("FUSION_LAB_SINGLE_THREAD", "1") != "0",

    # Frozen vision encoder
    "image_size": 32,
    "patch_size": 8,
    "vision_layers": 4,
    "vision_dim": 64,
    "vision_heads": 4,
    "vision_ff_dim": 128,

    # Frozen language model
    "lm_kind": "encoder-decoder",
    "lm_layers": 6,
    "lm_dim": 64,
    "lm_heads": 4,
    "lm_ff_dim": 128,
    "lm_max_seq_len": 64,

    # Pretraining recipe for the frozen models
    "recipe_id": "toy-shapes-v1",
    "recipe_steps": 150,
    "recipe_lr": 3e-3,
    "recipe_batch_size": 8,
    "recipe_scenes": 240,
    "recipe_mask_rate": 0.15,
    "recipe_divergence_loss": 1e3,
    "recipe_heldout_scenes": 32,

    # QFormer
    "num_queries": 8,
    "qformer_dim": 64,
    "qformer_heads": 4,
    "qformer_ff_dim": 128,
    "qformer_blocks": 4,
    "cross_attention_frequency": 2,

    # Optimizer (AdamW, decoupled weight decay)
    "lr": 1e-3,
    "betas": (0.9, 0.999),
    "weight_decay": 0.01,
    "batch_size": 16,
    "divergence_loss": 1e3,

    # Experiment schedule
    "single_task_epochs": 8,
    "caption_epochs": 8,
    "multitask_epochs": 6,
    "max_eval_samples": 32,
    "max_generate_len": 16,

    # Synthetic world
    "n_scenes": 300,
    "bench_scenes": 1600,
    "split_fractions": (0.8, 0.1, 0.1),
    "holdout": [("circle", "red")],

    # Analysis instruments
    "knn_k": 10,
    "knn_metric": "cosine",
    "probe_epochs": 500,
    "probe_lr": 0.01,
    "variance_floor": 1e-8,
    "layer_norm_eps": 1e-5,

    # Benchmark
    "bench_warmup_epochs": 1,
    "bench_measured_epochs": 5,
    "min_epoch_seconds": 0.01,
}


# Use default config but allow it to be overridden
_config: Optional[Dict] = None
DATA_DIR: Optional[str] = None
RESULTS_DIR: Optional[str] = None


def initialize_config():
    """Initialize the configuration with default values."""
    global _config, DATA_DIR, RESULTS_DIR
    if _config is None:
        _config = LAB_CONFIG.copy()
        DATA_DIR = _config["data_dir"]
        RESULTS_DIR = _config["results_dir"]


def set_config(config: Dict):
    """Update the configuration with custom values."""
    global _config, DATA_DIR, RESULTS_DIR
    if _config is None:
        _config = LAB_CONFIG.copy()
    _config.update(config)
    DATA_DIR = _config.get("data_dir", LAB_CONFIG["data_dir"])
    RESULTS_DIR = _config.get("results_dir", LAB_CONFIG["results_dir"])


def get_config() -> Dict:
    """Get the current configuration."""
    if _config is None:
        initialize_config()
    assert _config is not None
    return _config.copy()


def sweep_layer_indices(depth: int) -> list:
    """
    Scale the {0, 8, 16, 24} layer sweep of a 24-layer model to a toy depth.

    Args:
        depth: Number of transformer layers in the model

    Returns:
        list: Sorted unique indices {0, ceil(D/3), ceil(2D/3), D}
    """
    return sorted({0, -(-depth // 3), -(-2 * depth // 3), depth})
