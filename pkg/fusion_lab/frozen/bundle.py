"""
Frozen model bundle: toy vision encoder plus toy language model, pretrained
by a fixed recipe, frozen, and fingerprinted.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from ..dataflows.tokenizer import get_tokenizer
from ..errors import ContractError, FormatError, KindError, ShapeError
from ..lab_configs import get_config
from ..nn.blocks import (
    DecoderOnlyLM,
    EncoderDecoderLM,
    LayerStates,
    decoder_forward,
    decoder_only_forward,
    embed,
    encoder_forward,
    sinusoidal_positions,
)
from ..nn.config import BlockConfig
from ..nn.module import Module
from ..tensor.core import Tensor, concat, no_grad
from ..tensor.rng import Rng
from ..tensor.serialization import load_tensor, save_tensor
from .image import Image
from .pretraining import PretrainRecipe, run_pretraining
from .vision import VisionEncoder, vision_forward

logger = logging.getLogger(__name__)

MANIFEST_NAME = "bundle.json"


class LMKind(str, Enum):
    ENCODER_DECODER = "encoder-decoder"
    DECODER_ONLY = "decoder-only"


@dataclass(frozen=True)
class FrozenConfig:
    image_size: int
    patch_size: int
    vision: BlockConfig
    lm_kind: LMKind
    lm: BlockConfig

    def __post_init__(self):
        object.__setattr__(self, "lm_kind", LMKind(self.lm_kind))

    @classmethod
    def from_lab_config(cls, config: Optional[dict] = None, lm_kind: Optional[str] = None, vocab_size: Optional[int] = None) -> "FrozenConfig":
        config = config or get_config()
        num_patches = (config["image_size"] // config["patch_size"]) ** 2
        vision = BlockConfig(
            model_dim=config["vision_dim"],
            num_heads=config["vision_heads"],
            ff_dim=config["vision_ff_dim"],
            num_layers=config["vision_layers"],
            max_seq_len=num_patches + 1,
            vocab_size=1,
        )
        lm = BlockConfig(
            model_dim=config["lm_dim"],
            num_heads=config["lm_heads"],
            ff_dim=config["lm_ff_dim"],
            num_layers=config["lm_layers"],
            max_seq_len=config["lm_max_seq_len"],
            vocab_size=vocab_size or get_tokenizer().vocab_size,
        )
        return cls(config["image_size"], config["patch_size"], vision, LMKind(lm_kind or config["lm_kind"]), lm)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "vision": self.vision.to_dict(),
            "lm_kind": self.lm_kind.value,
            "lm": self.lm.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FrozenConfig":
        return cls(
            data["image_size"],
            data["patch_size"],
            BlockConfig.from_dict(data["vision"]),
            LMKind(data["lm_kind"]),
            BlockConfig.from_dict(data["lm"]),
        )


def parameter_fingerprint(modules: Sequence[Tuple[str, Module]]) -> str:
    """64-bit BLAKE2b digest over parameter names, dtypes, shapes and bytes."""
    digest = hashlib.blake2b(digest_size=8)
    for prefix, module in modules:
        for name, p in module.named_parameters(f"{prefix}."):
            digest.update(name.encode("utf-8"))
            digest.update(str(p.data.dtype).encode("utf-8"))
            digest.update(repr(p.shape).encode("utf-8"))
            digest.update(p.data.tobytes())
    return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class FrozenBundle:
    """
    Immutable after construction: parameters are read-only arrays and never
    require gradients, so one bundle can be shared by concurrent runs.
    """

    config: FrozenConfig
    vision: VisionEncoder
    lm: Union[EncoderDecoderLM, DecoderOnlyLM]
    fingerprint: str
    seed: int
    recipe: PretrainRecipe
    heldout_losses: Dict[str, float] = field(default_factory=dict)

    @property
    def lm_kind(self) -> LMKind:
        return self.config.lm_kind

    @property
    def lm_depth(self) -> int:
        return self.config.lm.num_layers

    @property
    def vision_depth(self) -> int:
        return self.config.vision.num_layers

    def modules(self) -> List[Tuple[str, Module]]:
        return [("vision", self.vision), ("lm", self.lm)]

    def parameters(self) -> List[Tensor]:
        return self.vision.parameters() + self.lm.parameters()

    def current_fingerprint(self) -> str:
        return parameter_fingerprint(self.modules())


def _build_models(config: FrozenConfig, seed: int):
    rng = Rng(seed)
    vision = VisionEncoder(config.vision, config.image_size, config.patch_size, rng.spawn("vision"))
    lm_class = EncoderDecoderLM if config.lm_kind == LMKind.ENCODER_DECODER else DecoderOnlyLM
    return vision, lm_class(config.lm, rng.spawn("lm"))


def build_frozen_bundle(seed: int, config: FrozenConfig, recipe: PretrainRecipe) -> FrozenBundle:
    """
    Initialize from `seed`, run the pretraining recipe, freeze and fingerprint.

    Raises:
        TrainingError: The recipe diverged
    """
    vision, lm = _build_models(config, seed)
    heldout = run_pretraining(vision, lm, seed, recipe)
    vision.freeze()
    lm.freeze()
    fingerprint = parameter_fingerprint([("vision", vision), ("lm", lm)])
    logger.info("Built %s bundle from seed %d, fingerprint %s", config.lm_kind.value, seed, fingerprint)
    return FrozenBundle(config, vision, lm, fingerprint, seed, recipe, heldout)


def vision_encode(bundle: FrozenBundle, image: Image) -> Tuple[Tensor, LayerStates]:
    """[num_patches + 1, d_v] features, row 0 the aggregate token."""
    with no_grad():
        return vision_forward(bundle.vision, image)


def _require_encoder_decoder(bundle: FrozenBundle, operation: str):
    if bundle.lm_kind != LMKind.ENCODER_DECODER:
        raise KindError(f"{operation} needs an encoder-decoder bundle, got {bundle.lm_kind.value}")


def lm_encode(
    bundle: FrozenBundle,
    token_ids: Sequence[int],
    extra_states: Optional[Tensor] = None,
    placement: str = "before",
) -> Tuple[Tensor, LayerStates]:
    """
    l_e over the prompt, optionally concatenated with already-embedded rows.

    Args:
        bundle: Encoder-decoder bundle
        token_ids: Prompt ids, embedded at positions 0..len-1
        extra_states: [m, model_dim] rows (e.g. projected queries) joined to the
            prompt; "before" gives them positions -m..-1, "after" positions
            len..len+m-1
        placement: "before" or "after"

    Returns:
        tuple: (encoder output [m + len, model_dim], LayerStates)
    """
    _require_encoder_decoder(bundle, "lm_encode")
    lm = bundle.lm
    dim = lm.config.model_dim
    x = embed(token_ids, lm.tokens, lm.config.max_seq_len)
    if extra_states is not None:
        if extra_states.ndim != 2 or extra_states.shape[1] != dim:
            raise ShapeError(f"Extra encoder rows must be [m, {dim}], got {list(extra_states.shape)}")
        m, n = extra_states.shape[0], len(token_ids)
        if placement == "before":
            extra = extra_states + Tensor(sinusoidal_positions(range(-m, 0), dim))
            x = concat([extra, x])
        elif placement == "after":
            extra = extra_states + Tensor(sinusoidal_positions(range(n, n + m), dim))
            x = concat([x, extra])
        else:
            raise ContractError(f"placement must be 'before' or 'after', got '{placement}'")
    return encoder_forward(x, lm.encoder, capture=True)


def lm_decode(bundle: FrozenBundle, memory: Tensor, prefix_ids: Sequence[int]) -> Tensor:
    """l_d: causal decoder logits [len(prefix_ids), vocab] cross-attending to memory."""
    _require_encoder_decoder(bundle, "lm_decode")
    return decoder_forward(prefix_ids, memory, bundle.lm)


def lm_layer_states(bundle: FrozenBundle, token_ids: Sequence[int]) -> LayerStates:
    """Per-layer hidden states: encoder layers, or all layers of a decoder-only LM."""
    with no_grad():
        if bundle.lm_kind == LMKind.ENCODER_DECODER:
            _, states = lm_encode(bundle, token_ids)
        else:
            _, states = decoder_only_forward(token_ids, bundle.lm)
    return states


def vision_aggregate(features: Tensor) -> Tensor:
    """First token of the vision transformer."""
    return features[0]


def lm_aggregate(states: Tensor) -> Tensor:
    """Final token of an LM sequence."""
    if states.shape[0] == 0:
        raise ContractError("An empty sequence has no final-token aggregate")
    return states[states.shape[0] - 1]


def save_bundle(bundle: FrozenBundle, directory: Union[str, Path]) -> Path:
    """Write one TNSR file per parameter plus a JSON manifest."""
    root = Path(directory)
    tensor_dir = root / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for prefix, module in bundle.modules():
        for name, p in module.named_parameters(f"{prefix}."):
            save_tensor(p, tensor_dir / f"{name}.tnsr")
            names.append(name)
    manifest = {
        "config": bundle.config.to_dict(),
        "seed": bundle.seed,
        "recipe_id": bundle.recipe.recipe_id,
        "recipe": bundle.recipe.to_dict(),
        "fingerprint": bundle.fingerprint,
        "heldout_losses": bundle.heldout_losses,
        "parameters": names,
    }
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)
    return root


def load_bundle(directory: Union[str, Path]) -> FrozenBundle:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"No bundle manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    config = FrozenConfig.from_dict(manifest["config"])
    vision, lm = _build_models(config, int(manifest["seed"]))
    for prefix, module in (("vision", vision), ("lm", lm)):
        state = {
            name[len(prefix) + 1:]: load_tensor(root / "tensors" / f"{name}.tnsr").data
            for name in manifest["parameters"]
            if name.startswith(prefix + ".")
        }
        module.load_state_dict(state)
        module.freeze()
    fingerprint = parameter_fingerprint([("vision", vision), ("lm", lm)])
    if fingerprint != manifest["fingerprint"]:
        raise FormatError(f"Bundle tensors hash to {fingerprint}, manifest says {manifest['fingerprint']}")
    recipe = PretrainRecipe(**manifest["recipe"])
    return FrozenBundle(config, vision, lm, fingerprint, int(manifest["seed"]), recipe, manifest["heldout_losses"])
