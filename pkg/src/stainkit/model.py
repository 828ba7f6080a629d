"""Structure/color decoupling model for stain transfer.

Two encoders split a tile into structure features and color features; the
color features are vector-quantized against a learned codebook; a stack of
residual attention blocks restains the structure features by cross-attending
into the (quantized) color tokens; a decoder renders the result back to RGB.
Swapping in a template's color tokens at inference re-renders the source
tile in the template's palette.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import ShapeError, Tape, Tensor
from .nn import Decoder, Encoder, Module, StainBlock
from .optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)

ROLE_COLOR = "color"
ROLE_STRUCTURE = "structure"
ROLE_QUANTIZED = "quantized-color"
ROLE_STAINED = "stained"


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite during training."""


@dataclass
class ModelConfig:
    image_size: int = 64
    feature_dim: int = 64
    codebook_size: int = 256
    num_stain_blocks: int = 6
    num_heads: int = 4
    mlp_ratio: int = 4
    commitment_weight: float = 0.25
    color_loss_weight: float = 1.0
    structure_loss_weight: float = 1.0
    codebook_loss_weight: float = 1.0
    recon_loss_weight: float = 1.0
    codebook_restart: bool = False
    restart_interval: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 8 != 0 or self.image_size < 8:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of 8")
        if self.feature_dim % 4 != 0:
            raise ValueError(f"feature_dim {self.feature_dim} must be divisible by 4")
        if self.feature_dim % self.num_heads != 0:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by "
                             f"{self.num_heads} heads")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FeatureMap:
    """A (1, d, h, w) feature tensor tagged with its pipeline role."""

    tensor: Tensor
    role: str

    def __post_init__(self):
        if self.tensor.data.ndim != 4 or self.tensor.shape[0] != 1:
            raise ShapeError(f"feature map must be (1, d, h, w), got {self.tensor.shape}")

    def tokens(self) -> Tensor:
        _, d, h, w = self.tensor.shape
        return ad.reshape(ad.transpose(self.tensor, (0, 2, 3, 1)), (h * w, d))


def _tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    d = tokens.shape[1]
    return ad.transpose(ad.reshape(tokens, (1, h, w, d)), (0, 3, 1, 2))


def _expect_role(fm: FeatureMap, role: str, op: str):
    if fm.role != role:
        raise ValueError(f"{op} expects a {role!r} feature map, got {fm.role!r}")


class Codebook(Module):
    """Learned table of color code vectors with usage tracking."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        limit = 1.0 / size
        self.entries = Tensor(rng.uniform(-limit, limit, size=(size, dim)).astype(np.float32),
                              requires_grad=True)
        self.usage = np.zeros(size, dtype=np.int64)

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        """Index of the closest entry per row; ties resolve to the lowest index."""
        e = self.entries.data
        d2 = (np.sum(vectors * vectors, axis=1, keepdims=True)
              - 2.0 * vectors @ e.T
              + np.sum(e * e, axis=1))
        return np.argmin(d2, axis=1)

    def reset_usage(self):
        self.usage[:] = 0


def _mean_row_norm(x: Tensor) -> Tensor:
    """Mean Euclidean norm of the rows of a (t, d) tensor."""
    return ad.reduce_mean(ad.sqrt(ad.reduce_sum(ad.mul(x, x), axis=1)))


def global_average(fm: FeatureMap) -> Tensor:
    """Spatially pooled (d,) feature vector."""
    return ad.reduce_mean(fm.tokens(), axis=0)


class RestainModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.feature_dim
        self.color_encoder = Encoder(d, rng)
        self.structure_encoder = Encoder(d, rng)
        self.codebook = Codebook(config.codebook_size, d, rng)
        self.blocks = [StainBlock(d, config.num_heads, config.mlp_ratio, rng)
                       for _ in range(config.num_stain_blocks)]
        self.decoder = Decoder(d, rng)

    # `config` is not a parameter container; keep Module's walker away from it
    def named_parameters(self):
        params = {}
        for name in ("color_encoder", "structure_encoder", "codebook", "decoder"):
            for key, p in getattr(self, name).named_parameters().items():
                params[f"{name}.{key}"] = p
        for i, block in enumerate(self.blocks):
            for key, p in block.named_parameters().items():
                params[f"blocks.{i}.{key}"] = p
        return params

    def _check_image(self, img: Tensor):
        s = self.config.image_size
        if img.shape != (1, 3, s, s):
            raise ShapeError(f"expected image tensor (1, 3, {s}, {s}), got {img.shape}")

    def encode_color(self, img: Tensor) -> FeatureMap:
        self._check_image(img)
        return FeatureMap(self.color_encoder(img), ROLE_COLOR)

    def encode_structure(self, img: Tensor) -> FeatureMap:
        self._check_image(img)
        return FeatureMap(self.structure_encoder(img), ROLE_STRUCTURE)

    def quantize(self, fm: FeatureMap) -> FeatureMap:
        """Snap each color token to its nearest codebook entry.

        Forward value is the codebook entry; the straight-through residual
        ``tokens - sg(tokens)`` (identically zero in value) routes gradients
        back to the encoder, while the gathered entries receive gradients
        from their downstream use.
        """
        _expect_role(fm, ROLE_COLOR, "quantize")
        _, d, h, w = fm.tensor.shape
        tokens = fm.tokens()
        idx = self.codebook.nearest(tokens.data)
        np.add.at(self.codebook.usage, idx, 1)
        gathered = ad.gather_rows(self.codebook.entries, idx)
        quantized = ad.add(gathered, ad.sub(tokens, ad.stop_gradient(tokens)))
        return FeatureMap(_tokens_to_map(quantized, h, w), ROLE_QUANTIZED)

    def stain_module(self, structure: FeatureMap, color: FeatureMap) -> FeatureMap:
        """Restain structure tokens by cross-attending into color tokens."""
        _expect_role(structure, ROLE_STRUCTURE, "stain_module")
        _expect_role(color, ROLE_QUANTIZED, "stain_module")
        _, d, h, w = structure.tensor.shape
        x = structure.tokens()
        color_tokens = color.tokens()
        for block in self.blocks:
            x = block(x, color_tokens)
        return FeatureMap(_tokens_to_map(x, h, w), ROLE_STAINED)

    def decode(self, fm: FeatureMap) -> Tensor:
        _expect_role(fm, ROLE_STAINED, "decode")
        return self.decoder(fm.tensor)

    def reconstruct(self, img: Tensor) -> Tensor:
        return self.decode(self.stain_module(self.encode_structure(img),
                                             self.quantize(self.encode_color(img))))

    def restart_dead_entries(self, fm: FeatureMap, rng: np.random.Generator) -> int:
        """Reseed never-used codebook entries from current color tokens.

        Returns how many entries moved. Uses and then resets the usage
        counters, so "dead" means unused since the previous restart.
        """
        dead = np.flatnonzero(self.codebook.usage == 0)
        if dead.size == 0:
            self.codebook.reset_usage()
            return 0
        tokens = fm.tokens().data
        pick = rng.integers(0, tokens.shape[0], size=dead.size)
        noise = rng.normal(0.0, 1e-3, size=(dead.size, tokens.shape[1]))
        self.codebook.entries.data[dead] = (tokens[pick] + noise).astype(np.float32)
        self.codebook.reset_usage()
        return int(dead.size)


# --- losses ------------------------------------------------------------------


def contrastive_color_loss(anchor: Tensor, positive: Tensor, negative: Tensor) -> Tensor:
    """Pull color features of same-palette views together, push the other
    domain's apart: 1 - cos(anchor, positive) + 1 + cos(anchor, negative)."""
    sim_pos = ad.cosine_similarity(anchor, positive)
    sim_neg = ad.cosine_similarity(anchor, negative)
    return ad.add(ad.sub(2.0, sim_pos), sim_neg)


def contrastive_structure_loss(anchor: Tensor, positive: Tensor) -> Tensor:
    """1 - cos between structure features of two color-jittered views."""
    return ad.sub(1.0, ad.cosine_similarity(anchor, positive))


def codebook_loss(fm: FeatureMap, codebook: Codebook, commitment_weight: float) -> Tensor:
    """Mean per-token distance between color features and their entries.

    First term moves only the codebook (encoder side detached); the
    commitment term moves only the encoder (codebook side detached).
    """
    _expect_role(fm, ROLE_COLOR, "codebook_loss")
    tokens = fm.tokens()
    idx = codebook.nearest(tokens.data)
    gathered = ad.gather_rows(codebook.entries, idx)
    pull = _mean_row_norm(ad.sub(ad.stop_gradient(tokens), gathered))
    commit = _mean_row_norm(ad.sub(ad.stop_gradient(gathered), tokens))
    return ad.add(pull, ad.scale(commit, commitment_weight))


def reconstruction_loss(model: RestainModel, img: Tensor) -> Tensor:
    """Mean squared error of the round-trip reconstruction."""
    diff = ad.sub(model.reconstruct(img), img)
    return ad.reduce_mean(ad.mul(diff, diff))


# --- training ----------------------------------------------------------------


@dataclass
class TrainingBatch:
    """One step's tiles: anchor, color-preserving view, structure-preserving
    view, and a tile from the other color domain. All (1, 3, s, s) in [0, 1]."""

    anchor: Tensor
    color_view: Tensor
    structure_view: Tensor
    other_domain: Tensor


def train_step(batch: TrainingBatch, model: RestainModel, opt: AdamWState) -> dict[str, float]:
    """One optimization step; returns the individual loss terms.

    The anchor is reconstructed from its augmented views: structure tokens
    come from the color-jittered view, color tokens from the geometrically
    shuffled same-palette view. Neither path alone can explain the target,
    which is what pushes palette information through the codebook instead
    of letting it leak through the structure encoder. The other-domain tile
    is reconstructed from its own features; anchor/other roles alternate
    between domains across steps.

    Terms with zero weight are skipped outright, so an all-zero-weight
    configuration leaves the parameters bit-identical.
    """
    cfg = model.config
    model.zero_grads()
    report: dict[str, float] = {}
    terms: list[tuple[str, Tensor, float]] = []
    with Tape() as tape:
        color_anchor = model.encode_color(batch.anchor)
        color_view = model.encode_color(batch.color_view)
        if cfg.color_loss_weight != 0.0:
            loss_c = contrastive_color_loss(
                global_average(color_anchor),
                global_average(color_view),
                global_average(model.encode_color(batch.other_domain)))
            terms.append(("color_contrastive", loss_c, cfg.color_loss_weight))
        structure_view = model.encode_structure(batch.structure_view)
        if cfg.structure_loss_weight != 0.0:
            loss_s = contrastive_structure_loss(
                global_average(model.encode_structure(batch.anchor)),
                global_average(structure_view))
            terms.append(("structure_contrastive", loss_s, cfg.structure_loss_weight))
        if cfg.codebook_loss_weight != 0.0:
            loss_z = codebook_loss(color_anchor, model.codebook, cfg.commitment_weight)
            terms.append(("codebook", loss_z, cfg.codebook_loss_weight))
        if cfg.recon_loss_weight != 0.0:
            rebuilt = model.decode(model.stain_module(structure_view,
                                                      model.quantize(color_view)))
            diff = ad.sub(rebuilt, batch.anchor)
            terms.append(("recon_anchor", ad.reduce_mean(ad.mul(diff, diff)),
                          cfg.recon_loss_weight))
            terms.append(("recon_other", reconstruction_loss(model, batch.other_domain),
                          cfg.recon_loss_weight))
        total: Tensor | None = None
        for name, term, weight in terms:
            value = term.item()
            report[name] = value
            if not np.isfinite(value):
                raise TrainingDivergedError(f"loss term {name} is {value}: {report}")
            weighted = ad.scale(term, weight)
            total = weighted if total is None else ad.add(total, weighted)
        if total is None:
            report["total"] = 0.0
            return report
        report["total"] = total.item()
        if not np.isfinite(report["total"]):
            raise TrainingDivergedError(f"total loss is {report['total']}: {report}")
        ad.backward(total)
    params = model.named_parameters()
    grads = {name: p.grad for name, p in params.items()}
    adamw_step(params, grads, opt)
    return report


# --- inference / persistence -------------------------------------------------


def image_to_tensor(img: np.ndarray) -> Tensor:
    """uint8 (h, w, 3) to a (1, 3, h, w) float tensor in [0, 1]."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected uint8 (h, w, 3) image, got {img.dtype} {img.shape}")
    return Tensor(img.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)


def tensor_to_image(t: Tensor) -> np.ndarray:
    if t.data.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeError(f"expected (1, 3, h, w) tensor, got {t.shape}")
    v = np.clip(np.rint(t.data[0].transpose(1, 2, 0) * 255.0), 0, 255)
    return v.astype(np.uint8)


def normalize_image(src: np.ndarray, template: np.ndarray, model: RestainModel) -> np.ndarray:
    """Re-render ``src`` with the template's quantized color features."""
    structure = model.encode_structure(image_to_tensor(src))
    color = model.quantize(model.encode_color(image_to_tensor(template)))
    return tensor_to_image(model.decode(model.stain_module(structure, color)))


def save_checkpoint(path: str | Path, model: RestainModel) -> None:
    tensorio.write_checkpoint(path, model.config.to_dict(), model.state_arrays())


def load_checkpoint(path: str | Path) -> RestainModel:
    config_dict, tensors = tensorio.read_checkpoint(path)
    model = RestainModel(ModelConfig.from_dict(config_dict))
    model.load_state(tensors)
    return model
