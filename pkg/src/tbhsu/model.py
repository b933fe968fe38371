"""Set-input transformer for joint room and per-object region classification.

Token i is the sum of a label embedding and a linear projection of the
object's distance to the room centroid.  A learnable class token is
prepended; after a stack of pre-LN encoder blocks and a final LayerNorm, row 0
feeds the room head and rows 1..N feed a shared region head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diffmath import (
    ParamStore,
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    init_normal,
    layer_norm,
    linear,
    matmul,
    mul,
    multi_head_attention,
    quick_gelu,
    reshape,
)
from .errors import DimensionMismatch, IndexOutOfVocab, InvalidConfig, MissingLabel, ParseError, ShapeMismatch
from .scene_io import PAD_LABEL, LabelVocab, TokenizedScene

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_room_classes: int
    n_region_classes: int
    n_max: int = 77
    d_model: int = 384
    n_layers: int = 4
    n_heads: int = 6
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    use_position: bool = True
    normalize_distances: bool = False
    arch: str = "tbhsu"
    external_dim: Optional[int] = None

    def __post_init__(self):
        counts = (self.vocab_size, self.n_room_classes, self.n_region_classes, self.n_max, self.d_model, self.n_heads)
        if any(c < 1 for c in counts) or self.n_layers < 0:
            raise InvalidConfig("model sizes must be positive")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.arch not in ("tbhsu", "mlp"):
            raise InvalidConfig(f"unknown arch {self.arch!r}")
        if self.external_dim is not None and self.external_dim < 1:
            raise InvalidConfig("external_dim must be positive")

    @property
    def d_hidden(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(f"bad model config: {exc}") from exc


@dataclass(frozen=True)
class Batch:
    token_ids: np.ndarray  # (B, N) int
    distances: np.ndarray  # (B, N)
    mask: np.ndarray  # (B, N) bool
    region_targets: np.ndarray  # (B, N) int
    room_targets: np.ndarray  # (B,) int

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    def full_mask(self) -> np.ndarray:
        """Mask over [class token, objects]; the class token is always valid."""
        return np.concatenate([np.ones((self.size, 1), dtype=bool), self.mask], axis=1)


def collate(scenes: Sequence[TokenizedScene], trim: bool = True) -> Batch:
    """Stack tokenized scenes; ``trim`` drops slots that are padding in every scene."""
    width = max(s.n_objects for s in scenes) if trim else len(scenes[0].token_ids)
    width = max(width, 1)
    return Batch(
        token_ids=np.stack([s.token_ids[:width] for s in scenes]),
        distances=np.stack([s.distances[:width] for s in scenes]),
        mask=np.stack([s.attention_mask[:width] for s in scenes]),
        region_targets=np.stack([s.region_targets[:width] for s in scenes]),
        room_targets=np.array([s.room_target for s in scenes], dtype=np.int64),
    )


@dataclass
class PredictionSet:
    room_logits: Tensor  # (B, n_room)
    region_logits: Tensor  # (B, N, n_region)
    mask: np.ndarray  # (B, N)


@dataclass
class ActivationState:
    z0: np.ndarray
    after_attention: list[np.ndarray] = field(default_factory=list)
    after_mlp: list[np.ndarray] = field(default_factory=list)
    y: Optional[np.ndarray] = None


def _add_embedding_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    if cfg.external_dim is None:
        store.add("embed.semantic", init_normal(rng, (cfg.vocab_size, d)))
    else:
        store.add("embed.external_proj", init_normal(rng, (cfg.external_dim, d)))
    if cfg.use_position:
        store.add("embed.pos_weight", init_normal(rng, (1, d)))
        store.add("embed.pos_bias", np.zeros(d))
    store.add("embed.class_token", init_normal(rng, (1, d)))


def _add_head_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    store.add("head.room.weight", init_normal(rng, (d, cfg.n_room_classes)))
    store.add("head.room.bias", np.zeros(cfg.n_room_classes))
    store.add("head.region.weight", init_normal(rng, (d, cfg.n_region_classes)))
    store.add("head.region.bias", np.zeros(cfg.n_region_classes))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Weights ~ N(0, 0.02), biases 0, LayerNorm gains 1."""
    if cfg.arch == "mlp":
        from .baselines import init_mlp_params

        return init_mlp_params(cfg, seed)
    rng = np.random.default_rng(seed)
    d, h = cfg.d_model, cfg.d_hidden
    store = ParamStore()
    _add_embedding_params(store, cfg, rng)
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        store.add(p + "ln_1.gamma", np.ones(d))
        store.add(p + "ln_1.beta", np.zeros(d))
        store.add(p + "attn.w_qkv", init_normal(rng, (d, 3 * d)))
        store.add(p + "attn.b_qkv", np.zeros(3 * d))
        store.add(p + "attn.w_out", init_normal(rng, (d, d)))
        store.add(p + "attn.b_out", np.zeros(d))
        store.add(p + "ln_2.gamma", np.ones(d))
        store.add(p + "ln_2.beta", np.zeros(d))
        store.add(p + "mlp.w_fc", init_normal(rng, (d, h)))
        store.add(p + "mlp.b_fc", np.zeros(h))
        store.add(p + "mlp.w_proj", init_normal(rng, (h, d)))
        store.add(p + "mlp.b_proj", np.zeros(d))
    store.add("ln_post.gamma", np.ones(d))
    store.add("ln_post.beta", np.zeros(d))
    _add_head_params(store, cfg, rng)
    return store


def _embedding_count(cfg: ModelConfig) -> int:
    d = cfg.d_model
    sem = cfg.external_dim * d if cfg.external_dim is not None else cfg.vocab_size * d
    pos = 2 * d if cfg.use_position else 0
    return sem + pos + d


def _head_count(cfg: ModelConfig) -> int:
    return (cfg.d_model + 1) * (cfg.n_room_classes + cfg.n_region_classes)


def count_parameters(cfg: ModelConfig) -> int:
    """Trainable scalars, computed from the config alone."""
    d, h = cfg.d_model, cfg.d_hidden
    if cfg.arch == "mlp":
        per_block = d * h + h + h * d + d + 2 * d
        return _embedding_count(cfg) + cfg.n_layers * per_block + _head_count(cfg)
    attn = d * 3 * d + 3 * d + d * d + d
    mlp = d * h + h + h * d + d
    per_block = attn + mlp + 4 * d
    return _embedding_count(cfg) + cfg.n_layers * per_block + 2 * d + _head_count(cfg)


def semantic_table(params: ParamStore, external: Optional[np.ndarray] = None) -> Tensor:
    if "embed.external_proj" in params:
        if external is None:
            raise DimensionMismatch("model expects frozen external label vectors")
        return matmul(Tensor(external), params["embed.external_proj"])
    return params["embed.semantic"]


def embed(batch: Batch, params: ParamStore, cfg: ModelConfig, external: Optional[np.ndarray] = None) -> Tensor:
    """z0 = [class token ; E_sem + E_pos], shape (B, N+1, D)."""
    table = semantic_table(params, external)
    ids = batch.token_ids
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexOutOfVocab(f"token id outside [0, {table.shape[0]})")
    tokens = embedding(table, ids)
    if cfg.use_position:
        pos = add(mul(Tensor(batch.distances[..., None]), params["embed.pos_weight"]), params["embed.pos_bias"])
        tokens = add(tokens, pos)
    b = batch.size
    cls = mul(Tensor(np.ones((b, 1, 1))), reshape(params["embed.class_token"], (1, 1, cfg.d_model)))
    return concat([cls, tokens], axis=1)


def encoder_block(
    z: Tensor,
    mask: np.ndarray,
    params: ParamStore,
    prefix: str,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator],
    training: bool,
) -> tuple[Tensor, Tensor]:
    p = lambda name: params[prefix + name]
    attn_params = {k: p("attn." + k) for k in ("w_qkv", "b_qkv", "w_out", "b_out")}
    h = layer_norm(z, p("ln_1.gamma"), p("ln_1.beta"), LN_EPS)
    z_mid = add(multi_head_attention(h, mask, attn_params, cfg.n_heads), z)
    h = layer_norm(z_mid, p("ln_2.gamma"), p("ln_2.beta"), LN_EPS)
    h = quick_gelu(linear(h, p("mlp.w_fc"), p("mlp.b_fc")))
    h = dropout(h, cfg.dropout, rng, training)
    h = linear(h, p("mlp.w_proj"), p("mlp.b_proj"))
    h = dropout(h, cfg.dropout, rng, training)
    return z_mid, add(h, z_mid)


def encode(
    z0: Tensor,
    mask: np.ndarray,
    params: ParamStore,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    record: Optional[ActivationState] = None,
) -> Tensor:
    """Pre-LN block stack followed by the output LayerNorm.

    ``mask`` covers all N+1 rows (class token first).
    """
    if z0.shape[-1] != cfg.d_model or mask.shape != z0.shape[:-1]:
        raise ShapeMismatch(f"z0 {z0.shape} / mask {mask.shape} incompatible with d_model {cfg.d_model}")
    if not np.all(mask[..., 0]):
        raise ShapeMismatch("class-token position must be valid in the mask")
    z = z0
    for l in range(cfg.n_layers):
        z_mid, z = encoder_block(z, mask, params, f"blocks.{l}.", cfg, rng, training)
        if record is not None:
            record.after_attention.append(z_mid.data)
            record.after_mlp.append(z.data)
    y = layer_norm(z, params["ln_post.gamma"], params["ln_post.beta"], LN_EPS)
    if record is not None:
        record.y = y.data
    return y


def predict(y: Tensor, mask: np.ndarray, params: ParamStore) -> PredictionSet:
    """Room head on row 0, shared region head on rows 1..N."""
    if y.ndim != 3 or mask.shape != (y.shape[0], y.shape[1] - 1):
        raise ShapeMismatch(f"y {y.shape} vs object mask {mask.shape}")
    room = linear(y[:, 0, :], params["head.room.weight"], params["head.room.bias"])
    region = linear(y[:, 1:, :], params["head.region.weight"], params["head.region.bias"])
    return PredictionSet(room, region, mask)


def forward(
    batch: Batch,
    params: ParamStore,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    external: Optional[np.ndarray] = None,
    record: Optional[ActivationState] = None,
) -> PredictionSet:
    if cfg.arch == "mlp":
        from .baselines import mlp_baseline_forward

        return mlp_baseline_forward(batch, params, cfg, rng, training, external)
    z0 = embed(batch, params, cfg, external)
    if record is not None:
        record.z0 = z0.data
    y = encode(z0, batch.full_mask(), params, cfg, rng, training, record)
    return predict(y, batch.mask, params)


def load_external_label_embeddings(path, vocab: LabelVocab) -> np.ndarray:
    """Frozen (vocab_size, S) matrix from a JSON ``{label: [floats]}`` map or an
    ``.npz`` with ``labels`` and ``vectors`` arrays.  The PAD row is zero."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            mapping = {str(l): np.asarray(v, dtype=np.float64) for l, v in zip(data["labels"], data["vectors"])}
    else:
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
        mapping = {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()}
    dims = {v.shape for v in mapping.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"external vectors must share one 1-D shape, got {sorted(dims)}")
    s = next(iter(dims))[0]
    table = np.zeros((vocab.size, s))
    for i, label in enumerate(vocab.labels):
        if label == PAD_LABEL:
            continue
        if label not in mapping:
            raise MissingLabel(f"no external vector for label {label!r}")
        table[i] = mapping[label]
    return table


def external_semantic_table(external: np.ndarray, projection: Tensor, target_dim: int) -> Tensor:
    """E_sem = external @ W with W of shape (S, target_dim)."""
    if projection.shape != (external.shape[1], target_dim):
        raise DimensionMismatch(
            f"projection {projection.shape} does not map {external.shape[1]} -> {target_dim}"
        )
    return matmul(Tensor(external), projection)
