"""Multi-task training: adaptive loss weighting, plain SGD, evaluation, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diffmath import ParamStore, Tensor, add, dump_tensors, load_tensors, mul, no_grad, softmax_cross_entropy_sum
from .errors import InvalidConfig, NoValidTargets, ParseError, ShapeMismatch, UnknownClass, UnknownLabel, VocabMismatch
from .metrics import ConfusionMatrix, MetricsReport, report
from .model import Batch, ModelConfig, PredictionSet, collate, forward, init_params
from .scene_io import IGNORE_INDEX, LabelVocab, SceneRecord, TokenizedScene, build_vocab, tokenize_scene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 8
    seed: int = 0
    dropout: bool = True
    lambda_scope: str = "batch"
    eval_every: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidConfig("base_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise InvalidConfig("epochs, batch_size and eval_every must be >= 1")
        if self.lambda_scope != "batch":
            raise InvalidConfig("only per-batch loss weighting is implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(f"bad train config: {exc}") from exc


@dataclass(frozen=True)
class LossBreakdown:
    room: float
    region: float
    lam: float
    total: float


def loss_weight(l_room: float, l_region: float) -> float:
    """lambda = L_room / (L_room + L_region); 0.5 when both are zero."""
    denom = l_room + l_region
    if denom == 0.0:
        return 0.5
    return l_room / denom


def combine_losses(l_room: float, l_region: float) -> LossBreakdown:
    lam = loss_weight(l_room, l_region)
    return LossBreakdown(l_room, l_region, lam, lam * l_room + (1.0 - lam) * l_region)


def multitask_loss(preds: PredictionSet, batch: Batch, lam: Optional[float] = None) -> tuple[Tensor, LossBreakdown]:
    """Batch-mean room and region cross-entropies weighted by a detached lambda.

    Region loss is the mean over valid slots within each scene, then the mean
    over scenes that have any valid slot.  Passing ``lam`` pins the weight,
    which finite-difference checks need since lambda carries no gradient.
    """
    room_t = batch.room_targets
    region_t = np.where(batch.mask, batch.region_targets, IGNORE_INDEX)
    room_valid = room_t != IGNORE_INDEX
    slot_valid = region_t != IGNORE_INDEX
    per_scene = slot_valid.sum(axis=1)
    scenes_with_slots = int((per_scene > 0).sum())
    if not room_valid.any() and scenes_with_slots == 0:
        raise NoValidTargets("batch has neither room nor region targets")

    zero = Tensor(0.0)
    if room_valid.any():
        l_room = softmax_cross_entropy_sum(preds.room_logits, room_t, np.full(room_t.shape, 1.0 / room_valid.sum()))
    else:
        l_room = zero
    if scenes_with_slots:
        w = slot_valid / np.maximum(per_scene, 1)[:, None] / scenes_with_slots
        l_region = softmax_cross_entropy_sum(preds.region_logits, region_t, w)
    else:
        l_region = zero

    br = combine_losses(l_room.item(), l_region.item())
    if lam is not None:
        br = LossBreakdown(br.room, br.region, lam, lam * br.room + (1.0 - lam) * br.region)
    total = add(mul(l_room, br.lam), mul(l_region, 1.0 - br.lam))
    return total, br


def sgd_step(params: ParamStore, lr: float, grads: Optional[dict] = None) -> None:
    """theta <- theta - lr * grad, in parameter order."""
    grads = params.grads() if grads is None else grads
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != t.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {t.data.shape}")
        t.data -= lr * g


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParamStore
    vocab: LabelVocab
    room_classes: tuple[str, ...]
    region_classes: tuple[str, ...]
    external: Optional[np.ndarray] = None

    def sidecar(self) -> dict:
        return {
            "format": "tbhsu-checkpoint",
            "version": 1,
            "model_config": self.model_config.to_dict(),
            "vocab": list(self.vocab.labels),
            "room_classes": list(self.room_classes),
            "region_classes": list(self.region_classes),
        }

    def save(self, path) -> None:
        """Write ``<path>`` (tensors) and ``<path>.json`` (config sidecar)."""
        path = Path(path)
        tensors = {n: t.data for n, t in self.params.items()}
        if self.external is not None:
            tensors["buffer.external"] = self.external
        path.write_bytes(dump_tensors(tensors))
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read checkpoint sidecar for {path}: {exc}") from exc
        tensors = load_tensors(path.read_bytes())
        external = tensors.pop("buffer.external", None)
        params = ParamStore()
        for n, arr in tensors.items():
            params.add(n, Tensor(arr))
        return cls(
            ModelConfig.from_dict(meta["model_config"]),
            params,
            LabelVocab(tuple(meta["vocab"])),
            tuple(meta["room_classes"]),
            tuple(meta["region_classes"]),
            external,
        )

    def tokenize(self, scene: SceneRecord) -> TokenizedScene:
        cfg = self.model_config
        return tokenize_scene(scene, self.vocab, self.room_classes, self.region_classes, cfg.n_max, cfg.normalize_distances)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"epochs": self.epochs}, indent=1) + "\n"


def class_lists(scenes: Sequence[SceneRecord]) -> tuple[tuple[str, ...], tuple[str, ...]]:
    rooms = sorted({s.room_type for s in scenes if s.room_type is not None})
    regions = sorted({o.region_affordance for s in scenes for o in s.objects if o.region_affordance is not None})
    return tuple(rooms), tuple(regions)


def make_model_config(scenes: Sequence[SceneRecord], n_max: Optional[int] = None, **overrides) -> tuple[ModelConfig, LabelVocab, tuple, tuple]:
    """Derive vocab, class lists and a matching ModelConfig from a corpus."""
    vocab = build_vocab(scenes)
    rooms, regions = class_lists(scenes)
    longest = max(len(s.objects) for s in scenes)
    cfg = ModelConfig(
        vocab_size=vocab.size,
        n_room_classes=len(rooms),
        n_region_classes=len(regions),
        n_max=n_max if n_max is not None else longest,
        **overrides,
    )
    return cfg, vocab, rooms, regions


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def predict_batch(ckpt: Checkpoint, batch: Batch) -> PredictionSet:
    with no_grad():
        return forward(batch, ckpt.params, ckpt.model_config, training=False, external=ckpt.external)


def _score(ckpt: Checkpoint, tokens: Sequence[TokenizedScene], batch_size: int = 32):
    """Confusion matrices, per-scene region accuracies and mean eval loss."""
    room_cm = ConfusionMatrix(len(ckpt.room_classes))
    region_cm = ConfusionMatrix(len(ckpt.region_classes))
    per_scene_acc = []
    losses = []
    for chunk in _batches(tokens, batch_size):
        batch = collate(chunk)
        preds = predict_batch(ckpt, batch)
        try:
            _, br = multitask_loss(preds, batch)
            losses.append((br.total, len(chunk)))
        except NoValidTargets:
            pass
        room_pred = preds.room_logits.data.argmax(axis=-1)
        region_pred = preds.region_logits.data.argmax(axis=-1)
        for b in range(batch.size):
            if batch.room_targets[b] != IGNORE_INDEX:
                room_cm.accumulate(int(batch.room_targets[b]), int(room_pred[b]))
            valid = batch.mask[b] & (batch.region_targets[b] != IGNORE_INDEX)
            if valid.any():
                gt, pr = batch.region_targets[b][valid], region_pred[b][valid]
                region_cm.accumulate_many(gt, pr)
                per_scene_acc.append(float(np.mean(gt == pr)))
    loss = sum(l * n for l, n in losses) / max(sum(n for _, n in losses), 1)
    return room_cm, region_cm, per_scene_acc, loss


def evaluate(ckpt: Checkpoint, scenes: Sequence[SceneRecord], region_average: str = "micro") -> dict[str, MetricsReport]:
    """Room metrics per scene; region metrics pooled over valid object slots.

    ``region_average="macro"`` replaces region accuracy by the mean of
    per-scene accuracies.
    """
    try:
        tokens = [ckpt.tokenize(s) for s in scenes]
    except (UnknownLabel, UnknownClass) as exc:
        raise VocabMismatch(str(exc)) from exc
    room_cm, region_cm, per_scene, _ = _score(ckpt, tokens)
    out = {}
    if room_cm.total:
        out["room"] = report("room", room_cm, ckpt.room_classes)
    if region_cm.total:
        acc = float(np.mean(per_scene)) if region_average == "macro" else None
        out["region"] = report("region", region_cm, ckpt.region_classes, acc)
    return out


def _summary(prefix: str, room_cm: ConfusionMatrix, region_cm: ConfusionMatrix) -> dict:
    from .metrics import accuracy, miou

    out = {}
    if room_cm.total:
        out[f"{prefix}_room_acc"] = accuracy(room_cm)
        out[f"{prefix}_room_miou"] = miou(room_cm)
    if region_cm.total:
        out[f"{prefix}_region_acc"] = accuracy(region_cm)
        out[f"{prefix}_region_miou"] = miou(region_cm)
    return out


def fit(
    train_scenes: Sequence[SceneRecord],
    test_scenes: Sequence[SceneRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: LabelVocab,
    room_classes: Sequence[str],
    region_classes: Sequence[str],
    external: Optional[np.ndarray] = None,
    params: Optional[ParamStore] = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Seeded mini-batch SGD; keeps the parameters with the lowest eval loss
    (test set when given, else training set)."""
    if len(train_scenes) == 0:
        raise InvalidConfig("training set is empty")
    ckpt = Checkpoint(
        model_cfg,
        params if params is not None else init_params(model_cfg, train_cfg.seed),
        vocab,
        tuple(room_classes),
        tuple(region_classes),
        external,
    )
    train_tok = [ckpt.tokenize(s) for s in train_scenes]
    test_tok = [ckpt.tokenize(s) for s in test_scenes]
    rng = np.random.default_rng(train_cfg.seed)
    history = TrainHistory()
    best_loss = np.inf
    best = ckpt.params.copy()

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_tok))
        sums = np.zeros(4)
        n_batches = 0
        for idx in _batches(order, train_cfg.batch_size):
            batch = collate([train_tok[i] for i in idx])
            ckpt.params.zero_grad()
            preds = forward(batch, ckpt.params, model_cfg, rng, train_cfg.dropout, external)
            total, br = multitask_loss(preds, batch)
            total.backward()
            sgd_step(ckpt.params, train_cfg.base_lr)
            sums += (br.total, br.room, br.region, br.lam)
            n_batches += 1
        record = dict(zip(("epoch", "loss_total", "loss_room", "loss_region", "lambda"), (epoch, *(float(v) for v in sums / n_batches))))

        if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs:
            room_cm, region_cm, _, train_loss = _score(ckpt, train_tok)
            record.update(_summary("train", room_cm, region_cm))
            eval_loss = train_loss
            if test_tok:
                room_cm, region_cm, _, eval_loss = _score(ckpt, test_tok)
                record.update(_summary("test", room_cm, region_cm))
                record["test_loss_total"] = eval_loss
            if eval_loss < best_loss:
                best_loss = eval_loss
                best = ckpt.params.copy()
                record["best"] = True
        history.epochs.append(record)
        log.info("epoch %d loss %.4f", epoch, record["loss_total"])

    ckpt.params = best
    return ckpt, history
