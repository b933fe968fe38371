"""Region-affordance baselines: TF-IDF lookup, Neighbor-Vote and a per-token MLP.

TF-IDF treats every object label as a document whose terms are the region
affordances that label carried across the training scenes.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .diffmath import ParamStore, Tensor, dropout, init_normal, layer_norm, linear, quick_gelu
from .errors import EmptyCorpus, InvalidConfig, UnknownLabel
from .scene_io import SceneRecord


@dataclass(frozen=True)
class TfidfModel:
    affordances: tuple[str, ...]
    labels: tuple[str, ...]
    scores: np.ndarray  # (n_labels, n_affordances)
    counts: np.ndarray  # raw term counts, same shape

    def __post_init__(self):
        object.__setattr__(self, "_row", {lab: i for i, lab in enumerate(self.labels)})

    def label_scores(self, label: str, fallback_uniform: bool = False) -> np.ndarray:
        row = self._row.get(label)
        if row is None:
            if fallback_uniform:
                return np.full(len(self.affordances), 1.0 / len(self.affordances))
            raise UnknownLabel(f"label {label!r} unseen during TF-IDF fitting")
        return self.scores[row]

    def to_dict(self) -> dict:
        return {
            "affordances": list(self.affordances),
            "labels": list(self.labels),
            "scores": self.scores.tolist(),
            "document_counts": self.counts.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TfidfModel":
        return cls(
            tuple(data["affordances"]),
            tuple(data["labels"]),
            np.asarray(data["scores"], dtype=np.float64),
            np.asarray(data["document_counts"], dtype=np.float64),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def fit_tfidf(train_scenes: Sequence[SceneRecord], affordances: Optional[Sequence[str]] = None) -> TfidfModel:
    """TF = term count / document length; IDF = ln((1 + n_docs) / (1 + df)) + 1."""
    docs: dict[str, Counter] = {}
    for scene in train_scenes:
        for o in scene.objects:
            if o.region_affordance is None:
                continue
            docs.setdefault(o.label, Counter())[o.region_affordance] += 1
    if not docs:
        raise EmptyCorpus("no region-annotated objects to fit TF-IDF")
    terms = tuple(affordances) if affordances is not None else tuple(sorted({t for d in docs.values() for t in d}))
    labels = tuple(sorted(docs))
    col = {t: j for j, t in enumerate(terms)}

    counts = np.zeros((len(labels), len(terms)))
    for i, label in enumerate(labels):
        for term, c in docs[label].items():
            counts[i, col[term]] = c
    tf = counts / counts.sum(axis=1, keepdims=True)
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + len(labels)) / (1.0 + df)) + 1.0
    return TfidfModel(terms, labels, tf * idf, counts)


def _argmax(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties go to the lowest index.
    return int(np.argmax(scores))


def predict_tfidf(model: TfidfModel, label: str, fallback_uniform: bool = False) -> str:
    return model.affordances[_argmax(model.label_scores(label, fallback_uniform))]


@dataclass(frozen=True)
class NeighborVoteConfig:
    alpha: float = 0.8
    fallback_uniform: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig("alpha must lie in [0, 1]")


def aabb_overlap(a, b) -> bool:
    return a.overlaps(b)


def neighbor_vote_scores(model: TfidfModel, scene: SceneRecord, cfg: NeighborVoteConfig) -> np.ndarray:
    """Blended score rows: alpha * own + (1 - alpha) * mean over overlapping neighbors."""
    own = np.stack([model.label_scores(o.label, cfg.fallback_uniform) for o in scene.objects])
    blended = own.copy()
    objs = scene.objects
    for i, o in enumerate(objs):
        nbrs = [j for j, n in enumerate(objs) if j != i and o.aabb.overlaps(n.aabb)]
        if nbrs:
            blended[i] = cfg.alpha * own[i] + (1.0 - cfg.alpha) * own[nbrs].mean(axis=0)
    return blended


def predict_neighbor_vote(model: TfidfModel, scene: SceneRecord, cfg: NeighborVoteConfig = NeighborVoteConfig()) -> list[str]:
    if len(scene.objects) == 0:
        return []
    return [model.affordances[_argmax(row)] for row in neighbor_vote_scores(model, scene, cfg)]


def init_mlp_params(cfg, seed: int = 0) -> ParamStore:
    from .model import _add_embedding_params, _add_head_params

    rng = np.random.default_rng(seed)
    d, h = cfg.d_model, cfg.d_hidden
    store = ParamStore()
    _add_embedding_params(store, cfg, rng)
    for l in range(cfg.n_layers):
        p = f"mlp_blocks.{l}."
        store.add(p + "w_fc", init_normal(rng, (d, h)))
        store.add(p + "b_fc", np.zeros(h))
        store.add(p + "w_proj", init_normal(rng, (h, d)))
        store.add(p + "b_proj", np.zeros(d))
        store.add(p + "ln.gamma", np.ones(d))
        store.add(p + "ln.beta", np.zeros(d))
    _add_head_params(store, cfg, rng)
    return store


def mlp_baseline_forward(batch, params: ParamStore, cfg, rng=None, training: bool = False, external=None):
    """Per-token stack of [linear, QuickGELU, linear, LayerNorm, dropout] blocks.

    No token mixing: the class-token row never sees the objects, so the room
    head output is the same for every scene.
    """
    from .model import LN_EPS, embed, predict

    z = embed(batch, params, cfg, external)
    for l in range(cfg.n_layers):
        p = f"mlp_blocks.{l}."
        z = quick_gelu(linear(z, params[p + "w_fc"], params[p + "b_fc"]))
        z = linear(z, params[p + "w_proj"], params[p + "b_proj"])
        z = layer_norm(z, params[p + "ln.gamma"], params[p + "ln.beta"], LN_EPS)
        z = dropout(z, cfg.dropout, rng, training)
    return predict(z, batch.mask, params)
