import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tbhsu.diffmath import ParamStore, Tensor, softmax_cross_entropy
from tbhsu.errors import InvalidConfig, NoValidTargets, ShapeMismatch, VocabMismatch
from tbhsu.model import Batch, ModelConfig, PredictionSet, collate, forward, init_params
from tbhsu.scene_io import IGNORE_INDEX, build_vocab
from tbhsu.synth import default_config, generate_corpus
from tbhsu.train import (
    Checkpoint,
    TrainConfig,
    combine_losses,
    evaluate,
    fit,
    loss_weight,
    make_model_config,
    multitask_loss,
    sgd_step,
)

from conftest import make_scene


class TestLambda:
    def test_equal_losses(self):
        br = combine_losses(2.0, 2.0)
        assert (br.lam, br.total) == (0.5, 2.0)

    def test_unequal(self):
        br = combine_losses(3.0, 1.0)
        assert (br.lam, br.total) == (0.75, 2.5)

    def test_perfect_regions(self):
        br = combine_losses(1.7, 0.0)
        assert br.lam == 1.0 and br.total == 1.7

    def test_both_zero(self):
        br = combine_losses(0.0, 0.0)
        assert br.lam == 0.5 and br.total == 0.0

    @given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e-3, 1e3))
    def test_properties(self, a, b, c):
        lam = loss_weight(a, b)
        assert 0.0 <= lam <= 1.0
        assert lam + (1 - lam) == 1.0
        if a + b > 1e-300:
            assert loss_weight(c * a, c * b) == pytest.approx(lam, rel=1e-12, abs=1e-300)


def preds_for(room_logits, region_logits, mask):
    return PredictionSet(Tensor(room_logits, requires_grad=True), Tensor(region_logits, requires_grad=True), mask)


def batch_for(room_t, region_t, mask):
    b, n = mask.shape
    return Batch(np.zeros((b, n), int), np.zeros((b, n)), mask, np.asarray(region_t), np.asarray(room_t))


class TestMultitaskLoss:
    def test_batch_means(self):
        rng = np.random.default_rng(0)
        room, region = rng.normal(size=(2, 3)), rng.normal(size=(2, 3, 4))
        mask = np.array([[True, True, True], [True, False, False]])
        region_t = np.array([[0, 3, 1], [2, -1, -1]])
        total, br = multitask_loss(preds_for(room, region, mask), batch_for([1, 2], region_t, mask))
        ce = lambda l, t: softmax_cross_entropy(l, t).item()
        l_room = (ce(room[0], 1) + ce(room[1], 2)) / 2
        l_region = ((ce(region[0, 0], 0) + ce(region[0, 1], 3) + ce(region[0, 2], 1)) / 3 + ce(region[1, 0], 2)) / 2
        assert br.room == pytest.approx(l_room, rel=1e-14)
        assert br.region == pytest.approx(l_region, rel=1e-14)
        lam = l_room / (l_room + l_region)
        assert br.lam == pytest.approx(lam, rel=1e-14)
        assert total.item() == pytest.approx(lam * l_room + (1 - lam) * l_region, rel=1e-14)

    def test_lambda_is_detached(self):
        room = np.array([[0.2, -0.4]])
        region = np.array([[[0.1, 0.3]]])
        mask = np.array([[True]])
        p = preds_for(room, region, mask)
        total, br = multitask_loss(p, batch_for([0], [[1]], mask))
        total.backward()
        sm = np.exp(room[0]) / np.exp(room[0]).sum()
        np.testing.assert_allclose(p.room_logits.grad[0], br.lam * (sm - [1, 0]), rtol=1e-12)

    def test_no_region_slots(self):
        mask = np.array([[False, False]])
        total, br = multitask_loss(preds_for(np.zeros((1, 2)), np.zeros((1, 2, 3)), mask),
                                   batch_for([1], [[-1, -1]], mask))
        assert br.region == 0.0 and br.lam == 1.0 and math.isfinite(total.item())

    def test_nothing_to_score(self):
        mask = np.array([[False]])
        with pytest.raises(NoValidTargets):
            multitask_loss(preds_for(np.zeros((1, 2)), np.zeros((1, 1, 3)), mask), batch_for([IGNORE_INDEX], [[-1]], mask))


class TestSgd:
    def store(self, value, grad):
        ps = ParamStore()
        ps.add("theta", np.array([value]))
        ps["theta"].grad = np.array([grad])
        return ps

    def test_single_step(self):
        ps = self.store(1.0, 0.5)
        sgd_step(ps, 0.1)
        assert ps["theta"].data[0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_gradient(self):
        ps = self.store(1.0, 0.0)
        sgd_step(ps, 0.1)
        assert ps["theta"].data[0] == 1.0

    def test_linearity(self):
        a, b = self.store(1.0, 0.5), self.store(1.0, 0.5)
        sgd_step(a, 0.1)
        sgd_step(a, 0.1)
        sgd_step(b, 0.1, {"theta": np.array([1.0])})
        assert a["theta"].data[0] == pytest.approx(b["theta"].data[0], abs=1e-15)

    def test_shape_mismatch(self):
        ps = self.store(1.0, 0.5)
        with pytest.raises(ShapeMismatch):
            sgd_step(ps, 0.1, {"theta": np.ones(2)})


def tiny_corpus(n=12, seed=0):
    return generate_corpus(default_config(seed=seed), n)


TINY = dict(d_model=16, n_layers=1, n_heads=2, dropout=0.0)


class TestTrainConfig:
    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            TrainConfig(base_lr=0.0)
        with pytest.raises(InvalidConfig):
            TrainConfig(epochs=0)

    def test_round_trip(self):
        cfg = TrainConfig(base_lr=0.05, epochs=3, seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestFit:
    def test_one_epoch_one_scene_lowers_loss(self):
        scenes = tiny_corpus(1)
        mcfg, vocab, rooms, regions = make_model_config(scenes, **TINY)
        params = init_params(mcfg, 0)
        tok = Checkpoint(mcfg, params, vocab, rooms, regions).tokenize(scenes[0])
        batch = collate([tok])
        before, _ = multitask_loss(forward(batch, params.copy(), mcfg), batch)
        ckpt, hist = fit(scenes, [], mcfg, TrainConfig(base_lr=0.01, epochs=1, dropout=False), vocab, rooms, regions,
                         params=params)
        after, _ = multitask_loss(forward(batch, ckpt.params, mcfg), batch)
        assert after.item() < before.item()
        assert len(hist.epochs) == 1

    def test_seed_determinism(self):
        scenes = tiny_corpus(6)
        mcfg, vocab, rooms, regions = make_model_config(scenes, **{**TINY, "dropout": 0.1})
        tcfg = TrainConfig(base_lr=0.05, epochs=2, batch_size=4, seed=3)
        runs = [fit(scenes[:4], scenes[4:], mcfg, tcfg, vocab, rooms, regions) for _ in range(2)]
        assert runs[0][1].to_json() == runs[1][1].to_json()
        assert runs[0][0].params.to_bytes() == runs[1][0].params.to_bytes()
        other = fit(scenes[:4], scenes[4:], mcfg, TrainConfig(base_lr=0.05, epochs=2, batch_size=4, seed=4),
                    vocab, rooms, regions)
        assert other[1].to_json() != runs[0][1].to_json()

    def test_history_records(self):
        scenes = tiny_corpus(4)
        mcfg, vocab, rooms, regions = make_model_config(scenes, **TINY)
        _, hist = fit(scenes[:3], scenes[3:], mcfg, TrainConfig(base_lr=0.05, epochs=2), vocab, rooms, regions)
        rec = hist.epochs[-1]
        for key in ("loss_total", "lambda", "train_room_acc", "test_region_miou", "test_loss_total"):
            assert isinstance(rec[key], float)
        assert 0.0 <= rec["lambda"] <= 1.0

    def test_empty_training_set(self):
        scenes = tiny_corpus(2)
        mcfg, vocab, rooms, regions = make_model_config(scenes, **TINY)
        with pytest.raises(InvalidConfig):
            fit([], scenes, mcfg, TrainConfig(epochs=1), vocab, rooms, regions)

    def test_separable_corpus_reaches_full_train_accuracy(self):
        scenes = tiny_corpus(16, seed=2)
        mcfg, vocab, rooms, regions = make_model_config(scenes, d_model=32, n_layers=1, n_heads=2, dropout=0.0)
        ckpt, hist = fit(scenes, [], mcfg, TrainConfig(base_lr=0.1, epochs=150, batch_size=4, dropout=False),
                         vocab, rooms, regions)
        rep = evaluate(ckpt, scenes)
        assert rep["room"].accuracy == 1.0
        assert rep["region"].accuracy == 1.0


def perfect_checkpoint():
    """Hand-built weights: each label's one-hot row survives LayerNorm and the
    region head reads it back, so region predictions equal the label's region."""
    labels = ["bed", "lamp", "sink"]
    vocab = build_vocab([make_scene([(l, (0, 0, 0), None) for l in labels])])
    cfg = ModelConfig(vocab_size=4, n_room_classes=2, n_region_classes=3, n_max=8, d_model=4, n_layers=0,
                      n_heads=1, use_position=False, dropout=0.0)
    params = init_params(cfg)
    params["embed.semantic"].data[...] = np.vstack([5 * np.eye(4)[:3], np.zeros(4)])
    params["head.region.weight"].data[...] = np.eye(4)[:, :3]
    params["head.room.weight"].data[...] = 0.0
    params["head.room.bias"].data[...] = [1.0, 0.0]
    return Checkpoint(cfg, params, vocab, ("bedroom", "kitchen"), ("A", "B", "C"))


REGION_OF = {"bed": "A", "lamp": "B", "sink": "C"}


def scene_of(labels, room="bedroom", sid="s"):
    return make_scene([(l, (i, 0, 0), REGION_OF[l]) for i, l in enumerate(labels)], room_type=room, scan_id=sid)


class TestEvaluate:
    def test_perfect_predictor(self):
        ckpt = perfect_checkpoint()
        scenes = [scene_of(["bed", "lamp"]), scene_of(["sink", "sink", "bed"])]
        rep = evaluate(ckpt, scenes)
        assert rep["room"].accuracy == 1.0 and rep["room"].miou == 1.0
        assert rep["region"].accuracy == 1.0 and rep["region"].miou == 1.0

    def test_constant_room_predictor(self):
        ckpt = perfect_checkpoint()
        scenes = [scene_of(["bed"], "bedroom"), scene_of(["lamp"], "kitchen")]
        rep = evaluate(ckpt, scenes)
        assert rep["room"].accuracy == 0.5
        assert rep["room"].miou == pytest.approx(0.25)

    def test_random_fixture_brute_force(self):
        rng = np.random.default_rng(5)
        ckpt = perfect_checkpoint()
        ckpt.params["embed.semantic"].data[...] = rng.normal(size=(4, 4))
        ckpt.params["head.region.weight"].data[...] = rng.normal(size=(4, 3))
        labels = list(REGION_OF)
        scenes = [scene_of([labels[i] for i in rng.integers(0, 3, size=rng.integers(1, 6))], sid=str(k))
                  for k in range(8)]
        rep = evaluate(ckpt, scenes)
        gts, prs = [], []
        for s in scenes:
            out = forward(collate([ckpt.tokenize(s)]), ckpt.params, ckpt.model_config)
            prs += list(out.region_logits.data[0, : len(s.objects)].argmax(axis=-1))
            gts += [("A", "B", "C").index(o.region_affordance) for o in s.objects]
        assert rep["region"].accuracy == pytest.approx(np.mean(np.array(gts) == np.array(prs)), abs=1e-15)
        ious = []
        for c in range(3):
            tp = sum(g == c and p == c for g, p in zip(gts, prs))
            fp = sum(g != c and p == c for g, p in zip(gts, prs))
            fn = sum(g == c and p != c for g, p in zip(gts, prs))
            if tp + fp + fn:
                ious.append(tp / (tp + fp + fn))
        assert rep["region"].miou == pytest.approx(np.mean(ious), abs=1e-15)

    def test_macro_region_accuracy(self):
        ckpt = perfect_checkpoint()
        ckpt.params["head.region.weight"].data[...] = 0.0
        ckpt.params["head.region.bias"].data[...] = [1.0, 0.0, 0.0]  # always "A"
        scenes = [scene_of(["bed"]), scene_of(["bed", "lamp", "lamp", "sink"])]
        assert evaluate(ckpt, scenes)["region"].accuracy == pytest.approx(2 / 5)
        assert evaluate(ckpt, scenes, region_average="macro")["region"].accuracy == pytest.approx((1 + 0.25) / 2)

    def test_vocab_mismatch(self):
        ckpt = perfect_checkpoint()
        with pytest.raises(VocabMismatch):
            evaluate(ckpt, [make_scene([("sofa", (0, 0, 0), "A")])])
        with pytest.raises(VocabMismatch):
            evaluate(ckpt, [scene_of(["bed"], room="garage")])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        scenes = tiny_corpus(3)
        mcfg, vocab, rooms, regions = make_model_config(scenes, **TINY)
        ckpt = Checkpoint(mcfg, init_params(mcfg, 4), vocab, rooms, regions)
        ckpt.save(tmp_path / "model.bin")
        back = Checkpoint.load(tmp_path / "model.bin")
        assert back.model_config == mcfg and back.vocab == vocab
        assert back.room_classes == rooms and back.region_classes == regions
        assert back.params.to_bytes() == ckpt.params.to_bytes()
        assert evaluate(back, scenes) == evaluate(ckpt, scenes)

    def test_external_buffer(self, tmp_path):
        scenes = tiny_corpus(2)
        mcfg, vocab, rooms, regions = make_model_config(scenes, external_dim=3, **TINY)
        ext = np.random.default_rng(0).normal(size=(vocab.size, 3))
        ckpt = Checkpoint(mcfg, init_params(mcfg), vocab, rooms, regions, ext)
        ckpt.save(tmp_path / "m.bin")
        np.testing.assert_array_equal(Checkpoint.load(tmp_path / "m.bin").external, ext)
