"""Sampling, objective, optimiser, synthetic data, training, retrieval metrics, sweeps, complexity."""

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ap3d.blocks import Ap3dWrapper, NonLocalBlock
from ap3d.network import arch_spec, build_network
from ap3d.tensorcore import Conv, Parameter, Tensor, backward, default_dtype, flops, no_grad
from ap3d.traineval import (
    Adam,
    Jitter,
    SweepConfig,
    SynthConfig,
    TrackletSample,
    TrainConfig,
    ablation_sweep,
    batch_hard_triplet,
    clip_indices,
    cosine_distances,
    count_flops,
    evaluate,
    evaluate_ranking,
    export_dataset,
    fit_polynomial,
    generate_synthetic,
    load_dataset,
    parse_input_shape,
    pk_batches,
    reid_loss,
    rows_to_csv,
    sample_clip,
    split_chunks,
    split_query_gallery,
    step_lr,
    sweep_spec,
    train,
)
from ap3d.traineval.metrics import normalize_frames
from ap3d.traineval.train import make_batch

from oracles import oracle_ranking

MICRO_SYNTH = SynthConfig(num_identities=4, tracklets_per_id=2, frames_per_tracklet=4,
                          canvas=(64, 32), crop=(48, 24), out_size=(32, 16))
MICRO_TRAIN = TrainConfig.desk(epochs=1, persons_per_batch=2, clips_per_person=2, clip_len=2, frame_stride=1)


# -- sampling -------------------------------------------------------------------

class TestSampling:
    def test_only_unwrapped_start(self):
        frames = np.arange(32)
        for seed in range(10):
            np.testing.assert_array_equal(sample_clip(frames, 4, 8, np.random.default_rng(seed)), [0, 8, 16, 24])

    def test_short_tracklet_wraps(self):
        np.testing.assert_array_equal(clip_indices(3, 4, 8, 0), [0, 2, 1, 0])
        np.testing.assert_array_equal(sample_clip(np.arange(3), 4, 8, np.random.default_rng(0)), [0, 2, 1, 0])

    def test_start_range_is_exhaustive(self):
        starts = {int(sample_clip(np.arange(40), 4, 8, np.random.default_rng(s))[0]) for s in range(400)}
        assert starts == set(range(9))

    def test_seeded(self):
        frames = np.arange(100)
        a = sample_clip(frames, 4, 3, np.random.default_rng(7))
        np.testing.assert_array_equal(a, sample_clip(frames, 4, 3, np.random.default_rng(7)))

    def test_accepts_tracklet(self):
        t = TrackletSample(np.arange(5 * 3 * 2 * 2, dtype=np.float32).reshape(5, 3, 2, 2), 0, 0, 0)
        assert sample_clip(t, 2, 1, np.random.default_rng(0)).shape == (2, 3, 2, 2)

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_clip(np.zeros((0, 3)), 4, 8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_clip(np.zeros((5, 3)), 0, 8, np.random.default_rng(0))

    def test_chunks_cover_tracklet(self):
        chunks = split_chunks(np.arange(70), 32)
        assert [len(c) for c in chunks] == [32, 32, 6]
        np.testing.assert_array_equal(np.concatenate(chunks), np.arange(70))

    def test_pk_batches(self):
        data = generate_synthetic(MICRO_SYNTH)
        batches = list(pk_batches(data, 2, 3, np.random.default_rng(0)))
        assert len(batches) == 2
        seen = set()
        for b in batches:
            pids = [data[i].person_id for i in b]
            assert len(b) == 6 and sorted(np.unique(pids, return_counts=True)[1]) == [3, 3]
            seen |= set(pids)
        assert seen == set(range(4))
        with pytest.raises(ValueError):
            next(pk_batches(data, 5, 2, np.random.default_rng(0)))

    def test_make_batch_flips_whole_clips(self):
        data = generate_synthetic(MICRO_SYNTH)
        cfg = TrainConfig.desk(clip_len=2, frame_stride=1, flip_prob=1.0)
        x = make_batch(data, [0, 3], cfg, np.random.default_rng(5))
        ref_rng = np.random.default_rng(5)
        for row, i in zip(x, [0, 3]):
            clip = sample_clip(data[i], 2, 1, ref_rng)
            ref_rng.random()
            np.testing.assert_allclose(row, normalize_frames(clip[..., ::-1]), atol=1e-6)


# -- objective ------------------------------------------------------------------

def brute_force_triplet(feats, labels, margin):
    f = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    total = 0.0
    for a in range(len(f)):
        d = [1 - f[a] @ f[j] for j in range(len(f))]
        pos = max(d[j] for j in range(len(f)) if labels[j] == labels[a] and j != a)
        neg = min(d[j] for j in range(len(f)) if labels[j] != labels[a])
        total += max(pos - neg + margin, 0.0)
    return total / len(f)


class TestLoss:
    labels = [0, 0, 1, 1, 2, 2]

    def test_identical_features_give_margin(self):
        assert float(batch_hard_triplet(np.ones((6, 4)), self.labels, 0.3).data) == pytest.approx(0.3, abs=1e-12)

    def test_orthogonal_clusters_give_zero(self):
        feats = np.repeat(np.eye(3), 2, axis=0) * np.array([[1.0], [2.0]] * 3)
        assert float(batch_hard_triplet(feats, self.labels, 0.3).data) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((8, 5))
        labels = [0, 1, 2, 3] * 2
        got = float(batch_hard_triplet(feats, labels, 0.3).data)
        assert got == pytest.approx(brute_force_triplet(feats, labels, 0.3), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, k):
        feats = np.random.default_rng(seed).standard_normal((6, 4))
        a = float(batch_hard_triplet(feats, self.labels).data)
        assert float(batch_hard_triplet(k * feats, self.labels).data) == pytest.approx(a, abs=1e-9)

    def test_uniform_logits(self):
        total, parts = reid_loss(np.zeros((6, 7)), np.ones((6, 4)), self.labels, margin=0.3)
        assert parts["ce"] == pytest.approx(math.log(7), abs=1e-12)
        assert float(total.data) == pytest.approx(math.log(7) + 0.3, abs=1e-12)

    def test_batch_requirements(self):
        with pytest.raises(ValueError):
            batch_hard_triplet(np.ones((4, 3)), [0, 0, 0, 0])
        with pytest.raises(ValueError):
            batch_hard_triplet(np.ones((3, 3)), [0, 0, 1])

    def test_gradient_reaches_features(self, rng):
        feats = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        backward(batch_hard_triplet(feats, self.labels, margin=2.0))
        assert np.abs(feats.grad).max() > 0


# -- optimiser --------------------------------------------------------------------

class TestOptim:
    def test_schedule(self):
        assert step_lr(0, 3e-4) == 3e-4 and step_lr(59, 3e-4) == 3e-4
        assert step_lr(60, 3e-4) == pytest.approx(3e-5) and step_lr(119, 3e-4) == pytest.approx(3e-5)
        assert step_lr(120, 3e-4) == pytest.approx(3e-6)
        assert TrainConfig().lr_at(60) == pytest.approx(3e-5)

    def test_first_adam_step_is_lr_times_sign(self):
        p = Parameter(np.array([1.0, -2.0, 0.5]))
        p.grad = np.array([2.0, 3.0, -0.1])
        opt = Adam([p], lr=0.01, weight_decay=0.5)
        opt.step()
        # decay enters the gradient: g + 0.5 * p = [2.5, 2.0, 0.15]
        np.testing.assert_allclose(p.data, [0.99, -2.01, 0.49], atol=1e-8)

    def test_skips_params_without_grad(self):
        p = Parameter(np.ones(2))
        Adam([p], lr=1.0).step()
        np.testing.assert_array_equal(p.data, 1.0)


# -- synthetic data -----------------------------------------------------------------

class TestSynth:
    def test_counts(self):
        data = generate_synthetic(SynthConfig())
        assert len(data) == 64 and sum(len(t) for t in data) == 1024
        assert data[0].frames.shape == (16, 3, 64, 32) and data[0].frames.dtype == np.float32
        assert np.bincount([t.person_id for t in data]).tolist() == [4] * 16

    def test_bit_identical(self):
        a, b = generate_synthetic(MICRO_SYNTH), generate_synthetic(MICRO_SYNTH)
        for x, y in zip(a, b):
            assert x.frames.tobytes() == y.frames.tobytes()
            assert (x.person_id, x.camera_id, x.tracklet_id) == (y.person_id, y.camera_id, y.tracklet_id)

    def test_seed_and_split_change_frames(self):
        base = generate_synthetic(MICRO_SYNTH)
        other = generate_synthetic(SynthConfig(**{**MICRO_SYNTH.to_dict(), "seed": 1}))
        test = generate_synthetic(MICRO_SYNTH, "test")
        assert not np.array_equal(base[0].frames, other[0].frames)
        assert not np.array_equal(base[0].frames, test[0].frames)
        assert [t.person_id for t in base] == [t.person_id for t in test]

    def test_zero_jitter_frames_identical(self):
        cfg = SynthConfig(num_identities=3, tracklets_per_id=2, frames_per_tracklet=5, jitter=Jitter.none())
        for t in generate_synthetic(cfg):
            assert all(np.array_equal(f, t.frames[0]) for f in t.frames)

    def test_jitter_moves_frames(self):
        t = generate_synthetic(MICRO_SYNTH)[0]
        assert not np.array_equal(t.frames[0], t.frames[1])

    def test_cameras_alternate(self):
        data = generate_synthetic(MICRO_SYNTH)
        assert [t.camera_id for t in data] == [0, 1] * 4
        assert len({t.tracklet_id for t in data}) == 8

    def test_identities_differ(self):
        cfg = SynthConfig(num_identities=6, tracklets_per_id=1, frames_per_tracklet=1, jitter=Jitter.none())
        frames = [t.frames[0] for t in generate_synthetic(cfg)]
        for a, b in itertools.combinations(frames, 2):
            assert np.abs(a - b).mean() > 0.01

    @pytest.mark.parametrize("kw", [
        dict(crop=(200, 48)),
        dict(out_size=(2, 32)),
        dict(num_identities=0),
        dict(jitter=Jitter(scale_range=(0.4, 1.0))),
        dict(jitter=Jitter(max_shift=-1.0)),
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    def test_bad_split(self):
        with pytest.raises(ValueError):
            generate_synthetic(MICRO_SYNTH, "val")

    def test_export_load_round_trip(self, tmp_path):
        data = generate_synthetic(MICRO_SYNTH)
        export_dataset(data, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["tracklets"]) == 8 and len(manifest["tracklets"][0]["frames"]) == 4
        back = load_dataset(tmp_path)
        for a, b in zip(data, back):
            assert (a.person_id, a.camera_id, a.tracklet_id) == (b.person_id, b.camera_id, b.tracklet_id)
            assert np.abs(np.clip(a.frames, 0, 1) - b.frames).max() <= 0.5 / 255 + 1e-6


# -- retrieval metrics -----------------------------------------------------------------

class TestMetrics:
    @pytest.mark.parametrize("seed", range(40))
    def test_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        nq, ng = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        dist = rng.integers(0, 4, (nq, ng)).astype(float)  # small integers force ties
        q_pids, g_pids = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
        q_cams, g_cams = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
        exclude = bool(seed % 2)
        scored = [oracle_ranking(dist[q], q_pids[q], q_cams[q], g_pids, g_cams, 6, exclude) for q in range(nq)]
        valid = [s for s in scored if s is not None]
        if not valid:
            with pytest.raises(ValueError):
                evaluate_ranking(dist, q_pids, g_pids, q_cams, g_cams, 6, exclude)
            return
        res = evaluate_ranking(dist, q_pids, g_pids, q_cams, g_cams, 6, exclude)
        np.testing.assert_allclose(res.cmc, np.mean([c for c, _ in valid], axis=0), atol=1e-12)
        assert res.map == pytest.approx(np.mean([ap for _, ap in valid]), abs=1e-12)
        assert res.num_queries == len(valid)

    def test_hand_computed_three_items(self):
        # ranking: g1 (match), g0 (miss), g2 (match) -> AP = (1/1 + 2/3) / 2
        res = evaluate_ranking(np.array([[0.5, 0.1, 0.9]]), [7], [3, 7, 7], [0], [1, 1, 1])
        assert res.map == pytest.approx(5 / 6) and res.rank1 == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000))
    def test_cmc_monotone_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        q, g = 5, 12
        g_pids = np.concatenate([np.arange(5), rng.integers(0, 5, g - 5)])
        res = evaluate_ranking(rng.random((q, g)), np.arange(5), g_pids, np.zeros(q), np.ones(g), max_rank=12)
        assert np.all(np.diff(res.cmc) >= 0) and 0 <= res.cmc[0] and res.cmc[-1] == 1.0
        assert 0 < res.map <= 1

    def test_self_retrieval(self, rng):
        feats = rng.standard_normal((6, 8))
        pids = np.arange(6)
        res = evaluate_ranking(cosine_distances(feats, feats), pids, pids, pids, pids, exclude_same_camera=False)
        assert res.rank1 == 1.0 and res.map == 1.0

    def test_same_camera_exclusion(self):
        # the only true match shares the query camera, so exclusion leaves nothing
        with pytest.raises(ValueError):
            evaluate_ranking(np.zeros((1, 2)), [0], [0, 1], [0], [0, 1])

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            evaluate_ranking(np.zeros((1, 0)), [0], [], [0], [])
        with pytest.raises(ValueError):
            evaluate_ranking(np.zeros((2, 2)), [0], [0, 1], [0], [1, 1])
        with pytest.raises(ValueError):
            cosine_distances(rng.standard_normal((2, 4)), rng.standard_normal((3, 5)))

    def test_summary_keys(self):
        res = evaluate_ranking(np.array([[0.2, 0.1]]), [0], [0, 1], [0], [1, 1])
        assert res.summary() == {"rank1": 0.0, "rank5": 1.0, "rank10": 1.0, "mAP": 0.5}

    def test_query_gallery_split(self):
        data = generate_synthetic(MICRO_SYNTH, "test")
        q, g = split_query_gallery(data)
        assert [t.person_id for t in q] == [0, 1, 2, 3] and all(t.camera_id == 0 for t in q)
        assert len(g) == 4 and all(t.camera_id == 1 for t in g)

    def test_evaluate_needs_gallery(self):
        with pytest.raises(ValueError):
            evaluate(build_network(arch_spec("tiny-c2d")), generate_synthetic(MICRO_SYNTH)[:1], [])


# -- training -----------------------------------------------------------------------------

class TestTrain:
    def _run(self, kind="tiny-ap-p3d-c", **kw):
        data = generate_synthetic(MICRO_SYNTH)
        with default_dtype(np.float32):
            model = build_network(arch_spec(kind, num_classes=4, base_width=4), seed=0)
            return model, train(model, data, TrainConfig.desk(**{**MICRO_TRAIN.to_dict(), **kw}))

    def test_seed_determinism(self):
        (_, a), (_, b) = self._run(), self._run()
        assert a.losses == b.losses and math.isfinite(a.losses[0])

    def test_every_parameter_gets_gradient(self):
        model, res = self._run(epochs=2)
        names = {n for n, _ in model.named_parameters()}
        assert res.grad_touched == names
        apm = {n.split(".apm.")[1] for n in res.grad_touched if ".apm." in n}
        assert apm == {"g.weight", "theta.weight", "phi.weight", "w.weight"}

    def test_log_lines(self, tmp_path):
        data = generate_synthetic(MICRO_SYNTH)
        with default_dtype(np.float32):
            model = build_network(arch_spec("tiny-c2d", num_classes=4, base_width=4))
            train(model, data, TrainConfig.desk(**{**MICRO_TRAIN.to_dict(), "epochs": 2}), log_path=tmp_path / "log.jsonl",
                  validate=lambda m: 0.5, validate_every=2)
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [x["epoch"] for x in lines] == [0, 1]
        assert set(lines[0]) == {"epoch", "lr", "loss", "ce", "triplet", "seconds"}
        assert lines[1]["rank1"] == 0.5

    def test_classifier_must_match(self):
        data = generate_synthetic(MICRO_SYNTH)
        model = build_network(arch_spec("tiny-c2d", num_classes=3, base_width=4))
        with pytest.raises(ValueError):
            train(model, data, MICRO_TRAIN)

    def test_config_contract(self):
        assert TrainConfig().batch_size == 32
        assert TrainConfig.from_dict(TrainConfig.desk().to_dict()) == TrainConfig.desk()
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 2, "warmup": 5})
        for bad in (dict(persons_per_batch=1), dict(lr=0.0), dict(flip_prob=2.0), dict(epochs=0)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    def test_zero_jitter_c2d_reaches_perfect_rank1(self):
        cfg = SynthConfig(frames_per_tracklet=8, jitter=Jitter.none())
        query, gallery = split_query_gallery(generate_synthetic(cfg, "test"))
        with default_dtype(np.float32):
            model = build_network(arch_spec("tiny-c2d", num_classes=16))
            res = train(model, generate_synthetic(cfg), TrainConfig.desk(epochs=4, frame_stride=1))
        assert res.losses[-1] < res.losses[0]
        assert evaluate(model, query, gallery).rank1 == 1.0


# -- sweeps -----------------------------------------------------------------------------------

def _micro_sweep():
    return SweepConfig(synth=MICRO_SYNTH, train=MICRO_TRAIN, base_width=4)


class TestSweep:
    def test_scale_s_rows(self, tmp_path):
        rows = ablation_sweep("scale_s", _micro_sweep(), out_csv=tmp_path / "s.csv")
        assert [r["setting"] for r in rows] == [f"scale_s={s}" for s in range(1, 7)]
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "setting,rank1,rank5,rank10,mAP,params,gmacs" and len(lines) == 7

    def test_ca_switch_rows(self):
        rows = ablation_sweep("ca_switch", _micro_sweep())
        assert [r["setting"] for r in rows] == [
            "ca_switch=ap-i3d/ca", "ca_switch=ap-i3d/no-ca", "ca_switch=ap-p3d-c/ca", "ca_switch=ap-p3d-c/no-ca"]
        assert rows[0]["params"] == rows[1]["params"]  # the gate weights exist either way

    def test_repeat_gives_identical_csv(self):
        cfg = _micro_sweep()
        assert rows_to_csv(ablation_sweep("scale_s", cfg, ["2", "4"])) == rows_to_csv(ablation_sweep("scale_s", cfg, ["2", "4"]))

    def test_specs(self):
        cfg = _micro_sweep()

        def n_ap(spec):
            return sum(len(i) for _, i, _ in spec.replacement)

        assert [n_ap(sweep_spec("block_count", v, cfg, 4)) for v in ("1", "2", "5", "10")] == [1, 2, 5, 10]
        spec = sweep_spec("stage_placement", "stage3", cfg, 4)
        assert [s for s, _, _ in spec.replacement] == [2]
        assert sweep_spec("scale_s", "6", cfg, 4).apm.scale_s == 6.0
        assert not sweep_spec("ca_switch", "ap-i3d/no-ca", cfg, 4).apm.use_contrastive_attention
        assert sweep_spec("backbone", "resnet18-ap-p3d-c", cfg, 4).depth == 18
        for axis, bad in (("stage_placement", "stage1"), ("block_count", "3"), ("ca_switch", "ap-i3d"), ("depth", "1")):
            with pytest.raises(ValueError):
                sweep_spec(axis, bad, cfg, 4)


# -- complexity ----------------------------------------------------------------------------------

TS = (2, 4, 8, 16)


def _macs(fn):
    with no_grad(), flops.count_macs() as tally:
        fn()
    return sum(tally.values())


class TestComplexity:
    def test_single_pointwise_conv(self):
        conv = Conv(4, 8, 1)
        assert _macs(lambda: conv(np.zeros((1, 4, 1, 6, 6)))) == 1152

    def test_apm_linear_in_frames(self):
        wrap = Ap3dWrapper(16, 16, rng=0)
        values = [_macs(lambda: wrap.apm.align_neighbors(np.zeros((1, 16, t, 8, 4)), wrap.offsets)) for t in TS]
        per_t = np.array(values) / np.array(TS)
        assert per_t.max() / per_t.min() - 1 < 0.01
        _, resid = fit_polynomial(TS, values, 1)
        assert resid < 0.01

    def test_nl_quadratic_in_frames(self):
        nl = NonLocalBlock(16, subsample=False, rng=0)
        values = [_macs(lambda: nl(np.zeros((1, 16, t, 8, 4)))) for t in TS]
        (a, b), resid = fit_polynomial(TS, values, 2)
        assert resid < 0.01 and a > 0
        assert fit_polynomial(TS, values, 1)[1] > 0.5  # a straight line cannot explain it

    def test_whole_models(self):
        ap = build_network(arch_spec("tiny-ap-p3d-c"))
        nl = build_network(arch_spec("tiny-nl", nl_subsample=False))
        ap_v = [count_flops(ap, (1, t, 3, 64, 32)) for t in TS]
        nl_v = [count_flops(nl, (1, t, 3, 64, 32)) for t in TS]
        assert fit_polynomial(TS, ap_v, 1)[1] < 0.01
        (a, _), resid = fit_polynomial(TS, nl_v, 2)
        assert resid < 0.01 and a > 0
        assert fit_polynomial(TS, nl_v, 1)[1] > 0.05

    def test_conventions(self):
        model = build_network(arch_spec("tiny-ap-p3d-c"))
        layers = count_flops(model, (1, 2, 3, 32, 16), convention="layers")
        assert count_flops(model, (1, 2, 3, 32, 16)) > layers > 0
        with pytest.raises(ValueError):
            count_flops(model, (1, 2, 3, 32, 16), convention="flops")

    def test_parse_input_shape(self):
        assert parse_input_shape("4x3x256x128") == (1, 4, 3, 256, 128)
        assert parse_input_shape("2x4x3x8x8") == (2, 4, 3, 8, 8)
        for bad in ("4x3x256", "4x1x256x128", "axbxcxd"):
            with pytest.raises(ValueError):
                parse_input_shape(bad)
