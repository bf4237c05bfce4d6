import numpy as np
import pytest

from icp_reasoner import autodiff as ad
from icp_reasoner.autodiff import Tensor
from icp_reasoner.datasets import gen_synthetic_pair
from icp_reasoner.icp import IcpConfig
from icp_reasoner.nar import model as model_mod
from icp_reasoner.nar.executor import (
    HINT_NAMES,
    Mode,
    decode_mask,
    infer,
    rollout,
    rollout_cap,
)
from icp_reasoner.nar.losses import final_loss, mask_term, pos_weight, scalar_term, step_loss
from icp_reasoner.nar.model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    ProcessorState,
    decode_step,
    encode_step,
    load_checkpoint,
    postprocess,
    process_step,
    save_checkpoint,
)
from icp_reasoner.nar.training import (
    TrainingError,
    clip_by_global_norm,
    grad_check,
    sample_loss,
    train,
)
from icp_reasoner.trajectory import HintMode, TrajectoryStep, normalize, record_trajectory


def make_traj(seed=0, n=8, hint_mode=HintMode.P12, gt_opt=False, max_iter=50):
    s = gen_synthetic_pair(n, coord_range=1.0, max_rot_deg=20, max_trans=0.2, seed=seed)
    tr = record_trajectory(s.src, s.tgt, IcpConfig("p2p", max_iter=max_iter), hint_mode,
                           gt=s.gt_transform, gt_optimisation=gt_opt)
    return normalize(tr)


def small(hidden=8, **kw):
    return ModelConfig(hidden_dim=hidden, **kw)


def step_values(traj, t):
    v = dict(traj.input.values)
    v.update({k: traj.hints[t][k] for k in HINT_NAMES})
    return v


class TestEncodeProcessDecode:
    def test_zero_weights_give_zero_embeddings(self):
        tr = make_traj()
        p = ModelParams.init(small(), 0, zero=True)
        z = encode_step(step_values(tr, 0), p, tr.n)
        assert not z.node.data.any() and not z.edge.data.any() and not z.graph.data.any()

    def test_shapes(self):
        tr = make_traj(n=4)
        p = ModelParams.init(small(8), 0)
        z = encode_step(step_values(tr, 0), p, 4)
        assert z.node.shape == (4, 8) and z.edge.shape == (4, 4, 8) and z.graph.shape == (8,)
        st = process_step(z, ProcessorState.zeros(4, 8), p)
        pred = decode_step(st, z, p, outputs=True)
        assert pred["transformed_src"].shape == (4, 3)
        assert pred["correspondences"].shape == (4, 4)
        assert pred["final_correspondences"].shape == (4, 4)
        assert pred["error"].shape == () and pred["phase"].shape == (2,)
        assert pred["stop"].shape == ()

    def test_encoder_linearity(self):
        tr = make_traj(n=4)
        p = ModelParams.init(small(8), 0)
        p["enc.error.b"].data[:] = 0.0
        only = lambda e: encode_step({"error": np.array(e)}, p, 4).graph.data
        assert np.allclose(only(0.6), 2 * only(0.3), atol=1e-15)

    def test_wrong_node_count(self):
        tr = make_traj(n=4)
        p = ModelParams.init(small(8), 0)
        with pytest.raises(ValueError):
            encode_step(step_values(tr, 0), p, 5)

    def test_single_node(self):
        p = ModelParams.init(small(8), 0)
        vals = {"pointclouds": np.full((1, 6), 0.5), "node_positions": np.zeros((1, 1))}
        z = encode_step(vals, p, 1)
        a = process_step(z, ProcessorState.zeros(1, 8), p)
        b = process_step(z, ProcessorState.zeros(1, 8), p)
        assert np.isfinite(a.node_latents.data).all()
        assert np.array_equal(a.edge_latents.data, b.edge_latents.data)

    def test_zero_weights_mask_half(self):
        tr = make_traj()
        p = ModelParams.init(small(), 0, zero=True)
        z = encode_step(step_values(tr, 0), p, tr.n)
        pred = postprocess(decode_step(ProcessorState.zeros(tr.n, 8), z, p))
        assert np.all(pred["correspondences"] == 0.5)
        assert np.allclose(pred["stop"], [0.5, 0.5])

    def test_permutation_equivariance(self):
        tr = make_traj(n=6)
        p = ModelParams.init(small(16), 0, np.random.default_rng(1))
        rng = np.random.default_rng(2)

        def run(values):
            st = ProcessorState.zeros(6, 16)
            for _ in range(2):
                z = encode_step(values, p, 6)
                st = process_step(z, st, p)
            return st, decode_step(st, z, p, outputs=True)

        base_vals = step_values(tr, 1)
        st0, out0 = run(base_vals)
        for _ in range(5):
            pi = rng.permutation(6)
            vals = {}
            for k, v in base_vals.items():
                loc = model_mod.SPECS[k].location
                vals[k] = v[pi] if loc == "node" else v[np.ix_(pi, pi)] if loc == "edge" else v
            st1, out1 = run(vals)
            assert np.max(np.abs(st1.node_latents.data - st0.node_latents.data[pi])) < 1e-5
            assert np.max(np.abs(st1.edge_latents.data - st0.edge_latents.data[np.ix_(pi, pi)])) < 1e-5
            assert np.max(np.abs(out1["correspondences"].data
                                 - out0["correspondences"].data[np.ix_(pi, pi)])) < 1e-5
            assert abs(float(out1["stop"].data) - float(out0["stop"].data)) < 1e-5


class TestRollout:
    def test_teacher_forcing_feeds_ground_truth(self):
        tr = make_traj(max_iter=4)
        p = ModelParams.init(small(), 0)
        res = rollout(tr, p, Mode.TRAIN, teacher_prob=1.0)
        assert len(res.preds) == len(tr.hints)
        for t in range(1, len(tr.hints)):
            for k in HINT_NAMES:
                assert np.array_equal(res.encoder_hints[t][k], tr.hints[t - 1][k])

    def test_teacher_zero_feeds_predictions(self):
        tr = make_traj(max_iter=4)
        p = ModelParams.init(small(), 0)
        res = rollout(tr, p, Mode.TRAIN, teacher_prob=0.0)
        fed = postprocess(res.preds[0])
        assert np.array_equal(res.encoder_hints[1]["correspondences"], fed["correspondences"])

    def test_forced_stop_at_three(self, monkeypatch):
        tr = make_traj()
        p = ModelParams.init(small(), 0)
        calls = []

        def fake(pooled, params):
            calls.append(1)
            return Tensor(10.0 if len(calls) == 3 else -10.0)

        monkeypatch.setattr(model_mod, "termination_logit", fake)
        res = rollout(tr, p, Mode.INFERENCE)
        assert res.stop_index == 3 and res.terminated and len(res.preds) == 3

    def test_cap(self, monkeypatch):
        tr = make_traj()
        p = ModelParams.init(small(), 0)
        monkeypatch.setattr(model_mod, "termination_logit", lambda pooled, params: Tensor(-10.0))
        res = rollout(tr, p, Mode.INFERENCE, cap=7)
        assert res.stop_index == 7 and not res.terminated
        assert rollout_cap(50) == 200

    def test_gt_step_adds_one_frame(self):
        tr = make_traj(gt_opt=True, max_iter=4)
        p = ModelParams.init(small(), 0)
        res = rollout(tr, p, Mode.TRAIN, teacher_prob=1.0)
        assert len(res.encoder_hints) == len(tr.hints) + 1
        assert set(res.final) == {"final_src", "final_tgt", "final_correspondences"}

    def test_infer_shapes_and_cap(self):
        s = gen_synthetic_pair(6, coord_range=1.0, seed=3)
        p = ModelParams.init(small(), 0)
        out = infer(s.src, s.tgt, p, t_max=3)
        assert out.final_src.points.shape == (6, 3)
        assert out.stop_step <= rollout_cap(3)
        assert len(out.phase_labels) == out.stop_step


class TestLosses:
    def test_saturated_prediction(self):
        y = np.array([[1, 0], [0, 1]])
        logit = np.log((1 - 1e-9) / 1e-9)
        pred = {"correspondences": Tensor(np.where(y == 1, logit, -logit)),
                "transformed_src": Tensor(np.ones((2, 3))),
                "phase": Tensor(np.array([-40.0, 40.0])),
                "stop": Tensor(40.0)}
        tgt = TrajectoryStep({"correspondences": y, "transformed_src": np.ones((2, 3)),
                              "phase": np.array(1), "stop": np.array(1)})
        assert 0 <= float(step_loss(pred, tgt).data) < 1e-6

    def test_pos_weight(self):
        assert pos_weight(np.array([0, 0, 0, 1])) == pytest.approx(3.0, rel=1e-7)
        assert pos_weight(np.array([0, 0, 0, 1])) < 3.0

    def test_scalar_offset(self):
        y = np.random.default_rng(0).uniform(size=(5, 3))
        assert float(scalar_term(Tensor(y + 0.1), y).data) == pytest.approx(0.01, rel=1e-12)

    def test_mask_term_value(self):
        y = np.array([0.0, 0.0, 0.0, 1.0])
        l = np.array([0.3, -1.0, 2.0, 0.5])
        sig = 1 / (1 + np.exp(-l))
        want = -(3.0 * np.log(sig[3]) + np.log(1 - sig[:3]).sum()) / 4
        assert float(mask_term(Tensor(l), y).data) == pytest.approx(want, rel=1e-7)

    def test_padding_ignored(self):
        y = np.zeros((3, 3))
        p = Tensor(np.zeros((3, 3)))
        p.data[2, :] = 100.0
        tgt = TrajectoryStep({"distances": y})
        m = np.array([True, True, False])
        assert float(step_loss({"distances": p}, tgt, src_mask=m, tgt_mask=m).data) == 0.0

    def test_final_loss_is_step_loss(self):
        tr = make_traj(max_iter=3)
        p = ModelParams.init(small(), 0)
        res = rollout(tr, p, Mode.TRAIN, teacher_prob=1.0)
        a = float(final_loss(res.final, tr).data)
        b = float(step_loss(res.final, tr.output, 1.0, tr.src_mask, tr.tgt_mask).data)
        assert a == b

    def test_gt_identity_targets_are_inputs(self):
        s = gen_synthetic_pair(6, coord_range=1.0, seed=1)
        from icp_reasoner.geometry import RigidTransform
        tr = record_trajectory(s.src, s.src, IcpConfig(), gt=RigidTransform.identity(),
                               gt_optimisation=True)
        assert np.array_equal(tr.output["final_src"], s.src.points)


class TestTraining:
    def test_deterministic(self):
        data = [make_traj(i, n=6, max_iter=3) for i in range(3)]
        cfg = small(train_steps=4, batch_size=2, seed=5)
        _, h1 = train(data, cfg)
        _, h2 = train(data, cfg)
        assert h1.losses == h2.losses

    def test_clipping(self):
        data = [make_traj(i, n=6, max_iter=3) for i in range(2)]
        cfg = small(train_steps=5, grad_clip=0.05, seed=1)
        _, h = train(data, cfg)
        assert all(r.clipped_norm <= 0.05 * (1 + 1e-12) for r in h.records)
        g, norm = clip_by_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
        assert norm == 5.0 and np.allclose(g["a"], [0.6, 0.8])

    def test_loss_decreases(self):
        data = [make_traj(0, n=6, max_iter=3)]
        _, h = train(data, small(16, train_steps=40, learn_rate=3e-3, seed=0))
        assert h.losses[-1] < 0.5 * h.losses[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self):
        data = [make_traj(0, n=6, max_iter=3)]
        p = ModelParams.init(small(), 0)
        p["enc.error.w"].data[:] = np.nan
        with pytest.raises(TrainingError) as exc:
            train(data, small(train_steps=2), params=p)
        assert exc.value.step == 0 and exc.value.probe is not None

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], small())

    def test_teacher_one_ignores_earlier_errors(self):
        tr = make_traj(max_iter=3)
        p = ModelParams.init(small(), 0)
        a = rollout(tr, p, Mode.TRAIN, teacher_prob=1.0)
        q = p.copy()
        # a different decoder changes predictions but not what the encoder sees
        q["dec.transformed_src.b"].data += 1.0
        b = rollout(tr, q, Mode.TRAIN, teacher_prob=1.0)
        for x, y in zip(a.encoder_hints, b.encoder_hints):
            assert all(np.array_equal(x[k], y[k]) for k in HINT_NAMES)


class TestGradCheck:
    def test_full_model(self):
        tr = make_traj(n=8, max_iter=3)
        p = ModelParams.init(small(16), 0, np.random.default_rng(0))
        r = grad_check(p, tr, n_checks=100)
        assert r.checked >= 100 and r.max_rel_error < 1e-4

    def test_linear_path(self):
        tr = make_traj(n=8, max_iter=3)
        p = ModelParams.init(small(16), 0, np.random.default_rng(0))
        r = grad_check(p, tr, probes=["transformed_src"], param_prefixes=["dec.transformed_src"],
                       n_checks=100)
        assert r.checked >= 100 and r.max_rel_error < 1e-7

    def test_zero_params_bias_terms(self):
        tr = make_traj(n=8, max_iter=3)
        p = ModelParams.init(small(16), 0, zero=True)
        biases = [k for k, _ in p if k.endswith(".b")]
        r = grad_check(p, tr, n_checks=100, param_prefixes=biases)
        assert r.checked >= 1 and r.max_rel_error < 1e-4


class TestCheckpoint:
    def test_roundtrip(self):
        p = ModelParams.init(small(), 3, np.random.default_rng(0))
        q, extra = load_checkpoint(save_checkpoint(p, {"variant": "p2p"}))
        assert extra == {"variant": "p2p"} and q.feature_dim == 3
        for k, t in p:
            assert np.array_equal(t.data, q[k].data)

    def test_bad_shape(self):
        p = ModelParams.init(small(), 0)
        text = save_checkpoint(p).decode().replace('"hidden_dim": 8', '"hidden_dim": 9')
        with pytest.raises(CheckpointError):
            load_checkpoint(text)

    def test_not_checkpoint(self):
        with pytest.raises(CheckpointError):
            load_checkpoint(b"{}")


def test_decode_mask_one_per_row():
    probs = np.array([[0.9, 0.95, 0.1], [0.2, 0.3, 0.4], [0.6, 0.1, 0.7]])
    c = decode_mask(probs)
    assert c.index.tolist() == [1, -1, 2]
