import itertools

import numpy as np
import pytest
import torch

from anchordet.backbone import GridConfig
from anchordet.checkpoint import (
    CheckpointError,
    load_aam_checkpoint,
    load_checkpoint,
    save_aam_checkpoint,
    save_checkpoint,
)
from anchordet.decoder import DecoderConfig, DecoderOutput, Detector
from anchordet.scene import ClassSpec, SceneConfig, generate_scene
from anchordet.training import (
    TrainConfig,
    build_cost_matrix,
    continue_with_refinement,
    hungarian_match,
    prepare_example,
    set_loss,
    train_aam,
    train_detector,
    train_stage,
    write_training_log,
)

EXTENT = (-20.0, 20.0, -20.0, 20.0)


def brute_force_min_cost(cost: np.ndarray) -> float:
    g, m = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(m), g):
        best = min(best, sum(cost[i, perm[i]] for i in range(g)))
    return best


class TestHungarian:
    def test_diagonal_case(self):
        res = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert res.pairs == ((0, 0), (1, 1))
        assert res.total_cost == 2.0

    def test_antidiagonal_case(self):
        res = hungarian_match(np.array([[4.0, 1.0], [2.0, 3.0]]))
        assert res.pairs == ((0, 1), (1, 0))
        assert res.total_cost == 3.0

    def test_single_row_argmin(self):
        cost = np.array([[3.0, 0.5, 2.0, 1.0]])
        res = hungarian_match(cost)
        assert res.pairs == ((0, 1),)
        assert set(res.unmatched_queries) == {0, 2, 3}

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = int(rng.integers(1, 5))
            m = int(rng.integers(g, 7))
            cost = rng.uniform(0, 10, size=(g, m))
            assert hungarian_match(cost).total_cost == pytest.approx(
                brute_force_min_cost(cost), abs=1e-12
            )

    def test_more_gt_than_queries_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.zeros((3, 2)))


class TestCostMatrix:
    def test_perfect_prediction_zero_cost(self):
        gt = np.array([[1.0, 2, 0, 2, 4, 1.5, 0, 1, 0, 0]])
        logits = np.array([[50.0, -50.0]])  # prob of class 0 ~ 1
        cost = build_cost_matrix(gt, np.array([0]), gt.copy(), logits)
        assert cost[0, 0] == pytest.approx(0.0, abs=1e-8)

    def test_identical_predictions_equal_columns(self):
        rng = np.random.default_rng(1)
        gt = rng.normal(size=(2, 10))
        pred = np.tile(rng.normal(size=(1, 10)), (3, 1))
        logits = np.tile(rng.normal(size=(1, 3)), (3, 1))
        cost = build_cost_matrix(gt, np.array([0, 1]), pred, logits)
        assert np.allclose(cost[:, 0], cost[:, 1])
        assert np.allclose(cost[:, 0], cost[:, 2])

    def test_matching_on_cost_equals_brute_force(self):
        rng = np.random.default_rng(2)
        gt = rng.normal(size=(3, 10))
        pred = rng.normal(size=(5, 10))
        logits = rng.normal(size=(5, 3))
        cost = build_cost_matrix(gt, np.array([0, 1, 0]), pred, logits)
        assert hungarian_match(cost).total_cost == pytest.approx(
            brute_force_min_cost(cost), abs=1e-12
        )


def synthetic_output(m=5, k=2, c=1, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=dtype)

    anchors = r(1, m, 3)
    return DecoderOutput(
        layer_tokens=[r(1, m, 8) for _ in range(k)],
        layer_anchors=[anchors for _ in range(k)],
        layer_encodings=[r(1, m, 8) for _ in range(k)],
        layer_reg=[r(1, m, 10) for _ in range(k)],
        layer_logits=[r(1, m, c + 1) for _ in range(k)],
        aux_reg=r(1, m, 10),
        aux_logits=r(1, m, c + 1),
        cross_attention=[],
        anchor_history=[anchors],
    )


class TestSetLoss:
    def gt(self, n=2, seed=3):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(n, 10)), np.zeros(n, dtype=np.int64)

    def test_zero_gt_reduces_to_no_object(self):
        out = synthetic_output()
        cfg = TrainConfig()
        br = set_loss(out, np.zeros((0, 10)), np.zeros(0, dtype=np.int64), cfg, 1)
        assert all(float(r) == 0.0 for r in br.regression)
        assert all(float(c) > 0.0 for c in br.classification)

    def test_perfect_prediction_loss_near_zero(self):
        m, c = 3, 1
        out = synthetic_output(m=m, c=c)
        # make query 0 predict the GT box exactly at every stage
        for k in range(len(out.layer_reg)):
            out.layer_reg[k][0, 0, :] = 0.0
            out.layer_logits[k][0, 0] = torch.tensor([60.0, -60.0])
            out.layer_logits[k][0, 1:] = torch.tensor([-60.0, 60.0])
        out.aux_reg[0, 0, :] = 0.0
        out.aux_logits[0, 0] = torch.tensor([60.0, -60.0])
        out.aux_logits[0, 1:] = torch.tensor([-60.0, 60.0])
        anchor = out.layer_anchors[0][0, 0].numpy()
        gt_vec = np.concatenate([anchor, np.zeros(7)])[None, :]
        br = set_loss(out, gt_vec, np.array([0]), TrainConfig(), c)
        assert float(br.total) < 1e-6

    def test_lambda_scaling_linearity(self):
        # scaling both weights scales the cost uniformly: same matching,
        # so every per-stage term is unchanged and the total doubles
        out = synthetic_output()
        gt_vec, gt_cls = self.gt()
        a = set_loss(out, gt_vec, gt_cls, TrainConfig(), 1)
        b = set_loss(out, gt_vec, gt_cls,
                     TrainConfig(lambda_reg=2.0, lambda_cls=2.0), 1)
        for ra, rb in zip(a.regression, b.regression):
            assert float(rb) == pytest.approx(float(ra), rel=1e-12)
        assert float(b.total) == pytest.approx(2 * float(a.total), rel=1e-9)

    def test_gt_permutation_invariance(self):
        out = synthetic_output(m=6)
        gt_vec, gt_cls = self.gt(n=3)
        t1 = float(set_loss(out, gt_vec, gt_cls, TrainConfig(), 1).total)
        perm = [2, 0, 1]
        t2 = float(set_loss(out, gt_vec[perm], gt_cls[perm], TrainConfig(), 1).total)
        assert abs(t1 - t2) < 1e-9

    def test_query_permutation_invariance(self):
        out = synthetic_output(m=6)
        gt_vec, gt_cls = self.gt(n=3)
        t1 = float(set_loss(out, gt_vec, gt_cls, TrainConfig(), 1).total)
        perm = torch.tensor([5, 3, 0, 1, 4, 2])
        out2 = synthetic_output(m=6)
        for k in range(len(out2.layer_reg)):
            out2.layer_reg[k] = out2.layer_reg[k][:, perm]
            out2.layer_logits[k] = out2.layer_logits[k][:, perm]
            out2.layer_anchors[k] = out2.layer_anchors[k][:, perm]
        out2.aux_reg = out2.aux_reg[:, perm]
        out2.aux_logits = out2.aux_logits[:, perm]
        out2.anchor_history = [a[:, perm] for a in out2.anchor_history]
        t2 = float(set_loss(out2, gt_vec, gt_cls, TrainConfig(), 1).total)
        assert abs(t1 - t2) < 1e-9

    def test_per_layer_match_independence(self):
        out = synthetic_output(m=6, k=3)
        gt_vec, gt_cls = self.gt(n=2)
        base = set_loss(out, gt_vec, gt_cls, TrainConfig(), 1)
        out.layer_reg[1] = out.layer_reg[1] + 100.0  # perturb only layer 1
        after = set_loss(out, gt_vec, gt_cls, TrainConfig(), 1)
        # entry 0 is the aux stage; layer indices shift by one
        for stage in (0, 1, 3):
            assert float(base.regression[stage]) == pytest.approx(
                float(after.regression[stage]), rel=1e-12
            )
            assert float(base.classification[stage]) == pytest.approx(
                float(after.classification[stage]), rel=1e-12
            )
        assert float(after.regression[2]) != pytest.approx(
            float(base.regression[2]), rel=1e-6
        )


def tiny_setup(seed=0):
    scene_cfg = SceneConfig(
        extent=EXTENT, n_objects=(1, 2), clutter_points=60,
        classes=(ClassSpec(2.0, 4.0, 1.5),), surface_density=3.0,
    )
    scenes = [generate_scene(scene_cfg, seed * 1000 + i) for i in range(10)]
    grid = GridConfig(extent=EXTENT, cell_size=5.0, d=16)
    dec = DecoderConfig(k_layers=2, d=16, heads=2, m_queries=8)
    return scenes, grid, dec


class TestTrainingLoop:
    def test_loss_decreases(self):
        scenes, grid, dec = tiny_setup()
        cfg = TrainConfig(epochs_stage1=8, lr=1e-3, batch_size=5, seed=0)
        model, log = train_detector(scenes, grid, dec, cfg)
        assert log[-1]["loss_total"] < log[0]["loss_total"]

    def test_zero_learning_rate_leaves_parameters(self):
        scenes, grid, dec = tiny_setup()
        cfg = TrainConfig(epochs_stage1=2, lr=0.0, batch_size=5, seed=0)
        torch.manual_seed(0)
        model = Detector(grid, dec, seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        examples = [prepare_example(s, grid, dec.m_queries) for s in scenes[:4]]
        train_stage(model, examples, cfg, epochs=2, refine_layers=frozenset(),
                    stage_name="test")
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_stage2_freezes_aam(self):
        scenes, grid, dec = tiny_setup()
        cfg = TrainConfig(epochs_stage1=1, epochs_stage2=2, lr=1e-3,
                          batch_size=5, seed=1)
        model, _ = train_detector(scenes, grid, dec, cfg)
        aam_before = {k: v.clone() for k, v in model.aam.state_dict().items()}
        other_before = model.head.reg.weight.clone()
        continue_with_refinement(model, scenes, cfg, frozenset({1}))
        for k, v in model.aam.state_dict().items():
            assert torch.equal(aam_before[k], v)
        assert not torch.equal(other_before, model.head.reg.weight)

    def test_divergence_detected(self):
        scenes, grid, dec = tiny_setup()
        model = Detector(grid, dec, seed=0)
        with torch.no_grad():
            model.head.cls.bias.fill_(float("nan"))
        examples = [prepare_example(s, grid, dec.m_queries) for s in scenes[:2]]
        for ex in examples:  # empty GT: only the classification term remains
            ex.gt_vectors = np.zeros((0, 10))
            ex.gt_classes = np.zeros(0, dtype=np.int64)
        with pytest.raises(RuntimeError, match="diverged"):
            train_stage(model, examples, TrainConfig(), epochs=1,
                        refine_layers=frozenset(), stage_name="test")

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=1e-2, lr_decay_factor=10.0, lr_decay_period=3)
        assert cfg.lr_at(0) == pytest.approx(1e-2)
        assert cfg.lr_at(2) == pytest.approx(1e-2)
        assert cfg.lr_at(3) == pytest.approx(1e-3)
        assert cfg.lr_at(6) == pytest.approx(1e-4)


class TestAAMTraining:
    def test_zero_init_objective_is_raw_delta_magnitude(self):
        scenes, grid, dec = tiny_setup()
        model = Detector(grid, dec, seed=0)
        with torch.no_grad():
            for p in model.aam.parameters():
                p.zero_()
        from anchordet.training import collect_tokens

        tokens = collect_tokens(model, scenes[:2])
        with torch.no_grad():
            reg, logits = model.head(tokens)
            reg_aam, logits_aam = model.head(model.aam(tokens))
        assert torch.equal(reg, reg_aam)
        expected = reg[:, :3].abs().sum() / reg.numel()
        loss = (reg_aam - torch.cat(
            [torch.zeros_like(reg[:, :3]), reg[:, 3:]], dim=1
        )).abs().mean()
        assert float(loss) == pytest.approx(float(expected), rel=1e-6)

    def test_aam_training_reduces_deltas(self):
        scenes, grid, dec = tiny_setup()
        cfg = TrainConfig(epochs_stage1=4, epochs_aam=30, lr=1e-3,
                          batch_size=5, seed=2)
        model, _ = train_detector(scenes, grid, dec, cfg)
        from anchordet.training import collect_tokens

        tokens = collect_tokens(model, scenes)
        with torch.no_grad():
            reg_before, _ = model.head(model.aam(tokens))
        rows = train_aam(model, scenes, cfg)
        with torch.no_grad():
            reg_after, _ = model.head(model.aam(tokens))
        assert rows[-1]["loss_total"] < rows[0]["loss_total"]
        assert float(reg_after[:, :3].abs().mean()) < float(
            reg_before[:, :3].abs().mean()
        )

    def test_aam_training_moves_only_aam(self):
        scenes, grid, dec = tiny_setup()
        cfg = TrainConfig(epochs_stage1=1, epochs_aam=2, lr=1e-3, batch_size=5)
        model, _ = train_detector(scenes, grid, dec, cfg)
        head_before = model.head.reg.weight.clone()
        aam_before = model.aam.fc1.weight.clone()
        train_aam(model, scenes[:3], cfg)
        assert torch.equal(head_before, model.head.reg.weight)
        assert not torch.equal(aam_before, model.aam.fc1.weight)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        _, grid, dec = tiny_setup()
        model = Detector(grid, dec, seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        for (ka, va), (kb, vb) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert ka == kb
            assert torch.equal(va, vb), ka

    def test_header_validated(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("GARBAGE\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_aam_round_trip(self, tmp_path):
        _, grid, dec = tiny_setup()
        model = Detector(grid, dec, seed=6)
        with torch.no_grad():
            model.aam.fc1.weight.normal_()
        path = tmp_path / "aam.ckpt"
        save_aam_checkpoint(path, model)
        other = Detector(grid, dec, seed=7)
        load_aam_checkpoint(path, other)
        assert torch.equal(other.aam.fc1.weight, model.aam.fc1.weight)

    def test_aam_dimension_mismatch(self, tmp_path):
        _, grid, dec = tiny_setup()
        model = Detector(grid, dec, seed=6)
        path = tmp_path / "aam.ckpt"
        save_aam_checkpoint(path, model)
        grid32 = GridConfig(extent=EXTENT, cell_size=5.0, d=32)
        dec32 = DecoderConfig(k_layers=2, d=32, heads=2, m_queries=8)
        other = Detector(grid32, dec32)
        with pytest.raises(CheckpointError):
            load_aam_checkpoint(path, other)


def test_training_log_format(tmp_path):
    rows = [{"epoch": 0, "lr": 1e-4, "loss_total": 2.5, "loss_reg": 2.0,
             "loss_cls": 0.5, "stage": "stage1"}]
    path = tmp_path / "log.csv"
    write_training_log(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,lr,loss_total,loss_reg,loss_cls,stage"
    assert lines[1].startswith("0,0.0001,2.5,2,0.5,stage1")
