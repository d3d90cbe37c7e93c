import json

import numpy as np
import pytest

from ftn.backbone import GridSpec, init_model, load_checkpoint, save_checkpoint
from ftn.config import preset
from ftn.configurer import ConfigurerSpec, Mask
from ftn.errors import CapacityError, ConfigError, NumericalError, UsageError
from ftn.numcore import LossKind, RngStream
from ftn.protocol import (
    ACCURACY,
    MSE,
    PerfMatrix,
    build_tasks,
    compute_metrics,
    decompose_overlap_recall,
    eval_recovered,
    eval_stored,
    load_records,
    mask_overlap,
    prior_final_mean,
    run_block_sequential,
    save_record,
    score,
)

from oracles import brute_metrics


def quick(experiment="synthetic-clf", variant="fixed-mask", **kw):
    base = dict(D=4, k=4, L=2, d_inner=3, steps_per_epoch=15, batch_train=32, batch_recfg=32, batch_eval=256,
                support_size=32, seeds=(0,), fisher_batches=2, fisher_batch_size=16)
    base.update(kw)
    return preset(experiment, "desk", variant=variant, **base)


class TestMetrics:
    def test_no_degradation_example(self):
        m = compute_metrics(PerfMatrix.from_rows([[0.9], [0.9, 0.8], [0.9, 0.8, 0.7]]))
        assert m.acc == pytest.approx(0.8, abs=1e-15) and m.fm == 0.0 and m.bwt == 0.0

    def test_forgetting_example(self):
        m = compute_metrics(PerfMatrix.from_rows([[1.0], [0.5, 1.0], [0.2, 0.4, 1.0]]))
        assert m.acc == pytest.approx(1.6 / 3, abs=1e-15)
        assert m.fm == pytest.approx(0.7, abs=1e-15)
        assert m.bwt == pytest.approx(-0.7, abs=1e-15)

    def test_single_task(self):
        m = compute_metrics(PerfMatrix.from_rows([[0.42]]))
        assert (m.acc, m.fm, m.bwt, m.single_task) == (0.42, 0.0, 0.0, True)

    @pytest.mark.parametrize("kind", [ACCURACY, MSE])
    def test_brute_force(self, kind, rng):
        for _ in range(50):
            n = int(rng.integers(1, 7))
            rows = [list(rng.uniform(0, 1, i + 1)) for i in range(n)]
            m = compute_metrics(PerfMatrix.from_rows(rows, kind))
            assert np.allclose((m.acc, m.fm, m.bwt), brute_metrics(rows), rtol=0, atol=1e-12)

    def test_csv(self):
        csv = PerfMatrix.from_rows([[1.0], [0.5, 0.25]]).to_csv()
        assert csv == "stage,task0,task1\n0,1.0,\n1,0.5,0.25\n"


class TestDecomposition:
    def test_equal_matrices_zero_recall(self):
        M = PerfMatrix.from_rows([[0.9], [0.6, 0.9], [0.5, 0.6, 0.9]])
        overlap, recall = decompose_overlap_recall(M, M, 0.9)
        assert recall == 0.0 and overlap == pytest.approx(0.35)

    @pytest.mark.parametrize("kind", [ACCURACY, MSE])
    def test_sums_to_total_gap(self, kind, rng):
        for _ in range(20):
            S = PerfMatrix.from_rows([list(rng.uniform(size=i + 1)) for i in range(3)], kind)
            R = PerfMatrix.from_rows([list(rng.uniform(size=i + 1)) for i in range(3)], kind)
            ref = rng.uniform()
            o, r = decompose_overlap_recall(S, R, ref)
            total = (ref - prior_final_mean(R)) if kind == ACCURACY else (prior_final_mean(R) - ref)
            assert o + r == pytest.approx(total, abs=1e-14)

    def test_needs_two_tasks(self):
        M = PerfMatrix.from_rows([[0.5]])
        with pytest.raises(UsageError):
            decompose_overlap_recall(M, M, 0.5)


class TestOverlap:
    def test_counting(self):
        a = np.zeros(16)
        a[[0, 1, 2, 3]] = 1
        b = np.zeros(16)
        b[[3, 4, 5, 6]] = 1
        assert mask_overlap(a, a) == 1.0
        assert mask_overlap(a, np.roll(a, 8)) == 0.0
        assert mask_overlap(a, b) == 0.25

    def test_zero_mask(self):
        with pytest.raises(UsageError):
            mask_overlap(np.zeros(4), np.ones(4))


class TestScoring:
    def test_zero_mask_predicts_class_zero(self, rng):
        grid = GridSpec(D=2, k=2, d_in=3, d_out=4)
        m = init_model(grid, RngStream(0))
        X = rng.normal(size=(20, 3))
        Y = np.array([0, 1, 2, 3] * 5)
        row = eval_stored(m, [np.zeros(4)], [(X, Y)])
        assert row == [0.25]

    def test_score_kinds(self):
        assert score(np.array([[0.0, 1.0], [2.0, 2.0]]), np.array([1, 1]), ACCURACY) == 0.5
        assert score(np.array([[1.0], [3.0]]), np.array([0.0, 1.0]), MSE) == 2.5

    def test_missing_mask(self):
        grid = GridSpec(D=2, k=2, d_in=3, d_out=2)
        with pytest.raises(UsageError):
            eval_stored(init_model(grid, RngStream(0)), [], [(np.zeros((1, 3)), np.zeros(1, int))])


class TestRun:
    def test_single_task_populates_diagonals(self):
        rec = run_block_sequential(quick(variant="ftn-fast", n_tasks=1), 0)
        assert np.isfinite(rec.stored.R[0, 0]) and np.isfinite(rec.recovered.R[0, 0])
        assert rec.metrics()["stored"]["single_task"]

    def test_fixed_mask_columns_constant(self):
        rec = run_block_sequential(quick(), 0)
        for j in range(3):
            col = rec.stored.R[j:, j]
            assert np.all(col == col[0])
        m = compute_metrics(rec.stored)
        assert m.fm == 0.0 and m.bwt == 0.0

    def test_determinism(self):
        cfg = quick(variant="kwta-only", n_tasks=2)
        a, b = run_block_sequential(cfg, 3), run_block_sequential(cfg, 3)
        assert a.to_json(timings=False) == b.to_json(timings=False)
        c = run_block_sequential(cfg, 4)
        assert c.to_json(timings=False) != a.to_json(timings=False)

    def test_static_variant_recovered_equals_stored(self):
        rec = run_block_sequential(quick(variant="no-mask", n_tasks=2), 0)
        assert np.array_equal(rec.stored.R, rec.recovered.R, equal_nan=True)
        assert rec.stored_masks[0] == rec.stored_masks[1]

    def test_regression_run(self):
        rec = run_block_sequential(quick("synthetic-reg", "ftn-slow", n_tasks=2), 0)
        assert rec.stored.kind == MSE and np.all(rec.stored.R[np.tril_indices(2)] >= 0)

    def test_capacity_checked_up_front(self):
        with pytest.raises(CapacityError):
            run_block_sequential(quick(D=2, k=2, n_tasks=3), 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss(self):
        with pytest.raises(NumericalError):
            run_block_sequential(quick(lr=1e300, steps_per_epoch=5), 0)

    def test_reloaded_checkpoint_reproduces_stored_row(self, tmp_path):
        cfg = quick(variant="ftn-slow", n_tasks=2)
        rec, model, _ = run_block_sequential(cfg, 0, keep_model=True)
        save_checkpoint(model, tmp_path / "m.ftn")
        back = load_checkpoint(tmp_path / "m.ftn", k=cfg.k)
        grid = rec.grid()
        tasks = build_tasks(cfg, 0)
        masks = [Mask.from_text(t, grid) for t in rec.stored_masks]
        row = eval_stored(back, masks, [t.scoring for t in tasks])
        assert row == rec.stored.R[-1].tolist()

    def test_planted_recovery_matches_stored(self, rng):
        grid = GridSpec(D=8, k=8, d_in=2, d_out=1, L=2, d_inner=3, dropout_p=0.0)
        m = init_model(grid, RngStream(0))
        planted = np.arange(8, 16)
        m.w_out[:] = 0.0
        m.w_out[0, planted] = 1.0
        m.b_head[planted] = 2.0
        from ftn.backbone import neuron_outputs

        X = rng.uniform(-1, 1, (256, 2))
        Y = neuron_outputs(m, X)[:, planted].sum(axis=1)
        gates = np.zeros(64)
        gates[planted] = 1.0
        spec = ConfigurerSpec("kwta-only", reconfig_S=5, reconfig_lr=0.5, k=8)
        stored = eval_stored(m, [gates], [(X, Y)], MSE)
        rec, masks = eval_recovered(m, spec, [(X, Y[:, None])], [(X, Y)], LossKind.MSE, MSE)
        assert rec == stored and np.array_equal(masks[0].gates, gates)


class TestRecordIO:
    def test_json_round_trip(self, tmp_path):
        rec = run_block_sequential(quick(variant="ftn-fast", n_tasks=2), 1)
        d = save_record(rec, tmp_path)
        assert (d / "stored.csv").exists() and (d / "recovered.csv").exists()
        back = load_records(tmp_path)
        assert len(back) == 1
        assert back[0].to_json() == rec.to_json()
        assert json.loads(rec.to_json())["metrics"]["stored"]["kind"] == ACCURACY

    def test_support_excluded_from_scoring_mnist_layout(self, rng):
        from ftn.tasks import MnistData

        imgs = rng.uniform(size=(300, 784))
        data = MnistData(imgs, rng.integers(0, 10, 300), imgs[:300].copy(), rng.integers(0, 10, 300))
        cfg = quick("mnist-shuffled", n_tasks=2, support_size=40)
        tasks = build_tasks(cfg, 0, mnist=data)
        for t in tasks:
            assert len(t.support[0]) == 40 and len(t.scoring[0]) == 260
            sup = {r.tobytes() for r in t.support[0]}
            assert not sup & {r.tobytes() for r in t.scoring[0]}

    def test_support_size_bound(self, rng):
        from ftn.tasks import MnistData

        data = MnistData(rng.uniform(size=(5, 784)), np.zeros(5, int), rng.uniform(size=(5, 784)), np.zeros(5, int))
        with pytest.raises(ConfigError):
            build_tasks(quick("permuted-mnist", support_size=5), 0, mnist=data)
