import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrseq.data import SynthSpec, generate_synthetic
from attrseq.errors import ContractError
from attrseq.evaluation import (MemberRuntime, compute_report, evaluate_members,
                                format_report_table, instance_metrics, map_cls, vote)
from attrseq.model import ModelConfig, init_params
from attrseq.numerics import Rng


class TestVote:
    def test_six_of_ten_carries(self):
        members = [np.array([1])] * 6 + [np.array([0])] * 4
        assert vote(members).tolist() == [1]

    def test_five_of_ten_is_rejected(self):
        members = [np.array([1])] * 5 + [np.array([0])] * 5
        assert vote(members).tolist() == [0]

    def test_single_member_passthrough(self):
        member = np.array([1, 0, 1, 1])
        np.testing.assert_array_equal(vote([member]), member)

    def test_empty_member_list_rejected(self):
        with pytest.raises(ContractError):
            vote([])

    def test_symmetric_under_member_permutation(self):
        rng = Rng(0)
        members = [rng.integers(0, 2, 6) for _ in range(7)]
        voted = vote(members)
        perm = Rng(1).permutation(7)
        np.testing.assert_array_equal(vote([members[i] for i in perm]), voted)

    @given(st.integers(0, 500))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_member_flips(self, seed):
        rng = Rng(seed)
        members = [rng.integers(0, 2, 5) for _ in range(2 * int(rng.integers(1, 5)))]
        before = vote(members)
        i = int(rng.integers(0, len(members)))
        j = int(rng.integers(0, 5))
        members[i] = members[i].copy()
        members[i][j] = 1
        after = vote(members)
        assert np.all(after >= before)


class TestMapCls:
    def test_perfect_predictions(self):
        gts = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
        mean_ap, per_attr = map_cls(gts, gts)
        assert mean_ap == 1.0
        assert per_attr == [1.0, 1.0]

    def test_hand_counted_fixture(self):
        # 3 positives (2 predicted), 2 negatives (1 predicted correctly)
        gts = np.array([[1], [1], [1], [0], [0]])
        preds = np.array([[1], [1], [0], [0], [1]])
        mean_ap, per_attr = map_cls(preds, gts)
        expected = 0.5 * (2.0 / 3.0 + 1.0 / 2.0)  # 7/12
        assert abs(mean_ap - expected) <= 1e-12
        assert abs(per_attr[0] - 7.0 / 12.0) <= 1e-12

    def test_constant_positive_predictor_on_balanced_attribute(self):
        gts = np.array([[1], [1], [0], [0]])
        preds = np.ones((4, 1), dtype=int)
        mean_ap, _ = map_cls(preds, gts)
        assert mean_ap == 0.5

    def test_complement_predictor_flips_ap(self):
        rng = Rng(2)
        gts = rng.integers(0, 2, (30, 4))
        gts[0] = [1, 1, 1, 1]
        gts[1] = [0, 0, 0, 0]  # both classes present everywhere
        preds = rng.integers(0, 2, (30, 4))
        _, ap = map_cls(preds, gts)
        _, ap_flip = map_cls(1 - preds, gts)
        for a, b in zip(ap, ap_flip):
            assert abs((a + b) - 1.0) <= 1e-12

    def test_single_class_attribute_excluded_with_warning(self, caplog):
        gts = np.array([[1, 1], [1, 0]])  # attribute 0 has no negatives
        preds = np.array([[1, 1], [0, 0]])
        with caplog.at_level(logging.WARNING):
            mean_ap, per_attr = map_cls(preds, gts)
        assert per_attr[0] is None
        assert per_attr[1] == 0.5 * (1.0 + 0.0) / 1.0 or per_attr[1] is not None
        assert any("excluded" in r.message for r in caplog.records)

    def test_all_single_class_rejected(self):
        gts = np.ones((3, 2), dtype=int)
        with pytest.raises(ContractError):
            map_cls(gts, gts)

    def test_misaligned_shapes_rejected(self):
        with pytest.raises(ContractError):
            map_cls(np.zeros((2, 3)), np.zeros((2, 4)))


class TestInstanceMetrics:
    def test_hand_counted_fixture(self):
        # img1: gt {A,B}, pred {A}; img2: gt {C}, pred {B,C}
        gts = np.array([[1, 1, 0], [0, 0, 1]])
        preds = np.array([[1, 0, 0], [0, 1, 1]])
        mprc, mrcl, f1 = instance_metrics(preds, gts)
        assert abs(mprc - 0.75) <= 1e-12
        assert abs(mrcl - 0.75) <= 1e-12
        assert abs(f1 - 0.75) <= 1e-12

    def test_perfect_predictions(self):
        gts = np.array([[1, 0, 1], [0, 1, 0]])
        assert instance_metrics(gts, gts) == (1.0, 1.0, 1.0)

    def test_empty_prediction_conventions(self):
        gts = np.array([[1, 1]])
        preds = np.array([[0, 0]])
        mprc, mrcl, f1 = instance_metrics(preds, gts)
        assert mprc == 1.0 and mrcl == 0.0 and f1 == 0.0

    def test_empty_ground_truth_convention(self):
        gts = np.array([[0, 0]])
        preds = np.array([[1, 0]])
        mprc, mrcl, _ = instance_metrics(preds, gts)
        assert mprc == 0.0 and mrcl == 1.0

    def test_matches_brute_force_recount(self):
        rng = Rng(3)
        for _ in range(20):
            n, k = int(rng.integers(2, 30)), int(rng.integers(1, 8))
            gts = rng.integers(0, 2, (n, k))
            preds = rng.integers(0, 2, (n, k))
            mprc, mrcl, f1 = instance_metrics(preds, gts)
            precs, recs = [], []
            for i in range(n):
                inter = sum(1 for j in range(k) if preds[i, j] == 1 and gts[i, j] == 1)
                np_pred = int(preds[i].sum())
                np_gt = int(gts[i].sum())
                precs.append(1.0 if np_pred == 0 else inter / np_pred)
                recs.append(1.0 if np_gt == 0 else inter / np_gt)
            assert abs(mprc - np.mean(precs)) <= 1e-12
            assert abs(mrcl - np.mean(recs)) <= 1e-12
            denom = np.mean(precs) + np.mean(recs)
            expected_f1 = 0.0 if denom == 0 else 2 * np.mean(precs) * np.mean(recs) / denom
            assert abs(f1 - expected_f1) <= 1e-12


def make_runtimes(n_members, config, pool, seeds):
    runtimes = []
    for s in seeds[:n_members]:
        params = init_params(config, Rng(s))
        runtimes.append(MemberRuntime(params, config, pool_samples=pool))
    return runtimes


class TestEvaluateMembers:
    def setup_method(self):
        spec = SynthSpec(n_attr=4, m=2, d_region=6, d_global=6, n_train=10, n_test=6,
                         noise_sigma=0.2, correlation_strength=0.4)
        self.train, self.test, self.vocab, _ = generate_synthetic(spec, Rng(4))
        self.config = ModelConfig(n_attr=4, d_region=6, d=8, m=2, embed_dim=4,
                                  attn_width=4, k=1, dropout_rate=0.0)

    def test_identical_members_vote_like_one(self):
        rt = make_runtimes(1, self.config, self.train, [7])[0]
        clones = [rt, rt, rt]
        report = evaluate_members(clones, ["a", "b", "c"], self.test)
        single = evaluate_members([rt], ["a"], self.test)
        assert report.voted.values() == single.voted.values()
        np.testing.assert_array_equal(report.voted_predictions, single.voted_predictions)

    def test_member_permutation_leaves_vote_unchanged(self):
        runtimes = make_runtimes(3, self.config, self.train, [1, 2, 3])
        a = evaluate_members(runtimes, ["x", "y", "z"], self.test)
        b = evaluate_members(runtimes[::-1], ["z", "y", "x"], self.test)
        np.testing.assert_array_equal(a.voted_predictions, b.voted_predictions)

    def test_member_average_is_mean_of_member_metrics(self):
        runtimes = make_runtimes(3, self.config, self.train, [1, 2, 3])
        report = evaluate_members(runtimes, ["x", "y", "z"], self.test)
        for key in ("mAP_cls", "F1_ins"):
            vals = [getattr(m, key) for m in report.members]
            assert report.member_average[key] == pytest.approx(np.mean(vals))

    def test_context_model_requires_pool(self):
        params = init_params(self.config, Rng(9))
        with pytest.raises(ContractError):
            MemberRuntime(params, self.config, pool_samples=None)

    def test_report_table_layout(self):
        report_rows = [("member-00", (0.8567, 0.8603, 0.8534, 0.8542)),
                       ("ensemble", (0.9, 0.91, 0.92, 0.93))]
        table = format_report_table(report_rows)
        lines = table.strip().split("\n")
        assert lines[0].split() == ["mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins"]
        assert "85.67" in lines[1] and "member-00" in lines[1]
        assert "90.00" in lines[2]


class TestComputeReport:
    def test_values_in_unit_interval(self):
        rng = Rng(5)
        gts = rng.integers(0, 2, (40, 5))
        gts[0] = 1
        gts[1] = 0
        preds = rng.integers(0, 2, (40, 5))
        report = compute_report(preds, gts)
        for v in report.values():
            assert 0.0 <= v <= 1.0
        d = report.to_dict()
        assert set(d) == {"mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins", "per_attribute_ap"}
