import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2enet.metrics import (
    MetricsReport, PTConfig, count_params, flops_conv, flops_fc, layer_flops, mdice, model_flops,
    nonzero_scan, pt_score, report,
)
from e2enet.model import ArchConfig, ModelParams, build_model
from e2enet.ops import ConvSpec
from e2enet.topology import FusionMask

POOL_FILE = Path(__file__).resolve().parents[1] / "configs" / "pool_amos_ct.json"
EXTREMA = PTConfig(90.5, 7.64, 391.03)


class TestDice:
    def test_perfect(self, rng):
        y = rng.integers(0, 3, size=(4, 4, 4))
        assert mdice(y, y, 3)[1] == 1.0

    def test_disagreement(self):
        per, _ = mdice(np.array([1, 0, 1]), np.array([0, 1, 0]), 2)
        assert per == [0.0, 0.0]

    def test_hand_enumeration(self):
        per, mean = mdice(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
        assert per == pytest.approx([2 / 3, 4 / 5])
        assert mean == pytest.approx(11 / 15)

    def test_absent_class_scores_one(self):
        per, _ = mdice(np.zeros(5, int), np.zeros(5, int), 3)
        assert per == [1.0, 1.0, 1.0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mdice(np.zeros(3), np.zeros(4), 2)

    @given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_symmetric(self, a, r):
        b = [r.randint(0, 2) for _ in a]
        assert mdice(np.array(a), np.array(b), 3) == mdice(np.array(b), np.array(a), 3)


class TestParams:
    def test_hand_count(self):
        active = np.array([[True, False], [False, True]])
        params = ModelParams({"backbone.1.0.weight": np.arange(1, 11, dtype=np.float32).reshape(1, 1, 1, 1, 10),
                              "fusion.1.1.weight": np.ones((2, 2, 1, 3, 3), np.float32),
                              "fusion.1.1.bias": np.ones(2, np.float32)},
                             {"fusion.1.1": FusionMask(1, 1, active)})
        assert count_params(params) == 10 + 2 * 9 + 2

    def test_dense_equals_stored(self):
        arch = ArchConfig(use_dsff=False)
        params = build_model(arch, 0)
        assert count_params(params) == sum(v.size for v in params.tensors.values())

    def test_matches_nonzero_scan(self, rng):
        params = build_model(ArchConfig(), 0)
        for v in params.tensors.values():
            v += rng.uniform(0.5, 1.0, size=v.shape).astype(np.float32)  # every stored value non-zero
        assert count_params(params) == nonzero_scan(params)

    def test_sparser_is_smaller(self):
        counts = [count_params(build_model(ArchConfig(S=S), 0)) for S in (0.5, 0.7, 0.9)]
        assert counts[0] > counts[1] > counts[2]


class TestFlops:
    def test_conv_dense(self):
        assert flops_conv(ConvSpec(4, 2), 0.0, (2, 2, 2)) == 1168

    def test_conv_sparse(self):
        assert flops_conv(ConvSpec(4, 2), 0.5, (2, 2, 2)) == 592

    def test_conv_monotone(self):
        vals = [flops_conv(ConvSpec(8, 8), S, (4, 4, 4)) for S in np.linspace(0, 0.95, 20)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("cin,cout,S,want", [(10, 5, 0.0, 105), (1, 1, 0.0, 3), (10, 5, 0.9, 15)])
    def test_fc(self, cin, cout, S, want):
        assert flops_fc(cin, cout, S) == want

    def test_sparsity_range(self):
        with pytest.raises(ValueError):
            flops_conv(ConvSpec(1, 1), 1.0, (1, 1, 1))

    def test_layer_spreadsheet(self):
        arch = ArchConfig(L=2, widths=(2, 4), resample_ratios=((1, 1, 1), (1, 2, 2)), patch=(2, 4, 4),
                          num_classes=2, S=0.5)
        # every conv / transposed conv, written out by hand: (2*K*Cin*(1-S) + 1) * Cout * voxels
        sheet = {
            "backbone.1.0": (2 * 9 * 1 + 1) * 2 * 32,
            "backbone.1.1": (2 * 9 * 2 + 1) * 2 * 32,
            "backbone.2.0": (2 * 9 * 2 + 1) * 4 * 8,
            "backbone.2.1": (2 * 9 * 4 + 1) * 4 * 8,
            "up.1.1": (2 * 4 * 4 * 0.5 + 1) * 4 * 32,
            "fusion.1.1": (2 * 9 * 6 * 0.5 + 1) * 2 * 32,
            "head.1.1": (2 * 1 * 2 + 1) * 2 * 32,
        }
        got = dict(layer_flops(arch))
        assert got == {k: int(v) for k, v in sheet.items()}
        assert model_flops(arch) == sum(sheet.values())

    def test_dense_at_least_masked(self):
        assert model_flops(ArchConfig(use_dsff=False)) >= model_flops(ArchConfig())

    def test_zero_sparsity_equals_dense_ablation(self):
        assert model_flops(ArchConfig(), S=0.0) == model_flops(ArchConfig(use_dsff=False))

    def test_depth_linearity(self):
        arch = ArchConfig(L=3, widths=(4, 4, 4), resample_ratios=((1, 1, 1),) * 3, patch=(4, 4, 4), S=0.5)
        assert model_flops(arch, patch=(8, 4, 4)) == 2 * model_flops(arch)


class TestPT:
    @pytest.mark.parametrize("row,want", [((89.9, 7.64, 492.29), 1.89), ((90.5, 30.76, 1067.89), 1.31),
                                          ((78.3, 93.02, 391.03), 1.41), ((86.4, 62.83, 1562.99), 1.14)])
    def test_table_rows(self, row, want):
        assert abs(pt_score(*row, EXTREMA) - want) <= 0.01

    def test_invalid(self):
        with pytest.raises(ValueError):
            pt_score(90, 0, 1, EXTREMA)
        with pytest.raises(ValueError):
            PTConfig(0, 1, 1)

    @given(st.floats(1, 100), st.floats(0.1, 100), st.floats(1, 5000), st.floats(0.01, 10))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, m, p, f, d):
        base = pt_score(m, p, f, EXTREMA)
        assert pt_score(m + d, p, f, EXTREMA) > base
        assert pt_score(m, p + d, f, EXTREMA) < base
        assert pt_score(m, p, f + d, EXTREMA) < base


class TestReport:
    def test_self_only_pool(self):
        arch = ArchConfig()
        rep = report(build_model(arch, 0), arch, [{"self": True}], [0.9, 0.8, 0.7])
        assert rep.pt_score == pytest.approx(2.0)

    def test_single_entry_pool(self):
        arch = ArchConfig()
        rep = report(build_model(arch, 0), arch, [(80.0, 1.0, 2.0)])
        assert rep.entries[0]["pt_score"] == pytest.approx(2.0)
        assert rep.pt_score is None

    def test_empty_pool(self):
        arch = ArchConfig()
        with pytest.raises(ValueError):
            report(build_model(arch, 0), arch, [])

    def test_json_round_trip(self):
        arch = ArchConfig()
        rep = report(build_model(arch, 0), arch, [(80.0, 1.0, 2.0), {"self": True}], [0.91, 0.83, 0.77])
        doc = json.loads(rep.dumps())
        assert set(doc) >= {"per_class_dice", "mdice", "params_M", "flops_G", "pt_score", "pool", "alpha1", "alpha2"}
        back = MetricsReport.from_json(doc)
        assert back.to_json() == doc
        assert doc["mdice"] == pytest.approx(rep.mdice, rel=1e-6)
        assert doc["pool"]["params_min_M"] == pytest.approx(min(1.0, rep.params_M), rel=1e-6)

    def test_shipped_pool_reproduces_printed_column(self):
        doc = json.loads(POOL_FILE.read_text())
        arch = ArchConfig()
        rep = report(build_model(arch, 0), arch, doc["entries"])
        assert rep.pool == {"mdice_max": 90.5, "params_min_M": 7.64, "flops_min_G": 391.03}
        for got, e in zip(rep.entries, doc["entries"]):
            assert abs(got["pt_score"] - e["printed_pt"]) <= 0.01, e["name"]
