import json

import numpy as np
import pytest

from conftest import rel_err
from e2enet import ops
from e2enet.model import (
    ArchConfig, CheckpointError, ModelParams, backbone_forward, backward, build_model, forward,
    fusion_node_forward, load_checkpoint, full_arch, save_checkpoint,
)
from e2enet.ops import ConvSpec, LayerParams
from e2enet.tensor import ShapeError
from e2enet.topology import FusionMask

SMALL = dict(L=3, widths=(4, 8, 8), resample_ratios=((1, 2, 2), (2, 2, 2), (2, 2, 2)), patch=(8, 16, 16))


def small(**kw):
    return ArchConfig(**{**SMALL, **kw})


def image_for(arch, rng):
    return rng.normal(size=(arch.in_channels,) + arch.patch).astype(np.float32)


class TestArchConfig:
    def test_widths_length(self):
        with pytest.raises(ValueError):
            ArchConfig(widths=(8, 16, 32))

    def test_indivisible_patch(self):
        with pytest.raises(ShapeError):
            ArchConfig(patch=(12, 32, 32))

    def test_grid_is_triangular(self):
        for L in (2, 3, 4, 6):
            arch = ArchConfig(L=L, widths=(4,) * L, resample_ratios=((1, 2, 2),) + ((1, 1, 1),) * (L - 1),
                              patch=(4, 4, 4))
            nodes = arch.fusion_nodes()
            assert len(nodes) == L * (L - 1) // 2
            assert all(1 <= i <= L - j for j, i in nodes)

    def test_fusion_channels(self):
        arch = ArchConfig()
        assert arch.node_groups(1, 1) == (0, 8, 16)
        assert arch.node_groups(1, 2) == (8, 16, 32)
        assert arch.node_groups(1, 3) == (16, 32, 32)
        assert arch.fusion_spec(1, 2).cin == 56

    def test_heads(self):
        assert ArchConfig().heads() == [(3, 1), (2, 2), (1, 3)]
        assert small().heads() == [(2, 1), (1, 2)]

    def test_round_trip_dict(self):
        arch = ArchConfig(use_shift=False, S=0.7)
        assert ArchConfig.from_dict(json.loads(json.dumps(arch.to_dict()))) == arch

    def test_full_config(self):
        arch = full_arch(0.7)
        assert arch.widths == (48, 96, 192, 320, 320, 320)
        assert arch.level_shape(6) == (4, 2, 2)


class TestBackbone:
    def test_feature_shapes(self, rng):
        arch = small()
        params = build_model(arch, 0)
        feats = backbone_forward(image_for(arch, rng), params, arch)
        assert [f.shape for f in feats] == [(4, 8, 8, 8), (8, 4, 4, 4), (8, 2, 2, 2)]

    def test_zero_weights_give_zero_features(self, rng):
        arch = small()
        params = build_model(arch, 0)
        for k, v in params.tensors.items():
            if k.startswith("backbone") and not k.endswith("norm_scale"):
                v[...] = 0
        for f in backbone_forward(image_for(arch, rng), params, arch):
            assert not f.any()

    def test_deterministic(self, rng):
        arch = small()
        x = image_for(arch, rng)
        a = backbone_forward(x, build_model(arch, 5), arch)
        b = backbone_forward(x, build_model(arch, 5), arch)
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a, b))

    def test_wrong_image(self, rng):
        arch = small()
        with pytest.raises(ShapeError):
            backbone_forward(rng.normal(size=(1, 8, 12, 12)).astype(np.float32), build_model(arch, 0), arch)


class TestFusion:
    def _grid(self, arch, params, rng):
        feats = backbone_forward(image_for(arch, rng), params, arch)
        return {(0, i): f for i, f in enumerate(feats, start=1)}

    def test_level_one_uses_forward_and_up(self, rng):
        arch = small(use_shift=False)
        params = build_model(arch, 0)
        grid = self._grid(arch, params, rng)
        # perturbing nothing below level 1 exists; changing x(0,2) must change the output
        out = fusion_node_forward(grid, 1, 1, params, arch)
        assert arch.node_groups(1, 1)[0] == 0
        grid2 = dict(grid)
        grid2[(0, 2)] = grid[(0, 2)] + 1.0
        assert not np.allclose(out, fusion_node_forward(grid2, 1, 1, params, arch))

    def test_all_active_equals_unmasked(self, rng):
        arch = small(use_dsff=False, use_shift=False)
        params = build_model(arch, 0)
        grid = self._grid(arch, params, rng)
        out = fusion_node_forward(grid, 1, 2, params, arch)
        bare = ModelParams(params.tensors, {})
        assert out.tobytes() == fusion_node_forward(grid, 1, 2, bare, arch).tobytes()

    def test_single_connection_equals_single_channel_conv(self, rng):
        arch = small(use_shift=False, mask_upsample=False)
        params = build_model(arch, 0)
        grid = self._grid(arch, params, rng)
        j, i = 1, 1
        spec = arch.fusion_spec(j, i)
        active = np.zeros((spec.cin, spec.cout), bool)
        active[5, 2] = True
        params.masks[f"fusion.{j}.{i}"] = FusionMask(j, i, active)
        params.apply_masks()
        # pre-activation of output channel 2 equals the loop-oracle single-channel conv of input 5
        parts = [grid[(0, 1)], ops.transposed_conv3d(grid[(0, 2)], params.layer(f"up.{j}.{i}"), arch.ratio(2))]
        x = np.concatenate(parts)[5].astype(np.float64)
        w = params.tensors[f"fusion.{j}.{i}.weight"][2, 5, 0].astype(np.float64)
        d, h, ww = x.shape
        want = np.zeros_like(x)
        for z in range(d):
            for y in range(h):
                for q in range(ww):
                    for b in range(3):
                        for c in range(3):
                            if 0 <= y + b - 1 < h and 0 <= q + c - 1 < ww:
                                want[z, y, q] += w[b, c] * x[z, y + b - 1, q + c - 1]
        z = ops.conv3d_forward(np.concatenate(parts), params.layer(f"fusion.{j}.{i}"), spec,
                               params.mask_array(f"fusion.{j}.{i}.weight"))
        np.testing.assert_allclose(z[2], want, atol=1e-5)
        assert not z[[0, 1, 3]].any()

    def test_masked_equals_zeroed(self, rng):
        arch = small()
        params = build_model(arch, 3)
        x = image_for(arch, rng)
        a = forward(x, params, arch)
        b = forward(x, ModelParams(params.tensors, {}), arch)  # weights already zeroed by apply_masks
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a, b))


class TestForward:
    def test_output_shapes(self, rng):
        arch = ArchConfig()
        params = build_model(arch, 0)
        logits, tape = forward(image_for(arch, rng), params, arch, keep=True)
        assert logits[0].shape == (3,) + arch.level_shape(1)
        assert [l.shape[1:] for l in logits] == [arch.level_shape(i) for _, i in arch.heads()]
        for (j, i), f in tape.features.items():
            assert f.shape == (arch.width(i),) + arch.level_shape(i)

    def test_zero_heads(self, rng):
        arch = small(num_classes=2)
        params = build_model(arch, 0)
        for k in params.tensors:
            if k.startswith("head"):
                params.tensors[k][...] = 0
        out = forward(image_for(arch, rng), params, arch)
        assert not out[0].any()
        p = np.exp(out[0]) / np.exp(out[0]).sum(axis=0)
        assert np.allclose(p, 0.5)

    def test_dense_ablation_constructible(self, rng):
        arch = ArchConfig(use_dsff=False, use_shift=False, fusion_kernel=(3, 3, 3))
        params = build_model(arch, 0)
        assert all(m.density == 1.0 for m in params.masks.values())
        assert forward(image_for(arch, rng), params, arch)[0].shape == (3, 16, 16, 16)


class TestBackward:
    def test_gradient_reaches_active_kernels(self, rng):
        arch = ArchConfig()
        params = build_model(arch, 0)
        logits, tape = forward(image_for(arch, rng), params, arch, keep=True)
        grads = backward(tape, [rng.normal(size=l.shape).astype(np.float32) for l in logits], params, arch)
        dead = total = 0
        for key, m in params.masks.items():
            g = grads[params.weight_name(key)]
            assert not (g * (~m.active.T)[:, :, None, None, None]).any()
            if m.kind != "fusion":
                continue
            for ci, co in m.pairs():
                total += 1
                dead += not g[co, ci].any()
        assert dead / total < 0.01

    def test_full_model_finite_differences(self, rng):
        arch = ArchConfig(L=3, widths=(3, 4, 4), resample_ratios=((1, 2, 2), (2, 2, 2), (2, 2, 2)),
                          patch=(8, 8, 8), num_classes=2, S=0.5)
        params = build_model(arch, 1)
        params.tensors = {k: v.astype(np.float64) for k, v in params.tensors.items()}
        for k, v in params.tensors.items():
            if k.endswith("bias") or k.endswith("norm_shift"):
                v[...] = rng.normal(scale=0.1, size=v.shape)
        params.apply_masks()
        x = rng.normal(size=(1,) + arch.patch)
        logits, tape = forward(x, params, arch, keep=True)
        probes = [rng.normal(size=l.shape) for l in logits]
        grads = backward(tape, probes, params, arch)

        def f():
            return sum(float((l * p).sum()) for l, p in zip(forward(x, params, arch), probes))

        h = 1e-6
        for name, v in params.tensors.items():
            m = params.mask_array(name)
            flat = np.flatnonzero(v if m is not None else np.ones_like(v))
            picks = rng.choice(flat, size=min(4, flat.size), replace=False)
            num, ana = [], []
            for idx in picks:
                i = np.unravel_index(idx, v.shape)
                old = v[i]
                v[i] = old + h
                fp = f()
                v[i] = old - h
                fm = f()
                v[i] = old
                num.append((fp - fm) / (2 * h))
                ana.append(grads[name][i])
            np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-6, err_msg=name)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arch = small()
        params = build_model(arch, 2)
        save_checkpoint(tmp_path, arch, params, 17)
        arch2, params2, manifest = load_checkpoint(tmp_path)
        assert arch2 == arch and manifest["iteration"] == 17 and manifest["S"] == arch.S
        assert list(params2.tensors) == list(params.tensors)
        for k in params.tensors:
            assert params.tensors[k].tobytes() == params2.tensors[k].tobytes()
        for k in params.masks:
            assert np.array_equal(params.masks[k].active, params2.masks[k].active)

    def test_weights_little_endian_in_order(self, tmp_path):
        arch = small()
        params = build_model(arch, 2)
        save_checkpoint(tmp_path, arch, params, 0)
        raw = (tmp_path / "weights.bin").read_bytes()
        first = next(iter(params.tensors.values()))
        assert raw[:first.nbytes] == first.astype("<f4").tobytes()

    def test_missing_files(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_truncated(self, tmp_path):
        arch = small()
        save_checkpoint(tmp_path, arch, build_model(arch, 0), 0)
        raw = (tmp_path / "weights.bin").read_bytes()
        (tmp_path / "weights.bin").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)
