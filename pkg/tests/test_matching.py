import math

import numpy as np
import pytest
import torch

from sparsematch.encoder import ContextFeatureMap
from sparsematch.matching import (
    MNN_EPS,
    CorrelationVolume,
    FlowField,
    correlation_4d,
    kernel_soft_argmax,
    mutual_nn_filter,
    transfer_keypoints,
    upsample_correlation,
)

from helpers import cosine, rel_error, central_difference


def _feat(values, stride=16):
    return ContextFeatureMap(torch.as_tensor(values, dtype=torch.float64), stride=stride)


class TestCorrelation4d:
    def test_self_correlation_diagonal_is_strict_max(self):
        gen = torch.Generator().manual_seed(0)
        values = torch.randn((6, 3, 3), generator=gen).abs() + 0.1
        vol = correlation_4d(_feat(values), _feat(values)).values
        for i in range(3):
            for j in range(3):
                assert vol[i, j, i, j].item() == pytest.approx(1.0, abs=1e-12)
                flat = vol[:, :, i, j].clone()
                flat[i, j] = -1
                assert vol[i, j, i, j] > flat.max()

    def test_swap_symmetry(self):
        gen = torch.Generator().manual_seed(1)
        a = _feat(torch.rand((4, 2, 3), generator=gen))
        b = _feat(torch.rand((4, 3, 2), generator=gen))
        ab = correlation_4d(a, b).values
        ba = correlation_4d(b, a).values
        assert torch.allclose(ab, ba.permute(2, 3, 0, 1))

    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(2)
        a = torch.randn((5, 4, 4), generator=gen, dtype=torch.float64)
        b = torch.randn((5, 4, 4), generator=gen, dtype=torch.float64)
        vol = correlation_4d(_feat(a), _feat(b)).values
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    for l in range(4):
                        want = max(0.0, cosine(a[:, i, j], b[:, k, l]))
                        assert vol[i, j, k, l].item() == pytest.approx(want, abs=1e-6)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            correlation_4d(_feat(torch.rand(3, 2, 2)), _feat(torch.rand(4, 2, 2)))

    def test_values_in_unit_interval(self):
        gen = torch.Generator().manual_seed(3)
        vol = correlation_4d(
            _feat(torch.randn((8, 5, 5), generator=gen)),
            _feat(torch.randn((8, 5, 5), generator=gen)),
        ).values
        assert vol.min().item() >= 0.0
        assert vol.max().item() <= 1.0 + 1e-12


class TestMutualNNFilter:
    def test_single_entry_kept(self):
        vol = CorrelationVolume(torch.full((1, 1, 1, 1), 0.7, dtype=torch.float64))
        out = mutual_nn_filter(vol).values
        assert out.item() == pytest.approx(0.7, rel=1e-9)

    def test_all_equal_unchanged(self):
        vol = CorrelationVolume(torch.full((2, 2, 3, 3), 0.4))
        out = mutual_nn_filter(vol).values
        assert torch.allclose(out, vol.values, rtol=1e-9)

    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(4)
        values = torch.rand((3, 3, 3, 3), generator=gen, dtype=torch.float64)
        out = mutual_nn_filter(CorrelationVolume(values)).values
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    for l in range(3):
                        v = values[i, j, k, l].item()
                        src_max = values[:, :, k, l].max().item()
                        tgt_max = values[i, j, :, :].max().item()
                        want = v * (v / (src_max + MNN_EPS)) * (v / (tgt_max + MNN_EPS))
                        assert out[i, j, k, l].item() == pytest.approx(want, abs=1e-6)

    def test_negative_input_rejected(self):
        values = torch.rand((2, 2, 2, 2))
        values[0, 0, 0, 0] = -0.1
        with pytest.raises(ValueError):
            mutual_nn_filter(CorrelationVolume(values))

    def test_never_exceeds_input(self):
        gen = torch.Generator().manual_seed(5)
        values = torch.rand((4, 4, 4, 4), generator=gen)
        out = mutual_nn_filter(CorrelationVolume(values)).values
        assert (out <= values + 1e-12).all()

    def test_mutual_argmax_retained(self):
        values = torch.full((3, 3, 3, 3), 0.1, dtype=torch.float64)
        values[1, 2, 0, 1] = 0.9   # strict mutual max of its source and target slices
        out = mutual_nn_filter(CorrelationVolume(values)).values
        assert out[1, 2, 0, 1].item() == pytest.approx(0.9, rel=1e-9)


class TestUpsampleCorrelation:
    def test_constant_stays_constant(self):
        vol = CorrelationVolume(torch.full((2, 2, 2, 2), 0.3), stride=16)
        out = upsample_correlation(vol, 4)
        assert out.values.shape == (8, 8, 8, 8)
        assert torch.allclose(out.values, torch.full((8, 8, 8, 8), 0.3))
        assert out.stride == 4

    def test_corner_preservation(self):
        gen = torch.Generator().manual_seed(6)
        values = torch.rand((3, 3, 3, 3), generator=gen, dtype=torch.float64)
        out = upsample_correlation(CorrelationVolume(values), 4).values
        for i in (0, -1):
            for j in (0, -1):
                for k in (0, -1):
                    for l in (0, -1):
                        assert out[i, j, k, l].item() == pytest.approx(
                            values[i, j, k, l].item(), abs=1e-12
                        )

    def test_linear_ramp_closed_form(self):
        n, factor = 5, 3
        ramp = torch.arange(n, dtype=torch.float64)
        values = ramp.view(1, 1, 1, n).expand(1, 1, 1, n).clone()
        out = upsample_correlation(CorrelationVolume(values), factor).values
        m = n * factor
        for idx in range(m):
            want = idx * (n - 1) / (m - 1)
            assert out[0, 0, 0, idx].item() == pytest.approx(want, abs=1e-6)

    def test_factor_one_is_identity(self):
        gen = torch.Generator().manual_seed(7)
        values = torch.rand((2, 3, 4, 2), generator=gen)
        out = upsample_correlation(CorrelationVolume(values, stride=8), 1)
        assert torch.equal(out.values, values)
        assert out.stride == 8

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            upsample_correlation(CorrelationVolume(torch.rand(2, 2, 2, 2)), 0)


class TestKernelSoftArgmax:
    def test_one_hot_recovery(self):
        n = 6
        for (r0, c0) in [(0, 0), (2, 4), (5, 5)]:
            values = torch.zeros((n, n, 3, 3))
            values[r0, c0] = 1.0
            flow = kernel_soft_argmax(CorrelationVolume(values, stride=4.0), sigma=5.0, tau=0.02)
            want_x, want_y = (c0 + 0.5) * 4.0, (r0 + 0.5) * 4.0
            assert (flow.values[0] - want_x).abs().max().item() < 1e-4 * 4.0
            assert (flow.values[1] - want_y).abs().max().item() < 1e-4 * 4.0

    def test_uniform_volume_matches_expectation_oracle(self):
        n, sigma, tau, v = 5, 5.0, 0.02, 0.6
        values = torch.full((n, n, 2, 2), v, dtype=torch.float64)
        flow = kernel_soft_argmax(CorrelationVolume(values, stride=2.0), sigma=sigma, tau=tau)
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        window = np.exp(-((rows - 0) ** 2 + (cols - 0) ** 2) / (2 * sigma**2))
        logits = v * window / tau
        w = np.exp(logits - logits.max())
        w /= w.sum()
        want_x = ((w * cols).sum() + 0.5) * 2.0
        want_y = ((w * rows).sum() + 0.5) * 2.0
        assert flow.values[0, 0, 0].item() == pytest.approx(want_x, abs=1e-9)
        assert flow.values[1, 1, 1].item() == pytest.approx(want_y, abs=1e-9)

    def test_two_equal_peaks_resolve_to_first(self):
        n = 9
        values = torch.zeros((n, n, 1, 1), dtype=torch.float64)
        values[1, 1] = 1.0
        values[7, 7] = 1.0
        flow = kernel_soft_argmax(CorrelationVolume(values, stride=1.0), sigma=5.0, tau=0.02)
        x, y = flow.values[0, 0, 0].item(), flow.values[1, 0, 0].item()
        # expectation oracle over the gated softmax
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        window = np.exp(-((rows - 1) ** 2 + (cols - 1) ** 2) / (2 * 25.0))
        logits = values[:, :, 0, 0].numpy() * window / 0.02
        w = np.exp(logits - logits.max())
        w /= w.sum()
        assert x == pytest.approx(((w * cols).sum() + 0.5) * 1.0, abs=1e-9)
        assert y == pytest.approx(((w * rows).sum() + 0.5) * 1.0, abs=1e-9)
        # lands on the first peak, far from the midpoint (4.5, 4.5)
        assert math.hypot(x - 1.5, y - 1.5) < 0.1
        assert math.hypot(x - 4.5, y - 4.5) > 3.0

    def test_outputs_inside_grid_hull(self):
        gen = torch.Generator().manual_seed(8)
        for _ in range(10):
            values = torch.rand((4, 6, 3, 3), generator=gen)
            flow = kernel_soft_argmax(CorrelationVolume(values, stride=4.0))
            assert flow.values[0].min().item() >= 0.5 * 4.0 - 1e-9
            assert flow.values[0].max().item() <= 5.5 * 4.0 + 1e-9
            assert flow.values[1].min().item() >= 0.5 * 4.0 - 1e-9
            assert flow.values[1].max().item() <= 3.5 * 4.0 + 1e-9

    def test_tie_break_smallest_linear_index(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            values = torch.from_numpy(rng.random((5, 5, 1, 1)))
            flat = values[:, :, 0, 0].reshape(-1)
            ties = rng.choice(25, size=2, replace=False)
            first = min(ties)
            flat[ties[0]] = 1.5
            flat[ties[1]] = 1.5
            flow = kernel_soft_argmax(CorrelationVolume(values, stride=1.0), sigma=0.5, tau=0.001)
            want_r, want_c = divmod(first, 5)
            assert flow.values[0, 0, 0].item() == pytest.approx(want_c + 0.5, abs=1e-3)
            assert flow.values[1, 0, 0].item() == pytest.approx(want_r + 0.5, abs=1e-3)

    def test_empty_volume_rejected(self):
        with pytest.raises(ValueError):
            kernel_soft_argmax(CorrelationVolume(torch.zeros((0, 2, 2, 2))))

    def test_invalid_sigma_tau(self):
        vol = CorrelationVolume(torch.rand(2, 2, 2, 2))
        with pytest.raises(ValueError):
            kernel_soft_argmax(vol, sigma=0.0)
        with pytest.raises(ValueError):
            kernel_soft_argmax(vol, tau=-1.0)


class TestTransferKeypoints:
    def _identity_flow(self, n=8, stride=4.0):
        centers = (torch.arange(n, dtype=torch.float64) + 0.5) * stride
        x = centers.view(1, n).expand(n, n)
        y = centers.view(n, 1).expand(n, n)
        return FlowField(torch.stack([x, y]), stride=stride)

    def test_identity_flow_recovers_points(self):
        flow = self._identity_flow()
        pts = [(10.2, 7.8), (3.3, 29.9), (16.0, 16.0)]
        preds, flags = transfer_keypoints(flow, pts)
        assert all(flags)
        for (px, py), (x, y) in zip(preds, pts):
            assert abs(px - x) <= 2.0 and abs(py - y) <= 2.0

    def test_constant_offset_flow(self):
        flow = self._identity_flow()
        shifted = FlowField(flow.values.clone(), stride=flow.stride)
        shifted.values[0] += 5.0
        pts = [(12.7, 9.1), (20.0, 22.5)]
        base, _ = transfer_keypoints(flow, pts)
        moved, _ = transfer_keypoints(shifted, pts)
        for (bx, by), (mx, my) in zip(base, moved):
            assert mx == pytest.approx(bx + 5.0, abs=1e-9)
            assert my == pytest.approx(by, abs=1e-9)

    def test_matches_manual_bilinear_oracle(self):
        gen = torch.Generator().manual_seed(10)
        values = torch.rand((2, 5, 6), generator=gen, dtype=torch.float64) * 30
        flow = FlowField(values, stride=4.0)
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.uniform(2.0, 22.0)
            y = rng.uniform(2.0, 18.0)
            (pred,), _ = transfer_keypoints(flow, [(x, y)])
            u, v = x / 4.0 - 0.5, y / 4.0 - 0.5
            c0, r0 = int(np.floor(u)), int(np.floor(v))
            fc, fr = u - c0, v - r0
            for ch, got in enumerate(pred):
                want = (
                    values[ch, r0, c0] * (1 - fc) * (1 - fr)
                    + values[ch, r0, c0 + 1] * fc * (1 - fr)
                    + values[ch, r0 + 1, c0] * (1 - fc) * fr
                    + values[ch, r0 + 1, c0 + 1] * fc * fr
                )
                assert got == pytest.approx(want.item(), abs=1e-6)

    def test_out_of_extent_flagged(self):
        flow = self._identity_flow()
        _, flags = transfer_keypoints(flow, [(5.0, 5.0), (100.0, 5.0), (-1.0, 2.0)])
        assert flags == [True, False, False]

    def test_linear_in_flow_field(self):
        gen = torch.Generator().manual_seed(12)
        a = torch.rand((2, 4, 4), generator=gen, dtype=torch.float64)
        b = torch.rand((2, 4, 4), generator=gen, dtype=torch.float64)
        pts = [(3.7, 9.2), (8.8, 2.1)]
        pa, _ = transfer_keypoints(FlowField(a, 4.0), pts)
        pb, _ = transfer_keypoints(FlowField(b, 4.0), pts)
        pc, _ = transfer_keypoints(FlowField(2.0 * a + 0.5 * b, 4.0), pts)
        for (ax, ay), (bx, by), (cx, cy) in zip(pa, pb, pc):
            assert cx == pytest.approx(2.0 * ax + 0.5 * bx, abs=1e-9)
            assert cy == pytest.approx(2.0 * ay + 0.5 * by, abs=1e-9)


class TestEndToEndGradients:
    def test_matching_chain_matches_finite_differences(self):
        from sparsematch.matching import _correlation, _mutual_nn, _soft_argmax, _upsample

        gen = torch.Generator().manual_seed(13)
        mask = torch.zeros((6, 6), dtype=torch.float64)
        mask[1, 2] = 1.0
        mask[4, 4] = 1.0
        target = torch.rand((2, 6, 6), generator=gen, dtype=torch.float64) * 30

        def loss_from(fa, fb):
            corr = _correlation(fa, fb)
            corr = _mutual_nn(corr)
            corr = _upsample(corr, 2)
            flow = _soft_argmax(corr, 2.0, 0.05, 8.0)
            diff = flow - target
            dist = torch.sqrt((diff * diff).sum(dim=0))
            return (dist * mask).sum() / mask.sum()

        for trial in range(3):
            fa = torch.randn((4, 3, 3), generator=gen, dtype=torch.float64)
            fb = torch.randn((4, 3, 3), generator=gen, dtype=torch.float64)
            fa_g = fa.clone().requires_grad_(True)
            fb_g = fb.clone().requires_grad_(True)
            loss_from(fa_g, fb_g).backward()
            fd_a = central_difference(lambda: loss_from(fa, fb), fa)
            fd_b = central_difference(lambda: loss_from(fa, fb), fb)
            assert rel_error(fa_g.grad, fd_a) < 1e-3, f"trial {trial} source grad"
            assert rel_error(fb_g.grad, fd_b) < 1e-3, f"trial {trial} target grad"
