import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fd_oracle import check_module_grads
from mfef.core_types import ConfigError, ShapeError, make_rng, reset_parameters
from mfef.msfe import (
    MsfeConfig,
    MultiScaleExtraction,
    msfe_backward,
    msfe_forward,
    receptive_field_of_stage,
    stage_plan,
)


def block64(channels, groups, seed=0):
    blk = MultiScaleExtraction(channels, MsfeConfig(groups=groups))
    reset_parameters(blk, make_rng(seed))
    return blk.double()


def test_channel_accounting_64_4():
    blk = MultiScaleExtraction(64, MsfeConfig(groups=4))
    assert blk.exported_widths() == [16, 8, 8, 32]
    assert [(s["c_in"], s["c_out"]) for s in blk.plan] == [(16, 16), (24, 16), (24, 32)]


def test_minimal_width():
    plan = stage_plan(8, MsfeConfig(groups=4))
    assert [(s["forward"], s["export"]) for s in plan[:-1]] == [(1, 1), (1, 1)]
    blk = block64(8, 4)
    assert msfe_forward(blk, torch.randn(2, 8, 4, 4, dtype=torch.float64)).shape == (2, 8, 4, 4)


def test_odd_split_and_remainder():
    blk = MultiScaleExtraction(19, MsfeConfig(groups=3))
    assert blk.widths == [6, 6, 7]
    assert blk.exported_widths() == [6, 3, 10]
    assert sum(blk.exported_widths()) == 19


@pytest.mark.parametrize("channels", [16, 32, 64])
@pytest.mark.parametrize("groups", [2, 3, 4])
def test_channel_preservation(channels, groups):
    blk = block64(channels, groups)
    x = torch.randn(2, channels, 5, 5, dtype=torch.float64)
    assert msfe_forward(blk, x).shape == x.shape


@given(st.integers(2, 6), st.integers(0, 20), st.integers(3, 9), st.integers(3, 9))
def test_shape_preserved_property(groups, extra, h, w):
    c = 2 * groups + extra
    blk = MultiScaleExtraction(c, MsfeConfig(groups=groups)).eval()
    with torch.no_grad():
        assert blk(torch.randn(1, c, h, w)).shape == (1, c, h, w)


def test_first_group_passes_through():
    blk = block64(8, 2)
    x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    assert torch.equal(msfe_forward(blk, x)[:, :4], x[:, :4])


def test_config_errors():
    with pytest.raises(ConfigError):
        MultiScaleExtraction(7, MsfeConfig(groups=4))
    with pytest.raises(ConfigError):
        MsfeConfig(groups=1)
    with pytest.raises(ConfigError):
        MsfeConfig(conv_kernel=4)
    blk = block64(8, 2)
    with pytest.raises(ConfigError):
        blk(torch.randn(2, 8, 2, 2, dtype=torch.float64))
    with pytest.raises(ShapeError):
        blk(torch.randn(2, 6, 4, 4, dtype=torch.float64))


class TestBackward:
    def test_zero_upstream(self):
        blk = block64(8, 2)
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        gx, gp = msfe_backward(blk, x, torch.zeros_like(x))
        assert not gx.any() and not any(g.any() for g in gp.values())

    def test_pass_through_gradient(self):
        blk = block64(8, 2)
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        up = torch.zeros_like(x)
        up[:, :4] = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        gx, _ = msfe_backward(blk, x, up)
        assert torch.equal(gx[:, :4], up[:, :4])
        assert not gx[:, 4:].any()

    def test_shape_mismatch(self):
        blk = block64(8, 2)
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        with pytest.raises(ShapeError):
            msfe_backward(blk, x, torch.zeros(2, 8, 4, 3, dtype=torch.float64))

    @pytest.mark.parametrize("groups", [2, 4])
    def test_finite_differences(self, groups):
        rng = np.random.default_rng(groups)
        blk = block64(8, groups, seed=groups)
        x = torch.from_numpy(rng.normal(size=(2, 8, 4, 4))).requires_grad_(True)
        up = torch.from_numpy(rng.normal(size=(2, 8, 4, 4)))
        tensors = {"input": x, **dict(blk.named_parameters())}
        errs = check_module_grads(lambda: (blk(x) * up).sum(), tensors, rng)
        assert max(errs.values()) < 1e-4, errs

    def test_backward_agrees_with_autograd_of_projection(self):
        blk = block64(8, 2)
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64, requires_grad=True)
        up = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        gx, gp = msfe_backward(blk, x, up)
        (blk(x) * up).sum().backward()
        assert torch.allclose(gx, x.grad)
        for name, p in blk.named_parameters():
            assert torch.allclose(gp[name], p.grad)


class TestReceptiveField:
    def test_values(self):
        cfg = MsfeConfig(groups=4, conv_kernel=3)
        assert receptive_field_of_stage(cfg, 1) == 1
        assert receptive_field_of_stage(cfg, 3) == 5
        assert receptive_field_of_stage(cfg, 4) == 7

    def test_matches_impulse_response(self):
        # an impulse on stage-k input channels spreads over exactly the receptive field
        cfg = MsfeConfig(groups=4, conv_kernel=3)
        blk = MultiScaleExtraction(16, cfg).double().eval()
        x = torch.zeros(1, 16, 15, 15, dtype=torch.float64, requires_grad=True)
        out = blk(x)
        bounds = np.cumsum([0] + blk.exported_widths())
        for k in range(1, 5):
            y = out[0, bounds[k - 1]:bounds[k], 7, 7].sum()
            (g,) = torch.autograd.grad(y, x, retain_graph=True)
            rows = torch.nonzero(g[0].abs().sum(0).sum(1) != 0).flatten()
            extent = 0 if len(rows) == 0 else int(rows.max() - rows.min() + 1)
            assert extent <= receptive_field_of_stage(cfg, k)

    def test_monotone(self):
        for kernel in (3, 5, 7):
            cfg = MsfeConfig(groups=6, conv_kernel=kernel)
            rf = [receptive_field_of_stage(cfg, k) for k in range(1, 7)]
            assert all(b > a for a, b in zip(rf, rf[1:]))

    @pytest.mark.parametrize("k", [0, 5])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            receptive_field_of_stage(MsfeConfig(groups=4), k)
