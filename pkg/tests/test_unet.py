import torch

from hadmst.structures import ConditionBundle
from hadmst.unet import ConditionalUNet, ConditionFuser, fuse_condition, timestep_embedding


def _fuser():
    torch.manual_seed(0)
    return ConditionFuser(psi_channels=6, phi_channels=5, cond_channels=7, t_dim=8)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(torch.tensor([1, 500, 1000]), 9)
    assert e.shape == (3, 9)
    assert e.abs().max() <= 1.0
    assert not torch.equal(e[0], e[1])


def test_absent_phi_equals_learned_null():
    f = _fuser()
    psi = torch.randn(2, 6, 4, 4)
    a = fuse_condition(f, psi, None, 3)
    b = fuse_condition(f, psi, f.null_map(2, (4, 4)), 3)
    torch.testing.assert_close(a.fused, b.fused, rtol=0, atol=0)
    assert a.phi_s is None


def test_fused_depends_on_t():
    f = _fuser()
    psi, phi = torch.randn(1, 6, 4, 4), torch.randn(1, 5, 2, 2)
    a = fuse_condition(f, psi, phi, 1)
    b = fuse_condition(f, psi, phi, 1000)
    assert not torch.allclose(a.fused, b.fused)


def test_fused_shape_on_requested_grid():
    f = _fuser()
    c = fuse_condition(f, torch.randn(3, 6, 4, 4), torch.randn(3, 5, 7, 7), 5, grid=(16, 16))
    assert isinstance(c, ConditionBundle)
    assert c.fused.shape == (3, 7, 16, 16)
    assert c.t_embed.shape == (3, 8)


def test_unet_output_shape_and_finite():
    torch.manual_seed(0)
    net = ConditionalUNet(channels=3, image_channels=4, base_width=8, cond_channels=7, t_dim=8)
    f = _fuser()
    cond = fuse_condition(f, torch.randn(2, 6, 4, 4), None, torch.tensor([3, 9]), grid=(8, 8))
    x = torch.randn(2, 3, 32, 32)
    out = net(x, cond, torch.rand(2, 4, 32, 32))
    assert out.shape == x.shape
    assert torch.isfinite(out).all()
    assert net(x, cond).shape == x.shape


def test_condition_projection_commutes_with_resize():
    # ResBlock projects the condition before resizing; check the two orders agree
    torch.manual_seed(1)
    proj = torch.nn.Conv2d(5, 3, 1)
    c = torch.randn(2, 5, 4, 4)
    up = torch.nn.functional.interpolate
    a = proj(up(c, size=(16, 16), mode="bilinear", align_corners=False))
    b = up(proj(c), size=(16, 16), mode="bilinear", align_corners=False)
    torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-6)
