import numpy as np
import pytest

from nrpn import nn
from nrpn.config import NetConfig
from nrpn.gradcheck import tiny_problem
from nrpn.losses import relative_error
from nrpn.training import rpn_loss
from oracles import central_diff, naive_conv2d


class TestConv2d:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = nn.conv2d_forward(x, w, np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_ones(self):
        out = nn.conv2d_forward(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        assert out.shape == (1, 5, 5)
        assert np.all(out[0, 1:4, 1:4] == 9)
        assert out[0, 0, 0] == 4 and out[0, 0, 2] == 6

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 2, 5), (1, 0, 1)])
    def test_matches_nested_loops(self, stride, pad, k):
        rng = np.random.default_rng(stride * 7 + pad + k)
        x = rng.normal(size=(3, 9, 8))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = nn.conv2d_forward(x, w, b, stride, pad)
        ref = naive_conv2d(x, w, b, stride, pad)
        assert got.shape == ref.shape
        assert np.max(relative_error(got, ref, floor=1e-12)) < 1e-6

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            nn.conv2d_forward(np.ones((2, 5, 5)), np.ones((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError):
            nn.conv2d_forward(np.ones((1, 2, 2)), np.ones((1, 1, 5, 5)), np.zeros(1))
        with pytest.raises(ValueError):
            nn.conv2d_backward(np.ones((1, 9, 9)), np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), 1, 1)

    def test_backward_zero(self):
        x = np.ones((2, 6, 6))
        w = np.ones((3, 2, 3, 3))
        gx, gw, gb = nn.conv2d_backward(np.zeros((3, 6, 6)), x, w, 1, 1)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_backward_scalar_closed_form(self):
        # y = w*x + b on a single pixel: dy/dx = w, dy/dw = x, dy/db = 1
        gx, gw, gb = nn.conv2d_backward(np.array([[[2.0]]]), np.array([[[3.0]]]), np.array([[[[5.0]]]]))
        assert gx.item() == 10.0 and gw.item() == 6.0 and gb.item() == 2.0

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_backward_finite_differences(self, stride, pad):
        rng = np.random.default_rng(stride)
        x = rng.normal(size=(2, 7, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        gout = rng.normal(size=nn.conv2d_forward(x, w, b, stride, pad).shape)

        def f_x(v):
            return np.sum(gout * nn.conv2d_forward(v, w, b, stride, pad))

        def f_w(v):
            return np.sum(gout * nn.conv2d_forward(x, v, b, stride, pad))

        def f_b(v):
            return np.sum(gout * nn.conv2d_forward(x, w, v, stride, pad))

        gx, gw, gb = nn.conv2d_backward(gout, x, w, stride, pad)
        for analytic, f, at in ((gx, f_x, x), (gw, f_w, w), (gb, f_b, b)):
            numeric = central_diff(f, at, 1e-4)
            assert np.max(relative_error(analytic, numeric)) < 1e-3


class TestActivations:
    def test_relu(self):
        assert nn.relu_forward(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]

    def test_sigmoid(self):
        assert nn.sigmoid_forward(0.0) == 0.5
        y = nn.sigmoid_forward(np.array([-800.0, 800.0]))
        assert np.all((y > 0) & (y < 1))

    def test_gradients(self):
        x = np.random.default_rng(3).uniform(-4, 4, 50)
        x = x[np.abs(x) > 1e-2]  # keep relu away from its kink
        s = nn.sigmoid_forward(x)
        num = central_diff(lambda v: np.sum(nn.sigmoid_forward(v)), x, 1e-5)
        assert np.max(relative_error(nn.sigmoid_backward(np.ones_like(x), s), num)) < 1e-5
        num = central_diff(lambda v: np.sum(nn.relu_forward(v)), x, 1e-5)
        assert np.max(relative_error(nn.relu_backward(np.ones_like(x), x), num)) < 1e-5


def small_cfg():
    return NetConfig(in_channels=1, channels=[4, 4, 4], kernels=[3, 3, 3], head_channels=6)


class TestNetworks:
    def test_shapes(self):
        net = nn.ProposalNet(small_cfg(), 6, True, np.random.default_rng(0))
        out = nn.forward_rpn(net, np.random.default_rng(1).random((1, 64, 64)))
        assert out.score_map.shape == (6, 8, 8)
        assert out.reg_map.shape == (24, 8, 8)
        assert out.scores().shape == (384,)
        assert out.deltas().shape == (384, 4)

    def test_nrpn_has_no_regression(self):
        net = nn.ProposalNet(small_cfg(), 6, False, np.random.default_rng(0))
        out = nn.forward_nrpn(net, np.zeros((1, 64, 64)))
        assert out.reg_map is None
        assert "reg.w" not in net.params
        with pytest.raises(ValueError):
            nn.forward_rpn(net, np.zeros((1, 64, 64)))

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(seed))
            s = net.forward(rng.random((1, 32, 32)) * 10).scores()
            assert np.all((s > 0) & (s < 1))

    def test_rejects_indivisible(self):
        net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(0))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 60, 64)))

    def test_anchor_order_matches_map_layout(self):
        net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(0))
        out = net.forward(np.random.default_rng(1).random((1, 32, 32)))
        flat = out.scores()
        a, h, w = out.score_map.shape
        for i in range(h):
            for j in range(w):
                for k in range(a):
                    assert flat[(i * w + j) * a + k] == out.score_map[k, i, j]
                    assert np.array_equal(out.deltas()[(i * w + j) * a + k], out.reg_map[4 * k : 4 * k + 4, i, j])

    def test_separate_buffers(self):
        rng = np.random.default_rng(0)
        rpn = nn.ProposalNet(small_cfg(), 3, True, rng)
        nrpn = nn.ProposalNet(small_cfg(), 3, False, rng)
        for k in nrpn.params:
            assert not np.shares_memory(rpn.params[k], nrpn.params[k])
            assert not np.shares_memory(rpn.grads[k], nrpn.grads[k])
        before = {k: v.copy() for k, v in rpn.params.items()}
        for g in nrpn.grads.values():
            g += 1.0
        nn.SGD(nrpn, 0.1, 0.9).step()
        for k in rpn.params:
            assert np.array_equal(before[k], rpn.params[k])


def end_to_end_max_error(seed=0, overlap=True, step=1e-4):
    cfg, net, image, anchors, gts, labels = tiny_problem(seed)

    def loss_only():
        return rpn_loss(net, net.forward(image), anchors, labels, gts, cfg, overlap)[0].value

    net.zero_grad()
    tl, gl, gr = rpn_loss(net, net.forward(image), anchors, labels, gts, cfg, overlap)
    net.backward(gl, gr)
    worst, count = 0.0, 0
    for name, p in net.params.items():
        original = p.copy()

        def perturbed(v, p=p):
            p[...] = v
            return loss_only()

        numeric = central_diff(perturbed, original.copy(), step)
        p[...] = original
        worst = max(worst, float(np.max(relative_error(net.grads[name], numeric))))
        count += p.size
    return worst, count


@pytest.mark.parametrize("overlap", [True, False])
def test_end_to_end_gradient(overlap):
    worst, count = end_to_end_max_error(0, overlap)
    assert count > 100
    assert worst < 1e-3


class TestSGD:
    def test_zero_grad_no_change(self):
        net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(0))
        before = {k: v.copy() for k, v in net.params.items()}
        nn.sgd_step(net, 0.1, 0.9)
        for k in before:
            assert np.array_equal(before[k], net.params[k])

    def test_plain_step(self):
        net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(0))
        w0 = net.params["cls.b"].copy()
        net.grads["cls.b"][:] = 2.0
        nn.sgd_step(net, 0.1, 0.0)
        np.testing.assert_allclose(net.params["cls.b"], w0 - 0.2)
        assert not net.grads["cls.b"].any()

    def test_quadratic_bowl(self):
        net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(0))
        target = np.array([1.0, -2.0, 0.5])
        opt = nn.SGD(net, 0.1, 0.5)
        for _ in range(200):
            net.grads["cls.b"][:] = net.params["cls.b"] - target  # grad of 0.5*||w - target||^2
            for k in net.grads:
                if k != "cls.b":
                    net.grads[k][:] = 0.0
            opt.step()
        assert np.max(np.abs(net.params["cls.b"] - target)) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    net = nn.ProposalNet(small_cfg(), 3, True, np.random.default_rng(0))
    path = tmp_path / "rpn.ckpt"
    nn.save_checkpoint(path, net, {"config_hash": "abc", "seed": 1})
    back, meta = nn.load_checkpoint(path)
    assert meta == {"config_hash": "abc", "seed": 1}
    assert back.with_regression and back.num_anchors == 3
    for k in net.params:
        assert net.params[k].tobytes() == back.params[k].tobytes()
    nn.save_checkpoint(tmp_path / "again.ckpt", back, meta)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"hello")
    with pytest.raises(ValueError):
        nn.load_checkpoint(p)
