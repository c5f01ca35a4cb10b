import numpy as np
import pytest

from strikelab import nn


def finite_difference(f, x, h=1e-4):
    """Central-difference gradient oracle."""
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def random_loss(rng, out_dim):
    kind = rng.integers(0, 3)
    if out_dim >= 6:
        cards = (3, out_dim - 3)
    else:
        cards = (out_dim,)
    target = tuple(int(rng.integers(0, c)) for c in cards)
    if kind == 0:
        return nn.CrossEntropyToward(cards, target)
    if kind == 1:
        return nn.NegativeQ(cards, target)
    return nn.MaxOutput(cards)


class TestForward:
    def test_zero_net_zero_output(self):
        net = nn.init_net(4, 3, hidden_dim=8, seed=0)
        for p in net.params().values():
            p[:] = 0.0
        trace = nn.forward(net, np.ones(4))
        assert np.all(trace.output == 0.0)
        assert np.all(trace.hidden == 0.0)

    def test_relu_gates_negative_preactivation(self):
        net = nn.MlpNet(
            w1=np.array([[1.0]]), b1=np.zeros(1),
            w2=np.array([[1.0]]), b2=np.zeros(1),
            w3=np.array([[1.0]]), b3=np.array([0.25]),
            activation="relu",
        )
        trace = nn.forward(net, np.array([-3.0]))
        assert trace.h1[0] == 0.0
        assert trace.output[0] == 0.25

    def test_matches_straight_line_matrix_oracle(self):
        rng = np.random.default_rng(0)
        for activation in ("relu", "tanh"):
            net = nn.init_net(10, 5, hidden_dim=16, activation=activation, seed=1)
            x = rng.normal(size=10)
            trace = nn.forward(net, x)
            act = (lambda z: np.maximum(z, 0)) if activation == "relu" else np.tanh
            h1 = act(x @ net.w1 + net.b1)
            h2 = act(h1 @ net.w2 + net.b2)
            out = h2 @ net.w3 + net.b3
            np.testing.assert_allclose(trace.output, out, rtol=1e-6)
            np.testing.assert_allclose(trace.hidden, h2, rtol=1e-6)

    def test_hidden_is_second_layer_post_activation(self):
        net = nn.init_net(6, 2, hidden_dim=4, seed=3)
        trace = nn.forward(net, np.ones(6))
        assert trace.hidden.shape == (4,)
        assert np.array_equal(trace.hidden, trace.h2)

    def test_batched_matches_single(self):
        net = nn.init_net(7, 4, hidden_dim=8, seed=4)
        xs = np.random.default_rng(5).normal(size=(6, 7))
        batch = nn.forward(net, xs)
        for i in range(6):
            single = nn.forward(net, xs[i])
            # BLAS may reorder sums between batched and single calls.
            np.testing.assert_allclose(batch.output[i], single.output,
                                       rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch(self):
        net = nn.init_net(4, 2, hidden_dim=4, seed=0)
        with pytest.raises(ValueError, match="dim"):
            nn.forward(net, np.ones(5))

    def test_forward_deterministic(self):
        net = nn.init_net(9, 3, hidden_dim=8, seed=6)
        x = np.random.default_rng(7).normal(size=9)
        a = nn.forward(net, x)
        b = nn.forward(net, x)
        assert a.output.tobytes() == b.output.tobytes()

    def test_linear_net_is_affine(self):
        # With weights small enough that every tanh stays in its linear
        # regime we can't get exact affineness, so instead test with an
        # explicitly linear configuration: ReLU disabled by keeping all
        # pre-activations positive is fragile; use the identity trick of
        # computing f on a net with tanh replaced out.  Simplest honest
        # check: the output layer is affine in h2.
        net = nn.init_net(5, 3, hidden_dim=6, seed=8)
        rng = np.random.default_rng(9)
        h2a, h2b = rng.normal(size=6), rng.normal(size=6)
        a, b = 0.3, -1.7
        lhs = (a * h2a + b * h2b) @ net.w3 + net.b3
        rhs = a * (h2a @ net.w3 + net.b3) + b * (h2b @ net.w3 + net.b3) + (1 - a - b) * net.b3
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestInputGradient:
    def test_zero_net_zero_gradient(self):
        net = nn.init_net(5, 4, hidden_dim=8, seed=0)
        for p in net.params().values():
            p[:] = 0.0
        g = nn.input_gradient(net, np.ones(5), nn.NegativeQ((4,), (1,)))
        assert np.all(g == 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(100)
        checked = 0
        for trial in range(120):
            activation = "tanh" if trial % 2 else "relu"
            in_dim = int(rng.integers(3, 12))
            out_dim = int(rng.integers(2, 9))
            net = nn.init_net(in_dim, out_dim, hidden_dim=12,
                              activation=activation, seed=int(rng.integers(1 << 30)))
            x = rng.normal(size=in_dim)
            loss = random_loss(rng, out_dim)
            g = nn.input_gradient(net, x, loss)

            def scalar(v, loss=loss, net=net):
                out = nn.forward(net, v).output
                return nn.loss_output_gradient(out, loss)[0]

            if activation == "relu":
                trace = nn.forward(net, x)
                if min(np.abs(trace.z1).min(), np.abs(trace.z2).min()) < 1e-3:
                    continue  # too close to a kink for central differences
            if isinstance(loss, nn.MaxOutput):
                out = nn.forward(net, x).output
                segs = nn.segment_bounds(loss.cardinalities)
                margins = []
                for a, b in segs:
                    seg = np.sort(out[a:b])
                    if len(seg) > 1:
                        margins.append(seg[-1] - seg[-2])
                if margins and min(margins) < 1e-3:
                    continue  # argmax about to switch; subgradient point
            fd = finite_difference(scalar, x)
            denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(g)))
            assert np.max(np.abs(fd - g) / denom) <= 1e-4
            checked += 1
        assert checked >= 80

    def test_one_layer_linear_closed_form(self):
        # Squared-error through an affine map: grad = 2 W^T (Wx + b - y).
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        x = rng.normal(size=4)
        y = rng.normal(size=3)

        def f(v):
            r = v @ w + b - y
            return float(r @ r)

        fd = finite_difference(f, x, h=1e-5)
        closed = 2 * w @ (x @ w + b - y)
        np.testing.assert_allclose(fd, closed, rtol=1e-5, atol=1e-7)

    def test_undefined_target_index_raises(self):
        net = nn.init_net(4, 6, hidden_dim=4, seed=0)
        with pytest.raises(ValueError, match="out of range"):
            nn.input_gradient(net, np.ones(4), nn.CrossEntropyToward((3, 3), (0, 5)))

    def test_cross_entropy_descends_toward_target(self):
        # One FGSM-style step along -grad should raise the target's logit
        # relative to the others.
        net = nn.init_net(6, 4, hidden_dim=16, seed=12)
        x = np.random.default_rng(13).normal(size=6)
        loss = nn.CrossEntropyToward((4,), (2,))
        g = nn.input_gradient(net, x, loss)
        before = nn.loss_output_gradient(nn.forward(net, x).output, loss)[0]
        after = nn.loss_output_gradient(
            nn.forward(net, x - 0.01 * np.sign(g)).output, loss
        )[0]
        assert after < before


class TestParamBackward:
    def test_param_grads_match_finite_differences(self):
        rng = np.random.default_rng(42)
        net = nn.init_net(5, 3, hidden_dim=6, activation="tanh", seed=2)
        x = rng.normal(size=5)
        loss = nn.CrossEntropyToward((3,), (1,))
        trace = nn.forward(net, x)
        _, dout = nn.loss_output_gradient(trace.output, loss)
        grads, _ = nn.backward(net, trace, dout)

        for name, p in net.params().items():
            flat = p.reshape(-1)
            for k in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + 1e-5
                up = nn.loss_output_gradient(nn.forward(net, x).output, loss)[0]
                flat[k] = orig - 1e-5
                dn = nn.loss_output_gradient(nn.forward(net, x).output, loss)[0]
                flat[k] = orig
                fd = (up - dn) / 2e-5
                assert abs(fd - grads[name].reshape(-1)[k]) <= 1e-6 * max(1.0, abs(fd))


class TestAdam:
    def test_zero_grads_leave_params(self):
        net = nn.init_net(3, 2, hidden_dim=4, seed=0)
        before = {k: v.copy() for k, v in net.params().items()}
        state = nn.init_adam(net, 1e-3)
        zeros = {k: np.zeros_like(v) for k, v in net.params().items()}
        nn.adam_step(net, zeros, state)
        assert state.step == 1
        for k, v in net.params().items():
            np.testing.assert_array_equal(v, before[k])

    def test_clipping_halves_norm_20_grads(self):
        net = nn.init_net(2, 2, hidden_dim=2, seed=0)
        grads = {k: np.zeros_like(v) for k, v in net.params().items()}
        # Construct a gradient with global norm exactly 20.
        grads["w1"][0, 0] = 20.0
        assert nn.global_grad_norm(grads) == 20.0
        seen = {}
        original = nn.adam_step

        # Track the effective gradient via the first-moment update.
        state = nn.init_adam(net, 1e-3, clip_norm=10.0)
        original(net, grads, state)
        # m = 0.1 * g_eff, so g_eff = m / 0.1.
        assert abs(state.m["w1"][0, 0] / 0.1 - 10.0) < 1e-12

    def test_three_steps_match_hand_rolled_recurrence(self):
        # Single scalar parameter, constant gradient.
        net = nn.MlpNet(
            w1=np.array([[1.0]]), b1=np.zeros(1),
            w2=np.array([[1.0]]), b2=np.zeros(1),
            w3=np.array([[1.0]]), b3=np.zeros(1),
            activation="relu",
        )
        lr = 0.1
        state = nn.init_adam(net, lr, clip_norm=1e9)
        g = 0.5
        grads = {k: np.zeros_like(v) for k, v in net.params().items()}
        grads["w1"][0, 0] = g

        # Independent hand-rolled Adam on a single scalar.
        m = v = 0.0
        theta = 1.0
        for t in range(1, 4):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            theta -= lr * mhat / (np.sqrt(vhat) + 1e-8)
            nn.adam_step(net, grads, state)
            assert abs(net.w1[0, 0] - theta) < 1e-12


class TestBatchedGradients:
    def test_batched_cross_entropy_matches_per_sample(self):
        net = nn.init_net(8, 6, hidden_dim=10, seed=9)
        xs = np.random.default_rng(10).normal(size=(5, 8))
        cards, target = (3, 3), (1, 2)
        batched = nn.batched_cross_entropy_input_gradients(net, xs, cards, target)
        for i in range(5):
            single = nn.input_gradient(net, xs[i], nn.CrossEntropyToward(cards, target))
            np.testing.assert_allclose(batched[i], single, rtol=1e-12, atol=1e-14)
