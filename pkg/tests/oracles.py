"""Independent reference computations shared by several test modules."""

import math

import numpy as np
import torch

from spikeskip.netbuild import forward, spike_count_loss
from spikeskip.topology import BlockAdjacency, uniform_plan


def randomize(net, seed, scale=0.6):
    """Move every parameter to a random point so that no gradient is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.params.values():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return net


def random_active_point(net, seed, weight_scale=0.3, bias_mean=0.4, bias_scale=0.2):
    """Random parameters with every layer near its firing regime.

    With T=5 a bias around 0.4 carries an isolated membrane to threshold within
    the window, so the smooth loss is not flat and its gradient is well above
    the finite-difference round-off floor.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.params.items():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            p.copy_(bias_mean + bias_scale * noise if name.endswith("bias") else weight_scale * noise)
    return net


def smooth_loss(net, x, labels):
    with torch.no_grad():
        res = forward(net, x, smooth=True)
        return spike_count_loss(res.scores, labels, res.T).item()


def fd_gradient(net, x, labels, h=1e-6):
    """Central finite differences of the smooth-mode loss, coordinate by coordinate."""
    grads = {}
    for name, p in net.params.items():
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = smooth_loss(net, x, labels)
            flat[i] = old - h
            down = smooth_loss(net, x, labels)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(grads, reference):
    num = sum(float(((grads[k] - reference[k]) ** 2).sum()) for k in reference)
    den = sum(float((reference[k] ** 2).sum()) for k in reference)
    return (num / max(den, 1e-300)) ** 0.5


def small_fc_plan(features=6, width=5, n_classes=2):
    """Single dense block of depth 3; under 200 supernet parameters."""
    return uniform_plan(depth=3, channels=width, input_shape=(features,), n_classes=n_classes, kind="fc")


# slots (0,2) dense, (0,3) dense, (1,3) additive
MIXED_DEPTH3 = (BlockAdjacency(3, (1, 1, 2)),)


def random_spikes(T, batch, shape, rate, seed):
    rng = np.random.default_rng(seed)
    return torch.from_numpy((rng.random((T, batch) + tuple(shape)) < rate).astype(np.float64))


def scalar_reference_forward(net, x):
    """Readout spike counts from a python-float loop over neurons (dense plans only).

    Follows the layer rule directly: sequential input, additive skips summed in,
    dense skips appended by their selected channels, then affine map and LIF.
    """
    plan = net.plan
    weights = {k: v.detach().double().numpy() for k, v in net.active_weights().items()}
    adj = net.assignment[0]
    block = plan.blocks[0]
    T, batch = x.shape[0], x.shape[1]
    counts = np.zeros((batch, plan.n_classes))
    for n in range(batch):
        mem = {v: [0.0] * layer.out_channels for v, layer in enumerate(block.layers, start=1)}
        mem_out = [0.0] * plan.n_classes
        for t in range(T):
            outs = [list(x[t, n].double().numpy())]
            for v, layer in enumerate(block.layers, start=1):
                z = list(outs[v - 1])
                for u, code in adj.sources(v):
                    if code == 2:
                        z = [a + b for a, b in zip(z, outs[u])]
                for u, code in adj.sources(v):
                    if code == 1:
                        z = z + [outs[u][c] for c in net.selections[(0, u, v)]]
                w = weights[(0, v)]
                bias = net.params[f"block0.layer{v}.bias"].detach().double().numpy()
                s_out = []
                for j in range(layer.out_channels):
                    cur = float(bias[j]) + sum(float(w[j, i]) * z[i] for i in range(len(z)))
                    m = layer.neuron.beta * mem[v][j] + cur
                    s = 1.0 if m >= layer.neuron.threshold else 0.0
                    mem[v][j] = m - s * layer.neuron.threshold
                    s_out.append(s)
                outs.append(s_out)
            w = net.params["readout.weight"].detach().double().numpy()
            bias = net.params["readout.bias"].detach().double().numpy()
            neuron = block.layers[-1].neuron
            for j in range(plan.n_classes):
                cur = float(bias[j]) + sum(float(w[j, i]) * outs[-1][i] for i in range(len(outs[-1])))
                m = neuron.beta * mem_out[j] + cur
                s = 1.0 if m >= neuron.threshold else 0.0
                mem_out[j] = m - s * neuron.threshold
                counts[n, j] += s
    return counts


def exp_hamming_oracle(a, b, hyper):
    """Kernel value built from slot codes directly, without the one-hot encoding."""
    d = sum(x != y for adj_a, adj_b in zip(a, b) for x, y in zip(adj_a.codes, adj_b.codes))
    return hyper.signal_var * math.exp(-hyper.gamma * d)


def gp_oracle(points, values, queries, hyper):
    """Posterior by explicit matrix inversion on standardized targets."""
    y = np.asarray(values, dtype=float)
    mu, sd = y.mean(), (y.std() if len(y) > 1 and y.std() > 0 else 1.0)
    z = (y - mu) / sd
    K = np.array([[exp_hamming_oracle(p, q, hyper) for q in points] for p in points])
    K_inv = np.linalg.inv(K + hyper.noise_var * np.eye(len(points)))
    means, variances = [], []
    for x in queries:
        k = np.array([exp_hamming_oracle(x, p, hyper) for p in points])
        means.append(mu + sd * (k @ K_inv @ z))
        variances.append(sd**2 * (hyper.signal_var - k @ K_inv @ k))
    return np.array(means), np.array(variances)
