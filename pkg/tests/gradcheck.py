"""Central finite-difference oracles shared by the gradient tests."""
import numpy as np

from oodmon import nn
from oodmon import tensor as T

H = 1e-3


def compositions(seed):
    """One random network per layer mix; inputs are 64-bit so the FD forward is 64-bit."""
    rng = np.random.default_rng(seed)
    bn = lambda n: nn.BatchNorm(rng.normal(0, 0.1, n).astype(np.float32),  # noqa: E731
                                rng.uniform(0.5, 1.5, n).astype(np.float32),
                                rng.uniform(0.5, 1.5, n).astype(np.float32),
                                rng.normal(0, 0.1, n).astype(np.float32))
    w = lambda *s: (rng.standard_normal(s) * 0.6).astype(np.float32)  # noqa: E731
    dense_relu = nn.mlp(6, [7, 5], 3, seed=seed)
    dense_elu_bn = nn.Network([nn.Dense(w(7, 6), w(7)), bn(7), nn.ELU(), nn.Dense(w(5, 7), w(5)), nn.ELU(),
                               nn.Dense(w(3, 5), w(3))], 3, (6,))
    conv_pool = nn.Network([nn.Conv2d(w(3, 2, 3, 3), w(3), 1, 1), nn.ReLU(), nn.MaxPool2d(2, 2), nn.Flatten(),
                            nn.Dense(w(4, 12), w(4)), nn.ReLU(), nn.Dense(w(3, 4), w(3))], 3, (2, 4, 4))
    conv_bn_elu = nn.Network([nn.Conv2d(w(2, 1, 2, 2), w(2), 2, 0), bn(2), nn.ELU(), nn.MaxPool2d(2, 1),
                              nn.Flatten(), nn.Dense(w(3, 8), w(3))], 3, (1, 6, 6))
    return {"dense-relu": dense_relu, "dense-bn-elu": dense_elu_bn, "conv-relu-pool": conv_pool,
            "conv-bn-elu-pool": conv_bn_elu}


def _pattern(net, x):
    """Piecewise branch of every kink (ReLU/ELU sign, pooling argmax) at input ``x``."""
    outs = nn._run(net, x[None])
    parts = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (nn.ReLU, nn.ELU)):
            parts.append((outs[i] > 0).ravel())
        elif isinstance(layer, nn.MaxPool2d):
            parts.append(T._pool_windows(outs[i], layer.k, layer.stride).argmax(axis=-1).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def cross_entropy(net, x, target):
    logits = nn._run(net, x[None])[-1][0].astype(np.float64)
    return T.logsumexp(logits) - logits[target]


def fd_input_gradient(net, x, target):
    """Central differences; ``None`` when a step crosses a kink (the case is then resampled)."""
    base = _pattern(net, x)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += H
        dn[idx] -= H
        if not (np.array_equal(_pattern(net, up), base) and np.array_equal(_pattern(net, dn), base)):
            return None
        g[idx] = (cross_entropy(net, up, target) - cross_entropy(net, dn, target)) / (2 * H)
    return g


def kl_uniform(logits, temperature):
    p = T.softmax(logits / temperature)
    c = len(logits)
    return float(np.sum((1.0 / c) * (np.log(1.0 / c) - np.log(p))))


def fd_last_layer_gradient(net, x, temperature):
    z = nn.forward(net, x).head_input.astype(np.float64)
    wb = np.concatenate([net.head.w.astype(np.float64), net.head.b.astype(np.float64)[:, None]], axis=1)
    z1 = np.append(z, 1.0)
    g = np.zeros_like(wb)
    for idx in np.ndindex(wb.shape):
        up, dn = wb.copy(), wb.copy()
        up[idx] += H
        dn[idx] -= H
        g[idx] = (kl_uniform(up @ z1, temperature) - kl_uniform(dn @ z1, temperature)) / (2 * H)
    return g


def rel_ok(analytic, numeric, rtol=1e-3, floor=1e-4):
    """Per-coordinate check ``|a - n| <= rtol * max(|a|, |n|)`` with an absolute floor near zero."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return bool(np.all(np.abs(a - n) <= np.maximum(rtol * np.maximum(np.abs(a), np.abs(n)), floor * rtol)))


def run_cases(per_kind=20, seed=0):
    """Yield (name, kind of check, ok) for ``per_kind`` random cases of every composition."""
    rng = np.random.default_rng(seed)
    results = []
    for name, net in compositions(seed).items():
        done = 0
        tries = 0
        while done < per_kind:
            tries += 1
            if tries > 50 * per_kind:
                raise RuntimeError(f"{name}: too many kink rejections")
            x = rng.standard_normal(net.input_shape)
            target = int(rng.integers(net.class_count))
            num = fd_input_gradient(net, x, target)
            if num is None:
                continue
            ana = nn.grad_input(net, x, nn.CrossEntropy(target))
            t = float(rng.choice([0.5, 1.0, 3.0]))
            results.append((name, "grad_input", rel_ok(ana, num)))
            results.append((name, "grad_last_layer",
                            rel_ok(nn.grad_last_layer(net, x, t), fd_last_layer_gradient(net, x, t))))
            done += 1
    return results
