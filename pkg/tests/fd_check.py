"""Batched central finite differences for the residual MLP.

Each parameter entry is perturbed at the point where it enters the network
(pre-activation, normalised activation or output logit) and all perturbed
copies are pushed through the remaining layers together. Only plain numpy
is used, so this is independent of the analytic backward pass.
"""
import numpy as np

EPS = 1e-5


def _ln(z):
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + EPS)


def _loss(y, t):
    return np.sqrt(np.mean((y - t) ** 2, axis=-1))


def _base(p, x):
    cache = {"h0": x}
    h = x
    for i in (1, 2, 3):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        xhat = _ln(z)
        a = xhat * p[f"g{i}"] + p[f"o{i}"]
        r = np.maximum(a, 0)
        h = r if i == 1 else h + r
        cache.update({f"z{i}": z, f"xhat{i}": xhat, f"a{i}": a, f"h{i}": h})
    return cache


def _from_post_ln(p, cache, layer, a):
    """Finish the forward pass given post-LN activations (variants, n, 128)."""
    r = np.maximum(a, 0)
    h = r if layer == 1 else cache[f"h{layer - 1}"][None] + r
    for i in range(layer + 1, 4):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        h = h + np.maximum(_ln(z) * p[f"g{i}"] + p[f"o{i}"], 0)
    logit = (h @ p["W4"])[..., 0] + p["b4"][0]
    return 1.0 / (1.0 + np.exp(-logit))


def _from_pre_ln(p, cache, layer, z):
    return _from_post_ln(p, cache, layer, _ln(z) * p[f"g{layer}"] + p[f"o{layer}"])


def _variants(p, cache, key, idx, step):
    """Outputs (len(idx), n) with entries ``idx`` of ``key`` shifted by ``step``."""
    kind, layer = key[0], int(key[1])
    c = len(idx)
    if key == "b4":
        logit = (cache["h3"] @ p["W4"])[:, 0] + p["b4"][0] + step
        return np.tile(1.0 / (1.0 + np.exp(-logit)), (c, 1))
    if key == "W4":
        a = np.array([i[0] for i in idx])
        logit = (cache["h3"] @ p["W4"])[:, 0][None] + p["b4"][0] + step * cache["h3"][:, a].T
        return 1.0 / (1.0 + np.exp(-logit))
    if kind in "Wb":
        z = np.repeat(cache[f"z{layer}"][None], c, axis=0)
        rows = np.arange(c)
        if kind == "W":
            a = np.array([i[0] for i in idx])
            j = np.array([i[1] for i in idx])
            z[rows, :, j] += step * cache[f"h{layer - 1}"][:, a].T
        else:
            j = np.array([i[0] for i in idx])
            z[rows, :, j] += step
        return _from_pre_ln(p, cache, layer, z)
    a = np.repeat(cache[f"a{layer}"][None], c, axis=0)
    rows = np.arange(c)
    j = np.array([i[0] for i in idx])
    a[rows, :, j] += step * (cache[f"xhat{layer}"][:, j].T if kind == "g" else 1.0)
    return _from_post_ln(p, cache, layer, a)


def numeric_gradients(params, x, t, step=1e-5, chunk=1024):
    cache = _base(params, x)
    grads = {}
    for key, value in params.items():
        all_idx = list(np.ndindex(value.shape))
        g = np.empty(len(all_idx))
        for s in range(0, len(all_idx), chunk):
            idx = all_idx[s:s + chunk]
            up = _loss(_variants(params, cache, key, idx, step), t)
            down = _loss(_variants(params, cache, key, idx, -step), t)
            g[s:s + chunk] = (up - down) / (2 * step)
        grads[key] = g.reshape(value.shape)
    return grads


def max_relative_error(analytic, numeric, floor=1e-7):
    """Elementwise |a - n| / max(|a| + |n|, floor); the floor keeps entries
    whose true gradient is ~0 from dividing rounding noise by zero."""
    return float(np.max(np.abs(analytic - numeric)
                        / np.maximum(np.abs(analytic) + np.abs(numeric), floor)))
