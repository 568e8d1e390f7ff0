"""Slow reference implementations used only as test oracles."""
import numpy as np

from lpcn.model import backward, build_model, forward


def naive_conv2d(x, w, b, stride):
    """Quadruple loop over output pixels, kernel taps and channels.

    Padding is computed independently: the output has ceil(H/s) rows and the
    total zero padding is split with the smaller half on top/left.
    """
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh, ow = -(-h // stride), -(-wd // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - wd, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for o in range(cout):
                acc = 0.0 if b is None else b[o]
                for dx in range(kh):
                    for dy in range(kw):
                        sx, sy = stride * i + dx - top, stride * j + dy - left
                        if 0 <= sx < h and 0 <= sy < wd:
                            for c in range(cin):
                                acc += w[dx, dy, c, o] * x[sx, sy, c]
                out[i, j, o] = acc
    return out


def central_difference(f, x, step=1e-4):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return grad


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def kink_margin(ctx):
    s = ctx.saved
    pre = list(s["pre_rep"]) + list(s["encdec_a"][1])
    if "pre_b" in s:
        pre += [s["pre_b"]] + list(s["encdec_b"][1])
    return min(np.abs(z).min() for z in pre)


def smooth_instance(spec, seed, margin=2e-3):
    """Draw a model and input whose ReLU inputs all sit well clear of zero.

    Central differences with step 1e-4 are only valid away from kinks.
    """
    rng = np.random.default_rng(seed)
    for _ in range(500):
        params = build_model(spec, int(rng.integers(2**31)), dtype=np.float64)
        for k, v in params.tensors.items():
            if k.endswith(".bias"):
                params.tensors[k] = rng.normal(0, 0.1, v.shape)
        y = rng.uniform(0, 1, (8, 8, 1))
        out, ctx = forward(params, y, keep_context=True)
        if kink_margin(ctx) > margin:
            return params, y, out, ctx, rng
    raise RuntimeError("no kink-free instance found")


def model_gradient_error(spec, seed):
    """Worst relative error between backward() and central differences, over all parameters."""
    params, y, out, ctx, rng = smooth_instance(spec, seed)
    target = rng.uniform(0, 1, (8, 8, 1))
    grads = backward(params, ctx, 2 * (out - target) / out.size)

    def loss():
        o, _ = forward(params, y)
        return np.mean((o - target) ** 2)

    worst = 0.0
    for key, value in params.tensors.items():
        def f(v, key=key):
            saved = params.tensors[key]
            params.tensors[key] = v
            try:
                return loss()
            finally:
                params.tensors[key] = saved
        numeric = central_difference(f, value, step=1e-4)
        worst = max(worst, rel_error(grads[key], numeric).max())
    return worst
