"""Central-difference gradient oracle shared by the tensor and model tests."""
from __future__ import annotations

import contextlib

import numpy as np

from cdiffset import _fallback, kernels
from cdiffset import tensor as T


@contextlib.contextmanager
def float64_forward():
    """Run tensor ops in float64 so finite differences are not swamped by rounding.

    Only forward passes are valid inside; the numpy im2col replaces the
    compiled one because the latter reads float32 input.
    """
    saved = T.DTYPE, kernels.im2col
    T.DTYPE = np.float64
    kernels.im2col = lambda x, k, stride, pad: _fallback.im2col(np.asarray(x, np.float64), k, stride, pad)
    try:
        yield
    finally:
        T.DTYPE, kernels.im2col = saved


def numeric_grad(f, arrays, index, h=1e-3, points=3, elements=None, dtype=np.float32):
    """d f / d arrays[index] by central differences; ``f`` returns a float.

    ``points=5`` uses the fourth-order stencil, which tolerates the larger
    steps needed when float32 rounding inside ``f`` dominates small ones.
    ``elements`` restricts the check to those flat indices (others stay 0).
    """
    base = [a.astype(dtype).copy() for a in arrays]
    x = base[index]
    g = np.zeros(x.shape, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    offsets = (-2, -1, 1, 2) if points == 5 else (-1, 1)
    for i in (range(flat.size) if elements is None else elements):
        keep = flat[i]
        vals = {}
        for m in offsets:
            flat[i] = keep + m * h
            vals[m] = f(*base)
        flat[i] = keep
        if points == 5:
            gflat[i] = (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * h)
        else:
            gflat[i] = (vals[1] - vals[-1]) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def check_op(op, arrays, rng, h=1e-5, wrt=None):
    """Max relative error over inputs between autodiff and finite differences.

    The scalar objective is a fixed random projection of the op output, so
    every output element contributes; the finite differences run the op in
    float64.
    """
    with T.no_grad():
        probe = op(*[T.Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape)

    def f(*arrs):
        with T.no_grad(), float64_forward():
            out = op(*[T.Tensor(a) for a in arrs])
        return float(np.sum(out.data.astype(np.float64) * proj))

    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*ts)
    T.backward(T.sum_(out * T.Tensor(proj)))
    worst = 0.0
    for i in (range(len(arrays)) if wrt is None else wrt):
        num = numeric_grad(f, arrays, i, h, dtype=np.float64)
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(ana, num))
    return worst


def check_denoiser_loss(seed: int, n_elements: int = 24) -> dict[str, float]:
    """Gradient check of the full U-Net + confidence loss graph on a tiny model.

    Checks the noisy-latent input and a sample of parameters from the input
    conv, a middle block, the confidence head and the conditioning vector.
    Heads are re-drawn at random so their gradients are not trivially zero.
    """
    from cdiffset.denoiser import Denoiser
    from cdiffset.loss import LossConfig, cdiff_loss

    rng = np.random.default_rng(seed)
    model = Denoiser(base_channels=8, levels=2, cond_dim=8, seed=seed)
    for head in (model.noise_head, model.conf_head):
        head.weight.data = (rng.standard_normal(head.weight.shape) * 0.2).astype(np.float32)
    z_t = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    z_x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    eps = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    t = rng.integers(1, 1001, 2)
    cfg = LossConfig(beta=1.0)
    params = dict(model.named_parameters())
    names = ["in_conv.weight", "mid.conv1.weight", "conf_head.bias", "z_c"]

    model.zero_grad()
    x = T.Tensor(z_t, requires_grad=True)
    out = model(x, T.Tensor(z_x), t)
    T.backward(cdiff_loss(eps, out.eps_hat, out.conf, cfg))
    analytic = {"z_t": x.grad.copy()}
    analytic.update({n: params[n].grad.copy() for n in names})

    def loss_with(name):
        def f(a):
            keep = params[name].data if name != "z_t" else None
            if name != "z_t":
                params[name].data = a
            with T.no_grad(), float64_forward():
                o = model(T.Tensor(a if name == "z_t" else z_t), T.Tensor(z_x), t)
                val = float(cdiff_loss(eps, o.eps_hat, o.conf, cfg).data)
            if keep is not None:
                params[name].data = keep
            return val
        return f

    errors = {}
    for name in ["z_t"] + names:
        arr = z_t if name == "z_t" else params[name].data.copy()
        idx = rng.choice(arr.size, min(n_elements, arr.size), replace=False)
        num = numeric_grad(loss_with(name), [arr], 0, 1e-5, elements=idx, dtype=np.float64)
        errors[name] = rel_error(analytic[name].reshape(-1)[idx], num.reshape(-1)[idx])
    return errors
