"""Independent oracles shared by the test modules.

Everything here is written the slow, obvious way on purpose: nested
loops and central differences that do not share code with the package.
"""

import numpy as np

from moes.autodiff import Tensor, zero_grad


def numeric_grad(loss_fn, array, eps=1e-4):
    """Central-difference gradient of a scalar loss w.r.t. one numpy array.

    ``loss_fn`` must read the array's current contents on every call.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_op_gradients(op, arrays, which=None, eps=1e-4, tol=1e-4):
    """Compare analytic grads of sum(op(*inputs)) to central differences.

    ``arrays`` are numpy inputs; ``which`` selects the differentiable
    positions (default: all). Returns the worst relative error seen.
    """
    which = set(range(len(arrays))) if which is None else set(which)
    worst = 0.0
    for pos in which:
        tensors = [Tensor(a, requires_grad=(i in which)) for i, a in enumerate(arrays)]
        out = op(*tensors)
        loss = out.sum()
        zero_grad(tensors)
        loss.backward()
        analytic = tensors[pos].grad

        def scalar_loss(pos=pos):
            fresh = [Tensor(a) for a in arrays]
            return op(*fresh).sum().item()

        numeric = numeric_grad(scalar_loss, arrays[pos], eps=eps)
        err = max_rel_err(analytic, numeric)
        worst = max(worst, err)
        assert err <= tol, f"input {pos}: rel err {err:.3e} > {tol:.0e}"
    return worst


def naive_conv2d(x, kernel, bias, stride=1, padding=0):
    """Direct nested-loop cross-correlation, float64."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for fo in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[b, ci, i * stride + u, j * stride + v]
                                    * kernel[fo, ci, u, v]
                                )
                    out[b, fo, i, j] = acc + bias[fo]
    return out


def naive_dense(x, weight, bias):
    n, d = x.shape
    _, u = weight.shape
    out = np.zeros((n, u))
    for b in range(n):
        for j in range(u):
            acc = 0.0
            for i in range(d):
                acc += x[b, i] * weight[i, j]
            out[b, j] = acc + bias[j]
    return out


def entropy_of_rows(probs):
    p = np.clip(probs, 1e-300, 1.0)
    return -(p * np.log(p)).sum(axis=1)
