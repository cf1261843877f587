"""Central finite-difference gradient checking for autodiff graphs."""
import numpy as np

from compno import autodiff as ad


def real_inner(y: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    """``Re(sum(conj(w) * y))``: turns any tensor into a scalar with upstream gradient ``w``."""
    return ad._node(np.asarray(np.real(np.sum(np.conj(w) * y.value))), (y,), lambda g: (g * w,), "inner")


def numeric_grad(fn, arrays, index, h=1e-5):
    """Central differences of scalar ``fn(arrays)`` w.r.t. ``arrays[index]`` (complex-aware)."""
    a = arrays[index]
    out = np.zeros_like(a)
    flat = a.reshape(-1)
    gflat = out.reshape(-1)
    parts = (1.0, 1j) if np.iscomplexobj(a) else (1.0,)
    for i in range(flat.size):
        for unit in parts:
            orig = flat[i]
            flat[i] = orig + unit * h
            fp = fn(arrays)
            flat[i] = orig - unit * h
            fm = fn(arrays)
            flat[i] = orig
            d = (fp - fm) / (2 * h)
            gflat[i] += d * (1.0 if unit == 1.0 else 1j)
    return out


def check(build, arrays, h=1e-5, seed=0):
    """Relative error per input between autodiff and finite differences.

    ``build(tensors)`` returns a Tensor; the loss is ``real_inner(out, w)`` with a
    fixed random ``w`` of matching shape/dtype.
    """
    rng = np.random.default_rng(seed)
    probe = build([ad.Tensor(a.copy()) for a in arrays])
    w = rng.normal(size=probe.shape)
    if np.iscomplexobj(probe.value):
        w = w + 1j * rng.normal(size=probe.shape)

    def scalar(arrs):
        return float(real_inner(build([ad.Tensor(x) for x in arrs]), w).value)

    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = real_inner(build(tensors), w)
    ad.backward(loss, tensors)
    errs = []
    for i, t in enumerate(tensors):
        fd = numeric_grad(scalar, [a.copy() for a in arrays], i, h)
        num = np.linalg.norm(t.grad - fd)
        den = max(np.linalg.norm(fd), np.linalg.norm(t.grad), 1e-300)
        errs.append(num / den)
    return errs
