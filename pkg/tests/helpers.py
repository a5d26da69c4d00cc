"""Shared test utilities: gradient checking against finite differences and
small fixture builders."""

import numpy as np

from bevlab import autodiff as ad
from bevlab.tensor import finite_diff_grad


def rel_err(analytic, numeric):
    """Max absolute deviation over the max numeric magnitude (guarded)."""
    ana = np.asarray(analytic, dtype=float)
    num = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(num))), 1e-8)
    return float(np.max(np.abs(ana - num)) / scale)


def gradcheck(build_loss, arrays, eps=1e-6, rtol=1e-4):
    """Check analytic gradients of a scalar loss against central differences.

    arrays: name -> ndarray. build_loss receives a dict mapping each name to
    a Var (analytic pass) or plain array (numeric pass) and returns a scalar.
    Returns the per-input relative errors; asserts each is below rtol.
    """
    tracked = {k: ad.Var(v, requires_grad=True) for k, v in arrays.items()}
    out = build_loss(tracked)
    assert isinstance(out, ad.Var), "loss did not trace any input"
    out.backward()

    errs = {}
    for name, base in arrays.items():
        def f(x, _n=name):
            probe = dict(arrays)
            probe[_n] = x
            return float(ad.val(build_loss(probe)))

        num = finite_diff_grad(f, base, eps)
        ana = tracked[name].grad
        assert ana is not None, f"no gradient reached {name}"
        errs[name] = rel_err(ana, num)
        assert errs[name] < rtol, f"{name}: rel err {errs[name]:.3e} >= {rtol}"
    return errs


def dense_pyramids(rng, n_cams, C, image_size, strides):
    """Random feature pyramids with energy everywhere (for gradient work)."""
    from bevlab.geometry import FeaturePyramid

    out = []
    for _ in range(n_cams):
        levels = []
        for s in strides:
            shape = (C, image_size[1] // s, image_size[0] // s)
            levels.append((s, rng.normal(size=shape)))
        out.append(FeaturePyramid(tuple(levels)))
    return out
