"""Finite-difference gradient checking harness shared by the test modules."""

import numpy as np

import lensformer.tensor as lt

import oracles


def check_grad(build, arrays, wrt=0, tol=1e-6, h=1e-6):
    """Compare the taped gradient of scalar build(*tensors) to central differences.

    Runs in float64; ``build`` must be a pure function of its tensor
    arguments (no fresh randomness inside).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with lt.precision("float64"):
        ts = [lt.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        loss = build(*ts)
        lt.backward(loss)
        got = ts[wrt].grad

        def fn(*arrs):
            with lt.no_grad():
                plain = [lt.Tensor(x, dtype=np.float64) for x in arrs]
                return float(build(*plain).data)

        want = oracles.finite_diff_grad(fn, arrays, wrt, h=h)
    err = oracles.rel_err(got, want)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def check_param_grads(forward, params, arrays=(), tol=1e-5, h=1e-6, sample=None, rng=None):
    """Finite-difference check for named parameter tensors of a model.

    ``forward()`` recomputes the scalar loss from current parameter data.
    ``params`` maps name -> Tensor (float64). When ``sample`` is given,
    only that many randomly chosen scalar entries are probed per tensor.
    Returns the worst relative error seen.
    """
    with lt.precision("float64"):
        loss = forward()
        lt.backward(loss)
        worst = 0.0
        for name, p in params.items():
            got = p.grad
            assert got is not None, f"no gradient reached {name}"
            flat = p.data.reshape(-1)
            gflat = got.reshape(-1)
            if sample is not None and flat.size > sample:
                idx = rng.choice(flat.size, size=sample, replace=False)
            else:
                idx = range(flat.size)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                with lt.no_grad():
                    up = float(forward().data)
                flat[i] = orig - h
                with lt.no_grad():
                    down = float(forward().data)
                flat[i] = orig
                want = (up - down) / (2.0 * h)
                scale = max(abs(gflat[i]), abs(want), 1e-8)
                if max(abs(gflat[i]), abs(want)) > 1e-8:
                    err = abs(gflat[i] - want) / scale
                    worst = max(worst, err)
                    assert err < tol, f"{name}[{i}]: rel err {err:.3e} >= {tol}"
        for p in params.values():
            p.zero_grad()
    return worst
