"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

from memroute import autodiff as ad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, inputs, rng, h=1e-5):
    """Max relative error between tape and finite-difference gradients.

    ``build(*tensors)`` returns a tensor; the scalar loss is its dot product
    with a fixed random weight so every output entry matters.
    """
    params = [ad.parameter(x) for x in inputs]
    with ad.Tape():
        out = build(*params)
        w = rng.normal(size=out.shape)
        loss = ad.reduce_sum(ad.mul(out, w))
        ad.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value():
        with ad.no_tape():
            return float((build(*params).data * w).sum())

    return max(rel_error(a, numeric_grad(value, p.data, h)) for a, p in zip(analytic, params))


def model_fd_check(model, batch, mode, loss_of, groups_nonzero, per_param=8, h=1e-6, seed=1):
    """Analytic vs central-difference gradient on sampled entries of every parameter."""
    start = model.snapshot_buffers()
    named = model.named_parameters()

    def run():
        model.restore_buffers(start)
        return loss_of(model.forward(batch, mode, 0.7, np.random.default_rng(0)))

    with ad.Tape():
        ad.backward(run())
    rng = np.random.default_rng(seed)
    ana, num = {}, {}
    for name, t in named.items():
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        g = model.group_of(name)
        for i in idx:
            old = flat[i]
            with ad.no_tape():
                flat[i] = old + h
                up = run().item()
                flat[i] = old - h
                down = run().item()
            flat[i] = old
            ana.setdefault(g, []).append(grad.reshape(-1)[i])
            num.setdefault(g, []).append((up - down) / (2 * h))
        if g in groups_nonzero:
            groups_nonzero[g] = groups_nonzero[g] or bool(np.any(grad != 0))
    model.restore_buffers(start)
    return {g: rel_error(np.array(ana[g]), np.array(num[g])) for g in ana}
