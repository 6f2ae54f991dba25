"""Shared oracles for the test modules."""
import numpy as np

from rvae_st.numerics import Rng, finite_diff_grad
from rvae_st.rvae import init_rvae, loss_backward, sample_losses

REL_FLOOR = 1e-6


def tiny_model(seed, scale=1.0, c=2, hidden=4, latent=2, layers=4):
    """Tiny model with every tensor (biases included) drawn from U(-scale, scale)."""
    p = init_rvae(c, Rng(seed), hidden=hidden, layers=layers, latent=latent)
    rng = Rng(seed + 1000)
    for t in p.tensors().values():
        t[...] = rng.uniform(t.size, -scale, scale).reshape(t.shape)
    return p


def full_loss_gradcheck(seed, scale=1.0, length=5, batch=3, alpha=0.05, beta=0.1, h=1e-5):
    """Worst elementwise relative error of analytic vs central-difference gradients
    of the full loss (encoder, reparameterization, decoder, loss) over every tensor.

    rel = |a - n| / max(|a|, |n|, REL_FLOOR).
    """
    p = tiny_model(seed, scale)
    x = Rng(seed + 2000).uniform(batch * length * p.channels, -1, 1).reshape(batch, length, p.channels)
    eps = Rng(seed + 3000).standard_normal((batch, p.latent))
    _, grads = loss_backward(p, x, alpha, beta, eps=eps)
    worst, worst_name, count = 0.0, "", 0
    for name, t in p.tensors().items():
        def f(theta, t=t):
            old = t.copy()
            t[...] = theta
            v = float(np.mean(sample_losses(p, x, alpha, beta, eps)))
            t[...] = old
            return v
        num = finite_diff_grad(f, t.copy(), h)
        ana = grads.tensors()[name]
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), REL_FLOOR)
        count += rel.size
        if rel.max() > worst:
            worst, worst_name = float(rel.max()), name
    return worst, worst_name, count


# acceptance lines collected during the session, printed by conftest
ACCEPTANCE = {}


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[n] = line
    print(line, flush=True)
    return ok
