"""Central finite-difference verification of analytic gradients."""

import numpy as np


def gradient_check(net, inputs, loss_fn, samples=1000, h=1e-5, rng=None,
                   exhaustive_limit=100000):
    """Compare backprop gradients against central differences.

    ``net`` must expose forward(*inputs) -> output, backward(gout) -> dict of
    gradients keyed like ``net.params()``, and params() -> {name: array}.
    ``loss_fn`` maps the network output to ``(scalar, d_scalar/d_output)``.

    Every parameter coordinate is checked when the network holds fewer than
    ``exhaustive_limit`` scalars; larger networks get ``samples`` coordinates
    drawn uniformly at random. Returns the worst relative error
    ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`` over the checked coordinates.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = net.params()

    out = net.forward(*inputs)
    _, gout = loss_fn(out)
    grads = net.backward(gout)
    if isinstance(grads, tuple):
        grads = grads[-1]

    coords = []
    for name in sorted(params):
        size = params[name].size
        for flat in range(size):
            coords.append((name, flat))
    if len(coords) >= exhaustive_limit:
        picks = rng.choice(len(coords), size=min(samples, len(coords)),
                           replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = 0.0
    for name, flat in coords:
        arr = params[name]
        view = arr.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        lo_plus, _ = loss_fn(net.forward(*inputs))
        view[flat] = orig - h
        lo_minus, _ = loss_fn(net.forward(*inputs))
        view[flat] = orig
        g_fd = (lo_plus - lo_minus) / (2.0 * h)
        g_a = grads[name].reshape(-1)[flat]
        err = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
        if err > worst:
            worst = err
    return worst
