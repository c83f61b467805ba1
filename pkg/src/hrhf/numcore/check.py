"""Central finite-difference gradient checking."""
import numpy as np

from .graph import _forward, branch_signature, gradients


def _same_branch(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def grad_check(graph, inputs, eps=1e-5, seed=None, wrt=None, floor=1e-6, return_details=False):
    """Worst relative error between analytic and central-difference gradients.

    Entries whose +/-eps perturbation moves any non-smooth node (relu kink,
    log floor, max location) onto a different piece are skipped.  The error of
    one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if seed is None:
        seed = graph.outputs[0] if graph.outputs else len(graph.nodes) - 1
    if wrt is None:
        wrt = graph.leaves()
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = gradients(graph, inputs, seed, wrt)
    base_sig = branch_signature(graph, _forward(graph, inputs, seed))
    worst, checked, skipped = 0.0, 0, 0
    for leaf in wrt:
        x = inputs[leaf]
        flat = x.reshape(-1)
        ga = analytic[leaf].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            # signatures are taken while the perturbation is in place because
            # input values alias the array being modified
            flat[k] = orig + eps
            vp = _forward(graph, inputs, seed)
            same = _same_branch(base_sig, branch_signature(graph, vp))
            fp = float(vp[seed].sum())
            flat[k] = orig - eps
            vm = _forward(graph, inputs, seed)
            same = same and _same_branch(base_sig, branch_signature(graph, vm))
            fm = float(vm[seed].sum())
            flat[k] = orig
            if not same:
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * eps)
            err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    if return_details:
        return worst, checked, skipped
    return worst
