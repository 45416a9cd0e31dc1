import torch


def fd_gradient(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar fn() w.r.t. tensor x.

    fn must read x (mutated in place between evaluations) and return a scalar.
    """
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            fp = float(fn())
            flat[idx] = orig - h
            fm = float(fn())
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_error(analytic, numeric):
    denom = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / denom
