"""Shared test utilities: central finite-difference gradient checking."""
import torch


def fd_gradient(fn, params: torch.Tensor, step=1e-4):
    """Central finite differences of a scalar fn w.r.t. a flat parameter tensor."""
    grad = torch.zeros_like(params)
    flat = params.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn())
        flat[i] = orig - step
        lo = float(fn())
        flat[i] = orig
        grad.view(-1)[i] = (hi - lo) / (2 * step)
    return grad


def check_gradients(fn, params, rtol=1e-4, step=1e-4):
    params.grad = None
    loss = fn()
    loss.backward()
    analytic = params.grad.clone()
    with torch.no_grad():
        numeric = fd_gradient(fn, params, step=step)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-8)
    rel = (analytic - numeric).norm().item() / denom
    assert rel <= rtol, f"gradient relative error {rel}"
    return rel
