import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def random_complex(rng: np.random.Generator, *shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def normalized_maps(rng: np.random.Generator, n_coils: int, n_y: int, n_x: int) -> torch.Tensor:
    maps = random_complex(rng, n_coils, n_y, n_x)
    return maps / maps.abs().pow(2).sum(0).sqrt()


def fd_check(loss_fn, params, n_probes, tolerance, seed=0, step=1e-6, analytic=None):
    """Compare autograd against central differences on randomly chosen entries of ``params``.

    Small gradients are compared in absolute terms against the scale of the
    largest probed gradient.
    """
    if analytic is None:
        for p in params:
            p.grad = None
        loss_fn().backward()
        analytic = [p.grad.clone() for p in params]
    probe = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_probes):
        i = int(probe.integers(len(params)))
        index = tuple(int(probe.integers(s)) for s in params[i].shape)
        with torch.no_grad():
            original = params[i][index].item()
            params[i][index] = original + step
            plus = loss_fn().item()
            params[i][index] = original - step
            minus = loss_fn().item()
            params[i][index] = original
        pairs.append((analytic[i][index].item(), (plus - minus) / (2 * step)))
    scale = max(abs(n) for _, n in pairs)
    worst = max(abs(g - n) / max(abs(n), 0.1 * scale) for g, n in pairs)
    assert worst < tolerance, pairs
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
