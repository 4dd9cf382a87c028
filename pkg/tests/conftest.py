import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(rng, h=64, w=96, sigma=3.0):
    """Random smooth RGB image in [0, 1] (natural-ish statistics for matching tests)."""
    from scipy.ndimage import gaussian_filter

    img = rng.random((h, w, 3))
    img = np.stack([gaussian_filter(img[..., c], sigma, mode="wrap") for c in range(3)], axis=-1)
    img -= img.min()
    return img / img.max()


def fd_relative_error(fn, inputs, h=1e-6):
    """Relative error ``|num - auto| / |auto|`` of the gradient of ``fn(...).sum()``, worst over inputs.

    Vector outputs should be projected by the caller (e.g. ``(f(x) * v).sum()``).
    """
    out = fn(*inputs)
    grads = torch.autograd.grad(out.sum(), inputs)
    worst = 0.0
    for k, (t, g) in enumerate(zip(inputs, grads)):
        flat = t.detach().clone().reshape(-1)
        num = torch.empty_like(flat)
        for i in range(flat.numel()):
            args = [a.detach() for a in inputs]
            p, m = flat.clone(), flat.clone()
            p[i] += h
            m[i] -= h
            with torch.no_grad():
                args[k] = p.reshape(t.shape)
                fp = float(fn(*args).sum())
                args[k] = m.reshape(t.shape)
                num[i] = (fp - float(fn(*args).sum())) / (2 * h)
        worst = max(worst, float((num - g.reshape(-1)).norm() / max(float(g.norm()), 1e-12)))
    return worst


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
