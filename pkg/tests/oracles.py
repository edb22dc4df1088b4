"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np
import torch


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def central_difference(f, tensors, picks, eps=1e-6):
    """Finite-difference partials of scalar ``f()`` at ``(tensor_id, flat_index)`` picks."""
    out = []
    with torch.no_grad():
        for ti, j in picks:
            flat = tensors[ti].view(-1)
            keep = flat[j].item()
            flat[j] = keep + eps
            hi = float(f())
            flat[j] = keep - eps
            lo = float(f())
            flat[j] = keep
            out.append((hi - lo) / (2 * eps))
    return np.array(out)


def gradient_check(f, tensors, rng, n_coords=32, eps=1e-6) -> float:
    """Relative error between autograd and central differences.

    Compares the gradient restricted to ``n_coords`` random coordinates and one
    random directional derivative; returns the worse of the two errors.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    grads = [t.grad.detach().clone().view(-1) for t in tensors]
    sizes = [t.numel() for t in tensors]
    flat_ids = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    picks = [(int(np.searchsorted(offsets, g, side="right") - 1), 0) for g in flat_ids]
    picks = [(ti, int(g - offsets[ti])) for (ti, _), g in zip(picks, flat_ids)]
    analytic = np.array([grads[ti][j].item() for ti, j in picks])
    err = rel_err(analytic, central_difference(f, tensors, picks, eps))

    # directional derivative along a random unit direction
    dirs = [torch.from_numpy(rng.normal(size=t.shape)).to(t.dtype) for t in tensors]
    norm = float(np.sqrt(sum((d ** 2).sum().item() for d in dirs)))
    dirs = [d / norm for d in dirs]
    ana = sum((g * d.view(-1)).sum().item() for g, d in zip(grads, dirs))
    with torch.no_grad():
        for t, d in zip(tensors, dirs):
            t.add_(eps * d)
        hi = float(f())
        for t, d in zip(tensors, dirs):
            t.sub_(2 * eps * d)
        lo = float(f())
        for t, d in zip(tensors, dirs):
            t.add_(eps * d)
    return max(err, rel_err([ana], [(hi - lo) / (2 * eps)]))


def model_gradient_error(arch: str, seed: int) -> float:
    """Parameter-gradient check of a tiny float64 model under a fixed scalar loss."""
    from packd.models import ModelSpec, build_model

    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 5))
    layers = int(rng.integers(1, 3))
    spec = ModelSpec(arch, dim, layers, "student", (8, 10), 8)
    model = build_model(spec, seed).double()
    model.eval()  # batch-norm uses (perturbed) running statistics, a smooth map
    if arch == "residual_conv":
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.copy_(torch.from_numpy(rng.normal(0, 0.1, m.num_features)))
                m.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, m.num_features)))
    x = torch.from_numpy(rng.random((3, 8, 10)))
    w = torch.from_numpy(rng.normal(size=(3, 8)))
    params = [p for p in model.parameters()]
    return gradient_check(lambda: (model(x) * w).sum(), params, rng)


def best_partition_sse(x, k):
    """Exhaustive oracle: minimum SSE over all assignments into k non-empty clusters."""
    best = np.inf
    for assign in itertools.product(range(k), repeat=len(x)):
        if len(set(assign)) < k:
            continue
        a = np.array(assign)
        s = sum(((x[a == j] - x[a == j].mean(0)) ** 2).sum() for j in range(k))
        best = min(best, s)
    return best


def random_walk_blocks(seed: int, n: int) -> list[int]:
    """Block trace mixing short jitter with occasional far jumps (exercises the page filter)."""
    rng = np.random.default_rng(seed)
    steps = np.where(rng.random(n) < 0.9, rng.integers(-40, 41, n), rng.integers(-5000, 5000, n))
    return (10_000 + np.cumsum(steps)).tolist()


def oracle_label(blocks, t, W, D, page_filter, bpp=64):
    """Double loop over the future window and the delta domain."""
    label = [0] * (2 * D)
    for u in range(t + 1, min(t + W, len(blocks) - 1) + 1):
        for bit in range(2 * D):
            d = bit - D if bit < D else bit - D + 1
            if blocks[u] - blocks[t] != d:
                continue
            if page_filter and blocks[u] // bpp != blocks[t] // bpp:
                continue
            label[bit] = 1
    return label


def brute_force_metrics(labels, probs, thr):
    tp = fp = fn = tn = 0
    for row_y, row_p in zip(labels.tolist(), probs.tolist()):
        for y, p in zip(row_y, row_p):
            pred = p > thr
            if pred and y:
                tp += 1
            elif pred:
                fp += 1
            elif y:
                fn += 1
            else:
                tn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return (tp, fp, fn, tn), (prec, rec, f1)


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def loss_gradient_error(seed: int) -> float:
    """One random case: BCE, KD and the combined loss w.r.t. their inputs."""
    from packd.distillation import LossConfig, bce_loss, multilabel_kd_loss, total_loss

    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 9)))
    y = _t(rng.integers(0, 2, shape).astype(float))
    T = float(rng.uniform(0.5, 6))
    lam = float(rng.uniform(0, 1))
    cfg = LossConfig(T=T, lam=lam)
    zt = _t(rng.normal(0, 2, shape))
    zs = _t(rng.normal(0, 2, shape)).requires_grad_()
    p = _t(rng.uniform(0.02, 0.98, shape)).requires_grad_()
    errs = [
        gradient_check(lambda: bce_loss(y, p), [p], rng),
        gradient_check(lambda: multilabel_kd_loss(zt, zs, T), [zs], rng),
        gradient_check(lambda: total_loss(y, zt, zs, cfg), [zs], rng),
    ]
    return max(errs)
