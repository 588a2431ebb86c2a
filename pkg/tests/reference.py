"""Independent reference implementations used as test oracles.

Everything here is written from the definitions, with different code paths
(python loops, scipy) than the library, so agreement is meaningful.
"""

import numpy as np
from scipy.spatial.transform import Rotation


def brute_knn(target, queries, k):
    """Exhaustive k-NN with (distance, index) sort."""
    target = np.asarray(target, dtype=float)
    queries = np.asarray(queries, dtype=float)
    out = []
    for q in queries:
        ranked = sorted(range(len(target)),
                        key=lambda j: (float(np.dot(q - target[j], q - target[j])), j))
        out.append(ranked[:min(k, len(target))])
    return np.asarray(out, dtype=np.int64)


def rodrigues(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * cross + (1 - np.cos(angle)) * (cross @ cross)


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rodrigues(axis, rng.uniform(0, np.pi))


def fit_rigid_scipy(source, destination):
    """Dual-route rigid fit: scipy's Wahba solver on centered sets."""
    source = np.asarray(source, dtype=float)
    destination = np.asarray(destination, dtype=float)
    p_bar = source.mean(axis=0)
    d_bar = destination.mean(axis=0)
    rot, _ = Rotation.align_vectors(destination - d_bar, source - p_bar)
    r = rot.as_matrix()
    return r, d_bar - r @ p_bar


def rigid_mse(r, t, source, destination):
    res = source @ r.T + t - destination
    return float(np.mean(np.sum(res * res, axis=1)))


def grid_fit_mse(source, destination, axis_steps=14, angle_steps=25):
    """Coarse grid search over rotations; translation closed-form per
    candidate. Returns the best MSE found."""
    source = np.asarray(source, dtype=float)
    destination = np.asarray(destination, dtype=float)
    p_bar = source.mean(axis=0)
    d_bar = destination.mean(axis=0)
    best = np.inf
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(axis_steps):
        # Fibonacci-sphere axes
        z = 1 - 2 * (i + 0.5) / axis_steps
        rad = np.sqrt(max(0.0, 1 - z * z))
        phi = golden * i
        axis = np.array([rad * np.cos(phi), rad * np.sin(phi), z])
        for angle in np.linspace(0, np.pi, angle_steps):
            r = rodrigues(axis, angle)
            t = d_bar - r @ p_bar
            best = min(best, rigid_mse(r, t, source, destination))
    return best


def golden_min(f, lo, hi, tol=1e-10):
    gr = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = f(d)
    return (a + b) / 2


def metrics_reference(pred, gt, positions, intrinsics=None):
    """Loop-based metric evaluation; returns a plain dict."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    positions = np.asarray(positions, dtype=float)
    n = len(pred)
    epe_sum = 0.0
    ns, nr, no = 0, 0, 0
    for i in range(n):
        e = float(np.linalg.norm(pred[i] - gt[i]))
        rel = e / max(float(np.linalg.norm(gt[i])), 1e-12)
        epe_sum += e
        if e < 0.05 or rel < 0.05:
            ns += 1
        if e < 0.1 or rel < 0.1:
            nr += 1
        if e > 0.3 or rel > 0.1:
            no += 1
    out = {
        "epe3d": epe_sum / n,
        "acc3ds": 100.0 * ns / n,
        "acc3dr": 100.0 * nr / n,
        "outliers3d": 100.0 * no / n,
    }
    if intrinsics is not None:
        fx, fy, cx, cy = intrinsics
        err2 = []
        hits = 0
        for i in range(n):
            trio = (positions[i], positions[i] + pred[i], positions[i] + gt[i])
            if any(p[2] <= 0 for p in trio):
                continue
            def proj(p):
                return np.array([fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy])
            base = proj(trio[0])
            fp = proj(trio[1]) - base
            fg = proj(trio[2]) - base
            e = float(np.linalg.norm(fp - fg))
            rel = e / max(float(np.linalg.norm(fg)), 1e-12)
            err2.append(e)
            if e < 3.0 or rel < 0.05:
                hits += 1
        if err2:
            out["epe2d"] = float(np.mean(err2))
            out["acc2d"] = 100.0 * hits / len(err2)
        else:
            out["epe2d"] = None
            out["acc2d"] = None
    return out


def mlp_forward_reference(net, x):
    """Per-sample loop forward pass for an Mlp."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = x[None, :] if single else x.reshape(-1, x.shape[-1])
    outs = []
    for row in rows:
        y = row
        for layer in net.layers:
            acc = np.empty(layer.out_dim)
            for o in range(layer.out_dim):
                acc[o] = float(np.dot(layer.weight[o], y)) + layer.bias[o]
            if layer.activation == "relu":
                acc = np.where(acc > 0, acc, 0.0)
            y = acc
        outs.append(y)
    outs = np.asarray(outs)
    if single:
        return outs[0]
    return outs.reshape(x.shape[:-1] + (outs.shape[-1],))


def softmax_reference(logits, axis):
    logits = np.asarray(logits, dtype=float)
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def crf_energy_reference(y, z, positions, neighbors, kernel_weights, alphas, beta, regions):
    """Loop-based total energy with exact leave-one-out rigid fits via scipy.
    kernel_weights: list of (n, k) arrays aligned with alphas."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    total = 0.0
    for i in range(len(y)):
        d = y[i] - z[i]
        total += float(d @ d)
    if neighbors is not None:
        for alpha, kw in zip(alphas, kernel_weights):
            for i in range(len(y)):
                for col, j in enumerate(neighbors[i]):
                    diff = y[i] - y[j]
                    total += alpha * kw[i, col] * float(diff @ diff)
    if beta > 0:
        for idx in regions:
            if len(idx) == 1:
                continue
            for local, i in enumerate(idx):
                rest = [j for j in idx if j != i]
                p = positions[rest]
                ddest = positions[rest] + y[rest]
                if len(rest) >= 3:
                    r, t = fit_rigid_scipy(p, ddest)
                else:
                    r = np.eye(3)
                    t = ddest.mean(axis=0) - p.mean(axis=0)
                g = r @ positions[i] + t - positions[i]
                diff = y[i] - g
                total += beta * float(diff @ diff)
    return total
