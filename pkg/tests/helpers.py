"""Independent oracles and the finite-difference gradient checker used across tests.

Everything here is deliberately loop-based and self-contained so it cannot
share a bug with the vectorized implementations it verifies.
"""

import math

import numpy as np
import torch


def gelu_exact(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def cosine_attention_oracle(z, prototypes, observed, mask_neg=-1e9, eps=1e-12):
    """Per-pair cosine similarity, row masking, and softmax with explicit loops."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(prototypes, dtype=np.float64)
    n, c = z.shape[0], a.shape[0]
    logits = np.empty((n, c))
    for i in range(n):
        for k in range(c):
            if not observed[i]:
                logits[i, k] = mask_neg
                continue
            zi, ak = z[i], a[k]
            nz = max(math.sqrt(float(zi @ zi)), eps)
            na = max(math.sqrt(float(ak @ ak)), eps)
            logits[i, k] = float(zi @ ak) / (nz * na)
    out = np.empty_like(logits)
    for i in range(n):
        row = logits[i] - logits[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def matmul_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def compressor_oracle(z, weight, bias, mix_w, mix_b):
    """Hand-composed prototype chain: instance-axis linear, GeLU, c-by-c linear."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    h = matmul_oracle(z.T, w) + b  # [d, c]
    h = np.vectorize(gelu_exact)(h)
    # torch Linear stores weight as [out, in]
    h = matmul_oracle(h, np.asarray(mix_w, dtype=np.float64).T) + np.asarray(mix_b, np.float64)
    return h.T  # [c, d]


def attention_oracle(g, observed, layer, mask_neg=-1e9):
    """Per-head scaled dot-product attention with python loops, using the
    layer's own projection weights."""
    g = np.asarray(g.detach(), dtype=np.float64)
    n, d = g.shape
    heads = layer.heads
    hd = d // heads

    def lin(mod, x):
        return matmul_oracle(x, np.asarray(mod.weight.detach(), np.float64).T) + np.asarray(
            mod.bias.detach(), np.float64
        )

    q, k, v = lin(layer.query, g), lin(layer.key, g), lin(layer.value, g)
    mixed = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        qs, ks, vs = q[:, sl], k[:, sl], v[:, sl]
        for i in range(n):
            logits = np.empty(n)
            for j in range(n):
                logits[j] = float(qs[i] @ ks[j]) / math.sqrt(hd)
                if not observed[j]:
                    logits[j] += mask_neg
            logits -= logits.max()
            w = np.exp(logits)
            w /= w.sum()
            for j in range(n):
                mixed[i, sl] += w[j] * vs[j]
    return lin(layer.out, mixed)


def fused_concat_oracle(features, omega_bar):
    """Element-wise reconstruction of the weighted concatenation."""
    n = features[0].shape[0]
    width = sum(f.shape[1] for f in features)
    out = np.zeros((n, width))
    for i in range(n):
        col = 0
        for j, f in enumerate(features):
            fj = np.asarray(f, dtype=np.float64)
            w = 1.0 if omega_bar is None else float(np.asarray(omega_bar)[i, j])
            for kk in range(fj.shape[1]):
                out[i, col + kk] = w * fj[i, kk]
            col += fj.shape[1]
    return out


def finite_difference_gradients(build_loss, params, h=1e-5):
    """Central finite differences of a loss closure w.r.t. parameter tensors."""
    fds = []
    for p in params:
        flat = p.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            hi = float(build_loss().detach())
            flat[i] = orig - h
            lo = float(build_loss().detach())
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * h)
        fds.append(fd.view_as(p))
    return fds


def gradient_relative_error(build_loss, params, h=1e-5):
    """Global relative error between autograd and central-difference gradients."""
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    ad = torch.cat(
        [
            (torch.zeros_like(p) if g is None else g).reshape(-1)
            for p, g in zip(params, grads)
        ]
    )
    fd = torch.cat([t.reshape(-1) for t in finite_difference_gradients(build_loss, params, h=h)])
    denom = max(ad.norm().item(), fd.norm().item(), 1e-12)
    return (ad - fd).norm().item() / denom


def least_squares_probe(x_train, y_train, x_test, y_test, num_classes):
    """Independent linear classifier: one-hot least squares, argmax decision."""
    a = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
    targets = np.eye(num_classes)[y_train]
    coef, *_ = np.linalg.lstsq(a, targets, rcond=None)
    at = np.hstack([x_test, np.ones((x_test.shape[0], 1))])
    pred = (at @ coef).argmax(axis=1)
    return float((pred == y_test).mean())


def confusion_metrics_oracle(preds, labels, num_classes):
    """Hand-built confusion-matrix metrics: accuracy, macro recall, weighted F1."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    cm = np.zeros((num_classes, num_classes), dtype=int)
    for p, t in zip(preds, labels):
        cm[t, p] += 1
    acc = np.trace(cm) / cm.sum()
    recalls, f1s, supports = [], [], []
    for k in range(num_classes):
        support = cm[k].sum()
        if support == 0:
            continue
        tp = cm[k, k]
        recall = tp / support
        pred_k = cm[:, k].sum()
        precision = tp / pred_k if pred_k else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        recalls.append(recall)
        f1s.append(f1)
        supports.append(support)
    ua = float(np.mean(recalls))
    f1w = float(np.dot(f1s, supports) / np.sum(supports))
    return {"acc": float(acc), "ua": ua, "f1": f1w}


def identity_linear(linear):
    """Set a square torch Linear to the identity map in place."""
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.out_features, linear.in_features))
        linear.bias.zero_()
    return linear
