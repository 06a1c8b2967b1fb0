"""Straight-line scalar reference for the embedding network (test oracle only)."""

import math


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def _lstm_seq(W, U, b, xs, valid):
    """One sample through one LSTM layer; W, U, b as nested lists."""
    u = len(U[0])
    h = [0.0] * u
    c = [0.0] * u
    outs = []
    for x, ok in zip(xs, valid):
        if ok:
            z = []
            for r in range(4 * u):
                acc = b[r]
                for j, xj in enumerate(x):
                    acc += W[r][j] * xj
                for j in range(u):
                    acc += U[r][j] * h[j]
                z.append(acc)
            new_c, new_h = [], []
            for j in range(u):
                i = _sig(z[j])
                f = _sig(z[u + j])
                g = math.tanh(z[2 * u + j])
                o = _sig(z[3 * u + j])
                cj = f * c[j] + i * g
                new_c.append(cj)
                new_h.append(o * math.tanh(cj))
            h, c = new_h, new_c
        outs.append(list(h))
    return outs, h


def reference_forward(params, x, mask, mode):
    """Embeddings for a batch; train mode assumes dropout rates of zero."""
    tolist = lambda a: a.tolist()
    W1, U1, b1 = map(tolist, (params.layer1.W, params.layer1.U, params.layer1.b))
    W2, U2, b2 = map(tolist, (params.layer2.W, params.layer2.U, params.layer2.b))
    gamma, beta = params.bn.gamma.tolist(), params.bn.beta.tolist()
    eps = params.config.bn_epsilon
    u = len(gamma)
    B, M = len(x), len(x[0])
    h1 = []
    for s in range(B):
        outs, _ = _lstm_seq(W1, U1, b1, x[s].tolist(), mask[s].tolist())
        h1.append(outs)
    if mode == "train":
        mean, var = [], []
        for j in range(u):
            vals = [h1[s][t][j] for s in range(B) for t in range(M) if mask[s][t]]
            m = sum(vals) / len(vals)
            mean.append(m)
            var.append(sum((v - m) ** 2 for v in vals) / len(vals))
    else:
        mean, var = params.bn.running_mean.tolist(), params.bn.running_var.tolist()
    embs = []
    for s in range(B):
        y = [
            [gamma[j] * (h1[s][t][j] - mean[j]) / math.sqrt(var[j] + eps) + beta[j] for j in range(u)]
            for t in range(M)
        ]
        _, h = _lstm_seq(W2, U2, b2, y, mask[s].tolist())
        embs.append(h)
    return embs
