"""Plain-Python spectrogram transformer used as an oracle for the numpy implementation."""

import math


def ref_layer_norm(v, g, b):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + 1e-6) * gi + bi for x, gi, bi in zip(v, g, b)]


def ref_matvec(v, M, b):
    return [sum(v[i] * M[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]


def reference_forward(values, w, cfg):
    """Token-by-token, head-by-head forward pass in plain Python floats."""
    W = {k: v.tolist() for k, v in w.items()}
    d, nh = cfg.embed_dim, cfg.heads
    hd = d // nh
    n_t = max(1, math.ceil(values.shape[1] / cfg.patch_time))
    tokens = [[c + p for c, p in zip(W["cls"], W["pos"][0])]]
    for fi in range(cfg.n_mels // cfg.patch_freq):
        for ti in range(n_t):
            patch = []
            for r in range(cfg.patch_freq):
                for c in range(cfg.patch_time):
                    col = ti * cfg.patch_time + c
                    patch.append(float(values[fi * cfg.patch_freq + r, col]) if col < values.shape[1] else 0.0)
            e = ref_matvec(patch, W["patch.weight"], W["patch.bias"])
            pos = W["pos"][1 + fi * cfg.max_time_patches + ti]
            tokens.append([x + p for x, p in zip(e, pos)])
    n = len(tokens)
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        h = [ref_layer_norm(t, W[p + "ln1.weight"], W[p + "ln1.bias"]) for t in tokens]
        qkv = [ref_matvec(t, W[p + "attn.qkv.weight"], W[p + "attn.qkv.bias"]) for t in h]
        ctx = [[0.0] * d for _ in range(n)]
        for head in range(nh):
            lo = head * hd
            for i in range(n):
                q = qkv[i][lo:lo + hd]
                s = [sum(q[k] * qkv[j][d + lo + k] for k in range(hd)) / math.sqrt(hd) for j in range(n)]
                m = max(s)
                e = [math.exp(x - m) for x in s]
                tot = sum(e)
                for k in range(hd):
                    ctx[i][lo + k] = sum(e[j] / tot * qkv[j][2 * d + lo + k] for j in range(n))
        out = [ref_matvec(c, W[p + "attn.proj.weight"], W[p + "attn.proj.bias"]) for c in ctx]
        tokens = [[a + b for a, b in zip(t, o)] for t, o in zip(tokens, out)]
        h = [ref_layer_norm(t, W[p + "ln2.weight"], W[p + "ln2.bias"]) for t in tokens]
        h = [ref_matvec(t, W[p + "mlp.fc1.weight"], W[p + "mlp.fc1.bias"]) for t in h]
        h = [[0.5 * x * (1 + math.erf(x / math.sqrt(2))) for x in t] for t in h]
        h = [ref_matvec(t, W[p + "mlp.fc2.weight"], W[p + "mlp.fc2.bias"]) for t in h]
        tokens = [[a + b for a, b in zip(t, o)] for t, o in zip(tokens, h)]
    cls = ref_layer_norm(tokens[0], W["norm.weight"], W["norm.bias"])
    logits = ref_matvec(cls, W["head.weight"], W["head.bias"])
    return [1.0 / (1.0 + math.exp(-z)) for z in logits]
