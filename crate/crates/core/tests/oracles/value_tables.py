"""Independent numpy evaluations behind the frozen value tables in
tests/value_tables.rs.

Inputs are closed-form: wave(n, a, b)[i] = float32(sin(a*i + b)).
The reference-encoder case needs the seeded weights of
ReferenceEncoder::seeded(42), saved as VTLT files (Tensor::save) into the
directory given as the first argument.
"""
import struct
import sys

import numpy as np


def wave(n, a, b):
    return np.array([np.float32(np.sin(a * i + b)) for i in range(n)], dtype=np.float64)


def load(path):
    raw = open(path, "rb").read()
    assert raw[:4] == b"VTLT" and raw[4] == 1
    rank = raw[5]
    dims = struct.unpack("<%dI" % rank, raw[6:6 + 4 * rank])
    data = np.frombuffer(raw[6 + 4 * rank:], dtype="<f4").astype(np.float64)
    return data.reshape(dims)


def attn(q, k, v):
    s = q @ k.T / np.sqrt(q.shape[1])
    s = np.exp(s - s.max(axis=1, keepdims=True))
    return (s / s.sum(axis=1, keepdims=True)) @ v


def show(name, a):
    print(name)
    for row in np.atleast_2d(a):
        print("    [" + ", ".join("%.9e" % x for x in row) + "],")


# cross attention: 4 positions, d = 3, 3 tokens of width 5
q = wave(12, 0.7, 0.1).reshape(4, 3)
wk = wave(15, 0.3, 0.5).reshape(5, 3)
wv = wave(15, 0.9, -0.4).reshape(5, 3)
emb = wave(15, 1.3, 0.2).reshape(3, 5)
show("cross_attention", attn(q, emb @ wk, emb @ wv))

# reference attention on a 2x2 grid, one reference frame
x_ref = wave(20, 0.45, 0.3).reshape(4, 5)
obj = np.array([1, 0, 1, 0], dtype=np.float64)[:, None]
cur = np.array([1, 1, 0, 0], dtype=np.float64)[:, None]
xm = obj * x_ref
show("reference_attention", cur * attn(cur * q, xm @ wk, xm @ wv))

# schedule
betas = np.array([0.0085 * (1 - i / 999) + 0.0120 * (i / 999) for i in range(1000)])
ab = np.cumprod(1 - betas)

# add_noise at t = 250 on a [1, 4, 1, 2] latent
x0 = wave(8, 0.3, 0.0)
noise = wave(8, 0.9, 1.5707963267948966)
show("add_noise", np.sqrt(ab[250]) * x0 + np.sqrt(1 - ab[250]) * noise)

# ddim step 500 -> 480, eta = 1
xt = wave(8, 0.3, 0.2)
eps = wave(8, 0.5, 1.0)
z = wave(8, 0.7, 1.0)
a_t, a_p = ab[500], ab[480]
sigma = np.sqrt((1 - a_p) / (1 - a_t)) * np.sqrt(1 - a_t / a_p)
x0p = (xt - np.sqrt(1 - a_t) * eps) / np.sqrt(a_t)
show("ddim_step", np.sqrt(a_p) * x0p + np.sqrt(1 - a_p - sigma**2) * eps + sigma * z)

# cfg at 7.5
ec = wave(8, 0.6, 0.0)
eu = wave(8, 0.2, 0.4)
show("cfg_combine", eu + 7.5 * (ec - eu))

if len(sys.argv) > 1:
    d = sys.argv[1]
    ck, cb = load(d + "/ck.vtlt"), load(d + "/cb.vtlt")
    hw, hb = load(d + "/hw.vtlt"), load(d + "/hb.vtlt")
    ow, ob = load(d + "/ow.vtlt"), load(d + "/ob.vtlt")
    frame = wave(16, 0.8, 0.3).reshape(4, 2, 2)
    pad = np.pad(frame, ((0, 0), (1, 1), (1, 1)))
    conv = np.zeros((320, 2, 2))
    for o in range(320):
        for y in range(2):
            for x in range(2):
                conv[o, y, x] = cb[o] + np.sum(ck[o] * pad[:, y:y + 3, x:x + 3])
    tokens = conv.reshape(320, 4).T
    h = tokens @ hw + hb
    h = h / (1 + np.exp(-h))
    out = h @ ow + ob
    show("encode_reference[:, :6]", out[:, :6])
    show("encode_reference[:, 1018:]", out[:, 1018:])
    show("encode_reference row sums", out.sum(axis=1))
