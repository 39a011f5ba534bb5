"""GRU encoder, GRU decoder, GRU discriminator, the reconstruction and
adversarial losses, and exact analytic gradients for all parameters.

All forward/backward kernels are batched: segments stack along a leading
axis N, inputs are (N, l, dim). The public single-segment operations wrap
the batched kernels with N = 1.

Convention: z = sigmoid(Wz u + Uz h + bz), r likewise, candidate
c = tanh(Wc u + Uc (r*h) + bc), h' = (1-z)*h + z*c. The decoder replays
ticks in reverse order, feeding back its previously emitted tick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_CLAMP = 1e-7


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # clip keeps exp in range; saturation beyond +-500 is exact in double
    return 1.0 / (1.0 + np.exp(-np.clip(a, -500.0, 500.0)))


@dataclass
class GruCellParams:
    """Weights for one GRU cell: per gate an input matrix (d_h, d_in), a
    recurrent matrix (d_h, d_h) and a bias (d_h,)."""

    wz: np.ndarray
    uz: np.ndarray
    bz: np.ndarray
    wr: np.ndarray
    ur: np.ndarray
    br: np.ndarray
    wc: np.ndarray
    uc: np.ndarray
    bc: np.ndarray

    @property
    def d_in(self) -> int:
        return self.wz.shape[1]

    @property
    def d_h(self) -> int:
        return self.wz.shape[0]

    def tensors(self) -> list[np.ndarray]:
        return [self.wz, self.uz, self.bz, self.wr, self.ur, self.br,
                self.wc, self.uc, self.bc]

    def zeros_like(self) -> "GruCellParams":
        return GruCellParams(*[np.zeros_like(t) for t in self.tensors()])

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "GruCellParams":
        s = 1.0 / np.sqrt(d_h)

        def w(rows, cols):
            return rng.uniform(-s, s, size=(rows, cols))

        return cls(
            wz=w(d_h, d_in), uz=w(d_h, d_h), bz=np.zeros(d_h),
            wr=w(d_h, d_in), ur=w(d_h, d_h), br=np.zeros(d_h),
            wc=w(d_h, d_in), uc=w(d_h, d_h), bc=np.zeros(d_h),
        )


@dataclass
class ReconstructionModel:
    """Encoder/decoder GRUs plus the output head mapping decoder hidden
    states to reconstructed ticks. Both cells consume [x_t ; y_t]."""

    encoder: GruCellParams
    decoder: GruCellParams
    w_out: np.ndarray  # (d_h, M)
    b_out: np.ndarray  # (M,)
    decoder_feedback: bool = True

    @property
    def d_h(self) -> int:
        return self.encoder.d_h

    @property
    def m(self) -> int:
        return self.w_out.shape[1]

    @property
    def c(self) -> int:
        return self.encoder.d_in - self.m

    def tensors(self) -> list[np.ndarray]:
        return self.encoder.tensors() + self.decoder.tensors() + [self.w_out, self.b_out]


@dataclass
class DiscriminatorParams:
    """GRU over [x_t ; y_t] plus a sigmoid readout on the final hidden state."""

    gru: GruCellParams
    w: np.ndarray  # (d_h,)
    b: float

    @property
    def d_h(self) -> int:
        return self.gru.d_h

    def tensors(self) -> list[np.ndarray]:
        return self.gru.tensors() + [self.w, np.atleast_1d(np.float64(self.b))]


def init_reconstruction_model(m: int, c: int, d_h: int, rng: np.random.Generator,
                              decoder_feedback: bool = True) -> ReconstructionModel:
    s = 1.0 / np.sqrt(d_h)
    return ReconstructionModel(
        encoder=GruCellParams.init(m + c, d_h, rng),
        decoder=GruCellParams.init(m + c, d_h, rng),
        w_out=rng.uniform(-s, s, size=(d_h, m)),
        b_out=np.zeros(m),
        decoder_feedback=decoder_feedback,
    )


def init_discriminator(m: int, c: int, d_h: int, rng: np.random.Generator) -> DiscriminatorParams:
    s = 1.0 / np.sqrt(d_h)
    return DiscriminatorParams(
        gru=GruCellParams.init(m + c, d_h, rng),
        w=rng.uniform(-s, s, size=d_h),
        b=0.0,
    )


# ---------------------------------------------------------------------------
# parameter flattening (optimizer and finite-difference checks work on flat
# vectors)

def flatten_tensors(tensors: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(t) for t in tensors])


def _unflatten_into(vec: np.ndarray, tensors: list[np.ndarray]) -> None:
    pos = 0
    for t in tensors:
        n = t.size
        t[...] = vec[pos:pos + n].reshape(t.shape)
        pos += n
    if pos != vec.size:
        raise ValueError("flat vector length mismatch")


def get_generator_params(model: ReconstructionModel) -> np.ndarray:
    return flatten_tensors(model.tensors())


def set_generator_params(model: ReconstructionModel, vec: np.ndarray) -> None:
    _unflatten_into(vec, model.tensors())


def get_discriminator_params(disc: DiscriminatorParams) -> np.ndarray:
    return flatten_tensors(disc.gru.tensors() + [disc.w, np.atleast_1d(np.float64(disc.b))])


def set_discriminator_params(disc: DiscriminatorParams, vec: np.ndarray) -> None:
    tensors = disc.gru.tensors() + [disc.w]
    n = sum(t.size for t in tensors)
    _unflatten_into(vec[:n], tensors)
    disc.b = float(vec[n])
    if vec.size != n + 1:
        raise ValueError("flat vector length mismatch")


# ---------------------------------------------------------------------------
# batched GRU cell

def _cell_forward(cell: GruCellParams, u: np.ndarray, h: np.ndarray, proj=None):
    """One GRU step for a batch: u (N, d_in), h (N, d_h). proj optionally
    carries the precomputed input projections (u Wz^T, u Wr^T, u Wc^T)."""
    if proj is None:
        az, ar, ac = u @ cell.wz.T, u @ cell.wr.T, u @ cell.wc.T
    else:
        az, ar, ac = proj
    z = _sigmoid(az + h @ cell.uz.T + cell.bz)
    r = _sigmoid(ar + h @ cell.ur.T + cell.br)
    rh = r * h
    c = np.tanh(ac + rh @ cell.uc.T + cell.bc)
    h_new = (1.0 - z) * h + z * c
    return h_new, (u, h, z, r, rh, c)


def _input_projections(cell: GruCellParams, u_seq: np.ndarray):
    """Project a whole input sequence (N, l, d_in) through the three gate
    input matrices in one matmul each."""
    n, l, d = u_seq.shape
    flat = u_seq.reshape(n * l, d)
    az = (flat @ cell.wz.T).reshape(n, l, -1)
    ar = (flat @ cell.wr.T).reshape(n, l, -1)
    ac = (flat @ cell.wc.T).reshape(n, l, -1)
    return az, ar, ac


def _gate_backward(cell: GruCellParams, cache, dh_new: np.ndarray):
    """Backprop one GRU step to the pre-activation gate gradients; weight
    gradients are accumulated later in bulk. Returns (dh_prev, da_z, da_r,
    da_c)."""
    u, h, z, r, rh, c = cache
    da_c = (dh_new * z) * (1.0 - c * c)
    drh = da_c @ cell.uc
    da_r = (drh * h) * (r * (1.0 - r))
    da_z = (dh_new * (c - h)) * (z * (1.0 - z))
    dh_prev = dh_new * (1.0 - z) + drh * r + da_r @ cell.ur + da_z @ cell.uz
    return dh_prev, da_z, da_r, da_c


def _weight_grads(caches, steps, daz, dar, dac) -> GruCellParams:
    """Accumulate GRU weight gradients over all steps with one stacked
    matmul per weight. steps gives the time index matching each da entry."""
    u = np.concatenate([caches[t][0] for t in steps], axis=0)
    h = np.concatenate([caches[t][1] for t in steps], axis=0)
    rh = np.concatenate([caches[t][4] for t in steps], axis=0)
    z = np.concatenate(daz, axis=0)
    r = np.concatenate(dar, axis=0)
    c = np.concatenate(dac, axis=0)
    return GruCellParams(
        wz=z.T @ u, uz=z.T @ h, bz=z.sum(axis=0),
        wr=r.T @ u, ur=r.T @ h, br=r.sum(axis=0),
        wc=c.T @ u, uc=c.T @ rh, bc=c.sum(axis=0),
    )


# ---------------------------------------------------------------------------
# encoder / decoder / discriminator forward

def encoder_forward(model: ReconstructionModel, x: np.ndarray, y: np.ndarray,
                    keep_cache: bool = False):
    """x (N, l, M), y (N, l, C) -> H (N, l, d_h), caches."""
    n, l, _ = x.shape
    u_seq = np.concatenate([x, y], axis=2)
    az, ar, ac = _input_projections(model.encoder, u_seq)
    h = np.zeros((n, model.d_h))
    hs = np.empty((n, l, model.d_h))
    caches = [] if keep_cache else None
    for t in range(l):
        h, cache = _cell_forward(model.encoder, u_seq[:, t], h,
                                 (az[:, t], ar[:, t], ac[:, t]))
        hs[:, t, :] = h
        if keep_cache:
            caches.append(cache)
    return hs, caches


def decoder_forward(model: ReconstructionModel, h_last: np.ndarray, y: np.ndarray,
                    keep_cache: bool = False):
    """Replay l ticks in reverse from h_last; returns x' (N, l, M) in tick order."""
    n, l, _ = y.shape
    m = model.m
    cell = model.decoder
    # the conditional part of the input is known for every step up front;
    # only the feedback part must be projected inside the loop
    yflat = y.reshape(n * l, -1)
    az_y = (yflat @ cell.wz[:, m:].T).reshape(n, l, -1)
    ar_y = (yflat @ cell.wr[:, m:].T).reshape(n, l, -1)
    ac_y = (yflat @ cell.wc[:, m:].T).reshape(n, l, -1)
    wz_x, wr_x, wc_x = cell.wz[:, :m].T, cell.wr[:, :m].T, cell.wc[:, :m].T
    h = h_last
    out = np.empty((n, l, m))
    prev = np.zeros((n, m))
    caches = [] if keep_cache else None
    hs = [] if keep_cache else None
    for s in range(l):
        t = l - 1 - s
        if model.decoder_feedback:
            fb = prev
            proj = (az_y[:, t] + fb @ wz_x, ar_y[:, t] + fb @ wr_x,
                    ac_y[:, t] + fb @ wc_x)
        else:
            fb = np.zeros((n, m))
            proj = (az_y[:, t], ar_y[:, t], ac_y[:, t])
        u = np.concatenate([fb, y[:, t, :]], axis=1)
        h, cache = _cell_forward(cell, u, h, proj)
        o = h @ model.w_out + model.b_out
        out[:, t, :] = o
        prev = o
        if keep_cache:
            caches.append(cache)
            hs.append(h)
    return out, (caches, hs)


def discriminator_forward(disc: DiscriminatorParams, x: np.ndarray, y: np.ndarray,
                          keep_cache: bool = False):
    """Returns (prob (N,), f (N, d_h), caches). prob clamped away from {0,1}."""
    n, l, _ = x.shape
    u_seq = np.concatenate([x, y], axis=2)
    az, ar, ac = _input_projections(disc.gru, u_seq)
    h = np.zeros((n, disc.d_h))
    caches = [] if keep_cache else None
    for t in range(l):
        h, cache = _cell_forward(disc.gru, u_seq[:, t], h,
                                 (az[:, t], ar[:, t], ac[:, t]))
        if keep_cache:
            caches.append(cache)
    a = h @ disc.w + disc.b
    prob = np.clip(_sigmoid(a), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return prob, h, caches


# ---------------------------------------------------------------------------
# backward passes

def encoder_backward(model: ReconstructionModel, caches, dh_last: np.ndarray,
                     dhs: np.ndarray | None = None) -> GruCellParams:
    """Backprop through the encoder given the gradient at its final state
    (and optionally at every per-tick hidden state)."""
    cell = model.encoder
    dh = dh_last
    steps = range(len(caches) - 1, -1, -1)
    daz, dar, dac = [], [], []
    for t in steps:
        if dhs is not None:
            dh = dh + dhs[:, t, :]
        dh, az, ar, ac = _gate_backward(cell, caches[t], dh)
        daz.append(az)
        dar.append(ar)
        dac.append(ac)
    return _weight_grads(caches, steps, daz, dar, dac)


def decoder_backward(model: ReconstructionModel, dec_cache, dxr: np.ndarray):
    """Backprop through the autoregressive decoder.

    dxr (N, l, M) is the loss gradient at the reconstructed ticks (tick
    order). Returns (decoder grads, dW_out, db_out, dh_last)."""
    caches, hs = dec_cache
    cell = model.decoder
    l = dxr.shape[1]
    n, m = dxr.shape[0], model.m
    wz_x, wr_x, wc_x = cell.wz[:, :m], cell.wr[:, :m], cell.wc[:, :m]
    dh = np.zeros((n, model.d_h))
    d_feedback = np.zeros((n, m))
    steps = range(l - 1, -1, -1)
    daz, dar, dac, dos, hss = [], [], [], [], []
    for s in steps:
        t = l - 1 - s
        do = dxr[:, t, :] + d_feedback
        dos.append(do)
        hss.append(hs[s])
        dh = dh + do @ model.w_out.T
        dh, az, ar, ac = _gate_backward(cell, caches[s], dh)
        daz.append(az)
        dar.append(ar)
        dac.append(ac)
        if model.decoder_feedback and s > 0:
            d_feedback = az @ wz_x + ar @ wr_x + ac @ wc_x
        else:
            d_feedback = np.zeros((n, m))
    grads = _weight_grads(caches, steps, daz, dar, dac)
    do_all = np.concatenate(dos, axis=0)
    h_all = np.concatenate(hss, axis=0)
    dw_out = h_all.T @ do_all
    db_out = do_all.sum(axis=0)
    return grads, dw_out, db_out, dh


def discriminator_backward_params(disc: DiscriminatorParams, caches, f: np.ndarray,
                                  da: np.ndarray):
    """Backprop d(loss)/da (N,) through the readout and GRU into parameter
    grads. Returns (gru grads, dw, db)."""
    dw = da @ f
    db = float(da.sum())
    dh = da[:, None] * disc.w[None, :]
    steps = range(len(caches) - 1, -1, -1)
    daz, dar, dac = [], [], []
    for t in steps:
        dh, az, ar, ac = _gate_backward(disc.gru, caches[t], dh)
        daz.append(az)
        dar.append(ar)
        dac.append(ac)
    return _weight_grads(caches, steps, daz, dar, dac), dw, db


def discriminator_backward_inputs(disc: DiscriminatorParams, caches, df: np.ndarray,
                                  m: int) -> np.ndarray:
    """Backprop a gradient at the final hidden state to the x-part of the
    inputs, treating discriminator parameters as constants."""
    cell = disc.gru
    wz_x, wr_x, wc_x = cell.wz[:, :m], cell.wr[:, :m], cell.wc[:, :m]
    l = len(caches)
    n = df.shape[0]
    dx = np.empty((n, l, m))
    dh = df
    for t in range(l - 1, -1, -1):
        dh, az, ar, ac = _gate_backward(cell, caches[t], dh)
        dx[:, t, :] = az @ wz_x + ar @ wr_x + ac @ wc_x
    return dx


# ---------------------------------------------------------------------------
# public single-segment operations

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite value in input")


def gru_step(u: np.ndarray, h_prev: np.ndarray, cell: GruCellParams) -> np.ndarray:
    """One GRU step on a single input vector."""
    u = np.asarray(u, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    _check_finite(u, h_prev)
    h, _ = _cell_forward(cell, u[None, :], h_prev[None, :])
    return h[0]


def encode(segment: np.ndarray, cond: np.ndarray, model: ReconstructionModel):
    """Run the encoder over one segment; returns (H (l, d_h), h_last)."""
    x = np.asarray(segment, dtype=np.float64)
    y = np.asarray(cond, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("segment and cond must have equal length")
    hs, _ = encoder_forward(model, x[None], y[None])
    return hs[0], hs[0, -1].copy()


def decode(h_last: np.ndarray, cond: np.ndarray, model: ReconstructionModel) -> np.ndarray:
    """Replay a segment from the encoder's final state, reversed then realigned."""
    y = np.asarray(cond, dtype=np.float64)
    out, _ = decoder_forward(model, np.asarray(h_last, dtype=np.float64)[None], y[None])
    return out[0]


def reconstruct(segment: np.ndarray, cond: np.ndarray,
                model: ReconstructionModel) -> np.ndarray:
    _, h_last = encode(segment, cond, model)
    return decode(h_last, cond, model)


def discriminate(segment: np.ndarray, cond: np.ndarray, disc: DiscriminatorParams):
    """Returns (probability the segment is real, final hidden feature f_D)."""
    x = np.asarray(segment, dtype=np.float64)
    y = np.asarray(cond, dtype=np.float64)
    _check_finite(x, y)
    prob, f, _ = discriminator_forward(disc, x[None], y[None])
    return float(prob[0]), f[0]


def _seg_norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(v * v)))


def generator_loss(x: np.ndarray, x_rec: np.ndarray, f_real: np.ndarray,
                   f_fake: np.ndarray, lam: float) -> float:
    """Euclidean reconstruction norm plus lam-weighted feature matching norm."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _seg_norm(np.asarray(x) - np.asarray(x_rec)) + \
        lam * _seg_norm(np.asarray(f_real) - np.asarray(f_fake))


def discriminator_loss(prob_real: float, prob_fake: float) -> float:
    """log D(x|y) + log(1 - D(x'|y)); the trainer ascends this."""
    if not (0.0 < prob_real < 1.0 and 0.0 < prob_fake < 1.0):
        raise ValueError("probabilities must lie strictly in (0,1)")
    return float(np.log(prob_real) + np.log(1.0 - prob_fake))


# ---------------------------------------------------------------------------
# batched losses + gradients (used by the trainer; single-segment
# compute_gradients wraps N = 1)

def generator_loss_and_grads(model: ReconstructionModel, disc: DiscriminatorParams,
                             x: np.ndarray, y: np.ndarray, lam: float,
                             forward=None):
    """Mean per-segment generator loss over the batch and its gradient as a
    flat vector over the generator parameters. Discriminator parameters are
    treated as constants; gradients flow through the discriminator into the
    reconstruction only. forward optionally reuses an encoder/decoder pass
    (hs, enc_cache, xr, dec_cache) computed with the current parameters."""
    n = x.shape[0]
    if forward is None:
        hs, enc_cache = encoder_forward(model, x, y, keep_cache=True)
        xr, dec_cache = decoder_forward(model, hs[:, -1, :], y, keep_cache=True)
    else:
        hs, enc_cache, xr, dec_cache = forward

    _, f_real, _ = discriminator_forward(disc, x, y)
    _, f_fake, fake_cache = discriminator_forward(disc, xr, y, keep_cache=True)

    resid = x - xr
    rec_norms = np.sqrt(np.sum(resid * resid, axis=(1, 2)))
    feat_diff = f_real - f_fake
    feat_norms = np.sqrt(np.sum(feat_diff * feat_diff, axis=1))
    losses = rec_norms + lam * feat_norms
    loss = float(losses.mean())

    # dL/dx' from the reconstruction norm; subgradient 0 at the zero norm
    safe_rec = np.where(rec_norms > 0, rec_norms, 1.0)
    dxr = -resid / safe_rec[:, None, None]
    dxr[rec_norms == 0] = 0.0

    # dL/df_fake from the feature matching term, pushed to x' through the
    # discriminator's input path
    safe_feat = np.where(feat_norms > 0, feat_norms, 1.0)
    df_fake = -lam * feat_diff / safe_feat[:, None]
    df_fake[feat_norms == 0] = 0.0
    if lam > 0:
        dxr = dxr + discriminator_backward_inputs(disc, fake_cache, df_fake, model.m)

    dec_grads, dw_out, db_out, dh_last = decoder_backward(model, dec_cache, dxr)
    enc_grads = encoder_backward(model, enc_cache, dh_last)

    flat = flatten_tensors(enc_grads.tensors() + dec_grads.tensors() + [dw_out, db_out])
    flat /= n
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite generator gradient")
    return loss, flat, xr


def discriminator_loss_and_grads(disc: DiscriminatorParams, x: np.ndarray,
                                 y: np.ndarray, xr: np.ndarray):
    """Mean per-segment adversarial objective log D(x|y) + log(1 - D(x'|y))
    and its gradient over the discriminator parameters (flat vector).
    Reconstructions xr are treated as constants."""
    n = x.shape[0]
    p_real, f_real, real_cache = discriminator_forward(disc, x, y, keep_cache=True)
    p_fake, f_fake, fake_cache = discriminator_forward(disc, xr, y, keep_cache=True)
    loss = float(np.mean(np.log(p_real) + np.log(1.0 - p_fake)))

    # d/da log sigmoid(a) = 1 - p ; d/da log(1 - sigmoid(a)) = -p
    # a clamped probability has zero slope
    interior_real = (p_real > PROB_CLAMP) & (p_real < 1.0 - PROB_CLAMP)
    interior_fake = (p_fake > PROB_CLAMP) & (p_fake < 1.0 - PROB_CLAMP)
    da_real = np.where(interior_real, 1.0 - p_real, 0.0)
    da_fake = np.where(interior_fake, -p_fake, 0.0)

    g_real, dw_r, db_r = discriminator_backward_params(disc, real_cache, f_real, da_real)
    g_fake, dw_f, db_f = discriminator_backward_params(disc, fake_cache, f_fake, da_fake)
    tensors = [a + b for a, b in zip(g_real.tensors(), g_fake.tensors())]
    flat = flatten_tensors(tensors + [dw_r + dw_f, np.atleast_1d(db_r + db_f)])
    flat /= n
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite discriminator gradient")
    return loss, flat


def compute_gradients(kind: str, segment: np.ndarray, cond: np.ndarray,
                      model: ReconstructionModel, disc: DiscriminatorParams,
                      lam: float) -> np.ndarray:
    """Exact analytic gradient for one segment, as a flat vector.

    kind "generator": d L_G / d Theta_G with the discriminator held constant.
    kind "discriminator": d L_D / d Theta_D with reconstructions held constant.
    """
    x = np.asarray(segment, dtype=np.float64)[None]
    y = np.asarray(cond, dtype=np.float64)[None]
    _check_finite(x, y)
    if kind == "generator":
        _, flat, _ = generator_loss_and_grads(model, disc, x, y, lam)
        return flat
    if kind == "discriminator":
        xr, _ = decoder_forward(model, encoder_forward(model, x, y)[0][:, -1, :], y)
        _, flat = discriminator_loss_and_grads(disc, x, y, xr)
        return flat
    raise ValueError(f"unknown gradient kind {kind!r}")
