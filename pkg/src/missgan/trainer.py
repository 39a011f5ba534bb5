"""Training orchestration: alternating discriminator/generator updates,
hidden-representation extraction, PCA reduction, re-segmentation across
scales, and binary checkpointing."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .data import ChannelSchema, NormStats, TimeSeries, coarse_segment, normalize_apply, normalize_fit
from .hmmseg import segment_series
from .numerics import AdamState, Projection, adam_step, child_rng, pca_fit, pca_transform
from .recnet import (
    DiscriminatorParams,
    GruCellParams,
    ReconstructionModel,
    discriminator_loss_and_grads,
    decoder_forward,
    encoder_forward,
    encode,
    generator_loss_and_grads,
    get_discriminator_params,
    get_generator_params,
    init_discriminator,
    init_reconstruction_model,
    set_discriminator_params,
    set_generator_params,
)

CHECKPOINT_MAGIC = b"MSGN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1            # feature-matching weight
    lr: float = 0.001           # initial learning rate
    lr_decay: float = 0.75      # applied every lr_decay_epochs
    lr_decay_epochs: int = 8
    alpha: float = 0.1          # segmentation granularity
    l_init: int = 512           # coarse window
    d_r: int = 6                # PCA target dimension
    d_h: int = 100              # GRU hidden size
    max_scales: int = 5         # K, max segmentation iterations
    epochs: int = 16            # per reconstruction phase
    batch_size: int = 32
    seed: int = 0
    decoder_feedback: bool = True
    hmm_states: int = 4
    norm_mode: str = "minmax"
    segmentation: bool = True   # False = single-scale ablation on coarse windows
    # per-scale segmentation budget: candidate regime cap, refinement
    # rounds, and EM iterations; kept small so re-segmenting at every
    # scale stays a minor fraction of the training time
    seg_max_regimes: int = 2
    seg_refine_rounds: int = 2
    seg_em_iters: int = 30

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (1 <= self.d_r <= self.d_h):
            raise ValueError("need 1 <= d_r <= d_h")
        if self.max_scales < 1 or self.epochs < 1:
            raise ValueError("max_scales and epochs must be >= 1")
        if self.seg_max_regimes < 1 or self.seg_em_iters < 1 or self.seg_refine_rounds < 0:
            raise ValueError("segmentation budget fields out of range")


def lr_at_epoch(lr0: float, epoch: int, decay: float = 0.75, every: int = 8) -> float:
    """Stepwise-decayed learning rate: lr0 * decay^(epoch // every).

    Evaluated in decimal so the schedule hits the exact decimal values
    (0.001, 0.00075, 0.0005625, ...) instead of accumulating binary
    round-off across periods."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return float(Decimal(repr(lr0)) * Decimal(repr(decay)) ** (epoch // every))


def make_batches(series: TimeSeries, bounds, cfg: TrainConfig):
    """Group segments by exact length into batches of stacked arrays.

    Segments longer than 4 * l_init are split evenly first; every batch is
    (X (N, l, M), Y (N, l, C)). Order is deterministic: by length, then by
    segment start."""
    cap = 4 * cfg.l_init
    pieces = []
    for lo, hi in bounds:
        length = hi - lo
        if length > cap:
            n_parts = -(-length // cap)
            starts = [lo + (length * i) // n_parts for i in range(n_parts)] + [hi]
            pieces.extend((starts[i], starts[i + 1]) for i in range(n_parts))
        else:
            pieces.append((lo, hi))
    by_len: dict[int, list[tuple[int, int]]] = {}
    for lo, hi in pieces:
        by_len.setdefault(hi - lo, []).append((lo, hi))
    batches = []
    for length in sorted(by_len):
        group = sorted(by_len[length])
        for i in range(0, len(group), cfg.batch_size):
            chunk = group[i:i + cfg.batch_size]
            x = np.stack([series.x[lo:hi] for lo, hi in chunk])
            y = np.stack([series.y[lo:hi] for lo, hi in chunk])
            batches.append((x, y))
    return batches


def train_reconstruction_epoch(model: ReconstructionModel, disc: DiscriminatorParams,
                               batches, cfg: TrainConfig, adam_g: AdamState,
                               adam_d: AdamState, lr: float):
    """One pass over the batches: per batch the discriminator ascends its
    objective first, then the generator descends its loss. Returns
    (adam_g, adam_d, mean L_G, mean L_D) with means weighted per segment."""
    total_g = total_d = 0.0
    n_segments = 0
    for x, y in batches:
        n = x.shape[0]
        hs, enc_cache = encoder_forward(model, x, y, keep_cache=True)
        xr, dec_cache = decoder_forward(model, hs[:, -1, :], y, keep_cache=True)

        loss_d, grad_d = discriminator_loss_and_grads(disc, x, y, xr)
        params_d = get_discriminator_params(disc)
        # ascend L_D == descend -L_D
        params_d, adam_d = adam_step(adam_d, params_d, -grad_d, lr)
        set_discriminator_params(disc, params_d)

        # generator parameters are unchanged since the forward pass, so the
        # cached reconstruction is reused against the freshly updated critic
        loss_g, grad_g, _ = generator_loss_and_grads(
            model, disc, x, y, cfg.lam, forward=(hs, enc_cache, xr, dec_cache))
        params_g = get_generator_params(model)
        params_g, adam_g = adam_step(adam_g, params_g, grad_g, lr)
        set_generator_params(model, params_g)

        if not (np.isfinite(loss_g) and np.isfinite(loss_d)):
            raise FloatingPointError(
                f"non-finite loss in batch of {n} segments of length {x.shape[1]}"
            )
        total_g += loss_g * n
        total_d += loss_d * n
        n_segments += n
    return adam_g, adam_d, total_g / n_segments, total_d / n_segments


def extract_hidden_representation(model: ReconstructionModel, series: TimeSeries,
                                  bounds) -> np.ndarray:
    """Per-tick encoder hidden states over all segments, one row per tick."""
    out = np.empty((series.t, model.d_h))
    for lo, hi in bounds:
        hs, _ = encode(series.x[lo:hi], series.y[lo:hi], model)
        out[lo:hi] = hs
    return out


@dataclass
class Checkpoint:
    """Everything needed to rescore a series: schema, normalization,
    config, trained parameters, PCA, final cut points, and training log."""

    schema: ChannelSchema
    norm_stats: NormStats
    config: TrainConfig
    model: ReconstructionModel
    disc: DiscriminatorParams
    projection: Projection | None
    cut_points: tuple[int, ...]
    t_train: int
    score_window: int
    log: list[str] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(serialize_checkpoint(self))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return deserialize_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# binary checkpoint format: magic "MSGN", u32 version, then length-prefixed
# sections (schema, norm stats, config, tensors, pca, cut points, log).
# Floats are little-endian float64 with explicit shape headers.

def _pack_section(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _pack_text(text: str) -> bytes:
    return _pack_section(text.encode("utf-8"))


def _pack_tensors(named: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes())
    return _pack_section(buf.getvalue())


def _unpack_tensors(payload: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(payload)
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    return out


_GATE_NAMES = ["wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc"]


def _cell_tensors(prefix: str, cell: GruCellParams):
    return [(f"{prefix}.{n}", t) for n, t in zip(_GATE_NAMES, cell.tensors())]


def _cell_from(tensors: dict, prefix: str) -> GruCellParams:
    return GruCellParams(*[tensors[f"{prefix}.{n}"] for n in _GATE_NAMES])


def serialize_checkpoint(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", ck.version))

    s = ck.schema
    schema_text = "\n".join([
        "data=" + ",".join(s.data_channels),
        "cond=" + ",".join(s.cond_channels),
        "label=" + (s.label_channel or ""),
        "categorical=" + ",".join(s.categorical_cond),
    ])
    out.write(_pack_text(schema_text))

    ns = ck.norm_stats
    norm = io.BytesIO()
    norm.write(struct.pack("<BI", 0 if ns.mode == "minmax" else 1, ns.n_channels))
    norm.write(np.ascontiguousarray(ns.a, dtype="<f8").tobytes())
    norm.write(np.ascontiguousarray(ns.b, dtype="<f8").tobytes())
    norm.write(ns.constant.astype(np.uint8).tobytes())
    norm.write(ns.passthrough.astype(np.uint8).tobytes())
    out.write(_pack_section(norm.getvalue()))

    c = ck.config
    cfg_text = "\n".join(f"{k}={v!r}" for k, v in [
        ("lam", c.lam), ("lr", c.lr), ("lr_decay", c.lr_decay),
        ("lr_decay_epochs", c.lr_decay_epochs), ("alpha", c.alpha),
        ("l_init", c.l_init), ("d_r", c.d_r), ("d_h", c.d_h),
        ("max_scales", c.max_scales), ("epochs", c.epochs),
        ("batch_size", c.batch_size), ("seed", c.seed),
        ("decoder_feedback", c.decoder_feedback), ("hmm_states", c.hmm_states),
        ("norm_mode", c.norm_mode), ("segmentation", c.segmentation),
        ("seg_max_regimes", c.seg_max_regimes),
        ("seg_refine_rounds", c.seg_refine_rounds),
        ("seg_em_iters", c.seg_em_iters),
    ])
    out.write(_pack_text(cfg_text))

    tensors = (
        _cell_tensors("enc", ck.model.encoder)
        + _cell_tensors("dec", ck.model.decoder)
        + [("head.w", ck.model.w_out), ("head.b", ck.model.b_out)]
        + _cell_tensors("disc", ck.disc.gru)
        + [("disc.w", ck.disc.w), ("disc.b", np.atleast_1d(np.float64(ck.disc.b)))]
    )
    out.write(_pack_tensors(tensors))

    if ck.projection is not None:
        out.write(_pack_tensors([
            ("pca.mean", ck.projection.mean),
            ("pca.components", ck.projection.components),
            ("pca.var", ck.projection.explained_variance),
        ]))
    else:
        out.write(_pack_tensors([]))

    cuts = io.BytesIO()
    cuts.write(struct.pack("<QQQ", ck.t_train, ck.score_window, len(ck.cut_points)))
    for cp in ck.cut_points:
        cuts.write(struct.pack("<Q", cp))
    out.write(_pack_section(cuts.getvalue()))

    out.write(_pack_text("\n".join(ck.log)))
    return out.getvalue()


def deserialize_checkpoint(blob: bytes) -> Checkpoint:
    buf = io.BytesIO(blob)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    def section() -> bytes:
        (n,) = struct.unpack("<I", buf.read(4))
        return buf.read(n)

    schema_kv = dict(line.split("=", 1) for line in section().decode("utf-8").split("\n"))
    schema = ChannelSchema(
        data_channels=tuple(v for v in schema_kv["data"].split(",") if v),
        cond_channels=tuple(v for v in schema_kv["cond"].split(",") if v),
        label_channel=schema_kv["label"] or None,
        categorical_cond=tuple(v for v in schema_kv["categorical"].split(",") if v),
    )

    norm = io.BytesIO(section())
    mode_flag, n_ch = struct.unpack("<BI", norm.read(5))
    a = np.frombuffer(norm.read(8 * n_ch), dtype="<f8").copy()
    b = np.frombuffer(norm.read(8 * n_ch), dtype="<f8").copy()
    constant = np.frombuffer(norm.read(n_ch), dtype=np.uint8).astype(bool)
    passthrough = np.frombuffer(norm.read(n_ch), dtype=np.uint8).astype(bool)
    norm_stats = NormStats(mode="minmax" if mode_flag == 0 else "zscore",
                           a=a, b=b, constant=constant, passthrough=passthrough)

    cfg_kv = dict(line.split("=", 1) for line in section().decode("utf-8").split("\n"))
    config = TrainConfig(
        lam=float(cfg_kv["lam"]), lr=float(cfg_kv["lr"]),
        lr_decay=float(cfg_kv["lr_decay"]),
        lr_decay_epochs=int(cfg_kv["lr_decay_epochs"]),
        alpha=float(cfg_kv["alpha"]), l_init=int(cfg_kv["l_init"]),
        d_r=int(cfg_kv["d_r"]), d_h=int(cfg_kv["d_h"]),
        max_scales=int(cfg_kv["max_scales"]), epochs=int(cfg_kv["epochs"]),
        batch_size=int(cfg_kv["batch_size"]), seed=int(cfg_kv["seed"]),
        decoder_feedback=cfg_kv["decoder_feedback"] == "True",
        hmm_states=int(cfg_kv["hmm_states"]),
        norm_mode=cfg_kv["norm_mode"].strip("'\""),
        segmentation=cfg_kv["segmentation"] == "True",
        seg_max_regimes=int(cfg_kv["seg_max_regimes"]),
        seg_refine_rounds=int(cfg_kv["seg_refine_rounds"]),
        seg_em_iters=int(cfg_kv["seg_em_iters"]),
    )

    tensors = _unpack_tensors(section())
    model = ReconstructionModel(
        encoder=_cell_from(tensors, "enc"),
        decoder=_cell_from(tensors, "dec"),
        w_out=tensors["head.w"], b_out=tensors["head.b"],
        decoder_feedback=config.decoder_feedback,
    )
    disc = DiscriminatorParams(gru=_cell_from(tensors, "disc"),
                               w=tensors["disc.w"], b=float(tensors["disc.b"][0]))

    pca_t = _unpack_tensors(section())
    projection = None
    if pca_t:
        projection = Projection(mean=pca_t["pca.mean"],
                                components=pca_t["pca.components"],
                                explained_variance=pca_t["pca.var"])

    cuts_buf = io.BytesIO(section())
    t_train, score_window, n_cuts = struct.unpack("<QQQ", cuts_buf.read(24))
    cut_points = tuple(struct.unpack("<Q", cuts_buf.read(8))[0] for _ in range(n_cuts))

    log_text = section().decode("utf-8")
    log = log_text.split("\n") if log_text else []
    return Checkpoint(schema=schema, norm_stats=norm_stats, config=config,
                      model=model, disc=disc, projection=projection,
                      cut_points=cut_points, t_train=int(t_train),
                      score_window=int(score_window), log=log, version=version)


def _bounds_from_cuts(cuts, t: int):
    cp = list(cuts) + [t]
    return [(cp[i], cp[i + 1]) for i in range(len(cuts))]


def missgan_fit(series: TimeSeries, cfg: TrainConfig,
                schema: ChannelSchema | None = None,
                progress=None) -> Checkpoint:
    """Full multi-scale training loop.

    Starts from coarse windows; each scale runs `epochs` reconstruction
    epochs, extracts per-tick hidden states, reduces them by PCA, and
    re-segments; identical consecutive cut sets end the loop early. One
    final reconstruction phase runs on the last segmentation."""
    if schema is None:
        conds = tuple(f"y{i}" for i in range(series.c))
        # conditionals whose observed values are all 0/1 are treated as
        # categorical indicators (one-hot mode flags and the like)
        cats = tuple(name for i, name in enumerate(conds)
                     if np.all(np.isin(series.y[:, i], (0.0, 1.0))))
        schema = ChannelSchema(
            data_channels=tuple(f"x{i}" for i in range(series.m)),
            cond_channels=conds,
            categorical_cond=cats,
        )
    stats = normalize_fit(series, cfg.norm_mode, schema)
    norm = normalize_apply(series, stats)

    rng = child_rng(cfg.seed, "model-init")
    model = init_reconstruction_model(series.m, series.c, cfg.d_h, rng,
                                      decoder_feedback=cfg.decoder_feedback)
    disc = init_discriminator(series.m, series.c, cfg.d_h, rng)
    adam_g = AdamState.zeros(get_generator_params(model).size)
    adam_d = AdamState.zeros(get_discriminator_params(disc).size)

    bounds = coarse_segment(norm.t, cfg.l_init)
    cuts = tuple(lo for lo, _ in bounds)
    log: list[str] = [f"seg 0: {','.join(map(str, cuts))}"]
    global_epoch = 0
    projection = None

    def run_phase(phase_name: str):
        nonlocal adam_g, adam_d, global_epoch
        batches = make_batches(norm, bounds, cfg)
        for _ in range(cfg.epochs):
            lr = lr_at_epoch(cfg.lr, global_epoch, cfg.lr_decay, cfg.lr_decay_epochs)
            adam_g, adam_d, lg, ld = train_reconstruction_epoch(
                model, disc, batches, cfg, adam_g, adam_d, lr)
            log.append(f"epoch {global_epoch} phase={phase_name} lg={lg!r} ld={ld!r}")
            if progress is not None:
                progress(f"epoch {global_epoch} [{phase_name}] L_G={lg:.4f} L_D={ld:.4f}")
            global_epoch += 1

    n_scales = cfg.max_scales if cfg.segmentation else 1
    for k in range(1, n_scales + 1):
        run_phase(f"scale{k}")
        if not cfg.segmentation:
            break
        hidden = extract_hidden_representation(model, norm, bounds)
        projection = pca_fit(hidden, cfg.d_r)
        reduced = pca_transform(projection, hidden)
        seg, _ = segment_series(reduced, cfg.alpha, k=cfg.hmm_states,
                                seed=int(child_rng(cfg.seed, f"segment-{k}").integers(2**31)),
                                em_iters=cfg.seg_em_iters,
                                refine_rounds=cfg.seg_refine_rounds,
                                max_regimes=cfg.seg_max_regimes)
        new_cuts = seg.cut_points
        log.append(f"seg {k}: {','.join(map(str, new_cuts))}")
        if progress is not None:
            progress(f"scale {k}: {len(new_cuts)} segments")
        if new_cuts == cuts:
            break
        cuts = new_cuts
        bounds = _bounds_from_cuts(cuts, norm.t)

    run_phase("final")

    cap = 4 * cfg.l_init
    capped = []
    for lo, hi in bounds:
        length = hi - lo
        if length > cap:
            n_parts = -(-length // cap)
            starts = [lo + (length * i) // n_parts for i in range(n_parts)] + [hi]
            capped.extend(starts[i + 1] - starts[i] for i in range(n_parts))
        else:
            capped.append(length)
    median_len = int(np.median(capped))
    score_window = int(min(max(median_len, 16), cap))

    return Checkpoint(schema=schema, norm_stats=stats, config=cfg, model=model,
                      disc=disc, projection=projection, cut_points=cuts,
                      t_train=norm.t, score_window=score_window, log=log)
