"""TGAN and InfraGAN trajectory predictors.

The generator is an LSTM encoder-decoder with noise injected into the
decoder's initial hidden state; the discriminator scores observed+future
sequences; the correction module rescales predicted displacements from
per-step context features.

Model inputs are per vehicle: positions relative to that vehicle's last
observed position, divided by ``SCALE``. Predictions are returned in the
window's scene-local meters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LstmCellParams, NonFinite, Tensor
from .dataset import CONTEXT_DIM, TrajectoryWindow

log = logging.getLogger(__name__)

SCALE = 10.0
OBS = 8
PRED = 8
EMBED_DIM = 16
ENCODER_DIM = 16
DECODER_DIM = 32
NOISE_DIM = DECODER_DIM - ENCODER_DIM
DISC_DIM = 16
CM_DIM = 10
C_EPS = 1e-6


class Diverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))


# parameters ---------------------------------------------------------------------

class _Params:
    """Named float64 arrays; subclasses are dataclasses of ndarrays."""

    prefix = ""

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}{f.name}": getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]):
        kw = {}
        for f in fields(cls):
            key = f"{cls.prefix}{f.name}"
            if key in arrays:
                kw[f.name] = np.array(arrays[key], dtype=np.float64)
        return cls(**kw)

    def copy(self):
        return type(self).from_arrays({k: v.copy() for k, v in self.arrays().items()})


@dataclass
class GeneratorParams(_Params):
    W_ee: np.ndarray
    b_ee: np.ndarray
    W_encoder: np.ndarray
    b_encoder: np.ndarray
    W_de: np.ndarray
    b_de: np.ndarray
    W_decoder: np.ndarray
    b_decoder: np.ndarray
    W_gamma: np.ndarray
    b_gamma: np.ndarray
    prefix = "G."

    @property
    def noise_dim(self) -> int:
        return self.W_decoder.shape[1] // 4 - self.W_encoder.shape[1] // 4

    @classmethod
    def init(cls, rng: np.random.Generator) -> GeneratorParams:
        u = ad.init_uniform
        return cls(
            W_ee=u(rng, 2, (2, EMBED_DIM)), b_ee=u(rng, 2, (EMBED_DIM,)),
            W_encoder=u(rng, EMBED_DIM + ENCODER_DIM, (EMBED_DIM + ENCODER_DIM, 4 * ENCODER_DIM)),
            b_encoder=u(rng, EMBED_DIM + ENCODER_DIM, (4 * ENCODER_DIM,)),
            W_de=u(rng, 2, (2, DECODER_DIM)), b_de=u(rng, 2, (DECODER_DIM,)),
            W_decoder=u(rng, 2 * DECODER_DIM, (2 * DECODER_DIM, 4 * DECODER_DIM)),
            b_decoder=u(rng, 2 * DECODER_DIM, (4 * DECODER_DIM,)),
            W_gamma=u(rng, DECODER_DIM, (DECODER_DIM, 2)), b_gamma=u(rng, DECODER_DIM, (2,)),
        )


@dataclass
class DiscriminatorParams(_Params):
    W_emb: np.ndarray
    b_emb: np.ndarray
    W_lstm: np.ndarray
    b_lstm: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray
    prefix = "D."

    @classmethod
    def init(cls, rng: np.random.Generator) -> DiscriminatorParams:
        u = ad.init_uniform
        return cls(
            W_emb=u(rng, 2, (2, EMBED_DIM)), b_emb=u(rng, 2, (EMBED_DIM,)),
            W_lstm=u(rng, EMBED_DIM + DISC_DIM, (EMBED_DIM + DISC_DIM, 4 * DISC_DIM)),
            b_lstm=u(rng, EMBED_DIM + DISC_DIM, (4 * DISC_DIM,)),
            W_cls=u(rng, DISC_DIM, (DISC_DIM, 1)), b_cls=u(rng, DISC_DIM, (1,)),
        )


@dataclass
class CorrectionParams(_Params):
    W_lstm: np.ndarray
    b_lstm: np.ndarray
    W_proj: np.ndarray
    b_proj: np.ndarray
    prefix = "CM."

    @property
    def horizon(self) -> int:
        return self.W_proj.shape[1] // 2

    @classmethod
    def init(cls, rng: np.random.Generator, context_dim: int = CONTEXT_DIM, horizon: int = PRED) -> CorrectionParams:
        u = ad.init_uniform
        n_in = context_dim + 2 + CM_DIM
        return cls(
            W_lstm=u(rng, n_in, (n_in, 4 * CM_DIM)), b_lstm=u(rng, n_in, (4 * CM_DIM,)),
            W_proj=u(rng, CM_DIM, (CM_DIM, 2 * horizon)), b_proj=u(rng, CM_DIM, (2 * horizon,)),
        )


# forward passes ---------------------------------------------------------------------
# ``p`` arguments are dicts of Tensors keyed like ``Params.arrays()``.

def normalize(X: np.ndarray) -> np.ndarray:
    """Per-vehicle frame: relative to the last observed position, in SCALE units."""
    return (X - X[:, -1:, :]) / SCALE


def _encode_positions(seq: np.ndarray | Tensor, W: Tensor, b: Tensor, cell: LstmCellParams) -> Tensor:
    B, steps = seq.shape[0], seq.shape[1]
    H = cell.hidden_dim
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    for t in range(steps):
        x_t = seq[:, t, :] if isinstance(seq, Tensor) else Tensor(seq[:, t, :])
        h, c = ad.lstm_step(cell, ad.relu(ad.linear(x_t, W, b)), h, c)
    return h


def generator_forward(p: Mapping[str, Tensor], Xn: np.ndarray, z: np.ndarray, horizon: int = PRED) -> Tensor:
    """Normalized predicted positions (B x horizon x 2) from normalized inputs."""
    enc = LstmCellParams(p["G.W_encoder"], p["G.b_encoder"])
    dec = LstmCellParams(p["G.W_decoder"], p["G.b_decoder"])
    h_enc = _encode_positions(Xn, p["G.W_ee"], p["G.b_ee"], enc)
    h = ad.concat([h_enc, Tensor(z)], axis=-1)
    c = Tensor(np.zeros(h.shape))
    prev = Tensor(Xn[:, -1, :])
    outs = []
    for _ in range(horizon):
        e = ad.relu(ad.linear(prev, p["G.W_de"], p["G.b_de"]))
        h, c = ad.lstm_step(dec, e, h, c)
        prev = prev + ad.linear(h, p["G.W_gamma"], p["G.b_gamma"])
        outs.append(prev)
    return ad.stack(outs, axis=1)


def discriminator_logits(p: Mapping[str, Tensor], seq: np.ndarray | Tensor) -> Tensor:
    """Logit of P(real) for each normalized observed+future sequence (B x 16 x 2)."""
    cell = LstmCellParams(p["D.W_lstm"], p["D.b_lstm"])
    h = _encode_positions(seq, p["D.W_emb"], p["D.b_emb"], cell)
    return ad.linear(h, p["D.W_cls"], p["D.b_cls"]).reshape(-1)


def correction_forward(p: Mapping[str, Tensor], S: np.ndarray, Xn: np.ndarray) -> Tensor:
    """Correction tensor C (B x T x 2) from context and normalized coordinates."""
    cell = LstmCellParams(p["CM.W_lstm"], p["CM.b_lstm"])
    B = Xn.shape[0]
    inp = np.concatenate([S, Xn], axis=-1)
    h = Tensor(np.zeros((B, CM_DIM)))
    c = Tensor(np.zeros((B, CM_DIM)))
    for t in range(inp.shape[1]):
        h, c = ad.lstm_step(cell, Tensor(inp[:, t, :]), h, c)
    C = ad.linear(h, p["CM.W_proj"], p["CM.b_proj"])
    return C.reshape(B, -1, 2)


def apply_correction(Y_tilde, C):
    """Ŷ = Ỹ + tanh(C) ⊙ Ỹ, for Tensors or arrays."""
    if isinstance(Y_tilde, Tensor) or isinstance(C, Tensor):
        Yt = ad.as_tensor(Y_tilde)
        return Yt + ad.tanh(ad.as_tensor(C)) * Yt
    Y_tilde = np.asarray(Y_tilde, dtype=np.float64)
    return Y_tilde + np.tanh(C) * Y_tilde


def _tensors(*params: _Params, requires_grad: bool = False) -> dict[str, Tensor]:
    out = {}
    for p in params:
        out.update(ad.to_tensors(p.arrays(), requires_grad=requires_grad))
    return out


def generate(params: GeneratorParams, X: np.ndarray, z: np.ndarray, horizon: int = PRED) -> np.ndarray:
    """Predicted positions Ỹ (n x horizon x 2) in the same frame as X."""
    X = np.asarray(X, dtype=np.float64)
    out = generator_forward(_tensors(params), normalize(X), z, horizon).data
    return X[:, -1:, :] + SCALE * out


def discriminate(params: DiscriminatorParams, X: np.ndarray, Yc: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    seq = (np.concatenate([X, Yc], axis=1) - X[:, -1:, :]) / SCALE
    return ad._sigmoid(discriminator_logits(_tensors(params), seq).data)


def correct(params: CorrectionParams, context: np.ndarray, X: np.ndarray, Y_tilde: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Ŷ, C): the correction is applied to each vehicle's predicted displacement."""
    X = np.asarray(X, dtype=np.float64)
    C = correction_forward(_tensors(params), context, normalize(X)).data
    last = X[:, -1:, :]
    return last + apply_correction(Y_tilde - last, C), C


@dataclass
class PredictionSet:
    k: int
    trajectories: np.ndarray  # k x n x T x 2
    corrections: np.ndarray | None = None
    seed: int = 0


def sample_noise(rng: np.random.Generator, k: int, n: int, dim: int = NOISE_DIM) -> np.ndarray:
    """k x n x dim; sample i only depends on the first i draws, so prefixes nest."""
    return np.stack([rng.standard_normal((n, dim)) for _ in range(k)])


def predict_k(gen: GeneratorParams, cm: CorrectionParams | None, X: np.ndarray, context: np.ndarray | None,
              k: int = 5, seed: int = 0, horizon: int = PRED) -> PredictionSet:
    if k < 1:
        raise ValueError("k must be at least 1")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    z = sample_noise(np.random.default_rng(seed), k, n, gen.noise_dim)
    # one pass per sample so that a k-prefix is bitwise identical to a smaller k
    trajs, corrs = [], []
    for i in range(k):
        Yt = generate(gen, X, z[i], horizon)
        if cm is not None:
            Yt, C = correct(cm, context, X, Yt)
            corrs.append(C)
        trajs.append(Yt)
    C = np.stack(corrs) if cm is not None else None
    return PredictionSet(k=k, trajectories=np.stack(trajs), corrections=C, seed=seed)


# losses ---------------------------------------------------------------------

def infragan_loss(p: Mapping[str, Tensor], X: np.ndarray, Y: np.ndarray, S: np.ndarray, z: np.ndarray,
                  on_uncorrected: bool = False, inverse_c: bool = True, min_over_k: bool = False) -> Tensor:
    """Σ_k ‖Ŷ − Y‖² + 1/(‖C‖₁ + ε), averaged over vehicles. Errors are in meters.

    ``z`` has shape k x B x noise. With ``on_uncorrected`` the uncorrected Ỹ
    enters the error norm; ``inverse_c=False`` uses ‖C‖₁ as a shrinkage term.
    """
    k, B = z.shape[0], X.shape[0]
    Xn = np.tile(normalize(X), (k, 1, 1))
    rel = np.tile(Y - X[:, -1:, :], (k, 1, 1))
    Yt = generator_forward(p, Xn, z.reshape(k * B, -1), Y.shape[1]) * SCALE
    C = correction_forward(p, np.tile(S, (k, 1, 1)), Xn)
    pred = Yt if on_uncorrected else apply_correction(Yt, C)
    d = pred - rel
    err = (d * d).sum(axis=2).sum(axis=1)  # kB
    cnorm = ad.absolute(C).sum(axis=2).sum(axis=1)
    reg = ad.reciprocal(cnorm + C_EPS) if inverse_c else cnorm
    per = (err + reg).reshape(k, B)
    if min_over_k:
        best = np.argmin(per.data, axis=0)
        return per[best, np.arange(B)].mean()
    return per.sum(axis=0).mean()


# training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 64
    lr: float = 1e-3
    k: int = 5
    lambda_mse: float = 1.0
    loss_on_uncorrected: bool = False
    inverse_c: bool = True
    min_over_k: bool = False
    clip: float = 5.0
    seed: int = 0
    patience: int = 10
    train_generator: bool = True

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> TrainConfig:
        kw = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("bool", bool):
                kw[f.name] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


@dataclass
class Batch:
    X: np.ndarray
    Y: np.ndarray
    S: np.ndarray | None
    window: np.ndarray  # window index of each vehicle row
    ego: np.ndarray  # bool, row is the ego of its window
    map_id: list[str] = field(default_factory=list)


def stack_windows(windows: Sequence[TrajectoryWindow]) -> Batch:
    """Flatten all vehicles of all windows into one batch of rows."""
    if not windows:
        raise ValueError("no windows")
    X = np.concatenate([w.X for w in windows])
    Y = np.concatenate([w.Y for w in windows])
    S = None
    if all(w.S is not None for w in windows):
        S = np.concatenate([w.S for w in windows])
    idx = np.concatenate([np.full(w.n, i) for i, w in enumerate(windows)])
    ego = np.concatenate([np.arange(w.n) == 0 for w in windows])
    return Batch(X, Y, S, idx, ego, [w.map_id for w in windows])


def _batches(rng: np.random.Generator, windows: Sequence[TrajectoryWindow], size: int):
    order = rng.permutation(len(windows))
    for s in range(0, len(order), size):
        yield stack_windows([windows[i] for i in order[s:s + size]])


def _step(state: ad.AdamState, arrays: dict[str, np.ndarray], leaves: dict[str, Tensor], names, clip: float) -> None:
    grads = {n: (leaves[n].grad if leaves[n].grad is not None else np.zeros_like(arrays[n])) for n in names}
    ad.clip_global_norm(grads, clip)
    ad.adam_update(state, arrays, grads)


@dataclass
class TrainResult:
    generator: GeneratorParams
    discriminator: DiscriminatorParams | None = None
    correction: CorrectionParams | None = None
    history: list[dict] = field(default_factory=list)


def tgan_train(windows: Sequence[TrajectoryWindow], cfg: TrainConfig = TrainConfig(),
               init: TrainResult | None = None) -> TrainResult:
    """Alternating discriminator / generator updates (adversarial + λ·MSE)."""
    if not windows:
        raise ValueError("empty training set")
    rng = np.random.default_rng([cfg.seed, 1])
    gen = init.generator.copy() if init else GeneratorParams.init(rng)
    disc = init.discriminator.copy() if init and init.discriminator else DiscriminatorParams.init(rng)
    g_arr, d_arr = gen.arrays(), disc.arrays()
    g_opt, d_opt = ad.AdamState(lr=cfg.lr), ad.AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        sums = {"d_loss": 0.0, "g_adv": 0.0, "g_mse": 0.0, "d_acc": 0.0}
        count = 0
        try:
            for batch in _batches(rng, windows, cfg.batch):
                Xn = normalize(batch.X)
                Yn = (batch.Y - batch.X[:, -1:, :]) / SCALE
                B = Xn.shape[0]
                z = rng.standard_normal((B, NOISE_DIM))
                # discriminator
                g_const = ad.to_tensors(g_arr, requires_grad=False)
                fake = generator_forward(g_const, Xn, z).data
                d_leaves = ad.to_tensors(d_arr)
                real_logit = discriminator_logits(d_leaves, np.concatenate([Xn, Yn], axis=1))
                fake_logit = discriminator_logits(d_leaves, np.concatenate([Xn, fake], axis=1))
                d_loss = ad.bce_with_logits(real_logit, 1.0) + ad.bce_with_logits(fake_logit, 0.0)
                d_loss.backward()
                _step(d_opt, d_arr, d_leaves, d_arr, cfg.clip)
                acc = 0.5 * (np.mean(real_logit.data > 0) + np.mean(fake_logit.data <= 0))
                # generator
                g_leaves = ad.to_tensors(g_arr)
                d_const = ad.to_tensors(d_arr, requires_grad=False)
                pred = generator_forward(g_leaves, Xn, z)
                seq = ad.concat([Tensor(Xn), pred], axis=1)
                g_adv = ad.bce_with_logits(discriminator_logits(d_const, seq), 1.0)
                g_mse = ad.mse(pred, Yn)
                (g_adv + cfg.lambda_mse * g_mse).backward()
                _step(g_opt, g_arr, g_leaves, g_arr, cfg.clip)
                sums["d_loss"] += float(d_loss.data) * B
                sums["g_adv"] += float(g_adv.data) * B
                sums["g_mse"] += float(g_mse.data) * B
                sums["d_acc"] += float(acc) * B
                count += B
        except NonFinite as exc:
            raise Diverged(epoch, str(exc)) from exc
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
        history.append(row)
        log.info("tgan epoch %d d_loss %.4f g_adv %.4f g_mse %.5f d_acc %.3f", epoch, row["d_loss"],
                 row["g_adv"], row["g_mse"], row["d_acc"])
    return TrainResult(GeneratorParams.from_arrays(g_arr), DiscriminatorParams.from_arrays(d_arr), None, history)


def mean_min_ade(gen: GeneratorParams, cm: CorrectionParams | None, windows: Sequence[TrajectoryWindow],
                 k: int = 1, seed: int = 0) -> float:
    """Mean over vehicle rows of the best-of-k ADE (meters)."""
    batch = stack_windows(windows)
    ps = predict_k(gen, cm, batch.X, batch.S, k=k, seed=seed, horizon=batch.Y.shape[1])
    err = np.linalg.norm(ps.trajectories - batch.Y[None], axis=-1).mean(axis=-1)
    return float(err.min(axis=0).mean())


def infragan_train(windows: Sequence[TrajectoryWindow], tgan: TrainResult, cfg: TrainConfig = TrainConfig(),
                   val: Sequence[TrajectoryWindow] | None = None, cm_init: CorrectionParams | None = None) -> TrainResult:
    """Jointly fine-tune the pretrained generator and the correction module."""
    if not windows:
        raise ValueError("empty training set")
    if tgan is None or tgan.generator is None:
        raise ValueError("pretrained TGAN required")
    if any(w.S is None for w in windows):
        raise ValueError("windows need encoded context features")
    rng = np.random.default_rng([cfg.seed, 2])
    gen = tgan.generator.copy()
    cm = cm_init.copy() if cm_init is not None else CorrectionParams.init(rng, windows[0].S.shape[-1], windows[0].Y.shape[1])
    arrays = {**gen.arrays(), **cm.arrays()}
    names = [n for n in arrays if cfg.train_generator or n.startswith("CM.")]
    opt = ad.AdamState(lr=cfg.lr)
    best_val, stale = math.inf, 0
    history = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        try:
            for batch in _batches(rng, windows, cfg.batch):
                B = batch.X.shape[0]
                z = rng.standard_normal((cfg.k, B, gen.noise_dim))
                leaves = {n: Tensor(a, requires_grad=n in names) for n, a in arrays.items()}
                loss = infragan_loss(leaves, batch.X, batch.Y, batch.S, z, cfg.loss_on_uncorrected,
                                     cfg.inverse_c, cfg.min_over_k)
                loss.backward()
                _step(opt, arrays, leaves, names, cfg.clip)
                total += float(loss.data) * B
                count += B
        except NonFinite as exc:
            raise Diverged(epoch, str(exc)) from exc
        row = {"epoch": epoch, "loss": total / count, "lr": opt.lr}
        if val:
            score = mean_min_ade(GeneratorParams.from_arrays(arrays), CorrectionParams.from_arrays(arrays), val,
                                 k=1, seed=cfg.seed)
            row["val_min_ade"] = score
            if score < best_val - 1e-12:
                best_val, stale = score, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    opt.lr *= 0.5
                    stale = 0
        history.append(row)
        log.info("infragan epoch %d loss %.4f %s", epoch, row["loss"],
                 f"val minADE {row['val_min_ade']:.3f}" if "val_min_ade" in row else "")
    return TrainResult(GeneratorParams.from_arrays(arrays), tgan.discriminator, CorrectionParams.from_arrays(arrays), history)


# checkpoints --------------------------------------------------------------------

def save_model(path, result: TrainResult, model: str, cfg: TrainConfig | None = None) -> None:
    arrays = dict(result.generator.arrays())
    if result.discriminator is not None:
        arrays.update(result.discriminator.arrays())
    if result.correction is not None:
        arrays.update(result.correction.arrays())
    meta = {"model": model, "config": asdict(cfg) if cfg else {}}
    ad.save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[TrainResult, dict]:
    arrays, meta = ad.load_checkpoint(path)
    gen = GeneratorParams.from_arrays(arrays)
    disc = DiscriminatorParams.from_arrays(arrays) if "D.W_cls" in arrays else None
    cm = CorrectionParams.from_arrays(arrays) if "CM.W_proj" in arrays else None
    return TrainResult(gen, disc, cm), meta
