"""Toy composed-retrieval model and its SGD trainer.

Image and text encoders are single dense layers; the compositor concatenates
their outputs and projects back to the embedding width. The target image
goes through the same image encoder as the source.
"""
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .evaluation import DEFAULT_KS, evaluate_features
from .numeric import EPSILON_FLOOR
from .uncertainty import (
    AugmentTarget,
    GammaSchedule,
    LossBreakdown,
    NoiseConfig,
    augment_graph,
    dropout_keep_mask,
    gamma_at,
    total_loss_graph,
)

PARAM_NAMES = ("img_w", "img_b", "txt_w", "txt_b", "comp_w", "comp_b")
CHECKPOINT_HEADER = "# uncertain-retrieval checkpoint v1"

_ACTIVATIONS = {"tanh": ag.tanh, "identity": lambda x: x}


class NumericalError(RuntimeError):
    """Non-finite loss or gradient; ``dump`` holds the offending step's diagnostics."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


def _float_or_inf(x):
    return math.inf if str(x).lower() in ("inf", "+inf", "infinity") else float(x)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 2e-2
    lr_decay_epoch: int = 45
    lr_decay_factor: float = 10.0
    momentum: float = 0.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    stop_grad_sigma: bool = False
    dropout_rate: float = None
    seed: int = 0
    embed_dim: int = 16
    temperature: float = 1.0
    activation: str = "tanh"
    eval_ks: tuple = DEFAULT_KS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        self.eval_ks = tuple(int(k) for k in self.eval_ks)

    @property
    def mode(self):
        if self.schedule.is_baseline:
            return "baseline"
        return f"uncertainty-{self.schedule.mode.value}"

    def lr_at(self, epoch):
        if epoch >= self.lr_decay_epoch:
            return self.lr / self.lr_decay_factor
        return self.lr

    def to_dict(self):
        d = asdict(self)
        d["noise"]["target"] = self.noise.target.value
        d["schedule"]["mode"] = self.schedule.mode.value
        if math.isinf(self.schedule.gamma0):
            d["schedule"]["gamma0"] = "inf"
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown config field")
        if "noise" in raw:
            raw["noise"] = NoiseConfig(**raw["noise"])
        if "schedule" in raw:
            sched = dict(raw["schedule"])
            if "gamma0" in sched:
                sched["gamma0"] = _float_or_inf(sched["gamma0"])
            raw["schedule"] = GammaSchedule(**sched)
        return cls(**raw)


@dataclass
class EpochTrace:
    epoch: int
    gamma: float
    lr: float
    loss: LossBreakdown
    recall_at: dict
    recall_by_stratum: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "gamma": self.gamma,
            "lr": self.lr,
            "loss": self.loss.to_dict(),
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "recall_by_stratum": {
                s: {str(k): v for k, v in per_k.items()} for s, per_k in self.recall_by_stratum.items()
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw):
        return cls(
            epoch=raw["epoch"],
            gamma=raw["gamma"],
            lr=raw["lr"],
            loss=LossBreakdown(**raw["loss"]),
            recall_at={int(k): v for k, v in raw["recall_at"].items()},
            recall_by_stratum={
                s: {int(k): v for k, v in per_k.items()} for s, per_k in raw.get("recall_by_stratum", {}).items()
            },
        )


@dataclass
class TrainResult:
    params: dict
    trace: list
    config: TrainConfig


# parameters -------------------------------------------------------------------


def init_params(d_in, t_in, embed_dim, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""

    def dense(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    img_w, img_b = dense(d_in, embed_dim)
    txt_w, txt_b = dense(t_in, embed_dim)
    comp_w, comp_b = dense(2 * embed_dim, embed_dim)
    return dict(img_w=img_w, img_b=img_b, txt_w=txt_w, txt_b=txt_b, comp_w=comp_w, comp_b=comp_b)


def param_dims(params):
    d_in, d = np.shape(_data(params["img_w"]))
    t_in = np.shape(_data(params["txt_w"]))[0]
    return d_in, t_in, d


def _data(x):
    return x.data if isinstance(x, ag.Tensor) else x


# forward ------------------------------------------------------------------------


def encode_image(params, x, activation="tanh"):
    return _ACTIVATIONS[activation](ag.lift(x) @ params["img_w"] + params["img_b"])


def encode_text(params, t, activation="tanh", keep_mask=None):
    out = _ACTIVATIONS[activation](ag.lift(t) @ params["txt_w"] + params["txt_b"])
    if keep_mask is not None:
        out = out * keep_mask
    return out


def compose(params, img_feat, txt_feat, activation="tanh"):
    joint = ag.concat([img_feat, txt_feat], axis=1)
    return _ACTIVATIONS[activation](joint @ params["comp_w"] + params["comp_b"])


def _check_batch(params, src, txt, tgt):
    d_in, t_in, _ = param_dims(params)
    src, txt, tgt = (np.asarray(a, dtype=np.float64) for a in (src, txt, tgt))
    if src.ndim != 2 or src.shape[1] != d_in or tgt.ndim != 2 or tgt.shape[1] != d_in:
        raise ValueError(f"image inputs must be (B, {d_in}), got {src.shape} and {tgt.shape}")
    if txt.ndim != 2 or txt.shape[1] != t_in:
        raise ValueError(f"text input must be (B, {t_in}), got {txt.shape}")
    if not src.shape[0] == txt.shape[0] == tgt.shape[0]:
        raise ValueError("source, text and target batch sizes differ")
    return src, txt, tgt


def forward(params, src, txt, tgt, activation="tanh", text_keep_mask=None):
    """Returns ``(f_s, f_t)``; tensors when ``params`` holds tensors."""
    src, txt, tgt = _check_batch(params, src, txt, tgt)
    f_img = encode_image(params, src, activation)
    f_txt = encode_text(params, txt, activation, text_keep_mask)
    f_s = compose(params, f_img, f_txt, activation)
    f_t = encode_image(params, tgt, activation)
    if not any(isinstance(p, ag.Tensor) and p.requires_grad for p in params.values()):
        return f_s.data, f_t.data
    return f_s, f_t


def query_features(params, items, queries, activation="tanh"):
    f_img = encode_image(params, items[queries.source_ids], activation)
    f_txt = encode_text(params, queries.texts, activation)
    return compose(params, f_img, f_txt, activation).data


def gallery_features(params, items, activation="tanh"):
    return encode_image(params, items, activation).data


def evaluate_params(params, dataset, ks=DEFAULT_KS, activation="tanh", queries=None):
    queries = dataset.queries if queries is None else queries
    q = query_features(params, dataset.items, queries, activation)
    g = gallery_features(params, dataset.items, activation)
    return evaluate_features(q, g, queries, ks)


# loss and step ------------------------------------------------------------------


def loss_graph(params, src, txt, tgt, cfg, gamma, eps1, eps2, text_keep_mask=None, frozen_sigma=None):
    """Full training objective as a tensor; noise and dropout masks are fixed inputs.

    ``frozen_sigma`` pins the augmented feature's std to a constant; gradient
    checks of the ``stop_grad_sigma`` mode need it so both sides see one function.
    """
    act = cfg.activation
    f_img = encode_image(params, src, act)
    f_txt = encode_text(params, txt, act, text_keep_mask)
    f_s = compose(params, f_img, f_txt, act)
    f_t = encode_image(params, tgt, act)
    w1, w2 = cfg.noise.w1, cfg.noise.w2
    sg = cfg.stop_grad_sigma
    if cfg.noise.target is AugmentTarget.TARGET:
        f_t_hat, sigma = augment_graph(f_t, eps1, eps2, w1, w2, sg, frozen_sigma)
        return total_loss_graph(f_s, f_t, f_t_hat, sigma, gamma, cfg.temperature)
    f_img_hat, sigma = augment_graph(f_img, eps1, eps2, w1, w2, sg, frozen_sigma)
    f_s_hat = compose(params, f_img_hat, f_txt, act)
    return total_loss_graph(f_s, f_t, f_t, sigma, gamma, cfg.temperature, f_s_hat=f_s_hat)


def augmented_sigma(params, src, tgt, cfg):
    """Per-dimension std of whichever feature batch ``cfg.noise.target`` augments."""
    x = tgt if cfg.noise.target is AugmentTarget.TARGET else src
    f = encode_image(params, x, cfg.activation).data
    return np.maximum(f.std(axis=0), EPSILON_FLOOR)


def _diagnostics(params, grads, parts, epoch, step):
    return {
        "epoch": epoch,
        "step": step,
        "loss": None if parts is None else parts.to_dict(),
        "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()},
        "nonfinite_params": [k for k, v in params.items() if not np.all(np.isfinite(v))],
        "nonfinite_grads": [k for k, g in (grads or {}).items() if not np.all(np.isfinite(g))],
    }


def train_step(params, batch, cfg, epoch, noise_rng, dropout_rng=None, velocity=None, step=0):
    """One SGD update on ``batch = (src, txt, tgt)``. Returns ``(new_params, LossBreakdown)``."""
    src, txt, tgt = _check_batch(params, *batch)
    gamma = gamma_at(cfg.schedule, epoch, cfg.epochs)
    lr = cfg.lr_at(epoch)
    shape = (src.shape[0], cfg.embed_dim)
    eps1 = noise_rng.standard_normal(shape)
    eps2 = noise_rng.standard_normal(shape)
    keep = None
    if cfg.dropout_rate:
        keep = dropout_keep_mask(shape, cfg.dropout_rate, dropout_rng)

    leaves = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    total, parts = loss_graph(leaves, src, txt, tgt, cfg, gamma, eps1, eps2, keep)
    if not np.isfinite(total.data):
        raise NumericalError(f"non-finite loss at epoch {epoch} step {step}", _diagnostics(params, None, parts, epoch, step))
    ag.backward(total)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalError(
            f"non-finite gradient at epoch {epoch} step {step}", _diagnostics(params, grads, parts, epoch, step)
        )

    new = {}
    for k, p in params.items():
        g = grads[k]
        if cfg.momentum and velocity is not None:
            velocity[k] = cfg.momentum * velocity.get(k, 0.0) + g
            g = velocity[k]
        new[k] = p - lr * g
    return new, parts


def _streams(cfg):
    init, shuffle, dropout = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    noise = np.random.default_rng(np.random.SeedSequence([cfg.noise.seed, cfg.seed]))
    return init, shuffle, noise, dropout


def _mean_breakdown(parts):
    n = len(parts)
    return LossBreakdown(
        info=sum(p.info for p in parts) / n,
        u=sum(p.u for p in parts) / n,
        total=sum(p.total for p in parts) / n,
        gamma=parts[0].gamma,
        sigma_scalar=sum(p.sigma_scalar for p in parts) / n,
    )


def train(cfg, dataset, params=None, on_epoch=None):
    """Run the full schedule. Deterministic given ``cfg.seed`` and ``cfg.noise.seed``."""
    init_rng, shuffle_rng, noise_rng, dropout_rng = _streams(cfg)
    spec = dataset.spec
    if params is None:
        params = init_params(spec.d_in, spec.t_in, cfg.embed_dim, init_rng)
    items = dataset.items
    train_set = dataset.train
    n = len(train_set)
    velocity = {} if cfg.momentum else None
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        parts = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            batch = (items[train_set.source_ids[idx]], train_set.texts[idx], items[train_set.target_ids[idx]])
            params, p = train_step(params, batch, cfg, epoch, noise_rng, dropout_rng, velocity, step)
            parts.append(p)
            step += 1
        reports = evaluate_params(params, dataset, cfg.eval_ks, cfg.activation)
        record = EpochTrace(
            epoch=epoch,
            gamma=gamma_at(cfg.schedule, epoch, cfg.epochs),
            lr=cfg.lr_at(epoch),
            loss=_mean_breakdown(parts),
            recall_at=dict(reports["all"].per_k),
            recall_by_stratum={s: dict(r.per_k) for s, r in reports.items()},
        )
        trace.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params=params, trace=trace, config=cfg)


def with_overrides(cfg, **changes):
    return replace(cfg, **changes)


# checkpoints --------------------------------------------------------------------


def save_checkpoint(path, params, meta=None):
    """Plain-text tensor dump: header line, JSON metadata line, then one block per tensor."""
    lines = [CHECKPOINT_HEADER, json.dumps(meta or {}, sort_keys=True)]
    for name in PARAM_NAMES:
        arr = np.atleast_2d(np.asarray(params[name], dtype=np.float64))
        shape = np.shape(params[name])
        lines.append(f"tensor {name} {' '.join(str(s) for s in shape)}")
        for row in arr:
            lines.append(" ".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a checkpoint file")
    meta = json.loads(lines[1])
    params = {}
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if head[0] != "tensor":
            raise ValueError(f"{path}:{i + 1}: expected a tensor header")
        name, shape = head[1], tuple(int(s) for s in head[2:])
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = [[float(x) for x in lines[i + 1 + r].split()] for r in range(n_rows)]
        params[name] = np.array(rows, dtype=np.float64).reshape(shape)
        i += 1 + n_rows
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return params, meta
