"""Source pretraining and adversarial Wasserstein adaptation.

Parameter groups follow the three sub-networks: the convolutional feature
extractor (``theta_f``), the fully-connected classification head
(``theta_d``) and the domain critic (``theta_c``).
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BatchIterator, Dataset, FormatError, split
from .evaluation import RunReport, evaluate
from .nn import (Discriminator, FeatureExtractor, OptimizerState, cross_entropy, frozen,
                 gradients, optimizer_step, softmax)
from .tensor import DimensionError, Tensor, no_grad
from .wdgrl import Critic, combined_loss, critic_objective_grads, empirical_wasserstein, \
    interpolates

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WDCK"
CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass
class AdaptConfig:
    batch_size: int = 32
    critic_steps: int = 10
    lr_critic: float = 1e-3
    lr_main: float = 2e-4
    rho: float = 10.0
    lam: float = 0.1
    max_iterations: int = 5000
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 100
    pretrain_iterations: int = 1500
    lr_pretrain: float = 1e-3
    dtype: str = "float32"
    reinit_discriminator: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.critic_steps < 0:
            raise ValueError("critic_steps must be >= 0")
        for name in ("lr_critic", "lr_main", "lr_pretrain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rho < 0 or self.lam < 0:
            raise ValueError("rho and lambda must be nonnegative")
        if self.optimizer not in ("adam", "plain"):
            raise ValueError(f"optimizer must be adam or plain, got {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.eval_every < 1 or self.max_iterations < 0:
            raise ValueError("eval_every must be >= 1 and max_iterations >= 0")

    def replace(self, **kw) -> "AdaptConfig":
        return AdaptConfig(**{**asdict(self), **kw})

    def as_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "AdaptConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in types:
                continue
            kw[key] = _parse_value(types[key], value)
        return cls(**kw)


def _parse_value(type_name, value: str):
    t = type_name if isinstance(type_name, str) else type_name.__name__
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return value


def _stream(seed, *tags):
    """Independent deterministic generator per (seed, purpose)."""
    return np.random.default_rng([seed, *tags])


# stream ids
_INIT, _CRITIC_INIT, _SPLIT, _SRC, _TGT, _LAB, _EPS = range(7)


class WDTLModel:
    def __init__(self, seed=0, dtype="float32"):
        self.dtype = np.dtype(dtype)
        rng = _stream(seed, _INIT)
        self.extractor = FeatureExtractor(rng, self.dtype)
        self.discriminator = Discriminator(self.extractor.out_features, rng, self.dtype)
        self.critic = Critic(self.extractor.out_features, rng=_stream(seed, _CRITIC_INIT),
                             dtype=self.dtype)

    @property
    def theta_f(self):
        return self.extractor.params()

    @property
    def theta_d(self):
        return self.discriminator.params()

    @property
    def theta_c(self):
        return self.critic.params()

    def all_params(self) -> dict[str, Tensor]:
        return {**self.theta_f, **self.theta_d, **self.theta_c}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.all_params().items()}

    def load_state(self, state: dict[str, np.ndarray], groups=("f", "d", "c")):
        targets = {}
        if "f" in groups:
            targets.update(self.theta_f)
        if "d" in groups:
            targets.update(self.theta_d)
        if "c" in groups:
            targets.update(self.theta_c)
        for name, p in targets.items():
            if name not in state:
                raise DimensionError(f"state is missing parameter {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def param_hash(self, group="all") -> str:
        params = {"f": self.theta_f, "d": self.theta_d, "c": self.theta_c,
                  "all": self.all_params()}[group]
        h = hashlib.sha256()
        for name in sorted(params):
            h.update(name.encode())
            h.update(params[name].data.tobytes())
        return h.hexdigest()

    def _input(self, x):
        return Tensor(np.asarray(x, dtype=self.dtype))

    def features(self, x, chunk=256) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.extractor(self._input(x[i:i + chunk])).data
                                   for i in range(0, len(x), chunk)])

    def predict_proba(self, x, chunk=256) -> np.ndarray:
        with no_grad():
            return np.concatenate(
                [self.discriminator.predict_proba(self.extractor(self._input(x[i:i + chunk]))).data
                 for i in range(0, len(x), chunk)])

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)


@dataclass
class ModelCheckpoint:
    params: dict            # name -> array
    config: AdaptConfig
    iteration: int = 0
    accuracy: float = float("nan")

    def to_model(self) -> WDTLModel:
        model = WDTLModel(self.config.seed, self.config.dtype)
        model.load_state(self.params)
        return model

    @classmethod
    def from_model(cls, model: WDTLModel, config, iteration=0, accuracy=float("nan")):
        return cls(model.state(), config, iteration, accuracy)


# ---------------------------------------------------------------- checkpoint files

def save_checkpoint(ckpt: ModelCheckpoint, path):
    meta = ckpt.config.as_text() + f"iteration={ckpt.iteration}\naccuracy={ckpt.accuracy!r}\n"
    meta_b = meta.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(meta_b)), meta_b,
             struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    raw = path.read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what} at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte 4")
    (meta_len,) = struct.unpack("<I", take(4, "config length"))
    meta_at = off
    try:
        meta = take(meta_len, "config").decode("utf-8")
        config = AdaptConfig.from_text(meta)
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: bad config block at byte {meta_at}: {exc}") from exc
    kv = dict(line.partition("=")[::2] for line in meta.splitlines() if line)
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4") \
            .reshape(shape).astype(np.float32)
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    ckpt = ModelCheckpoint(params, config, int(kv.get("iteration", 0)),
                           float(kv.get("accuracy", "nan")))
    # shape validation against the fixed architecture
    try:
        ckpt.to_model()
    except DimensionError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return ckpt


# ---------------------------------------------------------------- training loops

def _check_finite(value, it, which):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {which} ({value}) at iteration {it}")


@dataclass
class PretrainResult:
    checkpoint: ModelCheckpoint
    report: RunReport
    losses: list


def pretrain(source: Dataset, cfg: AdaptConfig, val_fraction=0.2) -> PretrainResult:
    """Cross-entropy training of extractor + classifier on labeled source data.

    Holds out a stratified validation split and keeps the parameters with the
    best validation accuracy. The critic is never touched.
    """
    if source.labels is None:
        raise ValueError(f"pretraining needs a labeled source dataset ({source.domain_tag!r})")
    train_set, val_set = split(source, 1 - val_fraction, seed=cfg.seed)
    model = WDTLModel(cfg.seed, cfg.dtype)
    params = {**model.theta_f, **model.theta_d}
    opt = OptimizerState(cfg.optimizer, cfg.lr_pretrain)
    batches = BatchIterator(len(train_set), cfg.batch_size, seed=[cfg.seed, _SRC])
    report = RunReport()
    losses = []
    best_acc, best_state, best_it = -1.0, model.state(), 0
    for it in range(1, cfg.pretrain_iterations + 1):
        idx = next(batches)
        probs = model.discriminator.predict_proba(model.extractor(model._input(train_set.features[idx])))
        l_c = cross_entropy(probs, train_set.labels[idx])
        grads = gradients(l_c, params)
        optimizer_step(opt, params, grads, "descent")
        loss = l_c.item()
        _check_finite(loss, it, "l_c")
        losses.append(loss)
        if it % cfg.eval_every == 0 or it == cfg.pretrain_iterations:
            acc, _ = evaluate(model, val_set)
            report.iterations.append(it)
            report.l_c.append(loss)
            report.target_accuracy.append(acc)
            if acc > best_acc:
                best_acc, best_state, best_it = acc, model.state(), it
    model.load_state(best_state)
    report.best_accuracy, report.best_iteration = best_acc, best_it
    report.final_accuracy = report.target_accuracy[-1] if report.target_accuracy else None
    return PretrainResult(ModelCheckpoint.from_model(model, cfg, best_it, best_acc), report, losses)


def critic_step(model: WDTLModel, opt: OptimizerState, h_s, h_t, rho, rng):
    """One ascent step of the critic on frozen features; returns (objective, l_wd, l_grad)."""
    h_r = interpolates(h_s, h_t, rng)
    obj, l_wd, l_grad, grads = critic_objective_grads(h_s, h_t, h_r, model.critic, rho)
    optimizer_step(opt, model.theta_c, grads, "ascent")
    return obj, l_wd, l_grad


@dataclass
class AdaptResult:
    checkpoint: ModelCheckpoint
    report: RunReport
    model: WDTLModel


def adapt(source: Dataset, target: Dataset, cfg: AdaptConfig, init: ModelCheckpoint,
          target_labeled: Dataset | None = None, eval_set: Dataset | None = None,
          trace=None) -> AdaptResult:
    """Adversarial Wasserstein adaptation from a pretrained checkpoint.

    Each iteration draws a source batch and a target batch, ascends the
    critic ``critic_steps`` times on ``l_wd - rho * l_grad``, then descends
    the classifier head on ``l_c`` and the extractor on ``l_c + lam * l_wd``.
    Target labels are never used for training; ``eval_set`` (default: the
    target itself, when labeled) is scored every ``eval_every`` iterations and
    the best-scoring parameters are returned.

    ``target_labeled`` switches on the supervised variant: its samples join
    the classification batch (``min(len(target_labeled), batch_size)`` per
    iteration) while the Wasserstein term still compares source with the
    unlabeled target.

    ``trace``, if given, is called as ``trace(event, model)`` after each
    parameter update; ``event`` is ``"critic"``, ``"discriminator"`` or
    ``"extractor"``.
    """
    if source.labels is None:
        raise ValueError("adapt needs a labeled source dataset")
    model = WDTLModel(cfg.seed, cfg.dtype)
    try:
        model.load_state(init.params, groups=("f", "d"))
        if "critic.w1" in init.params:
            model.load_state(init.params, groups=("c",))
    except DimensionError as exc:
        raise DimensionError(f"initial checkpoint does not fit the architecture: {exc}") from exc
    if cfg.reinit_discriminator:
        fresh = WDTLModel(cfg.seed + 1, cfg.dtype)
        model.load_state(fresh.state(), groups=("d",))

    n = cfg.batch_size
    if eval_set is None and target.labels is not None:
        eval_set = target
    src_it = BatchIterator(len(source), n, seed=[cfg.seed, _SRC])
    tgt_it = BatchIterator(len(target), n, seed=[cfg.seed, _TGT])
    m = 0
    if target_labeled is not None and len(target_labeled):
        if target_labeled.labels is None:
            raise ValueError("target_labeled must carry labels")
        m = min(len(target_labeled), n)
        lab_it = BatchIterator(len(target_labeled), m, seed=[cfg.seed, _LAB])
    eps_rng = _stream(cfg.seed, _EPS)

    opt_c = OptimizerState(cfg.optimizer, cfg.lr_critic)
    opt_d = OptimizerState(cfg.optimizer, cfg.lr_main)
    opt_f = OptimizerState(cfg.optimizer, cfg.lr_main)
    theta_f, theta_d = model.theta_f, model.theta_d
    main_params = {**theta_f, **theta_d}

    report = RunReport()
    if eval_set is not None:
        report.initial_accuracy = evaluate(model, eval_set)[0]
    best_acc, best_state, best_it = -1.0, None, 0
    l_grad_v = float("nan")
    for it in range(1, cfg.max_iterations + 1):
        xs_idx, xt_idx = next(src_it), next(tgt_it)
        xs, ys = source.features[xs_idx], source.labels[xs_idx]
        xt = target.features[xt_idx]

        if m:
            li = next(lab_it)
            x_cls = np.concatenate([xs, target_labeled.features[li]])
            y_cls = np.concatenate([ys, target_labeled.labels[li]])
        else:
            x_cls, y_cls = xs, ys
        n_cls = len(x_cls)
        # theta_f is frozen during the critic loop, so one taped forward pass
        # serves both the critic updates and the extractor update
        feats = model.extractor(model._input(np.concatenate([x_cls, xt])))
        h_s_live = T.slice_rows(feats, 0, n)
        h_t_live = T.slice_rows(feats, n_cls, n_cls + n)

        for _ in range(cfg.critic_steps):
            _, _, l_grad_v = critic_step(model, opt_c, h_s_live.data, h_t_live.data, cfg.rho,
                                         eps_rng)
            _check_finite(l_grad_v, it, "l_grad")
            if trace:
                trace("critic", model)

        # classification head on l_c, extractor on l_c + lam * l_wd
        h_cls = T.slice_rows(feats, 0, n_cls) if m else h_s_live
        with frozen(model.theta_c):
            l_c = cross_entropy(softmax(model.discriminator(h_cls)), y_cls)
            l_wd = empirical_wasserstein(h_s_live, h_t_live, model.critic)
            total = combined_loss(l_c, l_wd, cfg.lam)
            l_c_v, l_wd_v = l_c.item(), l_wd.item()
            _check_finite(l_c_v, it, "l_c")
            _check_finite(l_wd_v, it, "l_wd")
            grads = gradients(total, main_params)
        optimizer_step(opt_d, theta_d, {k: grads[k] for k in theta_d}, "descent")
        if trace:
            trace("discriminator", model)
        optimizer_step(opt_f, theta_f, {k: grads[k] for k in theta_f}, "descent")
        if trace:
            trace("extractor", model)

        if it % cfg.eval_every == 0 or it == cfg.max_iterations:
            report.iterations.append(it)
            report.l_c.append(l_c_v)
            report.l_wd.append(l_wd_v)
            report.l_grad.append(l_grad_v)
            if eval_set is not None:
                acc = evaluate(model, eval_set)[0]
                report.target_accuracy.append(acc)
                if acc > best_acc:
                    best_acc, best_state, best_it = acc, model.state(), it
            log.debug("it %d l_c %.4f l_wd %.4f l_grad %.4f", it, l_c_v, l_wd_v, l_grad_v)

    if eval_set is not None:
        report.final_accuracy = report.target_accuracy[-1] if report.target_accuracy \
            else report.initial_accuracy
    if best_state is not None:
        model.load_state(best_state)
        report.best_accuracy, report.best_iteration = best_acc, best_it
        report.confusion = evaluate(model, eval_set)[1].tolist()
    else:
        best_it = cfg.max_iterations
        if eval_set is not None:
            report.best_accuracy, report.best_iteration = report.initial_accuracy, 0
            report.confusion = evaluate(model, eval_set)[1].tolist()
    ckpt = ModelCheckpoint.from_model(model, cfg, best_it,
                                      report.best_accuracy if report.best_accuracy is not None
                                      else float("nan"))
    return AdaptResult(ckpt, report, model)


def adapt_supervised(source: Dataset, target_labeled_small: Dataset, target_unlabeled: Dataset,
                     cfg: AdaptConfig, init: ModelCheckpoint, eval_set: Dataset | None = None,
                     trace=None) -> AdaptResult:
    return adapt(source, target_unlabeled, cfg, init, target_labeled=target_labeled_small,
                 eval_set=eval_set, trace=trace)

