"""Fully test-time adaptation: parameter partitioning, optimizers, the adapt loop, checkpoints."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .errors import ContractError, FormatError, PoisonedStateError, ShapeError
from .layers import RUNNING_STATS, TRAIN_STATS, BatchNorm2d, Module, ToyCNN
from .losses import DiversityState, LossWeights, cross_entropy_labels, total_loss
from .transform import InputTransform

METHODS = ("no-adapt", "tent", "tent-plus", "pl", "hlr", "slr", "supervised-oracle")
SELF_SUPERVISED = ("tent", "tent-plus", "pl", "hlr", "slr")

# method -> (confidence loss, uses L_div, delta, optimizer, lr0, schedule, freeze top, input transform)
_METHOD_DEFAULTS = {
    "no-adapt": (None, False, 0.0, "adam", 0.0, "constant", True, False),
    "tent": ("entropy", False, 1.0, "sgd-momentum", 2.5e-4, "constant", False, False),
    "tent-plus": ("entropy", True, 1.0, "sgd-momentum", 2.5e-4, "constant", True, False),
    "pl": ("hard-pl", True, 0.025, "adam", 6e-4, "cosine", True, True),
    "hlr": ("hlr", True, 0.025, "adam", 6e-4, "cosine", True, True),
    "slr": ("slr", True, 0.025, "adam", 6e-4, "cosine", True, True),
    "supervised-oracle": (None, False, 1.0, "adam", 6e-4, "cosine", False, True),
}


@dataclass
class AdaptConfig:
    """Adaptation hyperparameters; ``None`` fields take the method's default."""

    method: str = "slr"
    delta: Optional[float] = None
    kappa: float = 0.9
    use_div: Optional[bool] = None
    epochs: int = 5
    batch_size: int = 64
    optimizer: Optional[str] = None
    lr0: Optional[float] = None
    schedule: Optional[str] = None
    seed: int = 2020
    use_input_transform: Optional[bool] = None
    freeze_top: Optional[bool] = None
    target_distribution: Optional[tuple] = None
    eval_mode: str = TRAIN_STATS
    trace_steps: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        conf, div, delta, opt, lr, sched, freeze, it = _METHOD_DEFAULTS[self.method]
        self.delta = delta if self.delta is None else float(self.delta)
        self.use_div = div if self.use_div is None else bool(self.use_div)
        self.optimizer = opt if self.optimizer is None else self.optimizer
        self.lr0 = lr if self.lr0 is None else float(self.lr0)
        self.schedule = sched if self.schedule is None else self.schedule
        self.freeze_top = freeze if self.freeze_top is None else bool(self.freeze_top)
        self.use_input_transform = it if self.use_input_transform is None else bool(self.use_input_transform)
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.eval_mode not in (TRAIN_STATS, RUNNING_STATS):
            raise ContractError(f"unknown eval mode {self.eval_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    @property
    def conf_kind(self) -> Optional[str]:
        return _METHOD_DEFAULTS[self.method][0]

    def weights(self) -> LossWeights:
        return LossWeights(self.delta, self.conf_kind, self.use_div)


# ---------------------------------------------------------------------------
# model


class AdaptableModel(Module):
    """g = f ∘ d with a frozen/adaptable partition and a pristine snapshot for ``reset``."""

    def __init__(self, f: ToyCNN, d: Optional[InputTransform] = None):
        self.f = f
        self.d = d if d is not None else InputTransform(f.in_ch)
        self.use_input_transform = False
        self.partition: dict[str, bool] = {name: False for name, _ in self.named_parameters()}
        self._pristine = self.state_dict()

    def __call__(self, x: Tensor) -> Tensor:
        if self.use_input_transform:
            x = self.d(x)
        return self.f(x)

    def transform(self, x: Tensor) -> Tensor:
        return self.d(x) if self.use_input_transform else x

    def snapshot(self) -> None:
        """Make the current state the pristine one."""
        self._pristine = self.state_dict()

    @property
    def pristine(self) -> dict[str, np.ndarray]:
        return self._pristine

    def reset(self) -> "AdaptableModel":
        self.load_state_dict(self._pristine)
        self.use_input_transform = False
        self.set_partition({name: False for name in self.partition})
        self.f.set_norm_mode(TRAIN_STATS, update_running=True)
        for _, p in self.named_parameters():
            p.grad = None
        return self

    def set_partition(self, partition: dict[str, bool]) -> None:
        params = dict(self.named_parameters())
        for name, flag in partition.items():
            params[name].requires_grad = flag
            params[name].tracked = flag
        self.partition = dict(partition)

    def adaptable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if self.partition.get(n)]


def is_norm_affine(name: str) -> bool:
    return name.startswith("f.") and name.rsplit(".", 1)[-1] in ("gamma", "beta")


def partition_parameters(model: AdaptableModel, freeze_top: bool = True,
                         use_input_transform: bool = False) -> dict[str, bool]:
    """Adaptable set: norm affines of f outside the top block, plus all of d if enabled.

    Convolution and linear weights of f are never adaptable.  Frozen blocks
    still re-estimate their batch statistics.
    """
    top = f"f.blocks.{len(model.f.blocks) - 1}."
    part = {}
    for name, _ in model.named_parameters():
        if name.startswith("d."):
            part[name] = use_input_transform
        elif is_norm_affine(name):
            part[name] = not (freeze_top and name.startswith(top))
        else:
            part[name] = False
    model.use_input_transform = use_input_transform
    model.set_partition(part)
    return part


def adaptable_count(model: AdaptableModel) -> int:
    return sum(p.size for _, p in model.adaptable())


# ---------------------------------------------------------------------------
# schedules and optimizers


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9


def optimizer_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   lr: float) -> None:
    """In-place update of ``params`` from ``grads`` (both keyed by name)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise PoisonedStateError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name].data
        if state.kind == "adam":
            m = state.first.setdefault(name, np.zeros_like(p))
            v = state.second.setdefault(name, np.zeros_like(p))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        elif state.kind == "sgd-momentum":
            vel = state.first.setdefault(name, np.zeros_like(p))
            vel *= state.momentum
            vel += g
            p -= lr * vel
        else:
            raise ContractError(f"unknown optimizer {state.kind!r}")


# ---------------------------------------------------------------------------
# evaluation and the adaptation loop


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    mean_entropy: float
    max_abs_logit: float

    @property
    def unique_classes(self) -> int:
        return int(len(np.unique(self.predictions)))


def iter_batches(n: int, batch_size: int, order: Optional[np.ndarray] = None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(model: AdaptableModel, ds: Dataset, batch_size: int = 64, mode: str = TRAIN_STATS) -> EvalResult:
    """Accuracy over ``ds`` in fixed order; running statistics are left untouched."""
    model.f.set_norm_mode(mode, update_running=False)
    preds, ents, max_logit = [], [], 0.0
    try:
        for idx in iter_batches(len(ds), batch_size):
            o = model(Tensor(ds.images[idx])).data
            z = o - o.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            ents.append(-(np.exp(logp) * logp).sum(axis=1))
            preds.append(np.argmax(o, axis=1))
            max_logit = max(max_logit, float(np.abs(o).max()))
    finally:
        model.f.set_norm_mode(TRAIN_STATS, update_running=True)
    pred = np.concatenate(preds)
    return EvalResult(float(np.mean(pred == ds.labels)), pred, float(np.concatenate(ents).mean()), max_logit)


TRACE_COLUMNS = ("epoch", "accuracy", "loss", "l_div", "l_conf", "unique_classes", "mean_pred_entropy", "lr")


@dataclass
class AdaptTrace:
    records: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    status: str = "ok"
    max_abs_logit: list = field(default_factory=list)

    def add(self, epoch: int, ev: EvalResult, loss: float, l_div: float, l_conf: float, lr: float) -> None:
        self.records.append({"epoch": epoch, "accuracy": ev.accuracy, "loss": loss, "l_div": l_div,
                             "l_conf": l_conf, "unique_classes": ev.unique_classes,
                             "mean_pred_entropy": ev.mean_entropy, "lr": lr})
        self.max_abs_logit.append(ev.max_abs_logit)

    def accuracy(self, epoch: int = -1) -> float:
        return self.records[epoch]["accuracy"]

    def __eq__(self, other) -> bool:
        return isinstance(other, AdaptTrace) and self.records == other.records \
            and self.steps == other.steps and self.status == other.status


class AdaptationAborted(RuntimeError):
    def __init__(self, message: str, trace: AdaptTrace):
        super().__init__(message)
        self.trace = trace


def adapt(model: AdaptableModel, target: Dataset, cfg: AdaptConfig,
          eval_set: Optional[Dataset] = None) -> tuple[AdaptableModel, AdaptTrace]:
    """Adapt ``model`` in place on unlabeled ``target`` and trace accuracy on ``eval_set``.

    Labels of ``target`` are read only by the supervised oracle.
    """
    if len(target) == 0:
        raise ContractError("target data is empty")
    if cfg.batch_size > len(target):
        raise ContractError(f"batch size {cfg.batch_size} exceeds dataset size {len(target)}")
    eval_set = target if eval_set is None else eval_set
    trace = AdaptTrace()
    trace.add(0, evaluate(model, eval_set, cfg.batch_size, cfg.eval_mode), math.nan, math.nan, math.nan,
              cfg.lr0 if cfg.method != "no-adapt" else 0.0)
    if cfg.method == "no-adapt" or cfg.epochs == 0:
        return model, trace

    partition_parameters(model, cfg.freeze_top, cfg.use_input_transform)
    params = dict(model.adaptable())
    opt = OptimizerState(cfg.optimizer)
    n_cl = model.f.n_classes
    div_state = DiversityState.uniform(n_cl, cfg.kappa, cfg.target_distribution)
    weights = cfg.weights() if cfg.method != "supervised-oracle" else None
    steps_per_epoch = math.ceil(len(target) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    lr = cfg.lr0
    model.f.set_norm_mode(TRAIN_STATS, update_running=True)

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(target))
        sums = np.zeros(3)
        for idx in iter_batches(len(target), cfg.batch_size, order):
            lr = cosine_lr(step, total_steps, cfg.lr0) if cfg.schedule == "cosine" else cfg.lr0
            with Tape() as tape:
                logits = model(Tensor(target.images[idx]))
                if weights is None:
                    loss = ad.mean(cross_entropy_labels(logits, target.labels[idx]))
                    parts = (loss.item(), 0.0, loss.item())
                else:
                    res = total_loss(logits, div_state, weights)
                    div_state = res.state
                    loss = res.total
                    parts = (loss.item(), res.l_div, res.l_conf)
            if not math.isfinite(parts[0]):
                trace.status = "aborted"
                raise AdaptationAborted(f"non-finite loss at epoch {epoch}, step {step}", trace)
            grads = tape.backward(loss)
            named = {n: grads.get(p, np.zeros_like(p.data)) for n, p in params.items()}
            try:
                optimizer_step(opt, params, named, lr)
            except PoisonedStateError as exc:
                trace.status = "aborted"
                raise AdaptationAborted(str(exc), trace) from exc
            sums += parts
            step += 1
            if cfg.trace_steps:
                trace.steps.append({"step": step, "loss": parts[0], "l_div": parts[1],
                                    "l_conf": parts[2], "lr": lr})
        ev = evaluate(model, eval_set, cfg.batch_size, cfg.eval_mode)
        mean_parts = sums / steps_per_epoch
        trace.add(epoch, ev, *mean_parts, lr)
    return model, trace


def reset(model: AdaptableModel) -> AdaptableModel:
    return model.reset()


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   b"TTAC" | u32 version | u32 manifest byte length | manifest | data
#   manifest = u32 count, then per entry:
#     u16 name length | utf-8 name | u8 ndim | ndim x u32 dims | u64 offset into data
#   data = raw float64 blocks in manifest order

MAGIC = b"TTAC"
FORMAT_VERSION = 1


def _meta(model: AdaptableModel) -> dict[str, np.ndarray]:
    f, d = model.f, model.d
    return {
        "meta.f.channels": np.array(f.channels, dtype=np.float64),
        "meta.f.n_classes": np.array([f.n_classes], dtype=np.float64),
        "meta.f.in_ch": np.array([f.in_ch], dtype=np.float64),
        "meta.f.input_size": np.array([f.input_size], dtype=np.float64),
        "meta.d.hidden": np.array([d.rpsi.hidden], dtype=np.float64),
        "meta.d.blocks": np.array([len(d.rpsi.convs)], dtype=np.float64),
        "meta.d.groups": np.array([d.rpsi.groups], dtype=np.float64),
    }


def encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    manifest = io.BytesIO()
    manifest.write(struct.pack("<I", len(entries)))
    offset = 0
    blobs = []
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        manifest.write(struct.pack("<H", len(raw)) + raw)
        manifest.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        manifest.write(struct.pack("<Q", offset))
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    man = manifest.getvalue()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(man)) + man + b"".join(blobs)


def decode_entries(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, man_len = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    data_start = 12 + man_len
    if len(buf) < data_start:
        raise FormatError("truncated manifest", len(buf))
    pos = 12

    def need(n: int) -> None:
        if pos + n > data_start:
            raise FormatError("manifest entry overruns manifest", pos)

    need(4)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not utf-8", pos) from None
        pos += nlen
        ndim = buf[pos]
        pos += 1
        need(4 * ndim + 8)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", buf, pos)
        entry_pos = pos
        pos += 8
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        start = data_start + offset
        if start + nbytes > len(buf):
            raise FormatError(f"data block for {name!r} is truncated", entry_pos)
        entries[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=start).reshape(shape).copy()
    if pos != data_start:
        raise FormatError("manifest length does not match its entries", pos)
    return entries


def save_checkpoint(model: AdaptableModel) -> bytes:
    """Serialize the pristine-independent current state (parameters, running statistics, architecture)."""
    entries = _meta(model)
    entries.update(model.state_dict())
    return encode_entries(entries)


def load_checkpoint(buf: bytes) -> AdaptableModel:
    entries = decode_entries(buf)
    try:
        channels = tuple(int(c) for c in entries["meta.f.channels"])
        f = ToyCNN(channels, int(entries["meta.f.n_classes"][0]), int(entries["meta.f.in_ch"][0]),
                   int(entries["meta.f.input_size"][0]))
        d = InputTransform(f.in_ch, int(entries["meta.d.hidden"][0]), int(entries["meta.d.blocks"][0]),
                           int(entries["meta.d.groups"][0]))
    except KeyError as exc:
        raise FormatError(f"missing architecture entry {exc.args[0]!r}", 12) from None
    model = AdaptableModel(f, d)
    model.load_state_dict({k: v for k, v in entries.items() if not k.startswith("meta.")})
    model.snapshot()
    return model


def config_dict(cfg: AdaptConfig) -> dict:
    return asdict(cfg)


def batch_norm_layers(model: AdaptableModel) -> list[BatchNorm2d]:
    return model.f.batch_norms()


# ---------------------------------------------------------------------------
# supervised pretraining of f on clean data


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    target_accuracy: float = 0.97


def pretrain(model: AdaptableModel, train: Dataset, test: Dataset, cfg: PretrainConfig,
             log=None) -> list[dict]:
    """Train every parameter of f with cross-entropy (Adam, cosine decay) until the target
    test accuracy (running-statistics inference) is reached or epochs run out."""
    names = [n for n, _ in model.named_parameters()]
    model.use_input_transform = False
    model.set_partition({n: n.startswith("f.") for n in names})
    params = dict(model.adaptable())
    opt = OptimizerState("adam")
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.f.set_norm_mode(TRAIN_STATS, update_running=True)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        loss_sum = 0.0
        for idx in iter_batches(len(train), cfg.batch_size, order):
            with Tape() as tape:
                loss = ad.mean(cross_entropy_labels(model(Tensor(train.images[idx])), train.labels[idx]))
            grads = tape.backward(loss)
            optimizer_step(opt, params, {n: grads[p] for n, p in params.items()},
                           cosine_lr(step, total, cfg.lr))
            loss_sum += loss.item()
            step += 1
        acc = evaluate(model, test, cfg.batch_size, RUNNING_STATS).accuracy
        acc_bs = evaluate(model, test, cfg.batch_size, TRAIN_STATS).accuracy
        row = {"epoch": epoch, "train_loss": loss_sum / steps_per_epoch, "test_accuracy": acc,
               "test_accuracy_batch_stats": acc_bs}
        history.append(row)
        if log:
            log(row)
        if acc >= cfg.target_accuracy and acc_bs >= cfg.target_accuracy:
            break
    model.set_partition({n: False for n in names})
    model.f.set_norm_mode(TRAIN_STATS, update_running=True)
    model.snapshot()
    return history
