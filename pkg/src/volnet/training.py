"""Initialization, RMSprop optimization, plateau scheduling, and the epoch loop.

All randomness derives from one master seed. The initial split and the
parameter initialization use the master seed directly; the end-of-epoch
train/validation reshuffle uses ``master_seed + epoch``; batch sampling
and dropout inside epoch ``e`` use generators seeded with
``[master_seed, e, role]`` (role 0 = sampling, role 1 = dropout), so a
run resumed from a checkpoint replays exactly the same stream as an
unbroken one.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as vdata
from .data import DatasetSplit, Manifest, RoiStore, VVOL_MAGIC
from .errors import FormatError, InvalidConfig, NumericError
from .layers import accuracy_from_probs, cross_entropy
from .network import Network, NetworkSpec, build_preset

CKPT_MAGIC = b"VCKPT1\n"

TASKS = {
    # classes ordered by disease progression; index 0 is the positive class
    "AD_NC": ("AD", "NC"),
    "AD_MCI": ("AD", "MCI"),
    "MCI_NC": ("MCI", "NC"),
    "AD_MCI_NC": ("AD", "MCI", "NC"),
}


@dataclass(frozen=True)
class TrainConfig:
    task: str = "AD_NC"
    preset: str = "proposed-4roi"
    tau: int = 5
    eta: int = 15
    lr0: float = 1e-3
    eta0: int = 15
    max_epochs: int = 40
    plateau_factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    lr_min: float = 1e-6
    rho: float = 0.9
    epsilon: float = 1e-7
    keep_prob: float = 0.5
    seed: int = 0
    f0: int | None = None
    plateau_monitor: str = "validation"  # "test" reproduces the paper's wording

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfig(f"unknown task {self.task!r}; known: {sorted(TASKS)}")
        if self.tau < 1 or self.eta < 1 or self.eta0 < 1:
            raise InvalidConfig("tau, eta, and eta0 must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig("plateau factor must be in (0, 1)")
        if self.patience < 1 or self.min_delta < 0:
            raise InvalidConfig("patience must be >= 1 and min_delta >= 0")
        if self.max_epochs < 0:
            raise InvalidConfig("max_epochs must be >= 0")
        if not 0.0 < self.keep_prob <= 1.0:
            raise InvalidConfig("keep_prob must be in (0, 1]")
        if self.plateau_monitor not in ("validation", "test"):
            raise InvalidConfig("plateau_monitor must be 'validation' or 'test'")

    @property
    def classes(self) -> tuple[str, ...]:
        return TASKS[self.task]

    def build_spec(self) -> NetworkSpec:
        return build_preset(
            self.preset, len(self.classes), self.keep_prob, self.f0
        )

    def digest(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def xavier_init(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """Uniform Xavier weights, zero biases/beta, unit gamma, fresh running stats.

    Bounds: a = sqrt(6 / (fan_in + fan_out)) with conv fans C_in*k^3 and
    C_out*k^3, dense fans F_in and F_out.
    """
    rng = np.random.default_rng(seed)
    store: dict[str, np.ndarray] = {}
    net = Network.structure_only(spec)
    for ps in net.param_specs():
        if ps.kind in ("conv_weight", "dense_weight"):
            a = np.sqrt(6.0 / (ps.fan_in + ps.fan_out))
            store[ps.name] = rng.uniform(-a, a, ps.shape).astype(np.float32)
        elif ps.kind in ("bias", "beta", "running_mean"):
            store[ps.name] = np.zeros(ps.shape, dtype=np.float32)
        elif ps.kind in ("gamma", "running_var"):
            store[ps.name] = np.ones(ps.shape, dtype=np.float32)
        else:
            raise InvalidConfig(f"unknown parameter kind {ps.kind!r}")
    return store


def trainable_names(net: Network) -> list[str]:
    return [ps.name for ps in net.param_specs() if ps.trainable]


# ---------------------------------------------------------------------------
# optimizer and scheduler
# ---------------------------------------------------------------------------

def rmsprop_init(params: dict[str, np.ndarray], names: list[str]) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(params[n]) for n in names}


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    rho: float = 0.9,
    epsilon: float = 1e-7,
) -> None:
    """s <- rho*s + (1-rho)*g^2; theta <- theta - lr*g / (sqrt(s) + eps).

    Mutates params and state in place. A non-finite gradient aborts the
    step before anything is touched.
    """
    for name in state:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}")
    for name, s in state.items():
        g = grads[name].astype(s.dtype, copy=False)
        s *= rho
        s += (1.0 - rho) * g * g
        params[name] -= (lr * g / (np.sqrt(s) + epsilon)).astype(
            params[name].dtype, copy=False
        )


def scale_lr(lr0: float, eta0: int, eta: int) -> float:
    """Batch-size/learning-rate coupling: eta scaled k times => lr divided by k."""
    if lr0 <= 0 or eta0 < 1 or eta < 1:
        raise InvalidConfig("scale_lr arguments must be positive")
    return lr0 * eta0 / eta


@dataclass
class PlateauScheduler:
    """Cut the learning rate when the monitored loss stops improving."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    lr_min: float = 1e-6
    best: float = field(default=np.inf)
    bad_epochs: int = 0

    def step(self, monitored_loss: float) -> float:
        if not np.isfinite(monitored_loss):
            raise NumericError("plateau scheduler received a non-finite loss")
        if self.best - monitored_loss >= self.min_delta:
            self.best = monitored_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "factor": self.factor,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "lr_min": self.lr_min,
            "best": None if np.isinf(self.best) else self.best,
            "bad_epochs": self.bad_epochs,
        }

    @classmethod
    def from_state(cls, st: dict) -> "PlateauScheduler":
        sched = cls(
            lr=st["lr"],
            factor=st["factor"],
            patience=st["patience"],
            min_delta=st["min_delta"],
            lr_min=st["lr_min"],
        )
        sched.best = np.inf if st["best"] is None else st["best"]
        sched.bad_epochs = st["bad_epochs"]
        return sched


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "test_loss",
    "test_acc",
    "lr",
)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    test_loss: float
    test_acc: float
    lr: float


def history_to_csv(history: list[EpochRow]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(
            f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.val_loss:.6f},"
            f"{r.val_acc:.6f},{r.test_loss:.6f},{r.test_acc:.6f},{r.lr:.8g}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subset evaluation used inside the loop (infer mode, center crops)
# ---------------------------------------------------------------------------

EVAL_CHUNK = 16  # bounds the transient im2col buffers


def eval_subset(
    net: Network,
    store: RoiStore,
    ids_by_class: dict[str, list[str]],
    classes: tuple[str, ...],
) -> tuple[float, float]:
    """Mean cross-entropy loss and accuracy over the subset's center crops."""
    sids = [(sid, ci) for ci, c in enumerate(classes) for sid in ids_by_class.get(c, [])]
    if not sids:
        return float("nan"), float("nan")
    roi_names = net.spec.input_names
    losses, correct = [], []
    for start in range(0, len(sids), EVAL_CHUNK):
        chunk = sids[start : start + EVAL_CHUNK]
        inputs = {
            name: np.stack([store.center_crop(sid, name) for sid, _ in chunk])
            for name in roi_names
        }
        targets = np.zeros((len(chunk), len(classes)), dtype=np.float32)
        for i, (_, ci) in enumerate(chunk):
            targets[i, ci] = 1.0
        probs = net.forward_batch(inputs, mode="infer")
        for i in range(len(chunk)):
            loss, _ = cross_entropy(probs[i], targets[i])
            losses.append(loss)
        correct.append(accuracy_from_probs(probs, targets) * len(chunk))
    return float(np.mean(losses)), float(sum(correct) / len(sids))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    history: list[EpochRow]
    final_params: dict[str, np.ndarray]
    final_split: DatasetSplit
    optimizer_state: dict[str, np.ndarray]
    scheduler: "PlateauScheduler"


def _clone(store: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in store.items()}


def train_loop(
    spec: NetworkSpec,
    manifest: Manifest,
    split: DatasetSplit,
    config: TrainConfig,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """Run the full balanced-augmentation training protocol.

    Per epoch: ``epoch_plan`` iterations of balanced batch -> train-mode
    forward -> cross-entropy -> backward -> RMSprop step; then infer-mode
    validation and test evaluation, a plateau-scheduler step on the
    monitored loss, and a train/validation reshuffle. The best checkpoint
    is the one with the lowest validation loss.
    """
    classes = config.classes
    missing = [c for c in classes if c not in manifest.classes()]
    if missing:
        raise InvalidConfig(f"manifest lacks classes required by task: {missing}")
    store = RoiStore(manifest)
    net = Network(spec, xavier_init(spec, config.seed))
    names = trainable_names(net)
    opt = rmsprop_init(net.params, names)
    sched = PlateauScheduler(
        lr=scale_lr(config.lr0, config.eta0, config.eta),
        factor=config.plateau_factor,
        patience=config.patience,
        min_delta=config.min_delta,
        lr_min=config.lr_min,
    )
    history: list[EpochRow] = []
    best_params = _clone(net.params)
    best_epoch = 0
    best_val = np.inf
    start_epoch = 1

    if resume is not None:
        if resume.meta["preset"] != spec.preset or resume.meta["task"] != config.task:
            raise FormatError(
                f"checkpoint is for {resume.meta['preset']}/{resume.meta['task']}, "
                f"not {spec.preset}/{config.task}"
            )
        restore_params(net.params, resume.params)
        for n in names:
            if n not in resume.optimizer:
                raise FormatError(f"checkpoint lacks optimizer state for {n}")
            opt[n] = resume.optimizer[n].copy()
        sched = PlateauScheduler.from_state(resume.meta["scheduler"])
        history = [EpochRow(**row) for row in resume.meta["history"]]
        best_epoch = resume.meta["best_epoch"]
        best_val = min(
            (r.val_loss if np.isfinite(r.val_loss) else r.train_loss for r in history),
            default=np.inf,
        )
        best_params = {
            k[len("best/"):]: v.copy()
            for k, v in resume.extra.items()
            if k.startswith("best/")
        } or _clone(net.params)
        start_epoch = resume.meta["epoch"] + 1
        # replay the deterministic reshuffles the finished epochs applied
        for e in range(1, start_epoch):
            split = vdata.reshuffle_train_val(split, config.seed + e)

    for epoch in range(start_epoch, config.max_epochs + 1):
        n_train = sum(len(split.train[c]) for c in classes)
        _, iterations = vdata.epoch_plan(n_train, config.tau, config.eta)
        rng_batch = np.random.default_rng([config.seed, epoch, 0])
        rng_drop = np.random.default_rng([config.seed, epoch, 1])
        ep_loss = 0.0
        ep_acc = 0.0
        for _ in range(iterations):
            inputs, targets = vdata.balanced_batch(
                store, split.train, classes, spec.input_names, config.eta, rng_batch
            )
            probs = net.forward_batch(inputs, mode="train", rng=rng_drop)
            loss, _ = cross_entropy(probs, targets)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            grads, _ = net.backward_batch(targets)
            try:
                rmsprop_step(net.params, grads, opt, sched.lr, config.rho, config.epsilon)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            ep_loss += loss
            ep_acc += accuracy_from_probs(probs, targets)
        train_loss = ep_loss / max(iterations, 1)
        train_acc = ep_acc / max(iterations, 1)
        val_loss, val_acc = eval_subset(net, store, split.validation, classes)
        test_loss, test_acc = eval_subset(net, store, split.test, classes)
        lr_used = sched.lr
        monitored = val_loss if config.plateau_monitor == "validation" else test_loss
        if not np.isfinite(monitored):
            monitored = train_loss  # empty validation set: no held-out signal
        sched.step(monitored)
        history.append(
            EpochRow(epoch, train_loss, train_acc, val_loss, val_acc, test_loss, test_acc, lr_used)
        )
        selection = val_loss if np.isfinite(val_loss) else train_loss
        if selection < best_val:
            best_val = selection
            best_epoch = epoch
            best_params = _clone(net.params)
        split = vdata.reshuffle_train_val(split, config.seed + epoch)

    return TrainResult(best_params, best_epoch, history, net.params, split, opt, sched)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    extra: dict[str, np.ndarray]


def _tensor_blob(t: np.ndarray) -> bytes:
    header = json.dumps({"shape": list(t.shape), "dtype": "f32le"}).encode("utf-8")
    return VVOL_MAGIC + header + b"\0" + np.ascontiguousarray(t, dtype="<f4").tobytes()


def _parse_tensor_blob(blob: bytes, label: str) -> np.ndarray:
    if not blob.startswith(VVOL_MAGIC):
        raise FormatError(f"{label}: tensor payload lacks vvol magic")
    sep = blob.find(b"\0", len(VVOL_MAGIC))
    if sep < 0:
        raise FormatError(f"{label}: tensor payload lacks header terminator")
    header = json.loads(blob[len(VVOL_MAGIC):sep].decode("utf-8"))
    shape = tuple(int(s) for s in header["shape"])
    data = blob[sep + 1:]
    if len(data) != int(np.prod(shape)) * 4:
        raise FormatError(f"{label}: tensor payload truncated")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def save_checkpoint(
    path: str | Path,
    config: TrainConfig,
    epoch: int,
    params: dict[str, np.ndarray],
    optimizer: dict[str, np.ndarray],
    scheduler: PlateauScheduler,
    history: list[EpochRow],
    best_epoch: int,
    best_params: dict[str, np.ndarray] | None = None,
) -> None:
    meta = {
        "version": 1,
        "preset": config.preset,
        "task": config.task,
        "f0": config.f0,
        "keep_prob": config.keep_prob,
        "epoch": epoch,
        "best_epoch": best_epoch,
        "config_digest": config.digest(),
        "scheduler": scheduler.state(),
        "history": [r.__dict__ for r in history],
    }
    entries: list[tuple[str, np.ndarray]] = []
    entries += [(f"param/{k}", v) for k, v in sorted(params.items())]
    entries += [(f"rms/{k}", v) for k, v in sorted(optimizer.items())]
    if best_params is not None:
        entries += [(f"best/{k}", v) for k, v in sorted(best_params.items())]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))
        fh.write(b"\0")
        fh.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            nb = name.encode("utf-8")
            blob = _tensor_blob(t)
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a volnet checkpoint")
    sep = raw.find(b"\0", len(CKPT_MAGIC))
    if sep < 0:
        raise FormatError(f"{path}: missing metadata terminator")
    try:
        meta = json.loads(raw[len(CKPT_MAGIC):sep].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: malformed metadata ({exc})") from exc
    if meta.get("version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    off = sep + 1
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params: dict[str, np.ndarray] = {}
        optimizer: dict[str, np.ndarray] = {}
        extra: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (blen,) = struct.unpack_from("<I", raw, off)
            off += 4
            tensor = _parse_tensor_blob(raw[off : off + blen], name)
            off += blen
            if name.startswith("param/"):
                params[name[len("param/"):]] = tensor
            elif name.startswith("rms/"):
                optimizer[name[len("rms/"):]] = tensor
            else:
                extra[name] = tensor
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(meta, params, optimizer, extra)


def restore_params(target: dict[str, np.ndarray], source: dict[str, np.ndarray]) -> None:
    """Copy checkpointed tensors into an existing store, validating shapes."""
    for name, arr in target.items():
        if name not in source:
            raise FormatError(f"checkpoint is missing tensor {name}")
        if source[name].shape != arr.shape:
            raise FormatError(
                f"checkpoint tensor {name} has shape {source[name].shape}, "
                f"expected {arr.shape}"
            )
        target[name] = source[name].copy()
    unknown = set(source) - set(target)
    if unknown:
        raise FormatError(f"checkpoint has unknown tensors: {sorted(unknown)[:3]}...")
