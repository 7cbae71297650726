"""Few-shot class-incremental protocol engine.

A run is one base session with ample data followed by T incremental
sessions of way x shot novel classes.  After each session the engine stores
the mean backbone feature of every new class; those prototypes are replayed
through the projector in later sessions.  Evaluation after session t covers
the union of test sets of sessions 0..t.

Everything is driven by explicit seeded generators: identical (config,
seed) pairs produce bitwise-identical metrics.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ften
from .config import config_hash, np_dtype
from .objectives import (EtfClassifier, LossWeights, build_etf, dr_loss,
                         incremental_objective)
from .projector import DualProjector, frozen_checksum
from .tensor import NonFiniteError, Tensor, no_grad

EVAL_CHUNK = 256


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ProtocolError(ValueError):
    """The session stream or memory violates the protocol contract."""


# ---------------------------------------------------------------------------
# session streams and synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SessionData:
    classes: np.ndarray
    train_x: np.ndarray   # [n, D, H, W]
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class SessionStream:
    sessions: list[SessionData]
    base_classes: int
    way: int
    shot: int

    def __post_init__(self):
        seen: set[int] = set()
        for t, s in enumerate(self.sessions):
            labels = set(int(c) for c in s.classes)
            if labels & seen:
                raise ProtocolError(f"session {t} reuses classes {sorted(labels & seen)}")
            seen |= labels
            if t > 0 and len(s.train_y) != self.way * self.shot:
                raise ProtocolError(
                    f"session {t} has {len(s.train_y)} training samples, "
                    f"expected way*shot = {self.way * self.shot}")

    @property
    def num_incremental(self) -> int:
        return len(self.sessions) - 1

    def total_classes(self) -> int:
        return sum(len(s.classes) for s in self.sessions)

    def classes_through(self, t: int) -> np.ndarray:
        return np.concatenate([s.classes for s in self.sessions[: t + 1]])


def synth_dataset(class_ids, means, sigma: float, n_per_class: int,
                  rng: np.random.Generator, dtype=np.float32):
    """Class-conditional Gaussian feature maps around per-class means."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xs, ys = [], []
    for c in class_ids:
        noise = rng.normal(0.0, sigma, size=(n_per_class,) + means[c].shape)
        xs.append((means[c][None] + noise).astype(dtype))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def build_session_stream(cfg: dict, seed: int) -> SessionStream:
    """Materialize the protocol's sessions from config (synthetic or files)."""
    p, d, m = cfg["protocol"], cfg["data"], cfg["model"]
    if d["source"] == "files":
        return _load_stream_from_files(cfg)
    dims = (m["feature_dim"], m["height"], m["width"])
    dtype = np_dtype(cfg)
    total = p["base_classes"] + p["sessions"] * p["way"]
    ss = np.random.SeedSequence(seed)
    mean_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    means = d["sigma_sep"] * mean_rng.standard_normal((total,) + dims)
    sessions = []
    next_class = 0
    for t in range(p["sessions"] + 1):
        count = p["base_classes"] if t == 0 else p["way"]
        shots = d["samples_per_base_class"] if t == 0 else p["shot"]
        classes = np.arange(next_class, next_class + count)
        next_class += count
        train_x, train_y = synth_dataset(classes, means, d["sigma"], shots,
                                         noise_rng, dtype)
        test_x, test_y = synth_dataset(classes, means, d["sigma"],
                                       d["test_samples_per_class"], noise_rng, dtype)
        sessions.append(SessionData(classes, train_x, train_y, test_x, test_y))
    return SessionStream(sessions, p["base_classes"], p["way"], p["shot"])


def _load_stream_from_files(cfg: dict) -> SessionStream:
    p, d = cfg["protocol"], cfg["data"]
    sessions = []
    for t in range(p["sessions"] + 1):
        base = os.path.join(d["path"], f"session_{t}")
        train_x = ften.load_tensor(base + "_train.ften")
        train_y = ften.load_tensor(base + "_train_labels.ften").astype(np.int64)
        test_x = ften.load_tensor(base + "_test.ften")
        test_y = ften.load_tensor(base + "_test_labels.ften").astype(np.int64)
        classes = np.unique(train_y)
        sessions.append(SessionData(classes, train_x, train_y, test_x, test_y))
    return SessionStream(sessions, p["base_classes"], p["way"], p["shot"])


# ---------------------------------------------------------------------------
# prototype memory
# ---------------------------------------------------------------------------


class PrototypeMemory:
    """Mean backbone feature map per class seen so far."""

    def __init__(self):
        self._store: dict[int, np.ndarray] = {}

    def update(self, features: np.ndarray, labels: np.ndarray) -> None:
        """Add the mean feature of every class in `labels`.

        Must be called once per session with that session's training
        features; re-adding a class is an error.
        """
        labels = np.asarray(labels)
        for c in np.unique(labels):
            c = int(c)
            if c in self._store:
                raise ProtocolError(f"class {c} already has a prototype")
            self._store[c] = features[labels == c].mean(axis=0)

    def __len__(self):
        return len(self._store)

    def __contains__(self, c):
        return int(c) in self._store

    def prototype(self, c) -> np.ndarray:
        return self._store[int(c)]

    def as_arrays(self):
        """(features [M, D, H, W], labels [M]) in ascending class order."""
        classes = sorted(self._store)
        if not classes:
            return None, None
        feats = np.stack([self._store[c] for c in classes])
        return feats, np.asarray(classes, dtype=np.int64)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Raw samples followed by memory prototypes, with group tags.

    features: raw inputs for the first n_raw rows, backbone-space feature
    maps for the rest (prototypes bypass the backbone).  base_mask marks
    rows whose class belongs to the base session.
    """

    features: np.ndarray
    labels: np.ndarray
    n_raw: int
    base_mask: np.ndarray | None = None

    @property
    def from_memory(self) -> np.ndarray:
        tags = np.zeros(len(self.labels), dtype=bool)
        tags[self.n_raw:] = True
        return tags


def compose_batch(session: SessionData, memory: PrototypeMemory, batch_size: int,
                  rng: np.random.Generator, base_classes: int,
                  prototypes_per_batch="all") -> Batch:
    """Mix current-session samples with replayed prototypes.

    Rows from the base-session prototypes are base-tagged; current-session
    samples and prototypes of earlier incremental sessions are novel-tagged.
    """
    if len(memory) == 0:
        raise ProtocolError("memory is empty in the incremental phase")
    n = len(session.train_y)
    if batch_size >= n:
        pick = np.arange(n)
    else:
        pick = np.sort(rng.choice(n, size=batch_size, replace=False))
    proto_x, proto_y = memory.as_arrays()
    if prototypes_per_batch != "all" and prototypes_per_batch < len(proto_y):
        keep = np.sort(rng.choice(len(proto_y), size=prototypes_per_batch,
                                  replace=False))
        proto_x, proto_y = proto_x[keep], proto_y[keep]
    features = np.concatenate([session.train_x[pick], proto_x])
    labels = np.concatenate([session.train_y[pick], proto_y])
    base_mask = labels < base_classes
    base_mask[: len(pick)] = False  # current-session samples are novel by definition
    return Batch(features, labels, n_raw=len(pick), base_mask=base_mask)


# ---------------------------------------------------------------------------
# backbone stubs and the model bundle
# ---------------------------------------------------------------------------


class PassthroughBackbone:
    """Identity stub for precomputed feature maps."""

    def __call__(self, x: Tensor) -> Tensor:
        return x

    def named_params(self):
        return iter(())


class LinearBackbone:
    """Per-position channel mixer: a 1x1 convolution over the feature grid."""

    def __init__(self, channels: int, seed: int, dtype=np.float32):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(channels)
        init = np.eye(channels) + rng.uniform(-bound, bound, size=(channels, channels))
        self.weight = Tensor(init.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        n, d, h, w = x.shape
        flat = x.transpose((0, 2, 3, 1)).reshape(n, h * w, d)
        out = flat @ self.weight + self.bias
        return out.reshape(n, h, w, d).transpose((0, 3, 1, 2))

    def named_params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def freeze(self):
        self.weight.requires_grad = False
        self.bias.requires_grad = False


@dataclass
class Model:
    backbone: object
    projector: DualProjector
    mode: str = "dual"

    def features(self, batch: Batch) -> Tensor:
        """Backbone on raw rows; prototype rows pass straight through."""
        raw = Tensor(batch.features[: batch.n_raw])
        parts = []
        if batch.n_raw:
            parts.append(self.backbone(raw))
        if batch.n_raw < len(batch.labels):
            parts.append(Tensor(batch.features[batch.n_raw:]))
        if len(parts) == 1:
            return parts[0]
        from .tensor import concat
        return concat(parts, axis=0)

    def forward_base(self, batch: Batch) -> Tensor:
        return self.projector.forward_base_phase(self.features(batch))

    def forward_incremental(self, batch: Batch):
        return self.projector.forward_incremental_phase(self.features(batch))

    def eval_representation(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            f = self.backbone(Tensor(x))
            if self.projector.g_inc is None:
                return self.projector.forward_base_phase(f).data
            return self.projector.forward_incremental_phase(f)[0].data

    def named_params(self):
        for name, t in self.backbone.named_params():
            yield f"backbone.{name}", t
        yield from self.projector.named_params()

    def stable_checksum(self) -> str:
        """Digest of everything that must not move after the base session."""
        frozen = [(n, t) for n, t in self.named_params()
                  if n.startswith(("backbone.", "p_iden.", "g_base."))]
        return frozen_checksum(frozen)


def build_model(cfg: dict, seed: int) -> Model:
    m = cfg["model"]
    dtype = np_dtype(cfg)
    ss = np.random.SeedSequence(seed)
    bb_seed, proj_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    if m["backbone"] == "linear":
        backbone = LinearBackbone(m["feature_dim"], bb_seed, dtype)
    else:
        backbone = PassthroughBackbone()
    projector = DualProjector(m["feature_dim"], m["d_model"], m["d_state"],
                              m["height"], m["width"], m["k_dirs"],
                              seed=proj_seed, dtype=dtype)
    return Model(backbone=backbone, projector=projector, mode=m["mode"])


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class SGD:
    """Plain SGD with momentum and decoupled-from-nothing weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def train_base(model: Model, stream: SessionStream, etf: EtfClassifier,
               opt_cfg: dict, rng: np.random.Generator) -> list[float]:
    """Base-session optimization; returns the per-step loss curve."""
    session = stream.sessions[0]
    n = len(session.train_y)
    batch_size = min(opt_cfg["batch_base"], n)
    steps_per_epoch = max(1, n // batch_size)
    total = opt_cfg["base_epochs"] * steps_per_epoch
    trainables = [t for _, t in model.backbone.named_params()]
    trainables += model.projector.trainable_params()
    opt = SGD(trainables, opt_cfg["base_lr"], opt_cfg["momentum"],
              opt_cfg["weight_decay"])
    losses = []
    step = 0
    for _ in range(opt_cfg["base_epochs"]):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            pick = order[b * batch_size : (b + 1) * batch_size]
            batch = Batch(session.train_x[pick], session.train_y[pick],
                          n_raw=len(pick))
            opt.lr = cosine_lr(opt_cfg["base_lr"], step, total)
            opt.zero_grad()
            try:
                loss = dr_loss(model.forward_base(batch), batch.labels, etf)
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"base training diverged at step {step}: {exc}") from exc
            opt.step()
            losses.append(loss.item())
            step += 1
    return losses


def train_incremental(model: Model, stream: SessionStream, memory: PrototypeMemory,
                      weights: LossWeights, etf: EtfClassifier, opt_cfg: dict,
                      rng: np.random.Generator, t: int) -> list[float]:
    """One incremental session's optimization; returns its loss curve."""
    session = stream.sessions[t]
    if model.mode == "single":
        trainables = ([t_ for _, t_ in model.backbone.named_params()
                       if t_.requires_grad] + model.projector.trainable_params())
    else:
        trainables = model.projector.trainable_params()
    opt = SGD(trainables, opt_cfg["inc_lr"], opt_cfg["momentum"],
              opt_cfg["weight_decay"])
    total = opt_cfg["inc_iterations"]
    losses = []
    for step in range(total):
        batch = compose_batch(session, memory, opt_cfg["batch_inc"], rng,
                              stream.base_classes, opt_cfg["prototypes_per_batch"])
        opt.lr = cosine_lr(opt_cfg["inc_lr"], step, total)
        opt.zero_grad()
        try:
            if model.mode == "single":
                loss = dr_loss(model.forward_base(batch), batch.labels, etf)
            else:
                loss = incremental_objective(batch, model, etf, weights)
            loss.backward()
        except NonFiniteError as exc:
            raise DivergenceError(
                f"session {t} diverged at step {step}: {exc}") from exc
        opt.step()
        losses.append(loss.item())
    return losses


def store_session_prototypes(model: Model, stream: SessionStream,
                             memory: PrototypeMemory, t: int) -> None:
    session = stream.sessions[t]
    with no_grad():
        feats = model.backbone(Tensor(session.train_x)).data
    memory.update(feats, session.train_y)


# ---------------------------------------------------------------------------
# evaluation and metrics
# ---------------------------------------------------------------------------


@dataclass
class SessionMetrics:
    session: int
    acc_all: float
    acc_base: float
    acc_novel: float


@dataclass
class ProtocolMetrics:
    per_session: list[float]
    avg: float
    pd: float


def _eval_threads() -> int:
    env = os.environ.get("FSCIL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(model: Model, stream: SessionStream, t: int,
             etf: EtfClassifier) -> SessionMetrics:
    """Prototype-argmax accuracy over all test data seen through session t."""
    xs = np.concatenate([s.test_x for s in stream.sessions[: t + 1]])
    ys = np.concatenate([s.test_y for s in stream.sessions[: t + 1]])
    if len(ys) == 0:
        raise ProtocolError("empty test set")
    seen = stream.classes_through(t)
    protos = etf.prototypes[seen].astype(xs.dtype)  # restrict to seen classes

    chunks = [(i, min(i + EVAL_CHUNK, len(ys))) for i in range(0, len(ys), EVAL_CHUNK)]

    def predict(span):
        lo, hi = span
        mu = model.eval_representation(xs[lo:hi])
        mu = mu / np.linalg.norm(mu, axis=1, keepdims=True)
        return seen[np.argmax(mu @ protos.T, axis=1)]

    with ThreadPoolExecutor(max_workers=_eval_threads()) as pool:
        preds = np.concatenate(list(pool.map(predict, chunks)))

    correct = preds == ys
    base = ys < stream.base_classes
    acc_all = float(correct.mean())
    acc_base = float(correct[base].mean()) if base.any() else float("nan")
    acc_novel = float(correct[~base].mean()) if (~base).any() else float("nan")
    return SessionMetrics(t, acc_all, acc_base, acc_novel)


def compute_metrics(per_session_acc) -> ProtocolMetrics:
    accs = [float(a) for a in per_session_acc]
    if not accs:
        raise ValueError("empty accuracy list")
    return ProtocolMetrics(per_session=accs, avg=float(np.mean(accs)),
                           pd=accs[0] - accs[-1])


def base_novel_cosine(model: Model, stream: SessionStream) -> float:
    """Mean cosine between base-class and novel-class final representations.

    Averaged over all cross pairs of the final test set; equals the dot
    product of the two groups' mean unit vectors.
    """
    t = len(stream.sessions) - 1
    xs = np.concatenate([s.test_x for s in stream.sessions[: t + 1]])
    ys = np.concatenate([s.test_y for s in stream.sessions[: t + 1]])
    mu = model.eval_representation(xs)
    mu = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    base = ys < stream.base_classes
    if not base.any() or base.all():
        raise ProtocolError("need both class groups for the cosine probe")
    return float(mu[base].mean(axis=0) @ mu[~base].mean(axis=0))


# ---------------------------------------------------------------------------
# full protocol runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    cfg: dict
    seed: int
    model: Model
    memory: PrototypeMemory
    session_metrics: list[SessionMetrics]
    metrics: ProtocolMetrics
    base_losses: list[float]
    inc_losses: list[list[float]] = field(default_factory=list)
    checksum_after_base: str = ""
    checksum_final: str = ""


def run_protocol(cfg: dict, seed: int | None = None) -> RunResult:
    """Execute the full protocol described by a validated config."""
    seed = cfg["seed"] if seed is None else seed
    ss = np.random.SeedSequence(seed)
    data_s, model_s, etf_s, base_s, inc_s = ss.spawn(5)
    stream = build_session_stream(cfg, int(data_s.generate_state(1)[0]))
    model = build_model(cfg, int(model_s.generate_state(1)[0]))
    k_total = stream.total_classes()
    etf = build_etf(k_total, cfg["model"]["d_model"],
                    int(etf_s.generate_state(1)[0]), dtype=np_dtype(cfg))
    weights = LossWeights(cfg["losses"]["lambda1"], cfg["losses"]["lambda2"],
                          cfg["losses"]["lambda3"])
    opt_cfg = cfg["optimizer"]

    base_rng = np.random.default_rng(base_s)
    base_losses = train_base(model, stream, etf, opt_cfg, base_rng)
    memory = PrototypeMemory()
    store_session_prototypes(model, stream, memory, 0)
    if isinstance(model.backbone, LinearBackbone):
        model.backbone.freeze()
    if model.mode == "single":
        pass  # the same two branches keep training across sessions
    checksum_after_base = model.stable_checksum() if model.mode == "dual" else ""

    session_metrics = [evaluate(model, stream, 0, etf)]
    inc_losses = []
    inc_rng = np.random.default_rng(inc_s)
    for t in range(1, len(stream.sessions)):
        if t == 1 and model.mode != "single":
            spawn_seed = int(np.random.SeedSequence((seed, 1000 + t)).generate_state(1)[0])
            model.projector.spawn_incremental(spawn_seed, cfg["model"]["inc_init"])
            if model.mode == "dual_unfrozen":
                # ablation: let the base-phase branches keep training
                model.projector.p_iden_w.requires_grad = True
                model.projector.p_iden_b.requires_grad = True
                model.projector.g_base.set_requires_grad(True)
                model.projector._frozen.clear()
            if model.mode == "dual":
                assert model.stable_checksum() == checksum_after_base
        inc_losses.append(train_incremental(model, stream, memory, weights, etf,
                                            opt_cfg, inc_rng, t))
        store_session_prototypes(model, stream, memory, t)
        session_metrics.append(evaluate(model, stream, t, etf))

    metrics = compute_metrics([m.acc_all for m in session_metrics])
    return RunResult(cfg=cfg, seed=seed, model=model, memory=memory,
                     session_metrics=session_metrics, metrics=metrics,
                     base_losses=base_losses, inc_losses=inc_losses,
                     checksum_after_base=checksum_after_base,
                     checksum_final=model.stable_checksum() if model.mode == "dual" else "")


def write_run_outputs(out_dir, result: RunResult) -> None:
    """sessions.csv, summary.json and final checkpoint for a finished run."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sessions.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session", "acc_all", "acc_base", "acc_novel"])
        for m in result.session_metrics:
            writer.writerow([m.session, repr(m.acc_all), repr(m.acc_base),
                             repr(m.acc_novel)])
    summary = {
        "avg": result.metrics.avg,
        "pd": result.metrics.pd,
        "per_session": result.metrics.per_session,
        "config_hash": config_hash(result.cfg),
        "seed": result.seed,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    named = [(n, t.data) for n, t in result.model.named_params()]
    frozen = {n for n, t in result.model.named_params() if not t.requires_grad}
    ften.save_checkpoint(os.path.join(out_dir, "checkpoint.ften.zip"), named, frozen)
