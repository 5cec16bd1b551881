"""Cross-validated training of each invariance method."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import measures
from . import numerics as nx
from .data import Dataset, rebalance_oversample
from .model import (EncoderSpec, MethodConfig, Model, grl_lambda_schedule, loss_adversarial,
                    loss_penalized, loss_subspace_ce)


class TrainingDiverged(RuntimeError):
    def __init__(self, method: str, epoch: int, batch: int, detail: str = ""):
        self.method, self.epoch, self.batch = method, epoch, batch
        super().__init__(f"{method}: non-finite loss at epoch {epoch}, batch {batch} {detail}".rstrip())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    k_folds: int = 5


@dataclass
class FoldPlan:
    k: int
    folds: list[np.ndarray]  # row positions of each validation fold

    def split(self, ds: Dataset, i: int) -> tuple[Dataset, Dataset]:
        val = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return ds.subset(train, f"fold{i}-train"), ds.subset(val, f"fold{i}-val")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    penalty: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    encoder_steps: int = 0
    estimator_steps: int = 0
    lambdas: list[float] = field(default_factory=list)

    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "penalty"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.penalty)])


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    best_epoch: int


def stable_seed(*parts) -> list[int]:
    """Seed material for numpy generators from ints and strings."""
    return [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]


def kfold_plan(ds: Dataset, k: int = 5, seed: int = 0) -> FoldPlan:
    """Folds stratified by the four (y1, y2) cells, sizes differing by at most one.

    Each cell is shuffled and dealt round-robin, continuing the rotation
    from where the previous cell stopped, so fold sizes stay within one of
    each other and every fold keeps the cell ratios.
    """
    n = len(ds)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng(stable_seed(seed, "kfold"))
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for y2 in (0, 1):
        for y1 in (0, 1):
            idx = rng.permutation(ds.cell_index(y1, y2))
            for j, row in enumerate(idx):
                buckets[(offset + j) % k].append(int(row))
            offset = (offset + len(idx)) % k
    return FoldPlan(k, [np.sort(np.array(b, dtype=np.int64)) for b in buckets])


def select_best(history: TrainHistory) -> int:
    """Epoch with the lowest validation loss; the earliest one wins ties."""
    if not history.records:
        raise ValueError("empty training history")
    best = history.records[0]
    for r in history.records[1:]:
        if r.val_loss < best.val_loss:
            best = r
    return best.epoch


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of shuffled mini-batches; the last short batch of an epoch is dropped."""
    bs = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield order[start:start + bs]


class _Trainer:
    def __init__(self, cfg: MethodConfig, train: Dataset, val: Dataset, tcfg: TrainConfig,
                 seed, spec: EncoderSpec | None = None):
        self.cfg = cfg
        self.tcfg = tcfg
        self.rng = np.random.default_rng(stable_seed(*(seed if isinstance(seed, (list, tuple)) else [seed]),
                                                     cfg.name))
        if cfg.method == "rebalance":
            train = rebalance_oversample(train, self.rng.integers(2**32))
        self.train, self.val = train, val
        base = spec or EncoderSpec()
        self.spec = EncoderSpec(base.height, base.width, base.hidden, base.d1, base.d2, cfg.encoder_mode)
        self.model = Model(self.spec, seed=int(self.rng.integers(2**32)))
        self.opt = nx.Optimizer(self.model.params, cfg.optimizer, cfg.lr, cfg.momentum)
        self.mine = None
        if cfg.method == "mine":
            self.mine = measures.MineNet(self.spec.d1, self.spec.d2, cfg.estimator_hidden,
                                         seed=int(self.rng.integers(2**32)))
            self.mine_opt = nx.Optimizer(self.mine.params, "adam", cfg.estimator_lr)
        self.x_train = train.flat
        self.x_val = nx.Tensor(val.flat)
        self.batches_per_epoch = max(1, len(train) // min(tcfg.batch_size, len(train)))
        self.total_steps = tcfg.epochs * self.batches_per_epoch
        self.history = TrainHistory()

    # one optimiser step on the encoder and heads
    def encoder_step(self, idx: np.ndarray) -> tuple[float, float]:
        cfg, model = self.cfg, self.model
        x = nx.Tensor(self.x_train[idx])
        y1, y2 = self.train.y1[idx], self.train.y2[idx]
        model.params.zero_grad()
        with nx.Tape() as tape:
            if cfg.method == "adversarial":
                lam = grl_lambda_schedule(self.history.encoder_steps / self.total_steps, cfg.alpha, cfg.gamma)
                self.history.lambdas.append(lam)
                loss, _, ce2 = loss_adversarial(model, model.latent(x), y1, y2, lam)
                pen = ce2.item()
            elif cfg.method in ("mine", "dcor"):
                perm = self.rng.permutation(len(idx)) if cfg.method == "mine" else None
                loss, p = loss_penalized(model, model.encode(x), y1, y2, cfg.method,
                                         cfg.lambda_weight, self.mine, perm)
                pen = cfg.lambda_weight * p.item() if p is not None else 0.0
            else:
                loss = loss_subspace_ce(model, model.encode(x), y1, y2)
                pen = 0.0
        tape.backward(loss)
        self.opt.step()
        self.history.encoder_steps += 1
        return loss.item(), pen

    def estimator_step(self, idx: np.ndarray) -> None:
        z = self.model.encode(nx.Tensor(self.x_train[idx]))
        measures.mine_train_step(self.mine, z.z1, z.z2, self.mine_opt, self.rng)
        self.history.estimator_steps += 1

    def validation_loss(self, epoch: int) -> tuple[float, float]:
        cfg, model, val = self.cfg, self.model, self.val
        if cfg.method == "adversarial":
            z = model.latent(self.x_val)
            ce1 = nx.softmax_cross_entropy(model.head_logits(1, z), nx.one_hot(val.y1))
            return ce1.item(), 0.0
        z = model.encode(self.x_val)
        ce = loss_subspace_ce(model, z, val.y1, val.y2).item()
        if cfg.method in ("mine", "dcor") and cfg.lambda_weight > 0:
            if cfg.method == "dcor":
                pen = measures.dcor(z.z1, z.z2).item()
            else:
                perm = np.random.default_rng(stable_seed(epoch, "val-perm")).permutation(len(val))
                pen = measures.mine_dv_bound(self.mine, z.z1, z.z2, perm).item()
            return ce + cfg.lambda_weight * pen, cfg.lambda_weight * pen
        return ce, 0.0

    def run(self) -> TrainResult:
        cfg = self.cfg
        stream = _batches(len(self.train), self.tcfg.batch_size, self.rng)
        best_val, best_epoch, best_model = np.inf, -1, None
        for epoch in range(self.tcfg.epochs):
            losses = []
            for b in range(self.batches_per_epoch):
                try:
                    loss, _ = self.encoder_step(next(stream))
                    if cfg.method == "mine":
                        for _ in range(cfg.n_b - 1):
                            self.estimator_step(next(stream))
                except FloatingPointError as exc:
                    raise TrainingDiverged(cfg.name, epoch, b, f"({exc})") from None
                losses.append(loss)
            try:
                val_loss, val_pen = self.validation_loss(epoch)
            except FloatingPointError as exc:
                raise TrainingDiverged(cfg.name, epoch, -1, f"in validation ({exc})") from None
            self.history.records.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_pen))
            if val_loss < best_val:
                best_val, best_epoch, best_model = val_loss, epoch, self.model.snapshot()
        assert best_epoch == select_best(self.history)
        return TrainResult(best_model, self.history, best_epoch)


def train_method(cfg: MethodConfig, train: Dataset, val: Dataset, tcfg: TrainConfig = TrainConfig(),
                 seed=0, spec: EncoderSpec | None = None) -> TrainResult:
    """Train one method on one fold and return the best-validation snapshot.

    For ``mine`` every encoder step is followed by ``n_b - 1`` estimator
    steps on fresh batches, so the encoder-step budget matches the other
    methods while ``n_b`` times as many batches are consumed.
    """
    cfg.validate()
    return _Trainer(cfg, train, val, tcfg, seed, spec).run()


def mine_alternating_loop(trainer: "_Trainer", cycles: int) -> None:
    """Run whole cycles of one encoder step then ``n_b - 1`` estimator steps."""
    if trainer.cfg.method != "mine":
        raise ValueError("alternating loop applies to the mine method only")
    stream = _batches(len(trainer.train), trainer.tcfg.batch_size, trainer.rng)
    for _ in range(cycles):
        trainer.encoder_step(next(stream))
        for _ in range(trainer.cfg.n_b - 1):
            trainer.estimator_step(next(stream))


def write_history(history: TrainHistory, path: Path) -> None:
    history.to_csv(path)
