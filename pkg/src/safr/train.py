"""Seeded training loop, dev-set model selection and finite-difference checks."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, make_batches
from .evaluate import accuracy
from .loss import LossBreakdown, total_loss
from .model import Checkpoint, ModelConfig, SafrClassifier

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("step", "l_ce", "l_imp", "l_inter", "total", "dev_acc")


def substream_seed(seed: int, name: str) -> int:
    """Derive an independent 63-bit seed for a named randomness consumer."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


@dataclass
class TrainConfig:
    lambda_imp: float = 0.0
    lambda_inter: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    patience: int = 3
    eval_every: int = 0  # steps between dev evaluations; 0 means once per epoch
    vmask_info_coeff: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lambda_imp < 0 or self.lambda_inter < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EvalRecord:
    step: int
    epoch: int
    dev_acc: float


@dataclass
class TrainHistory:
    steps: list[LossBreakdown] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    best_index: int = -1

    @property
    def best(self) -> EvalRecord:
        return self.evals[self.best_index]

    def log_rows(self):
        dev_at = {e.step: e.dev_acc for e in self.evals}
        for step, bd in enumerate(self.steps, start=1):
            dev = dev_at.get(step)
            yield (step, bd.l_ce, bd.l_importance, bd.l_interaction, bd.total,
                   "" if dev is None else dev)

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(TRAIN_LOG_COLUMNS) + "\n")
            for row in self.log_rows():
                fh.write("\t".join(v if isinstance(v, str) else repr(v) for v in row) + "\n")


class NonFiniteLoss(FloatingPointError):
    pass


def _check_finite(bd: LossBreakdown, step: int):
    for name in ("l_ce", "l_importance", "l_interaction", "l_vmask"):
        v = getattr(bd, name)
        if not math.isfinite(v):
            raise NonFiniteLoss(f"step {step}: loss component {name} is {v}")


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
          log_path=None) -> tuple[Checkpoint, TrainHistory]:
    """Minibatch Adam on the combined objective, keeping the best dev checkpoint."""
    tc = train_config
    if "dev" not in dataset.splits:
        raise ValueError("dataset needs a dev split for model selection")
    torch.use_deterministic_algorithms(True)
    model = SafrClassifier(model_config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2),
                           eps=tc.adam_eps, weight_decay=tc.weight_decay)
    mask_gen = torch.Generator().manual_seed(substream_seed(tc.seed, "mask"))
    drop_gen = torch.Generator().manual_seed(substream_seed(tc.seed, "dropout"))
    shuffle_seed = substream_seed(tc.seed, "train")

    history = TrainHistory()
    best_state, best_epoch, best_acc = None, 0, -1.0
    since_best = 0
    step = 0
    stop = False

    def evaluate(epoch):
        nonlocal best_state, best_epoch, best_acc, since_best
        acc = accuracy(model, dataset["dev"])
        history.evals.append(EvalRecord(step, epoch, acc))
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = copy.deepcopy(model.state_dict())
            history.best_index = len(history.evals) - 1
            since_best = 0
        else:
            since_best += 1
        log.info("step %d epoch %d dev_acc %.4f", step, epoch, acc)
        return since_best >= tc.patience

    for epoch in range(1, tc.epochs + 1):
        batches = make_batches(dataset["train"], tc.batch_size,
                               seed=(shuffle_seed + epoch) % 2 ** 63)
        for b in batches:
            step += 1
            opt.zero_grad(set_to_none=True)
            trace = model(b.token_ids, b.lengths, "train", mask_gen, drop_gen)
            terms = total_loss(trace, b.labels, tc.lambda_imp, tc.lambda_inter,
                               tc.vmask_info_coeff)
            _check_finite(terms.breakdown, step)
            terms.total.backward()
            if tc.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
            opt.step()
            history.steps.append(terms.breakdown)
            if tc.eval_every and step % tc.eval_every == 0 and evaluate(epoch):
                stop = True
                break
        if stop:
            break
        if not tc.eval_every and evaluate(epoch):
            break

    if not history.evals or history.evals[-1].step != step:
        evaluate(epoch)
    model.load_state_dict(best_state)
    model.eval()
    ck = Checkpoint.from_model(model, dataset.vocab, seed=tc.seed, epoch=best_epoch,
                               dev_acc=best_acc)
    if log_path is not None:
        history.write_tsv(log_path)
    return ck, history


# -- finite-difference gradient check -----------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    per_tensor: dict[str, float]
    worst: tuple[str, int] | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(model_config: ModelConfig, example, step_size: float = 1e-5, *,
               lambda_imp: float = 0.1, lambda_inter: float = 0.1,
               max_entries: int = 64, seed: int = 0, floor: float = 1e-8,
               mode: str = "train") -> GradCheckReport:
    """Compare autograd against central differences on every parameter tensor.

    Runs in float64 with dropout off. In train mode the word-mask noise is
    re-drawn from the same seed for every evaluation, so the loss is a fixed
    smooth function of the parameters. Tensors with more than ``max_entries``
    entries are sampled.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    cfg = dataclasses.replace(model_config, dtype="float64", dropout=0.0)
    model = SafrClassifier(cfg)
    ids, lengths = example.token_ids, [example.T]
    labels = [example.label]

    def loss_fn():
        gen = torch.Generator().manual_seed(seed)
        tr = model(ids, lengths, mode, gen, None)
        return total_loss(tr, labels, lambda_imp, lambda_inter).total

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    per_tensor = {}
    with torch.no_grad():
        for name, p in model.named_tensors().items():
            grad = p.grad.reshape(-1).clone()
            flat = p.data.reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
            t_err = 0.0
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + step_size
                up = loss_fn().item()
                flat[i] = orig - step_size
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step_size)
                analytic = grad[i].item()
                scale = max(abs(numeric), abs(analytic))
                if scale <= floor:
                    continue
                err = abs(numeric - analytic) / scale
                checked += 1
                if err > t_err:
                    t_err = err
                if err > worst_err:
                    worst_err, worst_at = err, (name, i)
            per_tensor[name] = t_err
    return GradCheckReport(worst_err, checked, per_tensor, worst_at)
