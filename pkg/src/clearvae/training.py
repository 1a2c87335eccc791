"""Training orchestration: the main VAE loop, alternating adversarial updates
for the auxiliary-network variants, the Gaussian-mixture MI simulation, and
the frozen-encoder classification protocol.

Everything is deterministic given (seed, config, dataset): parameter init,
batch order, reparameterization noise and negative resampling all draw from
named child streams of one seed, and the history hash covers every recorded
loss value.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as losses_mod
from . import mi as mi_mod
from .autodiff import ContractViolation, NumericFault, Tensor
from .datasets import GaussianMixtureSpec, LabeledImageSet, sample_gaussian_mixture
from .losses import ClearConfig, clear_objective
from .networks import (ClearVae, ClassifierHead, CnnClassifier, bce_with_logits,
                       cross_entropy, save_checkpoint)
from .optim import Adam
from .rng import Rng

AUX_STEPS = 5
AUX_LR_SCALE = 5.0
AUX_DIVERGENCE_THRESHOLD = 1e6


def _fmt(x: float) -> str:
    return f"{x:.12g}"


@dataclass
class TrainHistory:
    """Per-step loss records plus periodic disentanglement audits."""
    seed: int
    config: dict
    dataset_hash: str = ""
    rows: list = field(default_factory=list)       # dicts: step, epoch, losses
    audits: list = field(default_factory=list)     # dicts: step, epoch, gmig, h_y
    epoch_seconds: list = field(default_factory=list)
    aux_steps_per_main: int = 0

    def history_hash(self) -> str:
        """Hash of everything deterministic (wall-clock excluded)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config, sort_keys=True).encode())
        h.update(str(self.seed).encode())
        h.update(self.dataset_hash.encode())
        for row in self.rows:
            h.update(",".join(f"{k}={_fmt(v) if isinstance(v, float) else v}"
                              for k, v in sorted(row.items())).encode())
        for row in self.audits:
            h.update(",".join(f"{k}={_fmt(v) if isinstance(v, float) else v}"
                              for k, v in sorted(row.items())).encode())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        gmig_at = {a["step"]: a["gmig"] for a in self.audits}
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "recon", "kl_c", "kl_s", "snn_c",
                             "style_term", "total", "gmig"])
            for row in self.rows:
                writer.writerow([
                    row["step"], _fmt(row["recon"]), _fmt(row["kl_c"]),
                    _fmt(row["kl_s"]), _fmt(row["snn_c"]), _fmt(row["style_term"]),
                    _fmt(row["total"]),
                    _fmt(gmig_at[row["step"]]) if row["step"] in gmig_at else "",
                ])


def _contrastable(y_batch: np.ndarray) -> bool:
    """A batch works for both contrastive losses iff it spans >= 2 classes and
    holds at least one same-class pair."""
    counts = np.bincount(y_batch)
    counts = counts[counts > 0]
    return counts.size >= 2 and counts.max() >= 2


def stratified_batches(y, batch_size: int, rng: Rng):
    """Shuffled batches that mix classes: samples are dealt round-robin across
    shuffled per-class queues, so every full batch sees several classes.
    Batches that end up uncontrastable (usually a short tail) are merged into
    a neighbor."""
    y = np.asarray(y)
    n = y.size
    if batch_size < 2:
        raise ContractViolation("batch_size must be at least 2")
    classes = np.unique(y)
    queues = []
    for c in classes:
        idx = np.flatnonzero(y == c)
        queues.append(idx[rng.permutation(idx.size)])
    order = np.empty(n, dtype=np.int64)
    pos = 0
    cursors = [0] * len(queues)
    while pos < n:
        cls_order = rng.permutation(len(queues))
        for qi in cls_order:
            if cursors[qi] < queues[qi].size:
                order[pos] = queues[qi][cursors[qi]]
                cursors[qi] += 1
                pos += 1
                if pos == n:
                    break
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    i = 0
    while len(batches) > 1 and i < len(batches):
        if _contrastable(y[batches[i]]):
            i += 1
            continue
        j = i - 1 if i == len(batches) - 1 else i + 1
        batches[j] = np.concatenate([batches[min(i, j)], batches[max(i, j)]])
        batches.pop(i)
        i = 0
    return batches


def _encode_mu(model: ClearVae, images: np.ndarray, chunk: int = 256):
    """Variational means on an evaluation pass, batched for memory."""
    mus_c, mus_s = [], []
    for i in range(0, images.shape[0], chunk):
        code = model.encode(Tensor(images[i:i + chunk]), training=False)
        mus_c.append(code.mu_c.data)
        mus_s.append(code.mu_s.data)
    return np.concatenate(mus_c), np.concatenate(mus_s)


def _aux_update(model: ClearVae, aux_opt: Adam, z_c: np.ndarray, z_s: np.ndarray,
                config: ClearConfig, rng: Rng, steps: int = AUX_STEPS):
    """Fit the auxiliary net on detached latents for `steps` updates.

    Gaussian nets maximize conditional log-likelihood; the TC discriminator
    minimizes cross-entropy of joint-vs-index-shifted pairs.  Divergence
    (loss above 1e6) reinitializes the auxiliary net and its optimizer.
    """
    zc_t, zs_t = Tensor(z_c), Tensor(z_s)
    last = None
    for _ in range(steps):
        aux_opt.zero_grad()
        if config.variant in ("l1out", "club_s"):
            loss = mi_mod.aux_nll(zs_t, zc_t, model.aux_gaussian_net())
        else:
            disc = model.tc_discriminator()
            joint = ad.concat([zc_t, zs_t], axis=1)
            shifted = ad.concat([Tensor(np.roll(z_c, 1, axis=0)), zs_t], axis=1)
            real = bce_with_logits(disc.logits(joint), np.ones((z_c.shape[0], 1)))
            fake = bce_with_logits(disc.logits(shifted), np.zeros((z_c.shape[0], 1)))
            loss = real + fake
        last = loss.item()
        if not np.isfinite(last) or last > AUX_DIVERGENCE_THRESHOLD:
            model.reset_aux(int(rng.integers(0, 2 ** 31)))
            aux_opt = Adam(model.aux_parameters(), lr=aux_opt.lr)
            continue
        loss.backward()
        aux_opt.step()
    return aux_opt, last


def train_adversarial_aux(model: ClearVae, aux_opt: Adam, z_c, z_s,
                          config: ClearConfig, rng: Rng, steps: int = AUX_STEPS):
    """Public wrapper over the alternating auxiliary update."""
    z_c = z_c.data if isinstance(z_c, Tensor) else np.asarray(z_c)
    z_s = z_s.data if isinstance(z_s, Tensor) else np.asarray(z_s)
    return _aux_update(model, aux_opt, z_c, z_s, config, rng, steps)


def train_clear(dataset: LabeledImageSet, config: ClearConfig, seed: int,
                epochs: int = 30, batch_size: int = 128, lr: float = 1e-3,
                audit_every: int = 1, audit_size: int = 1024,
                checkpoint_dir=None, checkpoint_every: int | None = None,
                aux_steps: int = AUX_STEPS, aux_lr_scale: float = AUX_LR_SCALE):
    """Minibatch training of the composite objective; returns (model, history).

    Auxiliary-network variants interleave `aux_steps` adversarial updates
    before every main step.  A numeric fault aborts the run after writing the
    last completed epoch's parameters as a checkpoint (when a directory is
    given), and the fault names that path.
    """
    if dataset.n == 0:
        raise ContractViolation("dataset is empty")
    if np.unique(dataset.content_labels).size < 2:
        raise ContractViolation("training needs at least 2 content classes")
    root = Rng(seed)
    model = ClearVae(config, channels=dataset.channels,
                     image_size=dataset.image_size, seed=seed)
    opt = Adam(model.parameters(), lr=lr)
    aux_opt = None
    if model.aux_parameters():
        aux_opt = Adam(model.aux_parameters(), lr=lr * aux_lr_scale)

    history = TrainHistory(seed=seed, config=config.to_dict(),
                           dataset_hash=dataset.data_hash(),
                           aux_steps_per_main=aux_steps if aux_opt else 0)
    audit_rng = root.child("audit")
    audit_idx = np.sort(audit_rng.choice(dataset.n, min(audit_size, dataset.n)))
    reparam_rng = root.child("reparam")
    club_rng = root.child("club")
    aux_rng = root.child("aux")

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good = model.state_dict()
    step = 0
    try:
        for epoch in range(epochs):
            t0 = time.perf_counter()
            batch_rng = root.child("batches", epoch)
            for idx in stratified_batches(dataset.content_labels, batch_size, batch_rng):
                xb = Tensor(dataset.images[idx])
                yb = dataset.content_labels[idx]
                code = model.encode(xb, training=True)
                z_c, z_s = model.reparameterize(code, reparam_rng)
                if aux_opt is not None:
                    aux_opt, _ = _aux_update(model, aux_opt, z_c.data, z_s.data,
                                             config, aux_rng, steps=aux_steps)
                x_hat = model.decode(z_c, z_s, training=True)
                total, bd = clear_objective(
                    xb, yb, x_hat, code, z_c, z_s, config,
                    aux_net=model._aux, discriminator=model._disc, rng=club_rng)
                opt.zero_grad()
                if aux_opt is not None:
                    aux_opt.zero_grad()
                total.backward()
                opt.step()
                step += 1
                row = {"step": step, "epoch": epoch}
                row.update(bd.to_dict())
                history.rows.append(row)
            history.epoch_seconds.append(time.perf_counter() - t0)
            if audit_every and (epoch + 1) % audit_every == 0:
                mu_c, mu_s = _encode_mu(model, dataset.images[audit_idx])
                report = mi_mod.gmig(mu_c, mu_s, dataset.content_labels[audit_idx])
                history.audits.append({"step": step, "epoch": epoch,
                                       "gmig": report.gmig, "h_y": report.h_y})
            last_good = model.state_dict()
            if ckpt_dir is not None and checkpoint_every \
                    and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt", model,
                                extra={"epoch": epoch + 1, "seed": seed})
    except NumericFault as fault:
        if ckpt_dir is not None:
            model.load_state_dict(last_good)
            path = ckpt_dir / "last_good.ckpt"
            save_checkpoint(path, model, extra={"seed": seed, "aborted": True})
            raise NumericFault(f"{fault}; last-good checkpoint at {path}") from fault
        raise
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ckpt", model,
                        extra={"seed": seed, "epochs": epochs})
    return model, history


# -- Gaussian-mixture simulation ------------------------------------------------


@dataclass
class SimulationTrace:
    """Per-step (sigma, loss, MI) rows over the sigma schedule."""
    direction: str
    seed: int
    steps_per_level: int
    schedule: list
    rows: list = field(default_factory=list)  # dicts: step, sigma, loss, mi

    def level_marks(self):
        """(step, sigma) at every sigma change."""
        return [(i * self.steps_per_level + 1, s) for i, s in enumerate(self.schedule)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "sigma", "loss", "mi"])
            for row in self.rows:
                writer.writerow([row["step"], _fmt(row["sigma"]),
                                 _fmt(row["loss"]), _fmt(row["mi"])])


def sigma_schedule() -> list:
    """The 11-level standard-deviation ladder 1.0, 1.3, ..., 4.0."""
    return [round(1.0 + 0.3 * i, 10) for i in range(11)]


def run_mi_simulation(direction: str, spec: GaussianMixtureSpec | None = None,
                      seed: int = 0, steps_per_level: int = 100,
                      tau: float = 0.3, k: int = 3) -> SimulationTrace:
    """Sample the mixture afresh at every step and record the KNN MI estimate
    next to the contrastive loss.

    direction="max": sigma descends 4.0 -> 1.0, MI rises, the plain loss is
    measured.  direction="min": sigma ascends 1.0 -> 4.0, MI falls, the
    pair-switched loss is measured.
    """
    if direction not in ("max", "min"):
        raise ContractViolation("direction must be 'max' or 'min'")
    if spec is None:
        spec = GaussianMixtureSpec()
    schedule = sigma_schedule()
    if direction == "max":
        schedule = schedule[::-1]
    root = Rng(seed)
    trace = SimulationTrace(direction=direction, seed=seed,
                            steps_per_level=steps_per_level, schedule=schedule)
    step = 0
    for level, sigma in enumerate(schedule):
        level_spec = GaussianMixtureSpec(means=spec.means, sigma=sigma,
                                         n=spec.n, seed=spec.seed)
        for s in range(steps_per_level):
            rng = root.child("sim", level, s)
            y, z = sample_gaussian_mixture(level_spec, rng=rng)
            est = mi_mod.knn_mi(z, y, k=k)
            if direction == "max":
                loss = losses_mod.snn_loss(z, y, tau=tau).item()
            else:
                loss = losses_mod.ps_snn_loss(z, y, tau=tau).item()
            step += 1
            trace.rows.append({"step": step, "sigma": sigma, "loss": loss,
                               "mi": est.value})
    return trace


# -- frozen-encoder classification protocol ---------------------------------------


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier_head(model: ClearVae, train_set: LabeledImageSet, seed: int,
                          n_classes: int | None = None, epochs: int = 30,
                          batch_size: int = 128, lr: float = 1e-3):
    """Train the 2-layer MLP head on frozen content means; returns (head, info).

    The encoder is only ever run in evaluation mode and its parameters receive
    no updates; `info` records the encoder hash before and after for auditing.
    """
    if n_classes is None:
        n_classes = int(train_set.content_labels.max()) + 1
    hash_before = model.param_hash()
    mu_c, _ = _encode_mu(model, train_set.images)
    root = Rng(seed)
    head = ClassifierHead(mu_c.shape[1], n_classes, root.child("head_init"))
    opt = Adam(head.parameters(), lr=lr)
    y = train_set.content_labels
    for epoch in range(epochs):
        for idx in stratified_batches(y, batch_size, root.child("head_batches", epoch)):
            logits = head(Tensor(mu_c[idx]))
            loss = cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    train_probs = softmax_np(head(Tensor(mu_c)).data)
    acc = float((train_probs.argmax(axis=1) == y).mean())
    info = {"train_accuracy": acc, "encoder_hash_before": hash_before,
            "encoder_hash_after": model.param_hash()}
    return head, info


def head_predict_proba(model: ClearVae, head: ClassifierHead,
                       images: np.ndarray, chunk: int = 256) -> np.ndarray:
    mu_c, _ = _encode_mu(model, images, chunk=chunk)
    return softmax_np(head(Tensor(mu_c)).data)


def train_cnn_baseline(train_set: LabeledImageSet, seed: int,
                       n_classes: int | None = None, d_feat: int = 8,
                       epochs: int = 30, batch_size: int = 128, lr: float = 1e-3):
    """End-to-end CNN with the same trunk and head shapes as the VAE path."""
    if n_classes is None:
        n_classes = int(train_set.content_labels.max()) + 1
    net = CnnClassifier(train_set.channels, train_set.image_size, d_feat,
                        n_classes, seed=seed)
    opt = Adam(net.parameters(), lr=lr)
    root = Rng(seed)
    y = train_set.content_labels
    for epoch in range(epochs):
        for idx in stratified_batches(y, batch_size, root.child("cnn_batches", epoch)):
            logits = net(Tensor(train_set.images[idx]), training=True)
            loss = cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return net


def cnn_predict_proba(net: CnnClassifier, images: np.ndarray,
                      chunk: int = 256) -> np.ndarray:
    probs = []
    for i in range(0, images.shape[0], chunk):
        logits = net(Tensor(images[i:i + chunk]), training=False)
        probs.append(softmax_np(logits.data))
    return np.concatenate(probs)
