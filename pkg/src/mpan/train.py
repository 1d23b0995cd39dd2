"""Stage-1 joint training over the six loss branches, stage-2 episodic
evaluation on a frozen backbone, checkpoint packing, and the metrics stream.

The same mini-batch serves the supervised branches (with labels) and the
pretext branches (labels dropped) unless ``train.independent_unlabeled``
draws a separate unlabeled batch. Disabled branches report null in metrics
records, never zero, so a silently-dead branch cannot masquerade as a
converged one.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .attention import PRETEXT_NAMES, PretextWeights, total_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_hash
from .episodes import (Dataset, EvalReport, aggregate, fine_tune_and_score,
                       generate_synthetic, load_dataset, sample_episode, split_classes)
from .errors import (CompatibilityError, ConfigError, IntegrityError,
                     NonFiniteLossError)
from .gclust import (GcHead, build_adjacency, clustering_loss_from_embeddings,
                     gc_update, kmeans_baseline, pool_from_backbone)
from .model import Backbone, CosineClassifier, LinearHead
from .ndgrad import SGD, Tensor
from .pretext import (build_rotation_task, embed_patches, extract_patches,
                      generate_permutation_set, jigsaw_loss_from_embeddings,
                      location_loss_from_embeddings,
                      patch_branch_loss_from_embeddings, rotation_loss)

BRANCH_NAMES = ("few", "pat", "rot", "loc", "jig", "clu")


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


class ModelBundle:
    """Every parameterized component, built deterministically from config."""

    def __init__(self, cfg: TrainConfig, num_base_classes: int):
        rng = np.random.default_rng(cfg.model.seed)
        d = cfg.model.widths[-1]
        self.embedding_dim = d
        self.num_base_classes = num_base_classes
        self.backbone = Backbone(in_channels=cfg.data.channels, widths=cfg.model.widths,
                                 rng=rng, image_size=cfg.data.image_size)
        self.cc_few = CosineClassifier(num_base_classes, d, rng=rng,
                                       gamma_init=cfg.model.gamma_init)
        self.cc_patch = CosineClassifier(num_base_classes, d, rng=rng,
                                         gamma_init=cfg.model.gamma_init)
        self.head_rot = LinearHead(d, 4, rng=rng)
        self.head_loc = LinearHead(2 * d, 8, rng=rng)
        self.head_jig = LinearHead(9 * d, cfg.pretext.perm_count, rng=rng)
        self.head_clu = LinearHead(d, cfg.gc.k, rng=rng)
        # pretext heads start at zero: the first batch sees exactly uniform
        # predictions (loss = ln cardinality) and the backbone feels no
        # pretext gradient until the heads have grown into the task
        for head in (self.head_rot, self.head_loc, self.head_jig, self.head_clu):
            head.weight.data[:] = 0
            head.bias.data[:] = 0
        self.gc_head = GcHead(d, k=cfg.gc.k, rng=rng)
        self.weights = PretextWeights(mode=cfg.attention.mode,
                                      manual=cfg.attention.manual_weights,
                                      sigma_init=cfg.attention.sigma_init)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.backbone.named_parameters("backbone"))
        out.update(self.cc_few.named_parameters("cc_few"))
        out.update(self.cc_patch.named_parameters("cc_patch"))
        out.update(self.head_rot.named_parameters("head_rot"))
        out.update(self.head_loc.named_parameters("head_loc"))
        out.update(self.head_jig.named_parameters("head_jig"))
        out.update(self.head_clu.named_parameters("head_clu"))
        out.update(self.gc_head.named_parameters("gc_head"))
        return out

    def trainable(self, cfg: TrainConfig):
        """(names, tensors, lr_scales) for the stage-1 optimizer. The GC head
        trains inside gc_update, never here."""
        br = cfg.branches
        named: list[tuple[str, Tensor, float]] = []
        for name, t in self.backbone.named_parameters("backbone").items():
            named.append((name, t, 1.0))
        if br.few:
            for name, t in self.cc_few.named_parameters("cc_few").items():
                named.append((name, t, 1.0))
        if br.pat:
            for name, t in self.cc_patch.named_parameters("cc_patch").items():
                named.append((name, t, 1.0))
        for flag, head, prefix in ((br.rot, self.head_rot, "head_rot"),
                                   (br.loc, self.head_loc, "head_loc"),
                                   (br.jig, self.head_jig, "head_jig"),
                                   (br.clu, self.head_clu, "head_clu")):
            if flag:
                for name, t in head.named_parameters(prefix).items():
                    named.append((name, t, 1.0))
        if cfg.attention.mode == "attention":
            for pname, flag in zip(PRETEXT_NAMES, (br.rot, br.loc, br.jig, br.clu)):
                if flag:
                    named.append((f"att.sigma_{pname}", self.weights.sigma[pname],
                                  cfg.attention.sigma_lr_scale))
        names = [n for n, _, _ in named]
        tensors = [t for _, t, _ in named]
        scales = [s for _, _, s in named]
        return names, tensors, scales


def pack_checkpoint(bundle: ModelBundle, cfg: TrainConfig, epoch: int,
                    optimizer: SGD | None = None,
                    optimizer_names: list[str] | None = None) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in bundle.named_parameters().items()}
    arrays["att.sigma"] = bundle.weights.sigma_vector()
    if optimizer is not None and optimizer_names:
        for name, buf in zip(optimizer_names, optimizer.momentum_buffers):
            arrays[f"optim.buf.{name}"] = buf
    arrays["meta.epoch"] = np.asarray(epoch, dtype=np.int64)
    arrays["meta.config_hash"] = np.frombuffer(config_hash(cfg).encode("ascii"), dtype=np.uint8)
    return arrays


def apply_checkpoint(bundle: ModelBundle, arrays: dict[str, np.ndarray],
                     optimizer: SGD | None = None,
                     optimizer_names: list[str] | None = None) -> int:
    """Load arrays into a bundle; returns the stored epoch."""
    named = bundle.named_parameters()
    missing = [n for n in list(named) + ["att.sigma"] if n not in arrays]
    if missing:
        raise IntegrityError(f"checkpoint is missing parameter(s): {missing}")
    for name, t in named.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CompatibilityError(
                f"checkpoint parameter '{name}' has shape {tuple(arr.shape)}, "
                f"model expects {tuple(t.data.shape)}")
    for name, t in named.items():
        t.data = arrays[name].astype(t.data.dtype, copy=True)
    bundle.weights.load_sigma_vector(arrays["att.sigma"])
    if optimizer is not None and optimizer_names:
        for i, name in enumerate(optimizer_names):
            key = f"optim.buf.{name}"
            if key in arrays:
                optimizer.momentum_buffers[i] = arrays[key].astype(np.float32, copy=True)
    return int(arrays.get("meta.epoch", np.asarray(0)))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    losses: dict            # all six branch keys; disabled branches are None
    lambdas: dict           # lambda_rot .. lambda_clu
    learning_rate: float
    wall_time: float
    anomalies: dict

    def to_json(self) -> dict:
        row = {"epoch": self.epoch}
        for name in BRANCH_NAMES:
            row[f"loss_{name}"] = self.losses[name]
        for name in PRETEXT_NAMES:
            row[f"lambda_{name}"] = self.lambdas[name]
        row["learning_rate"] = self.learning_rate
        row["wall_time"] = self.wall_time
        row["anomalies"] = dict(self.anomalies)
        return row


def schedule_lr(schedule, epoch: int) -> float:
    lr = schedule[0][1]
    for start, rate in schedule:
        if epoch >= start:
            lr = rate
    return float(lr)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def prepare_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.data.source == "synthetic":
        ds = generate_synthetic(cfg.data.num_classes, cfg.data.per_class,
                                cfg.data.image_size, cfg.data.seed,
                                channels=cfg.data.channels, noise=cfg.data.noise,
                                standardize=cfg.data.standardize)
    else:
        ds = load_dataset(cfg.data.source)
        if ds.image_size != cfg.data.image_size or ds.channels != cfg.data.channels:
            raise ConfigError(
                f"dataset at {cfg.data.source} is {ds.channels}x{ds.image_size}px, "
                f"config expects {cfg.data.channels}x{cfg.data.image_size}px")
    return split_classes(ds, cfg.data.base_frac, cfg.data.val_frac, cfg.data.seed)


def _base_view(ds: Dataset):
    base_classes = sorted(int(c) for c in ds.split.base)
    label_map = {c: i for i, c in enumerate(base_classes)}
    base_ids = np.flatnonzero(np.isin(ds.labels, base_classes))
    base_local = np.array([label_map[int(l)] for l in ds.labels[base_ids]], dtype=np.int64)
    return base_ids, base_local


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def train_stage1(cfg: TrainConfig, out_dir: str | None = None,
                 dataset: Dataset | None = None, log=None):
    """Run the joint training loop; returns (bundle, metrics, checkpoint_arrays).

    When ``out_dir`` is given, writes ``metrics.jsonl`` and ``checkpoint.ckpt``
    there (and ``emergency.ckpt`` if the loss blows up before halting).
    """
    ds = dataset if dataset is not None else prepare_dataset(cfg)
    base_ids, base_local = _base_view(ds)
    bundle = ModelBundle(cfg, num_base_classes=int(base_local.max()) + 1)
    br = cfg.branches
    need_patches = br.pat or br.loc or br.jig
    permset = (generate_permutation_set(9, cfg.pretext.perm_count, cfg.pretext.perm_seed)
               if br.jig else None)
    names, params, scales = bundle.trainable(cfg)
    opt = SGD(params, lr=schedule_lr(cfg.train.lr_schedule, 0),
              momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay,
              lr_scales=scales)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics: list[MetricsRecord] = []
    metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w") if out_dir else None
    pseudo = None
    n_batches = max(1, -(-len(base_ids) // cfg.train.batch_size))

    def emergency_halt(exc: Exception):
        if out_dir:
            path = os.path.join(out_dir, "emergency.ckpt")
            save_checkpoint(path, pack_checkpoint(bundle, cfg, epoch, opt, names))
            raise NonFiniteLossError(f"{exc} (emergency checkpoint saved to {path})") from exc
        raise exc

    try:
        for epoch in range(cfg.train.epochs):
            t0 = time.perf_counter()
            opt.lr = schedule_lr(cfg.train.lr_schedule, epoch)
            epoch_rng = np.random.default_rng([cfg.train.seed, epoch])
            counters_before = dict(ng.ANOMALIES)

            if br.clu and epoch >= cfg.gc.warmup_epochs \
                    and (epoch - cfg.gc.warmup_epochs) % cfg.gc.refresh_every == 0:
                pool_ids = base_ids
                if 0 < cfg.gc.pool_cap < len(pool_ids):
                    pool_ids = np.sort(epoch_rng.choice(pool_ids, size=cfg.gc.pool_cap,
                                                        replace=False))
                pool = pool_from_backbone(ds.images[pool_ids], pool_ids, bundle.backbone)
                if cfg.gc.method == "kmeans":
                    pseudo = kmeans_baseline(pool, cfg.gc.k, seed=cfg.train.seed + epoch,
                                             epoch=epoch)
                else:
                    adjacency = build_adjacency(pool)
                    pseudo = gc_update(pool, adjacency, bundle.gc_head, cfg.gc.steps,
                                       lr=cfg.gc.lr, lambda_bal=cfg.gc.lambda_bal,
                                       prev_labels=pseudo, epoch=epoch,
                                       clip_norm=cfg.gc.clip_norm)

            sums = {name: 0.0 for name in BRANCH_NAMES}
            seen = {name: 0 for name in BRANCH_NAMES}
            order = epoch_rng.permutation(len(base_ids))
            for bidx in range(n_batches):
                sel = order[bidx * cfg.train.batch_size:(bidx + 1) * cfg.train.batch_size]
                if len(sel) == 0:
                    continue
                ids = base_ids[sel]
                imgs = ds.images[ids]
                labels = base_local[sel]
                if cfg.train.independent_unlabeled:
                    usel = epoch_rng.choice(len(base_ids), size=len(sel), replace=False)
                    uids, uimgs, ulabels = base_ids[usel], ds.images[base_ids[usel]], base_local[usel]
                else:
                    uids, uimgs, ulabels = ids, imgs, labels
                batch_rng = np.random.default_rng([cfg.train.seed, epoch, bidx])

                losses: dict[str, Tensor | None] = {name: None for name in BRANCH_NAMES}
                emb_lab = bundle.backbone.extract_features(Tensor(imgs)) if br.few else None
                if br.few:
                    losses["few"] = ng.softmax_cross_entropy(bundle.cc_few.logits(emb_lab), labels)
                if br.clu and pseudo is not None:
                    emb_unlab = (emb_lab if (emb_lab is not None and uids is ids)
                                 else bundle.backbone.extract_features(Tensor(uimgs)))
                    losses["clu"] = clustering_loss_from_embeddings(
                        emb_unlab, uids, pseudo, bundle.head_clu)
                if need_patches:
                    grids = [extract_patches(im, cfg.pretext.patch_resize,
                                             grid=cfg.pretext.patch_grid,
                                             crop=cfg.pretext.patch_crop, rng=batch_rng,
                                             jitter=cfg.pretext.jitter,
                                             color_strength=cfg.pretext.color_strength)
                             for im in uimgs]
                    pemb = embed_patches(grids, bundle.backbone)
                    if br.pat:
                        losses["pat"] = patch_branch_loss_from_embeddings(
                            pemb, len(uimgs), bundle.cc_patch, ulabels)
                    if br.loc:
                        losses["loc"] = location_loss_from_embeddings(
                            pemb, len(uimgs), bundle.head_loc)
                    if br.jig:
                        losses["jig"] = jigsaw_loss_from_embeddings(
                            pemb, len(uimgs), permset, bundle.head_jig, batch_rng,
                            all_perms=cfg.pretext.jigsaw_all_perms)
                if br.rot:
                    losses["rot"] = rotation_loss(build_rotation_task(uimgs),
                                                  bundle.backbone, bundle.head_rot)

                try:
                    total = total_loss(losses["few"], losses["pat"], losses["rot"],
                                       losses["loc"], losses["jig"], losses["clu"],
                                       bundle.weights)
                    if not np.isfinite(total.data):
                        raise NonFiniteLossError("total loss is not finite")
                except NonFiniteLossError as exc:
                    emergency_halt(exc)
                ng.backward(total)
                opt.step()
                for name in BRANCH_NAMES:
                    if losses[name] is not None:
                        sums[name] += losses[name].item()
                        seen[name] += 1

            counters_after = dict(ng.ANOMALIES)
            record = MetricsRecord(
                epoch=epoch,
                losses={name: (sums[name] / seen[name] if seen[name] else None)
                        for name in BRANCH_NAMES},
                lambdas=bundle.weights.lambda_values(),
                learning_rate=opt.lr,
                wall_time=time.perf_counter() - t0,
                anomalies={k: counters_after.get(k, 0) - counters_before.get(k, 0)
                           for k in set(counters_before) | set(counters_after)},
            )
            metrics.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record.to_json()) + "\n")
                metrics_fh.flush()
            if log:
                log(record)
    finally:
        if metrics_fh:
            metrics_fh.close()

    arrays = pack_checkpoint(bundle, cfg, cfg.train.epochs, opt, names)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), arrays)
    return bundle, metrics, arrays


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def eval_threads() -> int:
    raw = os.environ.get("MPAN_THREADS", "1")
    try:
        v = int(raw)
    except ValueError:
        raise ConfigError(f"MPAN_THREADS must be an integer, got {raw!r}") from None
    if v == 0:
        return os.cpu_count() or 1
    return max(1, v)


def eval_stage2(cfg: TrainConfig, checkpoint, episodes: int | None = None,
                dataset: Dataset | None = None, bundle: ModelBundle | None = None) -> EvalReport:
    """Frozen-backbone episodic evaluation of a checkpoint.

    ``checkpoint`` may be a path or an already-loaded array dict; passing a
    ``bundle`` skips loading entirely (used right after training).
    """
    ds = dataset if dataset is not None else prepare_dataset(cfg)
    if bundle is None:
        base_ids, base_local = _base_view(ds)
        bundle = ModelBundle(cfg, num_base_classes=int(base_local.max()) + 1)
        arrays = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) \
            else checkpoint
        apply_checkpoint(bundle, arrays)
    e = episodes if episodes is not None else cfg.eval.episodes

    def run_episode(i: int) -> float:
        epi = sample_episode(ds, cfg.eval.n_way, cfg.eval.k_shot, cfg.eval.t_query,
                             np.random.default_rng([cfg.eval.seed, i]))
        return fine_tune_and_score(epi, bundle.backbone, steps=cfg.eval.steps,
                                   lr=cfg.eval.lr,
                                   rng=np.random.default_rng([cfg.eval.seed, i, 1]))

    workers = eval_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run_episode, range(e)))
    else:
        accs = [run_episode(i) for i in range(e)]
    report = aggregate(accs)
    report.n_way = cfg.eval.n_way
    report.k_shot = cfg.eval.k_shot
    report.t_query = cfg.eval.t_query
    report.config_hash = config_hash(cfg)
    report.fine_tune_steps = cfg.eval.steps
    report.fine_tune_lr = cfg.eval.lr
    return report


def report_to_json(report: EvalReport) -> dict:
    return {"mean_accuracy": report.mean_accuracy,
            "ci95_halfwidth": report.ci95_halfwidth,
            "episodes": report.episodes,
            "n_way": report.n_way,
            "k_shot": report.k_shot,
            "t_query": report.t_query,
            "config_hash": report.config_hash,
            "fine_tune_steps": report.fine_tune_steps,
            "fine_tune_lr": report.fine_tune_lr}
