"""Three-phase training: identity warm-up, generation warm-up, joint phase.

Identity warm-up is instance discrimination against the memory bank (every
image its own class). Generation warm-up freezes the identity encoder and
trains the structure encoder, decoder and discriminator with the generation
losses only. The joint phase refreshes pseudo labels every epoch and
optimizes the combined objective.

All stochastic choices (batch order, rotation offsets, pair sampling,
augmentation) come from generators seeded by (seed, phase, epoch), so a run
resumed from any epoch checkpoint continues identically.
"""

import json
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import clustering, contrastive, generative, nets
from .archive import ParamArchive
from .clustering import ClusterConfig
from .contrastive import ContrastConfig, MemoryBank, sample_pairs
from .generative import GanLossConfig

_PHASE_IDS = {"warmup_id": 1, "warmup_gan": 2, "joint": 3, "contrast": 4}


@dataclass
class LossToggles:
    """Which terms participate in the joint / contrast phases."""
    vi: bool = True                  # original vs memory positive
    vi_synth_original: bool = True   # synthesized vs original
    vi_synth_memory: bool = True     # synthesized vs memory positive
    augment: bool = False            # traditional augmentation (contrast phase)


@dataclass
class TrainConfig:
    warmup_id_epochs: int = 20
    warmup_gan_epochs: int = 20
    joint_epochs: int = 15
    batch_size: int = 16
    lr_identity: float = 3.5e-4
    lr_gan: float = 1e-4
    sgd_momentum: float = 0.9
    adam_betas: tuple = (0.5, 0.999)
    adam_eps: float = 1e-8
    lr_decay: float = 0.1
    lr_decay_after: int = 10
    memory_momentum: float = 0.2
    seed: int = 1
    keep_all_checkpoints: bool = False
    toggles: LossToggles = field(default_factory=LossToggles)

    def __post_init__(self):
        if min(self.warmup_id_epochs, self.warmup_gan_epochs, self.joint_epochs) < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1 or self.lr_identity <= 0 or self.lr_gan <= 0:
            raise ValueError("invalid batch size or learning rate")
        if isinstance(self.toggles, dict):
            self.toggles = LossToggles(**self.toggles)


@dataclass
class TrainSetup:
    shapes: nets.ShapeConfig = field(default_factory=nets.ShapeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    gan_loss: GanLossConfig = field(default_factory=GanLossConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)


class MetricsLog:
    """Append-only JSONL log of training and evaluation records."""

    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    def append(self, record):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class RunState:
    bundle: nets.NetworkBundle
    bank: MemoryBank
    setup: TrainSetup
    run_dir: str
    phase: str = "init"
    epochs_done: dict = field(default_factory=dict)
    optimizers: dict = field(default_factory=dict)
    labeling: clustering.PseudoLabeling = None

    @property
    def metrics(self):
        return MetricsLog(os.path.join(self.run_dir, "metrics.jsonl"))

    def checkpoint_path(self, name):
        ckpt_dir = os.path.join(self.run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        return os.path.join(ckpt_dir, f"{name}.npz")

    def save(self, name):
        arrays = {f"net.{k}": v for k, v in self.bundle.state_arrays().items()}
        arrays.update(self.bank.state_arrays())
        if self.labeling is not None:
            arrays["pseudo_labels"] = self.labeling.labels
        for key, opt in self.optimizers.items():
            arrays.update(_optimizer_arrays(opt, f"opt.{key}"))
        meta = {
            "phase": self.phase,
            "epochs_done": self.epochs_done,
            "seed": self.setup.train.seed,
            "bank_epoch": self.bank.epoch,
            "labeling_epoch": None if self.labeling is None else int(self.labeling.epoch),
            "labeling_clusters": None if self.labeling is None else int(self.labeling.cluster_count),
            "optimizer_keys": sorted(self.optimizers),
        }
        path = self.checkpoint_path(name)
        ParamArchive(arrays=arrays, metadata=meta).save(path)
        return path

    def load_checkpoint(self, path):
        arc = ParamArchive.load(path)
        net_arrays = {k[len("net."):]: v for k, v in arc.arrays.items() if k.startswith("net.")}
        self.bundle.load_state_arrays(net_arrays)
        self.bank = MemoryBank.from_state(
            {"memory_bank": arc.arrays["memory_bank"]},
            self.setup.train.memory_momentum,
            epoch=arc.metadata.get("bank_epoch", 0),
        )
        if "pseudo_labels" in arc.arrays:
            labels = arc.arrays["pseudo_labels"]
            self.labeling = clustering.PseudoLabeling(
                labels=labels,
                epoch=arc.metadata.get("labeling_epoch") or 0,
                cluster_count=arc.metadata.get("labeling_clusters")
                or int(labels.max() + 1),
            )
        self.phase = arc.metadata["phase"]
        self.epochs_done = dict(arc.metadata["epochs_done"])
        self._pending_opt_arrays = {
            k: v for k, v in arc.arrays.items() if k.startswith("opt.")
        }
        return self

    def restore_optimizers(self):
        for key, opt in self.optimizers.items():
            prefix = f"opt.{key}."
            stored = {k[len(prefix):]: v for k, v in
                      getattr(self, "_pending_opt_arrays", {}).items()
                      if k.startswith(prefix)}
            if stored:
                _load_optimizer_arrays(opt, stored)


def _optimizer_arrays(opt, prefix):
    arrays = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, val in state.items():
            arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
            arrays[f"{prefix}.{idx}.{key}"] = arr
    return arrays


def _load_optimizer_arrays(opt, stored):
    sd = opt.state_dict()
    state = {}
    for name, arr in stored.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(arr)
    sd["state"] = state
    opt.load_state_dict(sd)


def _scalar(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _epoch_rng(seed, phase, epoch):
    return np.random.default_rng([seed, _PHASE_IDS[phase], epoch])


def _batches(rng, n, batch_size):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _images_tensor(dataset, idx):
    return torch.as_tensor(dataset.images[idx], dtype=torch.float32)


def _structures_tensor(dataset, idx):
    return torch.as_tensor(
        np.stack([dataset.structure_at(int(i), dataset.azimuth_of(int(i))) for i in idx]),
        dtype=torch.float32)


def make_optimizer_id(bundle, cfg, lr=None):
    return torch.optim.SGD(bundle.id_enc.parameters(),
                           lr=lr if lr is not None else cfg.lr_identity,
                           momentum=cfg.sgd_momentum)


def make_optimizer_gen(bundle, cfg, lr=None):
    params = list(bundle.str_enc.parameters()) + list(bundle.decoder.parameters())
    return torch.optim.Adam(params, lr=lr if lr is not None else cfg.lr_gan,
                            betas=cfg.adam_betas, eps=cfg.adam_eps)


def make_optimizer_disc(bundle, cfg, lr=None):
    return torch.optim.Adam(bundle.disc.parameters(),
                            lr=lr if lr is not None else cfg.lr_gan,
                            betas=cfg.adam_betas, eps=cfg.adam_eps)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _decayed(base, epoch, cfg):
    return base * (cfg.lr_decay if epoch >= cfg.lr_decay_after else 1.0)


def augment_traditional(images, rng):
    """Flip / padded crop / channel jitter / rectangle erase, per image."""
    out = np.array(images, copy=True)
    n, _, h, w = out.shape
    pad = 8
    for i in range(n):
        img = out[i]
        if rng.uniform() < 0.5:
            img = img[:, :, ::-1]
        canvas = np.zeros((3, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
        canvas[:, pad:pad + h, pad:pad + w] = img
        oy, ox = rng.integers(0, 2 * pad + 1, size=2)
        img = canvas[:, oy:oy + h, ox:ox + w]
        img = np.clip(img + rng.uniform(-0.1, 0.1, size=(3, 1, 1)), 0.0, 1.0)
        area = rng.uniform(0.02, 0.20) * h * w
        aspect = rng.uniform(0.5, 2.0)
        eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
        ey = int(rng.integers(0, h - eh + 1))
        ex = int(rng.integers(0, w - ew + 1))
        img = img.copy()
        img[:, ey:ey + eh, ex:ex + ew] = 0.0
        out[i] = img
    return out


def _populate_bank(bundle, dataset, cfg):
    from .evalkit import extract_features
    feats = extract_features(bundle, dataset.images)
    return MemoryBank(feats, momentum=cfg.memory_momentum)


def _instance_labeling(n):
    return clustering.PseudoLabeling(labels=np.arange(n), epoch=0, cluster_count=n)


def _sample_or_skip(bank, labeling, anchor, rng, contrast_cfg):
    """Pair sampling that tolerates oversized clusters.

    Early pseudo labelings can put most instances in one cluster, leaving
    fewer than K eligible negatives for its members; those anchors sit out
    the contrastive terms for the epoch instead of aborting the run.
    """
    try:
        return sample_pairs(bank, labeling, anchor, rng, contrast_cfg)
    except contrastive.ConfigurationError:
        return None


def warmup_identity(setup, dataset, run_dir, bundle=None):
    """Phase 1: train the identity encoder by instance discrimination."""
    if len(dataset) == 0:
        raise contrastive.ConfigurationError("empty dataset")
    cfg = setup.train
    bundle = bundle or nets.init_networks(cfg.seed, setup.shapes)
    bundle.train_mode(True)
    state = RunState(bundle=bundle, bank=_populate_bank(bundle, dataset, cfg),
                     setup=setup, run_dir=run_dir, phase="warmup_id")
    state.optimizers = {"id": make_optimizer_id(bundle, cfg)}
    return _run_warmup_identity_epochs(state, dataset)


def continue_warmup_identity(state, dataset):
    """Resume phase 1 from a loaded checkpoint."""
    cfg = state.setup.train
    resuming = state.phase == "warmup_id" and state.epochs_done.get("warmup_id", 0) > 0
    state.phase = "warmup_id"
    state.optimizers = {"id": make_optimizer_id(state.bundle, cfg)}
    if resuming:
        state.restore_optimizers()
    return _run_warmup_identity_epochs(state, dataset)


def _run_warmup_identity_epochs(state, dataset):
    setup, cfg = state.setup, state.setup.train
    metrics = state.metrics
    labels = _instance_labeling(len(dataset))
    start = state.epochs_done.get("warmup_id", 0)
    for epoch in range(start, cfg.warmup_id_epochs):
        rng = _epoch_rng(cfg.seed, "warmup_id", epoch)
        losses = []
        for batch in _batches(rng, len(dataset), cfg.batch_size):
            imgs = _images_tensor(dataset, batch)
            f, _ = nets.encode_identity(state.bundle, imgs)
            pair_data = [sample_pairs(state.bank, labels, int(i), rng, setup.contrast)
                         for i in batch]
            loss = torch.stack([
                contrastive.instance_contrast_loss(
                    f[k],
                    torch.as_tensor(p.f_pos, dtype=torch.float32),
                    torch.as_tensor(p.negatives, dtype=torch.float32),
                    setup.contrast.tau)
                for k, p in enumerate(pair_data)
            ]).mean()
            state.optimizers["id"].zero_grad()
            loss.backward()
            state.optimizers["id"].step()
            f_np = f.detach().cpu().numpy()
            for k, i in enumerate(batch):
                state.bank.update(int(i), f_np[k])
            losses.append(_scalar(loss))
        state.bank.epoch += 1
        state.epochs_done["warmup_id"] = epoch + 1
        metrics.append({"type": "epoch", "phase": "warmup_id", "epoch": epoch,
                        "loss": float(np.mean(losses))})
        _save_epoch(state, "warmup_id", epoch)
    state.save("warmup_id")
    return state


def warmup_gan(state, dataset):
    """Phase 2: freeze the identity encoder, train generation side only."""
    if state.epochs_done.get("warmup_id", 0) == 0:
        raise RuntimeError("identity warm-up has not run")
    setup, cfg = state.setup, state.setup.train
    bundle = state.bundle
    for p in bundle.id_enc.parameters():
        p.requires_grad_(False)
    resuming = state.phase == "warmup_gan" and state.epochs_done.get("warmup_gan", 0) > 0
    state.phase = "warmup_gan"
    state.optimizers = {"gen": make_optimizer_gen(bundle, cfg),
                        "disc": make_optimizer_disc(bundle, cfg)}
    if resuming:
        state.restore_optimizers()
    metrics = state.metrics
    start = state.epochs_done.get("warmup_gan", 0)
    for epoch in range(start, cfg.warmup_gan_epochs):
        rng = _epoch_rng(cfg.seed, "warmup_gan", epoch)
        totals = []
        for batch in _batches(rng, len(dataset), cfg.batch_size):
            parts = _gan_step(state, dataset, batch, rng)
            totals.append(parts["l_gan"])
        state.epochs_done["warmup_gan"] = epoch + 1
        metrics.append({"type": "epoch", "phase": "warmup_gan", "epoch": epoch,
                        "l_gan": float(np.mean(totals))})
        _save_epoch(state, "warmup_gan", epoch)
    for p in bundle.id_enc.parameters():
        p.requires_grad_(True)
    state.save("warmup_gan")
    return state


def _gan_step(state, dataset, batch, rng, extra_loss=None, opt_keys=("gen",)):
    """One batch: discriminator step, then generator-side step.

    ``extra_loss(cycle) -> (loss, parts)`` lets the joint phase add
    contrastive terms to the generator-side objective.
    """
    setup = state.setup
    bundle = state.bundle
    imgs = _images_tensor(dataset, batch)
    s_ori = _structures_tensor(dataset, batch)
    new_structs = []
    for i in batch:
        struct, _ = generative.make_new_structure(dataset, dataset.sample(int(i)), rng)
        new_structs.append(struct)
    s_new = torch.as_tensor(np.stack(new_structs), dtype=torch.float32)

    cycle = generative.synth_cycle(bundle, imgs, s_ori, s_new)
    fakes = (cycle.recon_same, cycle.synth_new, cycle.recon_cycle)

    d_loss = generative.discriminator_loss(bundle, imgs, fakes)
    state.optimizers["disc"].zero_grad()
    d_loss.backward()
    state.optimizers["disc"].step()

    l_img = generative.loss_img(imgs, cycle.recon_same, cycle.recon_cycle)
    l_feat = generative.loss_feat(cycle.f_id, cycle.f_id_new, cycle.f_id_cycle)
    l_adv_g = generative.generator_adversarial_loss(bundle, fakes)
    l_gan = generative.loss_gan(setup.gan_loss, l_img, l_feat, l_adv_g)

    parts = {"l_img": _scalar(l_img), "l_feat": _scalar(l_feat),
             "l_adv_g": _scalar(l_adv_g), "d_loss": _scalar(d_loss),
             "l_gan": _scalar(l_gan)}
    total = l_gan
    if extra_loss is not None:
        extra, extra_parts = extra_loss(cycle)
        total = total + extra
        parts.update(extra_parts)
    for key in opt_keys:
        state.optimizers[key].zero_grad()
    total.backward()
    for key in opt_keys:
        state.optimizers[key].step()
    parts["l_all"] = _scalar(total)
    return parts


def joint_train(state, dataset):
    """Phase 3: pseudo labels refreshed per epoch, combined objective."""
    cfg = state.setup.train
    if state.epochs_done.get("warmup_id", 0) == 0 or state.epochs_done.get("warmup_gan", 0) == 0:
        raise RuntimeError("both warm-up phases must run before joint training")
    resuming = state.phase == "joint" and state.epochs_done.get("joint", 0) > 0
    state.phase = "joint"
    bundle = state.bundle
    state.optimizers = {"id": make_optimizer_id(bundle, cfg),
                        "gen": make_optimizer_gen(bundle, cfg),
                        "disc": make_optimizer_disc(bundle, cfg)}
    if resuming:
        state.restore_optimizers()
    metrics = state.metrics
    setup = state.setup
    tog = cfg.toggles
    start = state.epochs_done.get("joint", 0)
    for epoch in range(start, cfg.joint_epochs):
        _set_lr(state.optimizers["id"], _decayed(cfg.lr_identity, epoch, cfg))
        for key in ("gen", "disc"):
            _set_lr(state.optimizers[key], _decayed(cfg.lr_gan, epoch, cfg))
        labeling = clustering.assign_pseudo_labels(state.bank.rows, setup.cluster, epoch)
        state.labeling = labeling
        metrics.append({"type": "labeling", "phase": "joint", "epoch": epoch,
                        "cluster_count": labeling.cluster_count,
                        "noise_count": labeling.noise_count,
                        "labels": labeling.labels.tolist()})
        if labeling.noise_count == len(dataset):
            warnings.warn(f"joint epoch {epoch}: every anchor is noise; "
                          "running generation-only updates")
        rng = _epoch_rng(cfg.seed, "joint", epoch)
        for bi, batch in enumerate(_batches(rng, len(dataset), cfg.batch_size)):
            pair_data = {}
            for i in batch:
                pair = _sample_or_skip(state.bank, labeling, int(i), rng, setup.contrast)
                if pair is not None:
                    pair_data[int(i)] = pair

            def contrast_terms(cycle, batch=batch, pair_data=pair_data):
                terms = {"l_vi": [], "l_vi_synth_orig": [], "l_vi_synth_mem": []}
                for k, i in enumerate(batch):
                    pair = pair_data.get(int(i))
                    if pair is None:
                        continue
                    f_pos = torch.as_tensor(pair.f_pos, dtype=torch.float32)
                    negs = torch.as_tensor(pair.negatives, dtype=torch.float32)
                    tau = setup.contrast.tau
                    if tog.vi:
                        terms["l_vi"].append(contrastive.view_invariant_loss(
                            cycle.f[k], f_pos, cycle.f_new[k], negs, tau))
                    if tog.vi_synth_original:
                        terms["l_vi_synth_orig"].append(contrastive.synth_original_loss(
                            cycle.f[k], cycle.f_new[k], negs, tau))
                    if tog.vi_synth_memory:
                        terms["l_vi_synth_mem"].append(contrastive.synth_memory_loss(
                            f_pos, cycle.f_new[k], negs, tau))
                zero = torch.zeros(())
                means = {key: (torch.stack(vals).mean() if vals else zero)
                         for key, vals in terms.items()}
                total = means["l_vi"] + means["l_vi_synth_orig"] + means["l_vi_synth_mem"]
                return total, {key: _scalar(val) for key, val in means.items()}

            parts = _gan_step(state, dataset, batch, rng,
                              extra_loss=contrast_terms, opt_keys=("gen", "id"))
            with torch.no_grad():
                f, _ = nets.encode_identity(bundle, _images_tensor(dataset, batch))
            f_np = f.cpu().numpy()
            for k, i in enumerate(batch):
                state.bank.update(int(i), f_np[k])
            metrics.append({"type": "batch", "phase": "joint", "epoch": epoch,
                            "batch": bi, **parts})
        state.bank.epoch += 1
        state.epochs_done["joint"] = epoch + 1
        _save_epoch(state, "joint", epoch)
    state.save("final")
    return state


def contrast_only_train(state, dataset):
    """Generation-free training phase (with optional traditional augmentation)."""
    cfg = state.setup.train
    if state.epochs_done.get("warmup_id", 0) == 0:
        raise RuntimeError("identity warm-up must run first")
    resuming = state.phase == "contrast" and state.epochs_done.get("contrast", 0) > 0
    state.phase = "contrast"
    bundle = state.bundle
    state.optimizers = {"id": make_optimizer_id(bundle, cfg)}
    if resuming:
        state.restore_optimizers()
    setup = state.setup
    metrics = state.metrics
    start = state.epochs_done.get("contrast", 0)
    for epoch in range(start, cfg.joint_epochs):
        _set_lr(state.optimizers["id"], _decayed(cfg.lr_identity, epoch, cfg))
        labeling = clustering.assign_pseudo_labels(state.bank.rows, setup.cluster, epoch)
        state.labeling = labeling
        metrics.append({"type": "labeling", "phase": "contrast", "epoch": epoch,
                        "cluster_count": labeling.cluster_count,
                        "noise_count": labeling.noise_count,
                        "labels": labeling.labels.tolist()})
        rng = _epoch_rng(cfg.seed, "contrast", epoch)
        for bi, batch in enumerate(_batches(rng, len(dataset), cfg.batch_size)):
            images = dataset.images[batch]
            if cfg.toggles.augment:
                images = augment_traditional(images, rng)
            imgs = torch.as_tensor(images, dtype=torch.float32)
            f, _ = nets.encode_identity(bundle, imgs)
            losses = []
            for k, i in enumerate(batch):
                pair = _sample_or_skip(state.bank, labeling, int(i), rng, setup.contrast)
                if pair is None:
                    continue
                losses.append(contrastive.instance_contrast_loss(
                    f[k],
                    torch.as_tensor(pair.f_pos, dtype=torch.float32),
                    torch.as_tensor(pair.negatives, dtype=torch.float32),
                    setup.contrast.tau))
            loss = torch.stack(losses).mean() if losses else torch.zeros(())
            if losses:
                state.optimizers["id"].zero_grad()
                loss.backward()
                state.optimizers["id"].step()
            f_np = f.detach().cpu().numpy()
            for k, i in enumerate(batch):
                state.bank.update(int(i), f_np[k])
            metrics.append({"type": "batch", "phase": "contrast", "epoch": epoch,
                            "batch": bi, "l_contrast": _scalar(loss)})
        state.bank.epoch += 1
        state.epochs_done["contrast"] = epoch + 1
        _save_epoch(state, "contrast", epoch)
    state.save("final")
    return state


def _save_epoch(state, phase, epoch):
    if state.setup.train.keep_all_checkpoints:
        state.save(f"{phase}_epoch{epoch:03d}")
    state.save("last")


def resume_state(setup, run_dir, checkpoint="last"):
    """Rebuild a RunState from a checkpoint in the run directory."""
    bundle = nets.init_networks(setup.train.seed, setup.shapes)
    state = RunState(bundle=bundle, bank=MemoryBank(np.zeros((1, setup.shapes.embed_dim))),
                     setup=setup, run_dir=run_dir)
    path = state.checkpoint_path(checkpoint)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return state.load_checkpoint(path)
