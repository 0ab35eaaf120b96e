"""Segmentation networks, entropy-adversarial alignment and training objectives.

Three roles share one small fully-convolutional architecture:

* ``F_pretrain`` -- trained on raw source and target images with entropy
  alignment; later frozen and used only for the semantic-consistency loss.
* ``F_target``  -- trained on stochastic source->target translations, entropy
  alignment on raw target images, and optionally thresholded pseudo-labels.
* ``F_source``  -- trained on raw source images, entropy alignment on
  target->source translations, and optionally pseudo-labels on those.

Probability maps handed to numpy code are (N, H, W, C); torch code keeps the
usual (N, C, H, W).
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .config import SegmentationConfig, from_dict, to_dict
from .synth import IGNORE_INDEX, NUM_CLASSES
from .translation import NumericalFailure

log = logging.getLogger(__name__)

ROLES = ("F_pretrain", "F_source", "F_target")
LOGIT_CLIP = 30.0


class EmptyLossWarning(UserWarning):
    """Every pixel was ignored; the loss is defined as 0."""


class SegNet(nn.Module):
    """Four conv blocks (one strided, two dilated) and an upsampling head with a skip."""

    def __init__(self, width=16, num_classes=NUM_CLASSES):
        super().__init__()
        w = width
        self.block1 = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.ReLU(),
                                    nn.Conv2d(w, w, 3, padding=1), nn.ReLU())
        self.block2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU())
        self.block3 = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=2, dilation=2), nn.ReLU())
        self.block4 = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=4, dilation=4), nn.ReLU())
        self.fuse = nn.Sequential(nn.Conv2d(3 * w, w, 3, padding=1), nn.ReLU())
        self.classifier = nn.Conv2d(w, num_classes, 1)
        self.num_classes = num_classes

    def forward(self, x):
        h1 = self.block1(x)
        h = self.block4(self.block3(self.block2(h1)))
        h = F.interpolate(h, size=h1.shape[2:], mode="bilinear", align_corners=False)
        return self.classifier(self.fuse(torch.cat([h, h1], 1)))


class EntropyDiscriminator(nn.Module):
    """Four strided 4x4 convolutions with LeakyReLU(0.2), then a 1-channel logit layer."""

    def __init__(self, num_classes=NUM_CLASSES, width=16):
        super().__init__()
        layers, ch = [], num_classes
        for i in range(4):
            layers += [nn.Conv2d(ch, width * 2 ** i, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = width * 2 ** i
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


# -- formulas ----------------------------------------------------------------

def weighted_self_information(p):
    """Element-wise ``-p log p`` with ``0 log 0 = 0`` (numpy arrays or tensors)."""
    if isinstance(p, torch.Tensor):
        return -torch.xlogy(p, p)
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = -p[pos] * np.log(p[pos])
    return out


def _check_labels(labels, num_classes, ignore_index):
    bad = (labels < 0) | ((labels >= num_classes) & (labels != ignore_index))
    if bool(bad.any()):
        raise ValueError(f"labels must lie in [0, {num_classes}) or equal {ignore_index}")


def ce_loss(p, labels, ignore_index=IGNORE_INDEX, class_axis=-1):
    """Mean of ``-log p[label]`` over non-ignored pixels.

    Returns 0 (and warns with EmptyLossWarning) when every pixel is ignored.
    Works on numpy arrays (class axis last by default) and tensors.
    """
    if isinstance(p, torch.Tensor):
        labels = torch.as_tensor(labels, device=p.device).long()
        num_classes = p.shape[class_axis]
        _check_labels(labels, num_classes, ignore_index)
        keep = labels != ignore_index
        if not bool(keep.any()):
            warnings.warn("ce_loss: all pixels ignored", EmptyLossWarning, stacklevel=2)
            return p.sum() * 0.0
        idx = torch.where(keep, labels, torch.zeros_like(labels)).unsqueeze(class_axis)
        picked = torch.gather(p, class_axis % p.dim(), idx).squeeze(class_axis)
        return -(torch.log(picked) * keep).sum() / keep.sum()
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    num_classes = p.shape[class_axis]
    _check_labels(labels, num_classes, ignore_index)
    keep = labels != ignore_index
    if not keep.any():
        warnings.warn("ce_loss: all pixels ignored", EmptyLossWarning, stacklevel=2)
        return 0.0
    pm = np.moveaxis(p, class_axis, -1)
    picked = np.take_along_axis(pm, np.where(keep, labels, 0)[..., None], -1)[..., 0]
    return float(-np.log(picked[keep]).mean())


def masked_cross_entropy(logits, labels, ignore_index=IGNORE_INDEX):
    """Cross-entropy from (N, C, H, W) logits; 0 when nothing is retained (no NaN)."""
    keep = labels != ignore_index
    n = keep.sum()
    if n == 0:
        return logits.sum() * 0.0
    nll = F.cross_entropy(logits, torch.where(keep, labels, torch.zeros_like(labels)), reduction="none")
    return (nll * keep).sum() / n


def adversarial_alignment_losses(src_maps, tgt_maps, D, source_label=0.0):
    """Binary cross-entropy adversarial pair on entropy maps.

    The discriminator loss separates source-side maps (label ``source_label``)
    from target-side maps; inputs are detached for it. The generator loss asks
    target-side maps to be classified with the source label.
    """
    if src_maps.shape[0] == 0 or tgt_maps.shape[0] == 0:
        raise ValueError("adversarial losses need non-empty map sets")
    target_label = 1.0 - source_label

    def bce(logits, label):
        logits = logits.clamp(-LOGIT_CLIP, LOGIT_CLIP)
        return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, label))

    d_loss = 0.5 * (bce(D(src_maps.detach()), source_label) + bce(D(tgt_maps.detach()), target_label))
    g_loss = bce(D(tgt_maps), source_label)
    for name, v in (("adv_generator", g_loss), ("adv_discriminator", d_loss)):
        if not torch.isfinite(v):
            raise NumericalFailure(name, v.item())
    return g_loss, d_loss


def entropy_map(logits):
    return weighted_self_information(F.softmax(logits, 1))


def predict(model, x, batch_size=50):
    """Softmax probabilities as a (N, H, W, C) float32 array."""
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(F.softmax(model(x[i:i + batch_size]), 1).permute(0, 2, 3, 1).numpy())
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(x.shape[2:]) + (model.num_classes,), np.float32)


# -- objectives --------------------------------------------------------------

def _adv_terms(src_logits, tgt_logits, D, enabled):
    if not enabled:
        zero = tgt_logits.sum() * 0.0
        return zero, zero
    return adversarial_alignment_losses(entropy_map(src_logits), entropy_map(tgt_logits), D)


def pretrain_objective(net, D, x_s, y_s, x_t, adv_weight=1e-3, entropy_adv=True):
    """Supervised CE on raw source + entropy alignment of raw target predictions."""
    logits_s, logits_t = net(x_s), net(x_t)
    ce = masked_cross_entropy(logits_s, y_s)
    g, d = _adv_terms(logits_s, logits_t, D, entropy_adv)
    return {"total": ce + adv_weight * g, "ce": ce, "adv_g": g, "adv_d": d}


def assemble_target_objective(net, D, x_src_translated, y_s, x_t, pseudo=None,
                              adv_weight=1e-3, pseudo_weight=1.0, entropy_adv=True):
    """Target network loss on already-translated source images."""
    logits_st, logits_t = net(x_src_translated), net(x_t)
    ce = masked_cross_entropy(logits_st, y_s)
    g, d = _adv_terms(logits_st, logits_t, D, entropy_adv)
    total = ce + adv_weight * g
    out = {"ce": ce, "adv_g": g, "adv_d": d}
    if pseudo is not None:
        out["pseudo"] = masked_cross_entropy(logits_t, pseudo)
        total = total + pseudo_weight * out["pseudo"]
    out["total"] = total
    return out


def target_objective(net, D, translator, x_s, y_s, x_t, v, pseudo=None, **kw):
    """Monte-Carlo form of the expected translated-image loss: one style code per source image."""
    with torch.no_grad():
        x_st = translator.translate(x_s, "source", "target", v)
    return assemble_target_objective(net, D, x_st, y_s, x_t, pseudo, **kw)


def deterministic_target_objective(net, D, translate_fn, x_s, y_s, x_t, pseudo=None, **kw):
    """The same loss with a deterministic translation function ``translate_fn(x_s)``."""
    with torch.no_grad():
        x_st = translate_fn(x_s)
    return assemble_target_objective(net, D, x_st, y_s, x_t, pseudo, **kw)


def assemble_source_objective(net, D, x_s, y_s, x_tgt_translated, pseudo=None,
                              adv_weight=1e-3, pseudo_weight=1.0, entropy_adv=True):
    """Source network loss given target images already translated to the source domain."""
    logits_s, logits_ts = net(x_s), net(x_tgt_translated)
    ce = masked_cross_entropy(logits_s, y_s)
    g, d = _adv_terms(logits_s, logits_ts, D, entropy_adv)
    total = ce + adv_weight * g
    out = {"ce": ce, "adv_g": g, "adv_d": d}
    if pseudo is not None:
        out["pseudo"] = masked_cross_entropy(logits_ts, pseudo)
        total = total + pseudo_weight * out["pseudo"]
    out["total"] = total
    return out


def source_objective(net, D, translator, x_s, y_s, x_t, v, pseudo=None, **kw):
    with torch.no_grad():
        x_ts = translator.translate(x_t, "target", "source", v)
    return assemble_source_objective(net, D, x_s, y_s, x_ts, pseudo, **kw)


# -- training ----------------------------------------------------------------

def build_segnet(cfg: SegmentationConfig, seed: int):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = SegNet(cfg.width)
        D = EntropyDiscriminator(NUM_CLASSES, cfg.disc_width)
    return net, D


def poly_lr(base_lr, it, max_it, power):
    return base_lr * (1 - it / max_it) ** power


def sample_batch(gen, n, batch_size):
    return torch.randint(n, (batch_size,), generator=gen)


def _check_pseudo(target_ids, pseudo_labels, n_t):
    if pseudo_labels is None:
        return None
    if target_ids is None or len(target_ids) != n_t:
        raise ValueError("pseudo-labels need the ids of the target images")
    missing = [i for i in target_ids if i not in pseudo_labels]
    if missing:
        raise ValueError(f"pseudo-labels missing for {len(missing)} target ids (e.g. {missing[0]})")
    return torch.from_numpy(np.stack([np.asarray(pseudo_labels[i]) for i in target_ids]).astype(np.int64))


def _train_loop(cfg, net, D, step_fn, seed, log_prefix):
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.disc_lr, betas=(0.9, 0.99))
    gen = torch.Generator().manual_seed(seed)
    curve = []
    net.train()
    for it in range(cfg.iterations):
        for g in opt.param_groups:
            g["lr"] = poly_lr(cfg.lr, it, cfg.iterations, cfg.poly_power)
        losses = step_fn(gen)
        for k, v in losses.items():
            if not torch.isfinite(v):
                raise NumericalFailure(f"{log_prefix}.{k}", v.item())
        opt.zero_grad()
        opt_d.zero_grad()
        losses["total"].backward()
        opt.step()
        if cfg.entropy_adv:
            opt_d.zero_grad()
            losses["adv_d"].backward()
            opt_d.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            curve.extend((it, k, v.item()) for k, v in losses.items())
    net.eval()
    return curve


def pretrain_semantic_net(cfg: SegmentationConfig, x_s, y_s, x_t, seed=0):
    """The frozen semantic network: supervised on source, entropy-aligned on target."""
    net, D = build_segnet(cfg, seed)
    n_s, n_t = len(x_s), len(x_t)

    def step(gen):
        i, j = sample_batch(gen, n_s, cfg.batch_size), sample_batch(gen, n_t, cfg.batch_size)
        return pretrain_objective(net, D, x_s[i], y_s[i], x_t[j], cfg.adv_weight, cfg.entropy_adv)

    curve = _train_loop(cfg, net, D, step, seed + 1, "pretrain")
    return net, {"role": "F_pretrain"}, curve


STYLE_MODES = ("stochastic", "frozen", "none")


def train_target_network(cfg: SegmentationConfig, translator, x_s, y_s, x_t, sigma2=1.0, *,
                         style_mode="stochastic", target_ids=None, pseudo_labels=None, seed=0,
                         init_state=None, frozen_style=None):
    """Target-domain network.

    ``style_mode``: ``stochastic`` draws v ~ N(0, sigma2 I) per image per
    iteration; ``frozen`` uses a constant code (zeros unless ``frozen_style``);
    ``none`` skips translation and trains on raw source images.
    """
    if style_mode not in STYLE_MODES:
        raise ValueError(f"style_mode must be one of {STYLE_MODES}")
    if style_mode != "none" and translator is None:
        raise ValueError("a trained translator is required")
    pl = _check_pseudo(target_ids, pseudo_labels, len(x_t))
    net, D = build_segnet(cfg, seed)
    if init_state is not None:
        net.load_state_dict(init_state)
    n_s, n_t = len(x_s), len(x_t)
    if style_mode == "frozen":
        v0 = torch.zeros(translator.style_dim) if frozen_style is None else torch.as_tensor(frozen_style).float()
    kw = dict(adv_weight=cfg.adv_weight, pseudo_weight=cfg.pseudo_weight, entropy_adv=cfg.entropy_adv)

    def step(gen):
        i, j = sample_batch(gen, n_s, cfg.batch_size), sample_batch(gen, n_t, cfg.batch_size)
        pseudo = pl[j] if pl is not None else None
        if style_mode == "none":
            return assemble_target_objective(net, D, x_s[i], y_s[i], x_t[j], pseudo, **kw)
        if style_mode == "frozen":
            v = v0.expand(len(i), -1)
        else:
            v = translator.sample_styles(len(i), sigma2, gen)
        return target_objective(net, D, translator, x_s[i], y_s[i], x_t[j], v, pseudo, **kw)

    curve = _train_loop(cfg, net, D, step, seed + 1, "target")
    meta = {"role": "F_target", "sigma2": float(sigma2), "style_mode": style_mode,
            "pseudo_labels": pl is not None}
    return net, meta, curve


def train_source_network(cfg: SegmentationConfig, translator, x_s, y_s, x_t, sigma2=1.0, *,
                         target_ids=None, pseudo_labels=None, seed=0, init_state=None):
    """Source-domain network; entropy alignment acts on target->source translations."""
    if translator is None:
        raise ValueError("a trained translator is required")
    pl = _check_pseudo(target_ids, pseudo_labels, len(x_t))
    net, D = build_segnet(cfg, seed)
    if init_state is not None:
        net.load_state_dict(init_state)
    n_s, n_t = len(x_s), len(x_t)
    kw = dict(adv_weight=cfg.adv_weight, pseudo_weight=cfg.pseudo_weight, entropy_adv=cfg.entropy_adv)

    def step(gen):
        i, j = sample_batch(gen, n_s, cfg.batch_size), sample_batch(gen, n_t, cfg.batch_size)
        v = translator.sample_styles(len(j), sigma2, gen)
        pseudo = pl[j] if pl is not None else None
        return source_objective(net, D, translator, x_s[i], y_s[i], x_t[j], v, pseudo, **kw)

    curve = _train_loop(cfg, net, D, step, seed + 1, "source")
    meta = {"role": "F_source", "sigma2": float(sigma2), "pseudo_labels": pl is not None}
    return net, meta, curve


def save(net: SegNet, path, cfg: SegmentationConfig, meta: dict) -> str:
    return checkpoint.save_module(path, net, {"kind": "segmentation", "config": to_dict(cfg),
                                              "num_classes": net.num_classes, **meta})


def load(path):
    """Returns (net, metadata); metadata echoes role, sigma2 and the training config."""
    tensors, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "segmentation":
        raise checkpoint.CheckpointError(f"{path} is not a segmentation checkpoint")
    cfg = from_dict(SegmentationConfig, meta["config"])
    net = SegNet(cfg.width, meta["num_classes"])
    net.load_state_dict(tensors)
    net.eval()
    return net, meta
