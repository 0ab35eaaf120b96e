"""Content/style disentangled stochastic image translation.

Each domain has a content encoder, a style encoder and a generator whose
residual blocks are modulated by AdaIN parameters predicted from the style
code. Translating an image swaps the generator: ``G_to(C_from(x), v)``, with
``v`` drawn from ``N(0, sigma2 I)`` for stochastic translation.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .config import TranslationConfig, to_dict, from_dict

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")


class NumericalFailure(RuntimeError):
    def __init__(self, loss_name: str, value=None):
        super().__init__(f"non-finite value for loss {loss_name!r}: {value}")
        self.loss_name = loss_name


def _other(domain: str) -> str:
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    return DOMAINS[1 - DOMAINS.index(domain)]


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, k, stride=1, norm="none", act="relu"):
        # even kernels (4x4, stride 2) pad by k/2 - 1 so the size halves exactly
        pad = k // 2 if k % 2 else k // 2 - 1
        layers = [nn.ReflectionPad2d(pad), nn.Conv2d(cin, cout, k, stride)]
        if norm == "in":
            layers.append(nn.InstanceNorm2d(cout))
        elif norm == "ln":
            layers.append(LayerNorm(cout))
        if act == "relu":
            layers.append(nn.ReLU())
        elif act == "lrelu":
            layers.append(nn.LeakyReLU(0.2))
        elif act == "tanh":
            layers.append(nn.Tanh())
        super().__init__(*layers)


class LayerNorm(nn.Module):
    """Per-sample normalisation over (C, H, W) with per-channel affine."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        dims = tuple(range(1, x.dim()))
        mean = x.mean(dims, keepdim=True)
        std = x.std(dims, keepdim=True, unbiased=False)
        x = (x - mean) / (std + self.eps)
        return x * self.gamma.view(1, -1, 1, 1) + self.beta.view(1, -1, 1, 1)


class AdaIN(nn.Module):
    """Instance normalisation whose scale and shift are supplied per sample."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps

    def forward(self, x, gamma, beta):
        mean = x.mean((2, 3), keepdim=True)
        var = x.var((2, 3), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, channels, adain=False):
        super().__init__()
        self.adain = adain
        self.conv1 = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3))
        self.conv2 = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3))
        if adain:
            self.norm1, self.norm2 = AdaIN(channels), AdaIN(channels)
        else:
            self.norm1, self.norm2 = nn.InstanceNorm2d(channels), nn.InstanceNorm2d(channels)

    @property
    def n_adain_params(self):
        return 4 * self.conv1[1].out_channels if self.adain else 0

    def forward(self, x, params=None):
        if self.adain:
            g1, b1, g2, b2 = params.chunk(4, dim=1)
            h = F.relu(self.norm1(self.conv1(x), g1, b1))
            h = self.norm2(self.conv2(h), g2, b2)
        else:
            h = F.relu(self.norm1(self.conv1(x)))
            h = self.norm2(self.conv2(h))
        return x + h


class ContentEncoder(nn.Module):
    def __init__(self, width, n_down, n_res, first_kernel=7):
        super().__init__()
        layers = [ConvBlock(3, width, first_kernel, norm="in")]
        ch = width
        for _ in range(n_down):
            layers.append(ConvBlock(ch, ch * 2, 4, stride=2, norm="in"))
            ch *= 2
        self.down = nn.Sequential(*layers)
        self.res = nn.ModuleList(ResBlock(ch) for _ in range(n_res))
        self.out_channels = ch

    def forward(self, x):
        h = self.down(x)
        for block in self.res:
            h = block(h)
        return h


class StyleEncoder(nn.Module):
    def __init__(self, width, n_down, style_dim, first_kernel=7):
        super().__init__()
        layers = [ConvBlock(3, width, first_kernel)]
        ch = width
        for i in range(n_down):
            nxt = min(ch * 2, width * 4)
            layers.append(ConvBlock(ch, nxt, 4, stride=2))
            ch = nxt
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, style_dim, 1)

    def forward(self, x):
        h = self.body(x).mean((2, 3), keepdim=True)
        return self.head(h).flatten(1)


class Generator(nn.Module):
    """Decoder: AdaIN residual blocks, then upsampling convolutions to RGB."""

    def __init__(self, content_ch, n_down, n_res, style_dim, mlp_dim, up_kernel=5, out_kernel=7):
        super().__init__()
        self.res = nn.ModuleList(ResBlock(content_ch, adain=True) for _ in range(max(n_res, 1)))
        n_params = sum(b.n_adain_params for b in self.res)
        self.mlp = nn.Sequential(
            nn.Linear(style_dim, mlp_dim), nn.ReLU(),
            nn.Linear(mlp_dim, mlp_dim), nn.ReLU(),
            nn.Linear(mlp_dim, n_params),
        )
        ups = []
        ch = content_ch
        for _ in range(n_down):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), ConvBlock(ch, ch // 2, up_kernel, norm="ln")]
            ch //= 2
        self.up = nn.Sequential(*ups)
        self.out = ConvBlock(ch, 3, out_kernel, act="tanh")

    def forward(self, content, style):
        params = self.mlp(style)
        h = content
        offset = 0
        for block in self.res:
            n = block.n_adain_params
            h = block(h, params[:, offset:offset + n])
            offset += n
        return self.out(self.up(h))


class ImageDiscriminator(nn.Module):
    """Patch discriminator for the least-squares adversarial objective."""

    def __init__(self, width, n_layers=2):
        super().__init__()
        layers, ch = [], 3
        for i in range(n_layers):
            layers.append(ConvBlock(ch, width * 2 ** i, 4, stride=2, act="lrelu"))
            ch = width * 2 ** i
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class TranslationModel(nn.Module):
    def __init__(self, cfg: TranslationConfig, *, first_kernel=7, up_kernel=5, out_kernel=7, disc_layers=2):
        super().__init__()
        self.cfg = cfg
        self.arch = dict(first_kernel=first_kernel, up_kernel=up_kernel, out_kernel=out_kernel, disc_layers=disc_layers)
        self.content_enc = nn.ModuleDict()
        self.style_enc = nn.ModuleDict()
        self.gen = nn.ModuleDict()
        self.disc = nn.ModuleDict()
        for d in DOMAINS:
            ce = ContentEncoder(cfg.width, cfg.n_downsample, cfg.n_res, first_kernel)
            self.content_enc[d] = ce
            self.style_enc[d] = StyleEncoder(cfg.width, cfg.n_downsample, cfg.style_dim, first_kernel)
            self.gen[d] = Generator(ce.out_channels, cfg.n_downsample, cfg.n_res, cfg.style_dim,
                                    cfg.mlp_dim, up_kernel, out_kernel)
            self.disc[d] = ImageDiscriminator(cfg.disc_width, disc_layers)
        self.register_buffer("step", torch.zeros((), dtype=torch.int64))

    @property
    def style_dim(self):
        return self.cfg.style_dim

    @property
    def downsampling(self):
        return 2 ** self.cfg.n_downsample

    def generator_parameters(self):
        for mods in (self.content_enc, self.style_enc, self.gen):
            yield from mods.parameters()

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got shape {tuple(x.shape)}")
        if x.shape[2] % self.downsampling or x.shape[3] % self.downsampling:
            raise ValueError(f"image size {tuple(x.shape[2:])} not divisible by {self.downsampling}")

    def content(self, x, domain):
        self._check(x)
        return self.content_enc[domain](x)

    def style(self, x, domain):
        self._check(x)
        return self.style_enc[domain](x)

    def encode(self, x, domain):
        return self.content(x, domain), self.style(x, domain)

    def decode(self, content, style, domain):
        if style.dim() != 2 or style.shape[1] != self.style_dim or style.shape[0] != content.shape[0]:
            raise ValueError(f"style code shape {tuple(style.shape)} inconsistent with content {tuple(content.shape)}")
        return self.gen[domain](content, style)

    def translate(self, x, from_domain, to_domain, v):
        if from_domain == to_domain:
            raise ValueError("translate needs two different domains")
        _other(from_domain)
        _other(to_domain)
        return self.decode(self.content(x, from_domain), v, to_domain)

    def sample_styles(self, n, sigma2=1.0, generator=None, dtype=None):
        """``n`` style codes from N(0, sigma2 I); sigma2 is a variance, the std is sqrt(sigma2)."""
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        dtype = dtype or next(self.parameters()).dtype
        return math.sqrt(sigma2) * torch.randn(n, self.style_dim, generator=generator, dtype=dtype)

    def sample_translations(self, x, from_domain, to_domain, K, sigma2=1.0, generator=None):
        """K translations of each image in ``x``; element k uses style draw v_k per image."""
        if K < 1:
            raise ValueError("K must be >= 1")
        out = []
        for _ in range(K):
            v = self.sample_styles(x.shape[0], sigma2, generator, x.dtype)
            out.append(self.translate(x, from_domain, to_domain, v))
        return out


# -- losses ------------------------------------------------------------------

def rms_distance(a, b):
    """Per-sample Euclidean distance divided by sqrt(#elements), averaged over the batch."""
    d = (a - b).flatten(1)
    return torch.sqrt((d * d).mean(1) + 1e-12).mean()


def lsgan_generator_loss(d_fake):
    return ((d_fake - 1) ** 2).mean()


def lsgan_discriminator_loss(d_real, d_fake):
    return ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()


def semantic_consistency_loss(sem_net, x_before, x_after):
    """Cross-entropy of F(x_after) against argmax F(x_before)."""
    with torch.no_grad():
        target = sem_net(x_before).argmax(1)
    return F.cross_entropy(sem_net(x_after), target)


def translation_loss_bundle(model, x_s, x_t, v_s, v_t, sem_net=None):
    """Generator-side losses for one source batch and one target batch.

    ``v_t`` drives translations into the target domain (T[x_s, v_t]) and ``v_s``
    into the source domain (I[x_t, v_s]), one code per image.
    """
    c_s, s_s = model.encode(x_s, "source")
    c_t, s_t = model.encode(x_t, "target")
    x_st = model.decode(c_s, v_t, "target")
    x_ts = model.decode(c_t, v_s, "source")
    c_st, s_st = model.encode(x_st, "target")
    c_ts, s_ts = model.encode(x_ts, "source")
    losses = {
        "recon_s": (x_s - model.decode(c_s, s_s, "source")).abs().mean(),
        "recon_t": (x_t - model.decode(c_t, s_t, "target")).abs().mean(),
        "cycle_content_s": rms_distance(c_st, c_s),
        "cycle_content_t": rms_distance(c_ts, c_t),
        "cycle_style_s": (s_ts - v_s).abs().mean(),
        "cycle_style_t": (s_st - v_t).abs().mean(),
        "adv_s": lsgan_generator_loss(model.disc["source"](x_ts)),
        "adv_t": lsgan_generator_loss(model.disc["target"](x_st)),
    }
    if sem_net is not None:
        losses["sem"] = semantic_consistency_loss(sem_net, x_s, x_st) + semantic_consistency_loss(sem_net, x_t, x_ts)
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise NumericalFailure(name, value.item())
    return losses


def discriminator_loss(model, x_s, x_t, v_s, v_t):
    with torch.no_grad():
        x_st = model.translate(x_s, "source", "target", v_t)
        x_ts = model.translate(x_t, "target", "source", v_s)
    loss = (lsgan_discriminator_loss(model.disc["source"](x_s), model.disc["source"](x_ts))
            + lsgan_discriminator_loss(model.disc["target"](x_t), model.disc["target"](x_st)))
    if not torch.isfinite(loss):
        raise NumericalFailure("disc", loss.item())
    return loss


def weighted_total(losses, cfg: TranslationConfig):
    w = {
        "recon_s": cfg.recon_weight, "recon_t": cfg.recon_weight,
        "cycle_content_s": cfg.cycle_content_weight, "cycle_content_t": cfg.cycle_content_weight,
        "cycle_style_s": cfg.cycle_style_weight, "cycle_style_t": cfg.cycle_style_weight,
        "adv_s": cfg.adv_weight, "adv_t": cfg.adv_weight, "sem": cfg.sem_weight,
    }
    return sum(w[k] * v for k, v in losses.items())


# -- training ----------------------------------------------------------------

def build_model(cfg: TranslationConfig, seed: int = 0) -> TranslationModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return TranslationModel(cfg)


def train_translation(cfg: TranslationConfig, x_source, x_target, sem_net=None, seed=0,
                      checkpoint_path=None, log_path=None):
    """Train the translator with alternating discriminator/generator Adam steps.

    ``x_source`` / ``x_target`` are (N, 3, H, W) float tensors. Returns the model
    and the loss curve as (iteration, name, value) rows.
    """
    if cfg.use_sem and sem_net is None:
        raise ValueError("use_sem is set but no frozen semantic network was given")
    model = build_model(cfg, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    g_params = list(model.generator_parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    opt_d = torch.optim.Adam(model.disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)
    sched = [torch.optim.lr_scheduler.StepLR(o, cfg.lr_halve_every, 0.5) for o in (opt_g, opt_d)]
    if sem_net is not None and cfg.use_sem:
        sem_net.eval()
        for p in sem_net.parameters():
            p.requires_grad_(False)
    else:
        sem_net = None
    curve = []
    n_s, n_t = x_source.shape[0], x_target.shape[0]
    model.train()
    for it in range(cfg.iterations):
        xs = x_source[torch.randint(n_s, (cfg.batch_size,), generator=gen)]
        xt = x_target[torch.randint(n_t, (cfg.batch_size,), generator=gen)]
        v_s = model.sample_styles(cfg.batch_size, 1.0, gen)
        v_t = model.sample_styles(cfg.batch_size, 1.0, gen)

        opt_d.zero_grad()
        d_loss = discriminator_loss(model, xs, xt, v_s, v_t)
        d_loss.backward()
        opt_d.step()

        opt_g.zero_grad()
        losses = translation_loss_bundle(model, xs, xt, v_s, v_t, sem_net)
        total = weighted_total(losses, cfg)
        total.backward()
        opt_g.step()
        for s in sched:
            s.step()
        model.step += 1
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            curve.append((it, "disc", d_loss.item()))
            curve.extend((it, k, v.item()) for k, v in losses.items())
            curve.append((it, "total", total.item()))
    model.eval()
    if checkpoint_path is not None:
        save(model, checkpoint_path)
    if log_path is not None:
        write_loss_log(log_path, curve)
    return model, curve


def save(model: TranslationModel, path) -> str:
    meta = {"kind": "translation", "config": to_dict(model.cfg), "arch": model.arch}
    return checkpoint.save_module(path, model, meta)


def load(path) -> TranslationModel:
    tensors, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "translation":
        raise checkpoint.CheckpointError(f"{path} is not a translation checkpoint")
    model = TranslationModel(from_dict(TranslationConfig, meta["config"]), **meta["arch"])
    model.load_state_dict(tensors)
    model.eval()
    return model


def write_loss_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss_name", "value"])
        for it, name, value in rows:
            w.writerow([it, name, repr(float(value))])


def read_loss_log(path):
    with open(path, newline="") as f:
        return [(int(r["iteration"]), r["loss_name"], float(r["value"])) for r in csv.DictReader(f)]


def curve_series(rows, name):
    pts = [(it, v) for it, n, v in rows if n == name]
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])
