"""Network family for the split-latent VAE.

One shared convolutional trunk feeds two affine heads that emit (mu, logvar)
for the content and style partitions; the decoder mirrors the trunk with
transposed convolutions.  Blocks are conv / batch-norm / relu with He-
initialized weights.  The 28x28 stack is three blocks
[C,32,3,2,1]-[32,64,3,2,1]-[64,128,3,2,1]; 16x16 inputs use a two-block
variant.  Log-variances are clamped to [-10, 10] to keep KL and
reparameterization away from overflow.

Also here: the frozen-encoder classification head, the auxiliary conditional
Gaussian net and the total-correlation discriminator used by the alternative
mutual-information minimizers, and a versioned binary checkpoint format that
round-trips parameters bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .losses import ClearConfig
from .rng import Rng

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

_ENCODER_BLOCKS = {
    28: ((32, 3, 2, 1), (64, 3, 2, 1), (128, 3, 2, 1)),
    16: ((32, 3, 2, 1), (64, 3, 2, 1)),
}
_DECODER_BLOCKS = {
    28: ((64, 3, 2, 1, 0), (32, 3, 2, 1, 1), (None, 3, 2, 1, 1)),
    16: ((32, 3, 2, 1, 1), (None, 3, 2, 1, 1)),
}
_TRUNK_SPATIAL = 4  # both stacks land on a 4x4 map


@dataclass
class LatentCode:
    """Variational parameters of one batch, split into content and style."""
    mu_c: Tensor
    logvar_c: Tensor
    mu_s: Tensor
    logvar_s: Tensor

    @property
    def n(self) -> int:
        return self.mu_c.shape[0]


def _he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


class Affine:
    def __init__(self, n_in: int, n_out: int, rng: Rng):
        self.w = Tensor(_he_normal(rng, (n_in, n_out), n_in), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def buffers(self):
        return []


class Conv2d:
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, pad: int, rng: Rng):
        self.stride, self.pad = stride, pad
        self.w = Tensor(_he_normal(rng, (c_out, c_in, k, k), c_in * k * k),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def buffers(self):
        return []


class ConvTranspose2d:
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, pad: int,
                 output_pad: int, rng: Rng):
        self.stride, self.pad, self.output_pad = stride, pad, output_pad
        self.w = Tensor(_he_normal(rng, (c_in, c_out, k, k), c_in * k * k),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.w, self.b, stride=self.stride,
                                   pad=self.pad, output_pad=self.output_pad)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def buffers(self):
        return []


class BatchNorm2d:
    """Per-channel normalization; batch statistics while training, running
    (population) estimates at evaluation."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = x.shape[1]
        if training:
            out, mean, var = ad.batch_norm2d(x, self.gamma, self.beta, eps=self.eps)
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = ad.reshape(self.gamma, (1, c, 1, 1)) * Tensor(inv.reshape(1, c, 1, 1))
        shift = ad.reshape(self.beta, (1, c, 1, 1)) - scale * Tensor(
            self.running_mean.reshape(1, c, 1, 1))
        return x * scale + shift

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def _collect(named_layers):
    """Flatten (prefix, layer) pairs into parameter and buffer name maps."""
    params, buffers = [], []
    for prefix, layer in named_layers:
        for name, t in layer.params():
            params.append((f"{prefix}.{name}", t))
        for name, arr in layer.buffers():
            buffers.append((f"{prefix}.{name}", arr))
    return params, buffers


class _Net:
    """Shared parameter bookkeeping for the small network classes."""

    def named_layers(self):
        raise NotImplementedError

    def parameters(self):
        params, _ = _collect(self.named_layers())
        return [t for _, t in params]

    def state_dict(self) -> dict:
        params, buffers = _collect(self.named_layers())
        out = {name: t.data.copy() for name, t in params}
        out.update({name: arr.copy() for name, arr in buffers})
        return out

    def load_state_dict(self, state: dict) -> None:
        params, buffers = _collect(self.named_layers())
        for name, t in params:
            if t.data.shape != state[name].shape:
                raise ContractViolation(f"shape mismatch for {name}")
            t.data[...] = state[name]
        for name, arr in buffers:
            arr[...] = state[name]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


class Encoder(_Net):
    """Shared conv trunk with parallel content/style heads."""

    def __init__(self, channels: int, image_size: int, d_c: int, d_s: int, rng: Rng):
        if image_size not in _ENCODER_BLOCKS:
            raise ContractViolation(f"unsupported image size {image_size}")
        self.channels = channels
        self.image_size = image_size
        self.d_c, self.d_s = d_c, d_s
        self.convs, self.bns = [], []
        c_in = channels
        for i, (c_out, k, s, p) in enumerate(_ENCODER_BLOCKS[image_size]):
            self.convs.append(Conv2d(c_in, c_out, k, s, p, rng.child("enc_conv", i)))
            self.bns.append(BatchNorm2d(c_out))
            c_in = c_out
        self.feat_dim = c_in * _TRUNK_SPATIAL * _TRUNK_SPATIAL
        self.head_c = Affine(self.feat_dim, 2 * d_c, rng.child("enc_head_c"))
        self.head_s = Affine(self.feat_dim, 2 * d_s, rng.child("enc_head_s"))

    def trunk(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.channels \
                or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ContractViolation(
                f"expected (n, {self.channels}, {self.image_size}, {self.image_size}),"
                f" got {x.shape}")
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = ad.relu(bn(conv(h), training))
        return ad.reshape(h, (x.shape[0], self.feat_dim))

    def __call__(self, x: Tensor, training: bool = False) -> LatentCode:
        flat = self.trunk(x, training)
        hc = self.head_c(flat)
        hs = self.head_s(flat)
        return LatentCode(
            mu_c=hc[:, :self.d_c],
            logvar_c=ad.clip(hc[:, self.d_c:], LOGVAR_MIN, LOGVAR_MAX),
            mu_s=hs[:, :self.d_s],
            logvar_s=ad.clip(hs[:, self.d_s:], LOGVAR_MIN, LOGVAR_MAX),
        )

    def named_layers(self):
        layers = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            layers += [(f"block{i}.conv", conv), (f"block{i}.bn", bn)]
        layers += [("head_c", self.head_c), ("head_s", self.head_s)]
        return layers


class Decoder(_Net):
    """Mirrored transposed-conv stack; sigmoid output in (0, 1)."""

    def __init__(self, channels: int, image_size: int, d_z: int, rng: Rng):
        if image_size not in _DECODER_BLOCKS:
            raise ContractViolation(f"unsupported image size {image_size}")
        self.channels = channels
        self.image_size = image_size
        self.d_z = d_z
        trunk_ch = _ENCODER_BLOCKS[image_size][-1][0]
        self.trunk_ch = trunk_ch
        self.fc = Affine(d_z, trunk_ch * _TRUNK_SPATIAL * _TRUNK_SPATIAL,
                         rng.child("dec_fc"))
        self.deconvs, self.bns = [], []
        c_in = trunk_ch
        for i, (c_out, k, s, p, op) in enumerate(_DECODER_BLOCKS[image_size]):
            c_out = channels if c_out is None else c_out
            self.deconvs.append(
                ConvTranspose2d(c_in, c_out, k, s, p, op, rng.child("dec_conv", i)))
            if i < len(_DECODER_BLOCKS[image_size]) - 1:
                self.bns.append(BatchNorm2d(c_out))
            c_in = c_out

    def __call__(self, z_c: Tensor, z_s: Tensor, training: bool = False) -> Tensor:
        z = ad.concat([z_c, z_s], axis=1)
        if z.shape[1] != self.d_z:
            raise ContractViolation(
                f"latent dim {z.shape[1]} does not match decoder d_z={self.d_z}")
        h = ad.relu(self.fc(z))
        h = ad.reshape(h, (z.shape[0], self.trunk_ch, _TRUNK_SPATIAL, _TRUNK_SPATIAL))
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < len(self.deconvs) - 1:
                h = ad.relu(self.bns[i](h, training))
        return ad.sigmoid(h)

    def named_layers(self):
        layers = [("fc", self.fc)]
        for i, deconv in enumerate(self.deconvs):
            layers.append((f"block{i}.deconv", deconv))
            if i < len(self.bns):
                layers.append((f"block{i}.bn", self.bns[i]))
        return layers


class ClassifierHead(_Net):
    """Two affine layers with one relu, for frozen-encoder classification."""

    def __init__(self, d_in: int, n_classes: int, rng: Rng, hidden: int = 64):
        self.fc1 = Affine(d_in, hidden, rng.child("head_fc1"))
        self.fc2 = Affine(hidden, n_classes, rng.child("head_fc2"))

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(z)))

    def named_layers(self):
        return [("fc1", self.fc1), ("fc2", self.fc2)]


class AuxGaussianNet(_Net):
    """q(style | content) as a diagonal Gaussian: two 2-layer MLPs for the
    mean and log-variance."""

    def __init__(self, d_c: int, d_s: int, rng: Rng, hidden: int = 64):
        self.mu1 = Affine(d_c, hidden, rng.child("aux_mu1"))
        self.mu2 = Affine(hidden, d_s, rng.child("aux_mu2"))
        self.lv1 = Affine(d_c, hidden, rng.child("aux_lv1"))
        self.lv2 = Affine(hidden, d_s, rng.child("aux_lv2"))

    def __call__(self, z_c: Tensor):
        mu = self.mu2(ad.relu(self.mu1(z_c)))
        logvar = ad.clip(self.lv2(ad.relu(self.lv1(z_c))), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def named_layers(self):
        return [("mu1", self.mu1), ("mu2", self.mu2),
                ("lv1", self.lv1), ("lv2", self.lv2)]


class TcDiscriminator(_Net):
    """2-layer MLP scoring whether a (content, style) pair is jointly sampled."""

    def __init__(self, d_z: int, rng: Rng, hidden: int = 64):
        self.fc1 = Affine(d_z, hidden, rng.child("disc_fc1"))
        self.fc2 = Affine(hidden, 1, rng.child("disc_fc2"))

    def logits(self, pair: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(pair)))

    def prob(self, pair: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(pair))

    def named_layers(self):
        return [("fc1", self.fc1), ("fc2", self.fc2)]


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    y = np.asarray(y).reshape(-1)
    n = logits.shape[0]
    lse = ad.masked_logsumexp_rows(logits, np.ones(logits.shape, dtype=bool))
    picked = ad.getitem(logits, (np.arange(n), y))
    return ad.tmean(lse - picked)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Stable binary cross-entropy on pre-sigmoid scores."""
    t = Tensor(np.asarray(targets, dtype=np.float64).reshape(logits.shape))
    return ad.tmean(ad.softplus(logits) - logits * t)


class ClearVae:
    """Encoder + decoder pair with the variant-specific auxiliary network."""

    def __init__(self, config: ClearConfig, channels: int = 1,
                 image_size: int = 28, seed: int = 0):
        rng = Rng(seed).child("model_init")
        self.config = config
        self.channels = channels
        self.image_size = image_size
        self.encoder = Encoder(channels, image_size, config.d_c, config.d_s, rng)
        self.decoder = Decoder(channels, image_size, config.d_z, rng)
        self._aux = None
        self._disc = None
        if config.variant in ("l1out", "club_s"):
            self._aux = AuxGaussianNet(config.d_c, config.d_s, rng)
        elif config.variant == "tc":
            self._disc = TcDiscriminator(config.d_z, rng)

    # -- forward pieces --------------------------------------------------

    def encode(self, x, training: bool = False) -> LatentCode:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return self.encoder(x, training=training)

    @staticmethod
    def reparameterize(code: LatentCode, rng: Rng | None, eps=None):
        """z = mu + exp(logvar/2) * eps; pass eps=0 to pin z at the mean."""
        if eps is None:
            if rng is None:
                raise ContractViolation("reparameterize needs an rng or explicit eps")
            eps_c = Tensor(rng.normal(code.mu_c.shape))
            eps_s = Tensor(rng.normal(code.mu_s.shape))
        else:
            eps_c = Tensor(np.broadcast_to(np.asarray(eps, dtype=np.float64),
                                           code.mu_c.shape).copy())
            eps_s = Tensor(np.broadcast_to(np.asarray(eps, dtype=np.float64),
                                           code.mu_s.shape).copy())
        z_c = code.mu_c + ad.exp(code.logvar_c * 0.5) * eps_c
        z_s = code.mu_s + ad.exp(code.logvar_s * 0.5) * eps_s
        return z_c, z_s

    def decode(self, z_c, z_s, training: bool = False) -> Tensor:
        if not isinstance(z_c, Tensor):
            z_c = Tensor(z_c)
        if not isinstance(z_s, Tensor):
            z_s = Tensor(z_s)
        return self.decoder(z_c, z_s, training=training)

    def aux_gaussian_net(self) -> AuxGaussianNet:
        if self._aux is None:
            raise ContractViolation(
                f"auxiliary Gaussian net undefined for variant {self.config.variant!r}")
        return self._aux

    def reset_aux(self, seed: int) -> None:
        """Reinitialize the auxiliary network (divergence-recovery path)."""
        rng = Rng(seed).child("aux_reset")
        if self._aux is not None:
            self._aux = AuxGaussianNet(self.config.d_c, self.config.d_s, rng)
        elif self._disc is not None:
            self._disc = TcDiscriminator(self.config.d_z, rng)

    def tc_discriminator(self) -> TcDiscriminator:
        if self._disc is None:
            raise ContractViolation(
                f"discriminator undefined for variant {self.config.variant!r}")
        return self._disc

    # -- parameter bookkeeping --------------------------------------------

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def aux_parameters(self):
        if self._aux is not None:
            return self._aux.parameters()
        if self._disc is not None:
            return self._disc.parameters()
        return []

    def _parts(self):
        parts = [("encoder", self.encoder), ("decoder", self.decoder)]
        if self._aux is not None:
            parts.append(("aux", self._aux))
        if self._disc is not None:
            parts.append(("disc", self._disc))
        return parts

    def state_dict(self) -> dict:
        out = {}
        for prefix, net in self._parts():
            for name, arr in net.state_dict().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def load_state_dict(self, state: dict) -> None:
        for prefix, net in self._parts():
            sub = {name[len(prefix) + 1:]: arr for name, arr in state.items()
                   if name.startswith(prefix + ".")}
            net.load_state_dict(sub)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


class CnnClassifier(_Net):
    """Baseline classifier: the encoder trunk, an affine feature head of the
    same width as the content partition, then the shared 2-layer MLP head."""

    def __init__(self, channels: int, image_size: int, d_feat: int,
                 n_classes: int, seed: int = 0):
        rng = Rng(seed).child("cnn_init")
        self.encoder = Encoder(channels, image_size, d_feat, d_feat, rng)
        self.feat = Affine(self.encoder.feat_dim, d_feat, rng.child("cnn_feat"))
        self.head = ClassifierHead(d_feat, n_classes, rng)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        h = self.encoder.trunk(x, training=training)
        return self.head(ad.relu(self.feat(h)))

    def named_layers(self):
        return ([(f"encoder.{n}", l) for n, l in self.encoder.named_layers()]
                + [("feat", self.feat)]
                + [(f"head.{n}", l) for n, l in self.head.named_layers()])


# -- checkpoint container ------------------------------------------------------

_CKPT_MAGIC = b"CLEARVAE-CKPT\x00"
_CKPT_VERSION = 1


def save_checkpoint(path, model: ClearVae, extra: dict | None = None) -> None:
    """Versioned binary container: magic, config echo, named float64 blobs."""
    meta = {
        "config": model.config.to_dict(),
        "channels": model.channels,
        "image_size": model.image_size,
        "extra": extra or {},
    }
    blobs = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        meta_bytes = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype="<f8")
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (meta dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ContractViolation("not a checkpoint file: bad magic at offset 0")
        version, = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        meta_len, = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode())
        count, = struct.unpack("<I", fh.read(4))
        blobs = {}
        for _ in range(count):
            name_len, = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            ndim, = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
            data = np.frombuffer(fh.read(n_bytes), dtype="<f8").reshape(shape)
            blobs[name] = data.astype(np.float64)
    return meta, blobs


def restore_model(path) -> ClearVae:
    """Rebuild a ClearVae from a checkpoint's config echo and blobs."""
    meta, blobs = load_checkpoint(path)
    model = ClearVae(ClearConfig.from_dict(meta["config"]),
                     channels=meta["channels"], image_size=meta["image_size"])
    model.load_state_dict(blobs)
    return model
