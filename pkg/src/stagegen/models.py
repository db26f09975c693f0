"""The four networks of the stacked GAN.

Stage 1 is a DCGAN pair (noise -> edge image). Stage 2 is a conditional
ResNet generator (edge -> grayscale) with a channel-concatenation
discriminator. Parameters live in :class:`Network` containers and the forward
functions are plain functions of (input, network, spec).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional

import numpy as np

from . import ndtensor as nd
from .ndtensor import ShapeError, Tensor

INIT_STD = 0.02
NETWORKS = ("g1", "d1", "g2", "d2")


@dataclass
class ModelSpec:
    """Architecture hyperparameters shared by both stages.

    ``base_feature_maps_g`` / ``base_feature_maps_d`` default to ``image_side // 2``
    (64 at side 128, 32 at side 64). Discriminator widths are the baseline
    widths divided by ``disc_reduction_factor``.
    """

    image_side: int = 64
    latent_dim: int = 100
    base_feature_maps_g: Optional[int] = None
    base_feature_maps_d: Optional[int] = None
    disc_reduction_factor: int = 4
    resnet_blocks: int = 6
    dropout_enabled: bool = False
    dropout_rate: float = 0.5
    stage2_latent_enabled: bool = False

    def __post_init__(self):
        side = self.image_side
        if side < 32 or side & (side - 1):
            raise ValueError(f"image_side must be a power of two >= 32, got {side}")
        if self.base_feature_maps_g is None:
            self.base_feature_maps_g = side // 2
        if self.base_feature_maps_d is None:
            self.base_feature_maps_d = side // 2
        if self.disc_reduction_factor < 1:
            raise ValueError("disc_reduction_factor must be >= 1")
        if self.resnet_blocks < 1:
            raise ValueError("resnet_blocks must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**data)

    def disc_widths(self) -> list:
        """Channel widths of the discriminator conv stack, first layer to last."""
        n_layers = int(math.log2(self.image_side // 8)) + 1
        base = max(1, self.base_feature_maps_d // self.disc_reduction_factor)
        return [base * 2 ** i for i in range(n_layers)]


class Network:
    """Named trainable tensors plus non-trainable buffers (running statistics)."""

    def __init__(self, params: Optional[Dict[str, Tensor]] = None,
                 buffers: Optional[Dict[str, np.ndarray]] = None):
        self.params: Dict[str, Tensor] = params or {}
        self.buffers: Dict[str, np.ndarray] = buffers or {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view over params and buffers (buffers prefixed ``buf:``)."""
        out = {k: t.data for k, t in self.params.items()}
        out.update({f"buf:{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "Network":
        params, buffers = {}, {}
        for k, v in arrays.items():
            if k.startswith("buf:"):
                buffers[k[4:]] = np.array(v, dtype=np.float32)
            else:
                params[k] = Tensor(np.array(v, dtype=np.float32), requires_grad=True, name=k)
        return cls(params, buffers)

    def copy(self) -> "Network":
        return Network.from_arrays(self.arrays())

    def astype(self, dtype) -> "Network":
        net = Network(
            {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )
        return net


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.net = Network()

    def weight(self, name, shape):
        w = self.rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        self.net.params[name] = Tensor(w, requires_grad=True, name=name)

    def bias(self, name, n):
        self.net.params[name] = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True, name=name)

    def norm(self, prefix, c, running=False):
        g = self.rng.normal(1.0, INIT_STD, size=c).astype(np.float32)
        self.net.params[f"{prefix}.gamma"] = Tensor(g, requires_grad=True, name=f"{prefix}.gamma")
        self.bias(f"{prefix}.beta", c)
        if running:
            self.net.buffers[f"{prefix}.running_mean"] = np.zeros(c, dtype=np.float32)
            self.net.buffers[f"{prefix}.running_var"] = np.ones(c, dtype=np.float32)


def _g1_layout(spec: ModelSpec):
    """(in, out) channel pairs of the stage-1 upsampling blocks."""
    n_blocks = int(math.log2(spec.image_side // 4)) - 1
    c = 8 * spec.base_feature_maps_g
    blocks = []
    for _ in range(n_blocks):
        blocks.append((c, max(1, c // 2)))
        c = max(1, c // 2)
    return 8 * spec.base_feature_maps_g, blocks, c


def init_stage1_generator(spec: ModelSpec, rng) -> Network:
    init = _Init(rng)
    c0, blocks, c_last = _g1_layout(spec)
    init.weight("proj.weight", (spec.latent_dim, c0, 4, 4))
    init.norm("proj.bn", c0, running=True)
    for i, (cin, cout) in enumerate(blocks):
        init.weight(f"up{i}.weight", (cin, cout, 4, 4))
        init.norm(f"up{i}.bn", cout, running=True)
    init.weight("out.weight", (c_last, 1, 4, 4))
    init.bias("out.bias", 1)
    return init.net


def init_discriminator(spec: ModelSpec, rng, in_channels: int) -> Network:
    init = _Init(rng)
    widths = spec.disc_widths()
    init.weight("in.weight", (widths[0], in_channels, 4, 4))
    for i in range(1, len(widths)):
        init.weight(f"down{i}.weight", (widths[i], widths[i - 1], 4, 4))
        init.norm(f"down{i}.bn", widths[i], running=True)
    init.weight("out.weight", (1, widths[-1], 4, 4))
    init.bias("out.bias", 1)
    return init.net


def init_stage2_generator(spec: ModelSpec, rng) -> Network:
    init = _Init(rng)
    f = spec.base_feature_maps_g
    init.weight("in.weight", (f, 1, 7, 7))
    init.norm("in.norm", f)
    init.weight("down1.weight", (2 * f, f, 3, 3))
    init.norm("down1.norm", 2 * f)
    init.weight("down2.weight", (4 * f, 2 * f, 3, 3))
    init.norm("down2.norm", 4 * f)
    if spec.stage2_latent_enabled:
        init.weight("z2.weight", (4 * f, spec.latent_dim))
        init.bias("z2.bias", 4 * f)
    for i in range(spec.resnet_blocks):
        init.weight(f"res{i}.conv1.weight", (4 * f, 4 * f, 3, 3))
        init.norm(f"res{i}.norm1", 4 * f)
        init.weight(f"res{i}.conv2.weight", (4 * f, 4 * f, 3, 3))
        init.norm(f"res{i}.norm2", 4 * f)
    init.weight("up1.weight", (4 * f, 2 * f, 4, 4))
    init.norm("up1.norm", 2 * f)
    init.weight("up2.weight", (2 * f, f, 4, 4))
    init.norm("up2.norm", f)
    init.weight("out.weight", (1, f, 7, 7))
    init.bias("out.bias", 1)
    return init.net


def init_params(spec: ModelSpec, seed: int) -> Dict[str, Network]:
    """Fresh, independent parameter sets for g1, d1, g2 and d2.

    Conv and linear weights ~ N(0, 0.02), norm gammas ~ N(1, 0.02), betas and
    biases 0. Each network draws from its own stream seeded by (seed, index).
    """
    rngs = {name: np.random.default_rng([seed, i]) for i, name in enumerate(NETWORKS)}
    return {
        "g1": init_stage1_generator(spec, rngs["g1"]),
        "d1": init_discriminator(spec, rngs["d1"], in_channels=1),
        "g2": init_stage2_generator(spec, rngs["g2"]),
        "d2": init_discriminator(spec, rngs["d2"], in_channels=2),
    }


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _bn(x, net: Network, prefix: str, training: bool):
    return nd.batch_norm2d(
        x, net[f"{prefix}.gamma"], net[f"{prefix}.beta"],
        net.buffers.get(f"{prefix}.running_mean"), net.buffers.get(f"{prefix}.running_var"),
        training=training,
    )


def _in(x, net: Network, prefix: str):
    return nd.instance_norm2d(x, net[f"{prefix}.gamma"], net[f"{prefix}.beta"])


def sample_latent(n: int, latent_dim: int, rng: np.random.Generator) -> Tensor:
    """N x L standard-normal latent batch."""
    return Tensor(rng.standard_normal((n, latent_dim)).astype(np.float32))


def stage1_generator(z: Tensor, net: Network, spec: ModelSpec, training: bool = True) -> Tensor:
    """Latent batch (N x L) -> edge images (N x 1 x side x side) in (-1, 1)."""
    if z.ndim != 2 or z.shape[1] != spec.latent_dim:
        raise ShapeError(f"stage1_generator: expected z of shape (N, {spec.latent_dim}), got {z.shape}",
                         dim="latent_dim")
    x = nd.reshape(z, (z.shape[0], spec.latent_dim, 1, 1))
    x = nd.relu(_bn(nd.conv_transpose2d(x, net["proj.weight"]), net, "proj.bn", training))
    i = 0
    while f"up{i}.weight" in net.params:
        x = nd.conv_transpose2d(x, net[f"up{i}.weight"], stride=2, padding=1)
        x = nd.relu(_bn(x, net, f"up{i}.bn", training))
        i += 1
    x = nd.conv_transpose2d(x, net["out.weight"], net["out.bias"], stride=2, padding=1)
    return nd.tanh(x)


def discriminator(img: Tensor, net: Network, training: bool = True) -> Tensor:
    """Conv stack -> one raw logit per sample (N x 1); no sigmoid."""
    if img.shape[1] != net["in.weight"].shape[1]:
        raise ShapeError(f"discriminator: expected {net['in.weight'].shape[1]} input channels, "
                         f"got {img.shape[1]}", dim="C")
    x = nd.leaky_relu(nd.conv2d(img, net["in.weight"], stride=2, padding=1))
    i = 1
    while f"down{i}.weight" in net.params:
        x = nd.conv2d(x, net[f"down{i}.weight"], stride=2, padding=1)
        x = nd.leaky_relu(_bn(x, net, f"down{i}.bn", training))
        i += 1
    x = nd.conv2d(x, net["out.weight"], net["out.bias"])
    return nd.reshape(x, (img.shape[0], 1))


def stage1_discriminator(img: Tensor, net: Network, training: bool = True) -> Tensor:
    return discriminator(img, net, training)


def stage2_discriminator(edge: Tensor, gray: Tensor, net: Network, training: bool = True) -> Tensor:
    """Conditional adversary over the channel concatenation [edge, gray]."""
    if edge.shape != gray.shape:
        raise ShapeError(f"stage2_discriminator: edge {edge.shape} and gray {gray.shape} differ", dim="shape")
    return discriminator(nd.concat([edge, gray], axis=1), net, training)


def stage2_encode(edge: Tensor, net: Network) -> Tensor:
    x = nd.conv2d(nd.reflect_pad2d(edge, 3), net["in.weight"])
    x = nd.relu(_in(x, net, "in.norm"))
    x = nd.relu(_in(nd.conv2d(x, net["down1.weight"], stride=2, padding=1), net, "down1.norm"))
    x = nd.relu(_in(nd.conv2d(x, net["down2.weight"], stride=2, padding=1), net, "down2.norm"))
    return x


def residual_block(x: Tensor, net: Network, i: int, spec: ModelSpec, training: bool,
                   rng: Optional[np.random.Generator]) -> Tensor:
    h = nd.conv2d(nd.reflect_pad2d(x, 1), net[f"res{i}.conv1.weight"])
    h = nd.relu(_in(h, net, f"res{i}.norm1"))
    if spec.dropout_enabled:
        h = nd.dropout(h, spec.dropout_rate, rng, training)
    h = nd.conv2d(nd.reflect_pad2d(h, 1), net[f"res{i}.conv2.weight"])
    h = _in(h, net, f"res{i}.norm2")
    return nd.add(x, h)


def stage2_decode(x: Tensor, net: Network) -> Tensor:
    x = nd.relu(_in(nd.conv_transpose2d(x, net["up1.weight"], stride=2, padding=1), net, "up1.norm"))
    x = nd.relu(_in(nd.conv_transpose2d(x, net["up2.weight"], stride=2, padding=1), net, "up2.norm"))
    x = nd.conv2d(nd.reflect_pad2d(x, 3), net["out.weight"], net["out.bias"])
    return nd.tanh(x)


def stage2_generator(edge: Tensor, net: Network, spec: ModelSpec, z2: Optional[Tensor] = None,
                     training: bool = True, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Edge images -> grayscale images of the same shape, in (-1, 1).

    ``z2`` is required when ``spec.stage2_latent_enabled``; it is mapped
    linearly and broadcast-added to the innermost feature map. ``rng`` drives
    dropout in training mode.
    """
    side = spec.image_side
    if edge.ndim != 4 or edge.shape[1] != 1 or edge.shape[2] != side or edge.shape[3] != side:
        raise ShapeError(f"stage2_generator: expected N x 1 x {side} x {side} edges, got {edge.shape}",
                         dim="H")
    x = stage2_encode(edge, net)
    if spec.stage2_latent_enabled:
        if z2 is None:
            raise ValueError("stage2_generator: z2 is required when stage2_latent_enabled")
        if z2.shape != (edge.shape[0], spec.latent_dim):
            raise ShapeError(f"stage2_generator: z2 must be ({edge.shape[0]}, {spec.latent_dim})",
                             dim="latent_dim")
        shift = nd.linear(z2, net["z2.weight"], net["z2.bias"])
        x = nd.add(x, nd.reshape(shift, (edge.shape[0], shift.shape[1], 1, 1)))
    for i in range(spec.resnet_blocks):
        x = residual_block(x, net, i, spec, training, rng)
    return stage2_decode(x, net)
