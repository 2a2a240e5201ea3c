"""Declarative network construction and forward execution.

Axis convention, used everywhere: tensors are (batch, channel, z, y, x) with
z the through-plane axis. Grid arguments named `grid_xyz` are given in the
printed (x, y, z) order of the architecture tables and are reversed
internally. Stride/kernel triplets from the tables are likewise printed as
(x, y, z) and stored reversed. Rank-2 networks are the same designs with the
y axis removed: spatial dims (z, x).

The latent code is always exactly 64-dimensional regardless of the width
multiplier; the multiplier scales the other channel counts, rounding up to a
minimum of 4 (the single-channel bottleneck convs are structural and stay
at 1).
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .seeding import rng_for
from .tenio import read_ten, write_ten

CODE_DIM = 64


class SpecError(ValueError):
    """The requested input grid is not reachable by the network's stride ladder."""


@dataclass
class LayerSpec:
    kind: str  # conv | deconv | fc | reshape
    channels: int = 0  # output channels (fc: output width)
    kernel: tuple = ()
    stride: tuple = ()
    padding: tuple = ()
    batch_norm: bool = False
    activation: str = "none"  # relu | none
    skip_from: int = -1  # index of an earlier layer concatenated onto the input
    reshape_to: tuple = ()  # (C, *spatial) for reshape layers


@dataclass
class NetworkSpec:
    kind: str
    spatial_rank: int
    width_multiplier: float
    in_channels: int
    in_spatial: tuple  # (z, y, x) / (z, x)
    layers: list = field(default_factory=list)
    # resolved during construction: per-layer (channels, *spatial) output shapes
    shapes: list = field(default_factory=list)


def scaled(base_channels, multiplier):
    if base_channels == 1:
        return 1
    return max(4, int(round(base_channels * multiplier)))


def _rank_tuple(full_zyx, rank):
    """Drop the y component of a (z, y, x) design tuple for rank-2 networks."""
    return tuple(full_zyx) if rank == 3 else (full_zyx[0], full_zyx[2])


def conv_out(sp, kernel, stride, padding):
    out = []
    for i, ext in enumerate(sp):
        num = ext + 2 * padding[i] - kernel[i]
        if num < 0:
            raise SpecError(f"extent {ext} too small for kernel {kernel[i]}")
        out.append(num // stride[i] + 1)
    return tuple(out)


def deconv_out(sp, kernel, stride, padding):
    out = []
    for i, ext in enumerate(sp):
        o = (ext - 1) * stride[i] - 2 * padding[i] + kernel[i]
        if o < 1:
            raise SpecError(f"transposed extent {o} < 1")
        out.append(o)
    return tuple(out)


def resolve_shapes(spec):
    """Fill spec.shapes with per-layer (channels, *spatial) outputs."""
    spec.shapes = []
    ch, sp = spec.in_channels, tuple(spec.in_spatial)
    for layer in spec.layers:
        if layer.skip_from >= 0:
            sk_ch, sk_sp = spec.shapes[layer.skip_from][0], spec.shapes[layer.skip_from][1:]
            if sk_sp != sp:
                raise SpecError(
                    f"skip source spatial {sk_sp} does not match input {sp}"
                )
            ch = ch + sk_ch
        if layer.kind == "conv":
            sp = conv_out(sp, layer.kernel, layer.stride, layer.padding)
            ch = layer.channels
        elif layer.kind == "deconv":
            sp = deconv_out(sp, layer.kernel, layer.stride, layer.padding)
            ch = layer.channels
        elif layer.kind == "fc":
            sp = ()
            ch = layer.channels
        elif layer.kind == "reshape":
            ch, sp = layer.reshape_to[0], tuple(layer.reshape_to[1:])
        else:
            raise SpecError(f"unknown layer kind {layer.kind!r}")
        spec.shapes.append((ch,) + sp)
    return spec


class Network:
    """A NetworkSpec instantiated with named parameter tensors."""

    def __init__(self, spec, seed, name):
        self.spec = spec
        self.name = name
        self.seed = seed
        self.params = {}
        self.running = {}
        self._init_params(seed)

    def _init_params(self, seed):
        ch = self.spec.in_channels
        for i, layer in enumerate(self.spec.layers):
            if layer.skip_from >= 0:
                ch += self.spec.shapes[layer.skip_from][0]
            rng = rng_for(seed, f"init/{self.name}/l{i:02d}")
            prefix = f"l{i:02d}"
            if layer.kind in ("conv", "deconv"):
                if layer.kind == "conv":
                    kshape = (layer.channels, ch) + layer.kernel
                else:
                    kshape = (ch, layer.channels) + layer.kernel
                fan_in = ch * int(np.prod(layer.kernel))
                limit = np.sqrt(6.0 / fan_in)
                kern = E.Tensor(
                    rng.uniform(-limit, limit, kshape).astype(np.float32),
                    requires_grad=True,
                    name=f"{self.name}.{prefix}.kernel",
                )
                kern.decay = True
                self.params[f"{prefix}.kernel"] = kern
                self.params[f"{prefix}.bias"] = E.Tensor(
                    np.zeros(layer.channels, dtype=np.float32),
                    requires_grad=True,
                    name=f"{self.name}.{prefix}.bias",
                )
                if layer.batch_norm:
                    self.params[f"{prefix}.gamma"] = E.Tensor(
                        np.ones(layer.channels, dtype=np.float32),
                        requires_grad=True,
                        name=f"{self.name}.{prefix}.gamma",
                    )
                    self.params[f"{prefix}.beta"] = E.Tensor(
                        np.zeros(layer.channels, dtype=np.float32),
                        requires_grad=True,
                        name=f"{self.name}.{prefix}.beta",
                    )
                    self.running[prefix] = E.RunningStats(layer.channels)
                ch = layer.channels
            elif layer.kind == "fc":
                in_dim = int(np.prod(self.spec.shapes[i - 1])) if i else int(
                    np.prod((ch,) + tuple(self.spec.in_spatial))
                )
                limit = np.sqrt(6.0 / in_dim)
                w = E.Tensor(
                    rng.uniform(-limit, limit, (in_dim, layer.channels)).astype(np.float32),
                    requires_grad=True,
                    name=f"{self.name}.{prefix}.weight",
                )
                w.decay = True
                self.params[f"{prefix}.weight"] = w
                self.params[f"{prefix}.bias"] = E.Tensor(
                    np.zeros(layer.channels, dtype=np.float32),
                    requires_grad=True,
                    name=f"{self.name}.{prefix}.bias",
                )
                if layer.batch_norm:
                    self.params[f"{prefix}.gamma"] = E.Tensor(
                        np.ones(layer.channels, dtype=np.float32),
                        requires_grad=True,
                        name=f"{self.name}.{prefix}.gamma",
                    )
                    self.params[f"{prefix}.beta"] = E.Tensor(
                        np.zeros(layer.channels, dtype=np.float32),
                        requires_grad=True,
                        name=f"{self.name}.{prefix}.beta",
                    )
                    self.running[prefix] = E.RunningStats(layer.channels)
                ch = layer.channels
            elif layer.kind == "reshape":
                ch = layer.reshape_to[0]

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = flag

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def param_hash(self):
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        for k in sorted(self.running):
            h.update(self.running[k].mean.tobytes())
            h.update(self.running[k].var.tobytes())
        return h.hexdigest()

    def forward(self, x, training=False):
        """Run the network on (B, C, *spatial) input; returns the output tensor."""
        expect = (self.spec.in_channels,) + tuple(self.spec.in_spatial)
        if tuple(x.shape[1:]) != expect:
            raise E.ShapeError(
                f"{self.name}: input shape {tuple(x.shape[1:])} != expected {expect}"
            )
        outputs = []
        cur = x
        for i, layer in enumerate(self.spec.layers):
            if layer.skip_from >= 0:
                cur = E.concat(cur, outputs[layer.skip_from], axis=1)
            prefix = f"l{i:02d}"
            if layer.kind == "conv":
                cur = E.conv_nd(
                    cur, self.params[f"{prefix}.kernel"], layer.stride, layer.padding
                )
                cur = E.add_channel_bias(cur, self.params[f"{prefix}.bias"])
            elif layer.kind == "deconv":
                cur = E.conv_transpose_nd(
                    cur, self.params[f"{prefix}.kernel"], layer.stride, layer.padding
                )
                cur = E.add_channel_bias(cur, self.params[f"{prefix}.bias"])
            elif layer.kind == "fc":
                cur = E.fully_connected(
                    cur, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"]
                )
            elif layer.kind == "reshape":
                cur = E.reshape(cur, (x.shape[0],) + layer.reshape_to)
            if layer.batch_norm:
                cur = E.batch_norm(
                    cur,
                    self.params[f"{prefix}.gamma"],
                    self.params[f"{prefix}.beta"],
                    self.running[prefix],
                    training=training,
                )
            if layer.activation == "relu":
                cur = E.relu(cur)
            outputs.append(cur)
        return cur


# ---------------------------------------------------------------------------
# builders


def _grid_to_spatial(grid_xyz, rank):
    grid_xyz = tuple(int(g) for g in grid_xyz)
    if len(grid_xyz) != rank:
        raise SpecError(f"grid {grid_xyz} does not match spatial rank {rank}")
    return tuple(reversed(grid_xyz))


def _conv(ch, kernel, stride, rank, bn=True, act="relu", skip=-1):
    return LayerSpec(
        kind="conv",
        channels=ch,
        kernel=_rank_tuple(kernel, rank),
        stride=_rank_tuple(stride, rank),
        padding=_rank_tuple((1, 1, 1), rank),
        batch_norm=bn,
        activation=act,
        skip_from=skip,
    )


def _deconv(ch, kernel, stride, padding, rank, bn=True, act="relu", skip=-1):
    return LayerSpec(
        kind="deconv",
        channels=ch,
        kernel=_rank_tuple(kernel, rank),
        stride=_rank_tuple(stride, rank),
        padding=_rank_tuple(padding, rank),
        batch_norm=bn,
        activation=act,
        skip_from=skip,
    )


def build_autoencoder(grid_xyz, width_multiplier=1.0, spatial_rank=3, class_count=3, seed=0):
    """Segmentation-map autoencoder through a 64-dim bottleneck.

    Encoder: four conv scales ending in an FC (no nonlinearity on the code);
    decoder: FC to the bottleneck seed map, then the mirrored deconv ladder
    back to `class_count` logit channels. At width multiplier 1 the encoder
    channel counts are (16, 16, 32, 32, 64, 64, 1).
    """
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    rank, m = spatial_rank, width_multiplier
    sp = _grid_to_spatial(grid_xyz, rank)

    enc = NetworkSpec(
        kind="encoder",
        spatial_rank=rank,
        width_multiplier=m,
        in_channels=class_count,
        in_spatial=sp,
        layers=[
            _conv(scaled(16, m), (3, 3, 3), (1, 2, 2), rank),
            _conv(scaled(16, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(scaled(32, m), (3, 3, 3), (2, 2, 2), rank),
            _conv(scaled(32, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(scaled(64, m), (3, 3, 3), (2, 2, 2), rank),
            _conv(scaled(64, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(1, (3, 3, 3), (3, 3, 3), rank),
            LayerSpec(kind="fc", channels=CODE_DIM, activation="none"),
        ],
    )
    resolve_shapes(enc)
    seed_shape = enc.shapes[-2]  # (1, *spatial) bottleneck map feeding the FC

    dec = NetworkSpec(
        kind="decoder",
        spatial_rank=rank,
        width_multiplier=m,
        in_channels=CODE_DIM,
        in_spatial=(),
        layers=[
            # batch norm before the ReLU: at small grids the seed map shrinks
            # to a handful of units and an unnormalised ReLU chokepoint dies
            LayerSpec(
                kind="fc", channels=int(np.prod(seed_shape)), activation="relu",
                batch_norm=True,
            ),
            LayerSpec(kind="reshape", reshape_to=seed_shape),
            _deconv(scaled(64, m), (7, 7, 7), (3, 3, 3), (2, 2, 2), rank),
            _conv(scaled(64, m), (3, 3, 3), (1, 1, 1), rank),
            _deconv(scaled(32, m), (4, 4, 4), (2, 2, 2), (1, 1, 1), rank),
            _conv(scaled(32, m), (3, 3, 3), (1, 1, 1), rank),
            _deconv(scaled(16, m), (4, 4, 4), (2, 2, 2), (1, 1, 1), rank),
            _conv(scaled(16, m), (3, 3, 3), (1, 1, 1), rank),
            _deconv(scaled(16, m), (1, 4, 4), (1, 2, 2), (0, 1, 1), rank),
            _conv(class_count, (3, 3, 3), (1, 1, 1), rank, bn=False, act="none"),
        ],
    )
    resolve_shapes(dec)
    if dec.shapes[-1] != (class_count,) + sp:
        raise SpecError(
            f"grid {tuple(grid_xyz)} is not reachable by the autoencoder stride "
            f"ladder: decoder reconstructs {dec.shapes[-1][1:]}, input is {sp}"
        )
    return Network(enc, seed, "encoder"), Network(dec, seed, "decoder")


def build_predictor(grid_xyz, width_multiplier=1.0, spatial_rank=3, seed=0):
    """Intensity-to-code network: conv scales (32..256) then FC to 64, no
    nonlinearity on the code."""
    rank, m = spatial_rank, width_multiplier
    sp = _grid_to_spatial(grid_xyz, rank)
    spec = NetworkSpec(
        kind="predictor",
        spatial_rank=rank,
        width_multiplier=m,
        in_channels=1,
        in_spatial=sp,
        layers=[
            _conv(scaled(32, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(scaled(32, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(scaled(64, m), (3, 3, 3), (2, 2, 2), rank),
            _conv(scaled(64, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(scaled(128, m), (3, 3, 3), (2, 2, 2), rank),
            _conv(scaled(128, m), (3, 3, 3), (1, 1, 1), rank),
            _conv(scaled(256, m), (3, 3, 3), (2, 2, 2), rank),
            # batch norm keeps the single-channel ReLU bottleneck from dying
            _conv(1, (3, 3, 3), (1, 1, 1), rank),
            LayerSpec(kind="fc", channels=CODE_DIM, activation="none"),
        ],
    )
    resolve_shapes(spec)
    return Network(spec, seed, "predictor")


def _trunk_layers(m, rank):
    """Shared seg/SR trunk: 3 scales, 2 convs each, in-plane stride-2
    downsampling, skip connections by channel concatenation."""
    return [
        _conv(scaled(16, m), (3, 3, 3), (1, 1, 1), rank),
        _conv(scaled(16, m), (3, 3, 3), (1, 1, 1), rank),  # 1: skip source
        _conv(scaled(32, m), (3, 3, 3), (1, 2, 2), rank),
        _conv(scaled(32, m), (3, 3, 3), (1, 1, 1), rank),  # 3: skip source
        _conv(scaled(64, m), (3, 3, 3), (1, 2, 2), rank),
        _conv(scaled(64, m), (3, 3, 3), (1, 1, 1), rank),
        _deconv(scaled(32, m), (1, 4, 4), (1, 2, 2), (0, 1, 1), rank),
        _conv(scaled(32, m), (3, 3, 3), (1, 1, 1), rank, skip=3),
        _deconv(scaled(16, m), (1, 4, 4), (1, 2, 2), (0, 1, 1), rank),
        _conv(scaled(16, m), (3, 3, 3), (1, 1, 1), rank, skip=1),
    ]


def _upsample_head(out_channels, upsample, rank):
    return _deconv(
        out_channels,
        (upsample, 3, 3),
        (upsample, 1, 1),
        (0, 1, 1),
        rank,
        bn=False,
        act="none",
    )


def _build_trunk_net(kind, grid_xyz, m, rank, out_channels, upsample, seed):
    if upsample < 1:
        raise ValueError(f"upsample factor must be >= 1, got {upsample}")
    sp = _grid_to_spatial(grid_xyz, rank)
    inplane = sp[1:]
    if any(ext % 4 for ext in inplane):
        raise SpecError(
            f"in-plane extents {inplane} must be divisible by 4 for the "
            f"two-scale stride ladder"
        )
    spec = NetworkSpec(
        kind=kind,
        spatial_rank=rank,
        width_multiplier=m,
        in_channels=1,
        in_spatial=sp,
        layers=_trunk_layers(m, rank) + [_upsample_head(out_channels, upsample, rank)],
    )
    resolve_shapes(spec)
    want = (sp[0] * upsample,) + inplane
    if spec.shapes[-1][1:] != want:
        raise SpecError(f"trunk output {spec.shapes[-1][1:]} != expected {want}")
    return Network(spec, seed, kind)


def build_segnet(grid_xyz, width_multiplier=1.0, spatial_rank=3, class_count=3,
                 upsample_factor=1, seed=0):
    """Sub-pixel segmentation net: analysis/synthesis trunk with skips, then a
    transposed-conv head that upsamples through-plane by `upsample_factor`."""
    return _build_trunk_net(
        "segnet", grid_xyz, width_multiplier, spatial_rank, class_count,
        upsample_factor, seed,
    )


def build_srnet(grid_xyz, width_multiplier=1.0, spatial_rank=3, upsample_factor=1, seed=0):
    """Super-resolution net: the segnet trunk with a single-channel intensity
    head; all feature extraction stays on the low-resolution grid."""
    return _build_trunk_net(
        "srnet", grid_xyz, width_multiplier, spatial_rank, 1, upsample_factor, seed
    )


# ---------------------------------------------------------------------------
# label map helpers and single-sample forwards


def one_hot(labels, class_count):
    """Integer label grid -> binary channel-first tensor (C, *sp); channel
    argmax inverts it exactly."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError(
            f"labels must lie in [0, {class_count}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    eye = np.eye(class_count, dtype=np.float32)
    hot = eye[labels.reshape(-1)].reshape(labels.shape + (class_count,))
    hot = np.moveaxis(hot, -1, 0)
    return E.Tensor(np.ascontiguousarray(hot))


def one_hot_batch(label_list, class_count):
    """Stack label grids into a (B, C, *sp) tensor."""
    hots = [one_hot(lab, class_count).data for lab in label_list]
    return E.Tensor(np.stack(hots))


def encode(encoder, seg, training=False):
    """Latent code of a one-hot / softmax segmentation map ((C,*sp) -> (64,))."""
    x = E.Tensor(seg.data[None] if seg.data.ndim == encoder.spec.spatial_rank + 1 else seg.data)
    out = encoder.forward(x, training=training)
    return out.data.reshape(-1, CODE_DIM)[0].copy()


def predict_code(predictor, volume, training=False):
    """Latent code predicted directly from an intensity volume."""
    if isinstance(volume, (np.ndarray, E.Tensor)):
        arr = volume.data if isinstance(volume, E.Tensor) else volume
    else:
        arr = volume.data  # Volume dataclass
    x = E.Tensor(np.asarray(arr, dtype=np.float32)[None, None])
    out = predictor.forward(x, training=training)
    return out.data.reshape(-1, CODE_DIM)[0].copy()


def decode(decoder, code, training=False):
    """Class logits over the autoencoder input grid for a 64-dim code."""
    code = np.asarray(code, dtype=np.float32)
    batched = code.ndim == 2
    x = E.Tensor(code if batched else code[None])
    out = decoder.forward(x, training=training)
    return out if batched else E.Tensor(out.data[0])


def labels_from_logits(logits, batched=False):
    """Channel argmax; ties break to the lowest class index."""
    arr = logits.data if isinstance(logits, E.Tensor) else np.asarray(logits)
    return arr.argmax(axis=1 if batched else 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoints


def _format_args(args):
    parts = []
    for key in sorted(args):
        val = args[key]
        if isinstance(val, (tuple, list)):
            val = ",".join(str(v) for v in val)
        parts.append(f"{key} = {val}")
    return parts


def _parse_value(raw):
    raw = raw.strip()
    if "," in raw:
        return tuple(int(v) for v in raw.split(","))
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            continue
    return raw


BUILDERS = {
    "autoencoder": lambda a: dict(
        zip(("encoder", "decoder"), build_autoencoder(
            a["grid_xyz"], a["width_multiplier"], a["spatial_rank"],
            a["class_count"], a["seed"]))
    ),
    "predictor": lambda a: {
        "predictor": build_predictor(
            a["grid_xyz"], a["width_multiplier"], a["spatial_rank"], a["seed"])
    },
    "segnet": lambda a: {
        "segnet": build_segnet(
            a["grid_xyz"], a["width_multiplier"], a["spatial_rank"],
            a["class_count"], a["upsample_factor"], a["seed"])
    },
    "srnet": lambda a: {
        "srnet": build_srnet(
            a["grid_xyz"], a["width_multiplier"], a["spatial_rank"],
            a["upsample_factor"], a["seed"])
    },
}


def build_from_args(kind, args):
    nets = {}
    if kind == "tl":
        nets.update(BUILDERS["autoencoder"](args))
        nets.update(BUILDERS["predictor"](args))
    else:
        nets.update(BUILDERS[kind](args))
    return nets


def save_checkpoint(directory, kind, args, networks):
    """Manifest (kind + builder args + layer list) plus one .ten per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"kind = {kind}"] + _format_args(args)
    for name, net in sorted(networks.items()):
        lines.append(f"network = {name} params={len(net.params)} "
                     f"count={net.param_count()}")
        for i, layer in enumerate(net.spec.layers):
            lines.append(
                f"#   {name}.l{i:02d} {layer.kind} ch={layer.channels} "
                f"k={layer.kernel} s={layer.stride} bn={int(layer.batch_norm)} "
                f"act={layer.activation} skip={layer.skip_from}"
            )
        for pname, tensor in sorted(net.params.items()):
            fname = f"{name}.{pname}.ten"
            write_ten(directory / fname, tensor.data)
        for rname, stats in sorted(net.running.items()):
            write_ten(directory / f"{name}.{rname}.running_mean.ten", stats.mean)
            write_ten(directory / f"{name}.{rname}.running_var.ten", stats.var)
    (directory / "checkpoint.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = directory / "checkpoint.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    args = {}
    kind = None
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("network ="):
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key == "kind":
            kind = raw.strip()
        else:
            args[key] = _parse_value(raw)
    if kind is None:
        raise ValueError(f"{manifest}: missing 'kind' entry")
    networks = build_from_args(kind, args)
    for name, net in networks.items():
        for pname, tensor in net.params.items():
            arr = read_ten(directory / f"{name}.{pname}.ten")
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint {name}.{pname}: shape {arr.shape} != "
                    f"built {tensor.data.shape}"
                )
            tensor.data = arr
        for rname, stats in net.running.items():
            stats.mean = read_ten(directory / f"{name}.{rname}.running_mean.ten")
            stats.var = read_ten(directory / f"{name}.{rname}.running_var.ten")
    return kind, args, networks
