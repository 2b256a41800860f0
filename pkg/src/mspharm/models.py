"""Network architectures and the multi-stage prediction (MSP) composer.

Single networks map an 11^3 input patch to an 11^3 target patch (19^3 for
2x super-resolution targets). They are plain stacks of 3D convolutions; a
layer may carry channel groups, which restricts its kernel to a
block-diagonal pattern so that each group is processed by its own tower.

The MSP for target ``T`` runs every single network (first stage), feeds the
last feature map ``z_i`` of each non-target network through a two-layer
connection network ``N_iT`` and blends::

    y2_T = (1 - a) * y1_T + a / (P - 1) * (sum_{i != T} N_iT(z_i) + y1_T)

Checkpoint file (little-endian)::

    "MSPC" u32 version=1 u32 desc_len  desc_json
    u32 n_tensors  { u32 ndim  u32 dims[ndim]  f32 data }*

Tensors follow ``model.parameters()`` order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .patches import INPUT_SIZE, target_size
from .sh import channel_groups
from .tensor import ShapeError, Tensor
from .volume import FormatError

ARCHS = ("cnnrish5", "shresnet7", "diqt")
DEFAULT_WIDTHS = {"cnnrish5": 32, "shresnet7": 32, "diqt": 48}
RESIDUAL_INIT_GAIN = 0.25
CHECKPOINT_MAGIC = b"MSPC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int
    k: int = 3
    stride: int = 1
    pad: int = 1
    activation: str = "relu"
    residual: bool = False
    in_groups: tuple[int, ...] | None = None
    out_groups: tuple[int, ...] | None = None

    def out_extent(self, n: int) -> int:
        if self.kind == "conv3d":
            return T.conv_output_extent(n, self.k, self.stride, self.pad)
        if self.kind == "transposed_conv3d":
            return T.transposed_output_extent(n, self.k, self.stride, self.pad)
        raise ValueError(f"unknown layer kind {self.kind!r}")


def _conv(out, act="relu", **kw) -> LayerSpec:
    return LayerSpec("conv3d", out, activation=act, **kw)


def _upconv(out, act="relu") -> LayerSpec:
    return LayerSpec("transposed_conv3d", out, k=3, stride=2, pad=2, activation=act)


def _downconv(out, act="relu") -> LayerSpec:
    return LayerSpec("conv3d", out, k=3, stride=2, pad=2, activation=act)


@dataclass
class NetworkSpec:
    """Layer list plus the spatial contract it must satisfy."""

    arch: str
    in_channels: int
    layers: list[LayerSpec]
    sr: bool = False
    input_extent: int = INPUT_SIZE
    role: str = "single"
    tap: str = "post"

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else _layer_from_json(l) for l in self.layers]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def extents(self) -> list[int]:
        """Spatial extent after each layer."""
        n, out = self.input_extent, []
        for layer in self.layers:
            n = layer.out_extent(n)
            out.append(n)
        return out

    @property
    def output_extent(self) -> int:
        return self.extents()[-1]

    @property
    def feature_channels(self) -> int:
        return self.layers[-2].out_channels if len(self.layers) > 1 else self.in_channels

    @property
    def feature_extent(self) -> int:
        return self.extents()[-2] if len(self.layers) > 1 else self.input_extent

    def validate(self) -> None:
        if not self.layers:
            raise ValueError(f"{self.arch}: no layers")
        if self.tap not in ("post", "pre"):
            raise ValueError(f"{self.arch}: tap must be 'post' or 'pre'")
        ext = self.extents()
        if min(ext) < 1:
            raise ShapeError(f"{self.arch}: non-positive extent in {ext}")
        if self.role in ("single", "connection", "head") and self.layers[-1].activation != "none":
            raise ValueError(f"{self.arch}: last layer must have no activation")
        if self.role == "single":
            want = target_size(2 if self.sr else 1, self.input_extent)
            if ext[-1] != want:
                raise ShapeError(f"{self.arch}: maps {self.input_extent}^3 to {ext[-1]}^3, expected {want}^3")
        c, n = self.in_channels, self.input_extent
        for i, layer in enumerate(self.layers):
            if layer.activation not in ("relu", "none"):
                raise ValueError(f"{self.arch} layer {i}: unknown activation {layer.activation!r}")
            if layer.in_groups is not None:
                if sum(layer.in_groups) != c or layer.out_groups is None or \
                        len(layer.out_groups) != len(layer.in_groups) or sum(layer.out_groups) != layer.out_channels:
                    raise ValueError(f"{self.arch} layer {i}: inconsistent channel groups")
            if layer.residual and (layer.out_channels != c or ext[i] != n):
                raise ShapeError(f"{self.arch} layer {i}: residual needs matching shapes")
            c, n = layer.out_channels, ext[i]

    def to_json(self) -> dict:
        d = asdict(self)
        d["layers"] = [_layer_to_json(l) for l in self.layers]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def _layer_to_json(l: LayerSpec) -> dict:
    d = asdict(l)
    for key in ("in_groups", "out_groups"):
        if d[key] is not None:
            d[key] = list(d[key])
    return d


def _layer_from_json(d: dict) -> LayerSpec:
    d = dict(d)
    for key in ("in_groups", "out_groups"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return LayerSpec(**d)


def _group_mask(layer: LayerSpec, in_channels: int) -> np.ndarray | None:
    if layer.in_groups is None:
        return None
    shape = (layer.out_channels, in_channels) if layer.kind == "conv3d" else (in_channels, layer.out_channels)
    mask = np.zeros(shape + (layer.k,) * 3, dtype=np.float32)
    i0 = o0 = 0
    for gi, go in zip(layer.in_groups, layer.out_groups):
        if layer.kind == "conv3d":
            mask[o0:o0 + go, i0:i0 + gi] = 1
        else:
            mask[i0:i0 + gi, o0:o0 + go] = 1
        i0, o0 = i0 + gi, o0 + go
    return mask


def _seed_rng(seed, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, path)])))


class ConvNet:
    """A stack of convolution layers with explicit parameter tensors."""

    def __init__(self, spec: NetworkSpec, params: list[Tensor] | None = None, init_seed: int = 0):
        spec.validate()
        self.spec = spec
        chans = [spec.in_channels] + [l.out_channels for l in spec.layers]
        self.masks = [_group_mask(l, chans[i]) for i, l in enumerate(spec.layers)]
        if params is None:
            params = self._init(init_seed, chans)
        expected = [s for i, l in enumerate(spec.layers) for s in self._param_shapes(l, chans[i])]
        if [p.shape for p in params] != expected:
            raise ShapeError(f"{spec.arch}: parameter shapes {[p.shape for p in params]} != {expected}")
        self.params = params

    @staticmethod
    def _param_shapes(layer: LayerSpec, cin: int):
        k3 = (layer.k,) * 3
        if layer.kind == "conv3d":
            return [(layer.out_channels, cin) + k3, (layer.out_channels,)]
        return [(cin, layer.out_channels) + k3, (layer.out_channels,)]

    def _init(self, seed, chans) -> list[Tensor]:
        rng = _seed_rng(seed, 0)
        params = []
        for i, layer in enumerate(self.spec.layers):
            w_shape, b_shape = self._param_shapes(layer, chans[i])
            fan_in = (max(layer.in_groups) if layer.in_groups else chans[i]) * layer.k ** 3
            if layer.kind == "transposed_conv3d":
                fan_in = max(1, fan_in // layer.stride ** 3)
            gain = 2.0 if layer.activation == "relu" else 1.0
            if layer.residual:
                # keep the variance of a residual sum close to its input
                gain *= RESIDUAL_INIT_GAIN
            w = rng.standard_normal(w_shape) * np.sqrt(gain / fan_in)
            if self.masks[i] is not None:
                w = w * self.masks[i]
            params += [Tensor(w, requires_grad=True), Tensor(np.zeros(b_shape), requires_grad=True)]
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(output, feature)`` where ``feature`` is the penultimate layer's activation."""
        spec = self.spec
        if x.ndim not in (4, 5) or x.shape[-4] != spec.in_channels or \
                x.shape[-3:] != (spec.input_extent,) * 3:
            raise ShapeError(f"{spec.arch}: expected [.., {spec.in_channels}, "
                             f"{spec.input_extent}^3] input, got {x.shape}")
        h, feature = x, x
        last = len(spec.layers) - 1
        for i, layer in enumerate(spec.layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            if self.masks[i] is not None:
                w = T.mul_const(w, self.masks[i])
            op = T.conv3d if layer.kind == "conv3d" else T.transposed_conv3d
            pre = op(h, w, b, layer.stride, layer.pad)
            out = T.relu(pre) if layer.activation == "relu" else pre
            if layer.residual:
                out = T.add(out, h)
            if i == last - 1:
                feature = pre if spec.tap == "pre" else out
            h = out
        return h, feature

    __call__ = forward


# ---------------------------------------------------------------------------
# single-network baselines


def single_spec(arch: str, c_in: int, c_out: int, sr: bool = False, width: int | None = None,
                tap: str = "post") -> NetworkSpec:
    """Layer layout of one stand-in baseline."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    if c_in < 1 or c_out < 1:
        raise ValueError("channel counts must be >= 1")
    w = width or DEFAULT_WIDTHS[arch]
    if arch == "cnnrish5":
        layers = [_conv(w), _conv(w), _conv(w), _upconv(w) if sr else _conv(w), _conv(c_out, "none")]
    elif arch == "diqt":
        layers = [_conv(w) for _ in range(7)] + [_conv(c_out, "none")]
        if sr:
            layers[4] = _upconv(w)
    else:
        groups = tuple(channel_groups(c_in))
        tower = max(2, w // len(groups))
        tgroups = (tower,) * len(groups)
        layers = [
            _conv(tower * len(groups), in_groups=groups, out_groups=tgroups),
            _conv(tower * len(groups), in_groups=tgroups, out_groups=tgroups, residual=True),
            _conv(w),
            _conv(w, residual=True),
            _conv(w, residual=True),
            _upconv(w) if sr else _conv(w, residual=True),
            _conv(c_out, "none"),
        ]
    return NetworkSpec(arch, c_in, layers, sr=sr, tap=tap)


class SingleNet:
    """One platform's predictor ``N_i``; exposes the prediction and its last feature map."""

    kind = "single"

    def __init__(self, net: ConvNet, target: int):
        self.net = net
        self.target = target

    @property
    def spec(self) -> NetworkSpec:
        return self.net.spec

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {"single": self.parameters()}

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.net.forward(x)

    def predict(self, x: Tensor) -> Tensor:
        return self.net.forward(x)[0]

    def supervised_outputs(self, x: Tensor) -> list[tuple[int, Tensor]]:
        return [(self.target, self.predict(x))]

    def descriptor(self) -> dict:
        return {"kind": "single", "target": self.target, "spec": self.spec.to_json()}


def build_single(arch: str, c_in: int, c_out: int, sr: bool = False, init_seed: int = 0,
                 width: int | None = None, target: int = 1, tap: str = "post") -> SingleNet:
    return SingleNet(ConvNet(single_spec(arch, c_in, c_out, sr, width, tap), init_seed=init_seed), target)


def forward_single(net: SingleNet, x: Tensor) -> tuple[Tensor, Tensor]:
    return net.forward(x)


# ---------------------------------------------------------------------------
# connection networks and the MSP


def connection_spec(in_channels: int, in_extent: int, out_channels: int, out_extent: int,
                    width: int | None = None) -> NetworkSpec:
    """Two-layer resampler from a donor feature map to a target patch."""
    w = width or in_channels
    if in_extent == out_extent:
        first = _conv(w)
    elif T.transposed_output_extent(in_extent, 3, 2, 2) == out_extent:
        first = _upconv(w)
    elif T.conv_output_extent(in_extent, 3, 2, 2) == out_extent:
        first = _downconv(w)
    else:
        raise ShapeError(f"no two-layer resampler maps {in_extent}^3 to {out_extent}^3")
    return NetworkSpec("connection", in_channels, [first, _conv(out_channels, "none")],
                       input_extent=in_extent, role="connection")


class MspModel:
    """Pre-trained single networks plus connection networks for one target."""

    kind = "msp"

    def __init__(self, target: int, nets: dict[int, SingleNet], connections: dict[int, ConvNet],
                 alpha: float = 0.0):
        if target not in nets:
            raise ValueError(f"no single network for target platform {target}")
        if set(connections) != set(nets) - {target}:
            raise ValueError("need exactly one connection network per non-target platform")
        out_shape = (nets[target].spec.out_channels, nets[target].spec.output_extent)
        for i, conn in connections.items():
            donor = nets[i].spec
            if (conn.spec.in_channels, conn.spec.input_extent) != (donor.feature_channels, donor.feature_extent):
                raise ShapeError(f"connection {i}->{target} does not consume z_{i}")
            if (conn.spec.out_channels, conn.spec.output_extent) != out_shape:
                raise ShapeError(f"connection {i}->{target} output does not match the target patch")
        self.target = target
        self.nets = dict(sorted(nets.items()))
        self.connections = dict(sorted(connections.items()))
        self.alpha = float(alpha)
        _check_alpha(self.alpha)

    @property
    def n_platforms(self) -> int:
        return len(self.nets) + 1

    def parameters(self) -> list[Tensor]:
        return [p for n in self.nets.values() for p in n.parameters()] + \
            [p for c in self.connections.values() for p in c.parameters()]

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {
            "single": [p for n in self.nets.values() for p in n.parameters()],
            "connection": [p for c in self.connections.values() for p in c.parameters()],
        }

    def forward(self, x: Tensor, alpha: float | None = None) -> tuple[dict[int, Tensor], Tensor]:
        """First-stage predictions for every platform and the blended target prediction."""
        alpha = self.alpha if alpha is None else float(alpha)
        _check_alpha(alpha)
        stage1, feats = {}, {}
        for i, net in self.nets.items():
            stage1[i], feats[i] = net.forward(x)
        y1 = stage1[self.target]
        total = y1
        for i, conn in self.connections.items():
            out = conn.forward(feats[i])[0]
            if out.shape != y1.shape:
                raise ShapeError(f"connection {i} output {out.shape} != target prediction {y1.shape}")
            total = T.add(total, out)
        mean = T.scale(total, 1.0 / (self.n_platforms - 1))
        return stage1, T.linear_blend(y1, mean, alpha)

    def predict(self, x: Tensor) -> Tensor:
        return self.forward(x)[1]

    def supervised_outputs(self, x: Tensor) -> list[tuple[int, Tensor]]:
        stage1, stage2 = self.forward(x)
        return list(stage1.items()) + [(self.target, stage2)]

    def descriptor(self) -> dict:
        return {
            "kind": "msp",
            "target": self.target,
            "alpha": self.alpha,
            "nets": {str(i): n.spec.to_json() for i, n in self.nets.items()},
            "connections": {str(i): c.spec.to_json() for i, c in self.connections.items()},
        }


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def msp_forward(msp: MspModel, x: Tensor, alpha: float | None = None):
    stage1, stage2 = msp.forward(x, alpha)
    return [stage1[i] for i in sorted(stage1)], stage2


def build_msp(nets, target: int, connection_seed: int = 0, n_platforms: int | None = None) -> MspModel:
    """Compose trained single networks (platforms 1..P-1) into an MSP with alpha = 0."""
    if not isinstance(nets, dict):
        nets = {i + 1: n for i, n in enumerate(nets)}
    n_platforms = n_platforms or len(nets) + 1
    missing = sorted(set(range(1, n_platforms)) - set(nets))
    if missing:
        raise ValueError(f"missing single networks for platforms {missing}")
    if target not in nets:
        raise ValueError(f"target {target} outside platforms 1..{n_platforms - 1}")
    tspec = nets[target].spec
    conns = {}
    for i, net in nets.items():
        if i == target:
            continue
        spec = connection_spec(net.spec.feature_channels, net.spec.feature_extent,
                               tspec.out_channels, tspec.output_extent)
        conns[i] = ConvNet(spec, init_seed=int(np.random.SeedSequence([connection_seed, i]).generate_state(1)[0]))
    return MspModel(target, nets, conns, alpha=0.0)


# ---------------------------------------------------------------------------
# off-the-shelf multi-task baselines


def _head_spec(width: int, c_out: int, sr: bool) -> NetworkSpec:
    layers = [_upconv(width), _conv(c_out, "none")] if sr else [_conv(c_out, "none")]
    return NetworkSpec("head", width, layers, role="head")


def _trunk_spec(name: str, c_in: int, width: int, depth: int) -> NetworkSpec:
    return NetworkSpec(name, c_in, [_conv(width) for _ in range(depth)], role="trunk")


class _MultiHead:
    """Shared plumbing of CPM and HNED: ordered trunks and one head per platform."""

    def __init__(self, target: int, platforms: list[int], trunks: list[ConvNet], heads: list[ConvNet]):
        if target not in platforms:
            raise ValueError(f"target {target} not among predicted platforms {platforms}")
        self.target = target
        self.platforms = list(platforms)
        self.trunks = trunks
        self.heads = heads

    def parameters(self) -> list[Tensor]:
        return [p for part in self.trunks + self.heads for p in part.parameters()]

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {"single": self.parameters()}

    def predict(self, x: Tensor) -> Tensor:
        return self.forward(x)[self.target]

    def supervised_outputs(self, x: Tensor) -> list[tuple[int, Tensor]]:
        return list(self.forward(x).items())

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "platforms": self.platforms,
            "trunks": [t.spec.to_json() for t in self.trunks],
            "heads": [h.spec.to_json() for h in self.heads],
        }


class CpmModel(_MultiHead):
    """Sequential stages in ascending platform order; stage k sees x and stage k-1's features."""

    kind = "cpm"

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        axis = x.ndim - 4
        outs, prev = {}, None
        for p, trunk, head in zip(self.platforms, self.trunks, self.heads):
            inp = x if prev is None else T.concat([x, prev], axis=axis)
            prev = trunk.forward(inp)[0]
            outs[p] = head.forward(prev)[0]
        return outs


class HnedModel(_MultiHead):
    """One trunk with a side-output head after each successive block."""

    kind = "hned"

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        outs, h = {}, x
        for p, block, head in zip(self.platforms, self.trunks, self.heads):
            h = block.forward(h)[0]
            outs[p] = head.forward(h)[0]
        return outs


def _multitask_parts(kind, channels, scales, width, depth, seed):
    platforms = sorted(scales)
    trunks, heads = [], []
    for n, p in enumerate(platforms):
        if n == 0:
            c_in = channels
        else:
            c_in = channels + width if kind == "cpm" else width
        trunks.append(ConvNet(_trunk_spec(f"{kind}-trunk{p}", c_in, width, depth), init_seed=_part_seed(seed, 2 * n)))
        heads.append(ConvNet(_head_spec(width, channels, scales[p] == 2), init_seed=_part_seed(seed, 2 * n + 1)))
    return platforms, trunks, heads


def _part_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), 7, k]).generate_state(1)[0])


def _scales(specs, n_platforms):
    if isinstance(specs, dict):
        return {int(k): int(v) for k, v in specs.items()}
    scales = list(specs) if specs is not None else [1] * (n_platforms - 1)
    return {i + 1: int(s) for i, s in enumerate(scales)}


def build_cpm(specs, n_platforms: int, target: int, channels: int = 6, width: int = 32, depth: int = 3,
              init_seed: int = 0) -> CpmModel:
    """``specs`` gives each target platform's grid scale (list for platforms 1.. or dict)."""
    if n_platforms < 2:
        raise ValueError("need P >= 2")
    plats, trunks, heads = _multitask_parts("cpm", channels, _scales(specs, n_platforms), width, depth, init_seed)
    return CpmModel(target, plats, trunks, heads)


def build_hned(specs, n_platforms: int, target: int, channels: int = 6, width: int = 32, depth: int = 2,
               init_seed: int = 0) -> HnedModel:
    if n_platforms < 2:
        raise ValueError("need P >= 2")
    plats, trunks, heads = _multitask_parts("hned", channels, _scales(specs, n_platforms), width, depth, init_seed)
    return HnedModel(target, plats, trunks, heads)


# ---------------------------------------------------------------------------
# checkpoints


def _from_descriptor(desc: dict, tensors: list[Tensor]):
    it = iter(tensors)

    def net(spec_json):
        spec = NetworkSpec.from_json(spec_json)
        n = 2 * len(spec.layers)
        return ConvNet(spec, [next(it) for _ in range(n)])

    kind = desc["kind"]
    if kind == "single":
        model = SingleNet(net(desc["spec"]), desc["target"])
    elif kind == "msp":
        nets = {int(i): SingleNet(net(s), int(i)) for i, s in sorted(desc["nets"].items(), key=lambda kv: int(kv[0]))}
        conns = {int(i): net(s) for i, s in sorted(desc["connections"].items(), key=lambda kv: int(kv[0]))}
        model = MspModel(desc["target"], nets, conns, desc["alpha"])
    elif kind in ("cpm", "hned"):
        trunks = [net(s) for s in desc["trunks"]]
        heads = [net(s) for s in desc["heads"]]
        cls = CpmModel if kind == "cpm" else HnedModel
        model = cls(desc["target"], desc["platforms"], trunks, heads)
    else:
        raise FormatError(f"unknown model kind {kind!r}")
    if next(it, None) is not None:
        raise FormatError("checkpoint holds more tensors than the descriptor declares")
    return model


def checkpoint_bytes(model) -> bytes:
    desc = json.dumps(model.descriptor(), sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<2I", CHECKPOINT_VERSION, len(desc)), desc]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        parts.append(struct.pack(f"<{1 + p.ndim}I", p.ndim, *p.shape))
        parts.append(p.data.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(buf: bytes):
    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, dlen = struct.unpack("<2I", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    desc = json.loads(take(dlen, "descriptor"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * n, "tensor data"), dtype="<f4").reshape(shape)
        tensors.append(Tensor(data.astype(np.float32), requires_grad=True))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return _from_descriptor(desc, tensors)


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


def load_params_into(model, other) -> None:
    """Copy parameter values from ``other`` (same structure) into ``model``."""
    mine, theirs = model.parameters(), other.parameters()
    if [p.shape for p in mine] != [p.shape for p in theirs]:
        raise ShapeError("models have different parameter layouts")
    for a, b in zip(mine, theirs):
        a.data = b.data.copy()
