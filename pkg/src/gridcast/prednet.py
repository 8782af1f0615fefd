"""Predictive-coding stacks and a cascaded-memory baseline.

The main model is a hierarchy of representation cells R_l, prediction convs
and error populations E_l. One step, given the incoming frame A_0:

    top-down:   R_l = cell_l(concat(E_l, upsample(R_{l+1})), state_l)
    bottom-up:  Ahat_l = conv(R_l)   (layer 0: clamp to [0, 1] + mass renorm;
                                      upper layers: ReLU)
                E_l  = concat(ReLU(A_l - Ahat_l), ReLU(Ahat_l - A_l))
                A_{l+1} = maxpool(ReLU(conv(E_l)))

The layer-0 prediction is the output frame. Closed-loop extrapolation feeds
each step's emitted prediction back as the next input, so error populations
stay active while forecasting.

The baseline stack (PredRNNPP) embeds frames by space-to-depth patching,
runs a column of causal LSTM cells with a gradient highway unit after the
first cell and a spatial memory threaded bottom-up within each step (the top
cell's memory re-enters the bottom cell next step), and reads the next frame
out through a 1x1 conv plus depth-to-space.

Checkpoints are a single file: magic "GCKP", a JSON manifest describing the
architecture, then named tensor records.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

import gridcast.tensor as gt
from gridcast.attention import HeadMask
from gridcast.cells import (CausalLSTMCell, CellState, ConvLSTMCell, GHUCell,
                            SAAConvLSTMCell, TAAConvLSTMCell)
from gridcast.tensor import (GridcastError, ShapeError, Tensor, read_tensor,
                             write_tensor)

__all__ = [
    "StackConfig", "PredNet", "PredRNNConfig", "PredRNNPP",
    "desk_stack_config", "full_stack_config", "build_variant",
    "count_params", "save_checkpoint", "load_checkpoint",
]

CELL_KINDS = ("convlstm", "taaconvlstm", "saaconvlstm")


@dataclass(frozen=True)
class StackConfig:
    """Architecture of a predictive-coding stack.

    ``channels[0]`` is both the data channel count and the width of the
    bottom cell; layer l runs on a grid downscaled by 2**l.
    """

    channels: tuple[int, ...]
    cell_kinds: tuple[str, ...]
    grid_hw: tuple[int, int] = (32, 32)
    kernel: tuple[int, ...] | None = None
    n_heads: int = 4
    horizon: int = 4
    att_fraction: float = 0.25
    positional: bool = True
    history_mode: str = "recent"
    history_span: int = 10
    detach_history: bool = False
    gate_param_mode: str = "spatial"
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "cell_kinds", tuple(self.cell_kinds))
        object.__setattr__(self, "grid_hw", tuple(self.grid_hw))
        kernel = self.kernel
        if kernel is None:
            kernel = tuple(3 for _ in self.channels)
        elif isinstance(kernel, int):
            kernel = tuple(kernel for _ in self.channels)
        object.__setattr__(self, "kernel", tuple(kernel))

    def validate(self) -> None:
        L = len(self.channels)
        if L < 2:
            raise ShapeError("stack needs at least two layers")
        if len(self.cell_kinds) != L or len(self.kernel) != L:
            raise ShapeError(
                f"cell_kinds/kernel must have one entry per layer ({L})")
        for kind in self.cell_kinds:
            if kind not in CELL_KINDS:
                raise ShapeError(f"unknown cell kind {kind!r}")
        h, w = self.grid_hw
        down = 2 ** (L - 1)
        if h % down or w % down:
            raise ShapeError(
                f"grid {h}x{w} not divisible by 2^{L - 1} for {L} layers")

    def layer_grid(self, layer: int) -> tuple[int, int]:
        return (self.grid_hw[0] >> layer, self.grid_hw[1] >> layer)

    def as_manifest(self) -> dict:
        return asdict(self)

    @classmethod
    def from_manifest(cls, d: dict) -> "StackConfig":
        d = dict(d)
        for key in ("channels", "cell_kinds", "grid_hw", "kernel"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LayerState:
    cell: CellState
    e: Tensor


def _conv_pair(rng, c_out, c_in, k, dtype):
    sd = (c_in * k * k) ** -0.5
    w = Tensor(rng.normal(0.0, sd, size=(c_out, c_in, k, k)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return w, b


class PredNet:
    """Predictive-coding stack emitting two-channel mass grids."""

    kind = "prednet"

    def __init__(self, cfg: StackConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        L = len(cfg.channels)
        self.cells = []
        for l in range(L):
            c_l = cfg.channels[l]
            cell_in = 2 * c_l + (cfg.channels[l + 1] if l < L - 1 else 0)
            grid = cfg.layer_grid(l)
            kind = cfg.cell_kinds[l]
            common = dict(grid_hw=grid, dtype=self.dtype,
                          gate_param_mode=cfg.gate_param_mode)
            if kind == "convlstm":
                cell = ConvLSTMCell(cell_in, c_l, cfg.kernel[l], rng=rng,
                                    **common)
            elif kind == "taaconvlstm":
                cell = TAAConvLSTMCell(
                    cell_in, c_l, cfg.kernel[l], rng=rng,
                    n_heads=cfg.n_heads, horizon=cfg.horizon,
                    att_fraction=cfg.att_fraction, positional=cfg.positional,
                    history_mode=cfg.history_mode,
                    history_span=cfg.history_span,
                    detach_history=cfg.detach_history, **common)
            else:
                cell = SAAConvLSTMCell(
                    cell_in, c_l, cfg.kernel[l], rng=rng,
                    n_heads=cfg.n_heads, att_fraction=cfg.att_fraction,
                    positional=cfg.positional, **common)
            self.cells.append(cell)
        self.ahat_w, self.ahat_b = [], []
        for l in range(L):
            w, b = _conv_pair(rng, cfg.channels[l], cfg.channels[l],
                              cfg.kernel[l], self.dtype)
            self.ahat_w.append(w)
            self.ahat_b.append(b)
        self.a_w, self.a_b = [None], [None]  # layer 0 takes the frame directly
        for l in range(1, L):
            w, b = _conv_pair(rng, cfg.channels[l], 2 * cfg.channels[l - 1],
                              cfg.kernel[l], self.dtype)
            self.a_w.append(w)
            self.a_b.append(b)

    @property
    def num_layers(self) -> int:
        return len(self.cells)

    def init_states(self) -> list[LayerState]:
        out = []
        for l in range(self.num_layers):
            grid = self.cfg.layer_grid(l)
            e = Tensor(np.zeros((2 * self.cfg.channels[l],) + grid,
                                dtype=self.dtype))
            out.append(LayerState(self.cells[l].init_state(), e))
        return out

    def _renorm_masses(self, pred: Tensor) -> Tensor:
        """Rescale (occupied, free) masses so their sum never exceeds one."""
        total = gt.add(gt.narrow(pred, 0, 0, 1), gt.narrow(pred, 0, 1, 1))
        return gt.div(pred, gt.maximum_scalar(total, 1.0))

    def step(self, frame: Tensor, states: list[LayerState],
             head_mask: HeadMask | None = None):
        """Advance one tick; returns (prediction, new states)."""
        L = self.num_layers
        new_cells: list[CellState] = [None] * L  # type: ignore[list-item]
        for l in reversed(range(L)):
            if l == L - 1:
                x_l = states[l].e
            else:
                x_l = gt.concat(
                    [states[l].e,
                     gt.upsample2_nearest(new_cells[l + 1].h)], axis=0)
            new_cells[l] = self.cells[l].step(x_l, states[l].cell, head_mask)
        new_states: list[LayerState] = []
        a = frame
        prediction: Tensor | None = None
        for l in range(L):
            raw = gt.conv2d(new_cells[l].h, self.ahat_w[l], self.ahat_b[l])
            if l == 0:
                # pass-through clip: a hard clamp zeroes the gradient of
                # saturated cells, and a fully saturated frame (all raw
                # values negative) would freeze training permanently
                ahat = self._renorm_masses(gt.clip_through(raw, 0.0, 1.0))
                prediction = ahat
            else:
                ahat = gt.relu(raw)
            e = gt.concat([gt.relu(gt.sub(a, ahat)),
                           gt.relu(gt.sub(ahat, a))], axis=0)
            new_states.append(LayerState(new_cells[l], e))
            if l < L - 1:
                a = gt.maxpool2(gt.relu(gt.conv2d(e, self.a_w[l + 1],
                                                  self.a_b[l + 1])))
        return prediction, new_states

    def rollout(self, frames, pred_len: int,
                head_mask: HeadMask | None = None) -> list[Tensor]:
        """Feed observed frames, then extrapolate ``pred_len`` steps
        closed-loop. Returns the future predictions as graph tensors."""
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim != 4 or frames.shape[1] != self.cfg.channels[0] \
                or frames.shape[2:] != self.cfg.grid_hw:
            raise ShapeError(
                f"frames must be (N, {self.cfg.channels[0]}, "
                f"{self.cfg.grid_hw[0]}, {self.cfg.grid_hw[1]}), "
                f"got {frames.shape}")
        if len(frames) < 1:
            raise ShapeError("need at least one observed frame")
        states = self.init_states()
        pred = None
        for t in range(len(frames)):
            pred, states = self.step(Tensor(frames[t]), states, head_mask)
        preds = []
        for _ in range(pred_len):
            pred, states = self.step(pred, states, head_mask)
            preds.append(pred)
        return preds

    def predict(self, frames, pred_len: int,
                head_mask: HeadMask | None = None) -> np.ndarray:
        """Forward-only rollout to a (pred_len, C, H, W) array."""
        with gt.no_grad():
            preds = self.rollout(frames, pred_len, head_mask)
        return np.stack([p.data for p in preds])

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for l, cell in enumerate(self.cells):
            out.update(cell.named(f"cell.{l}."))
            if isinstance(cell, TAAConvLSTMCell):
                out.update(cell.att.named(f"att.{l}."))
            elif isinstance(cell, SAAConvLSTMCell):
                out.update(cell.att.named(f"att.{l}."))
        for l in range(self.num_layers):
            out[f"ahat.{l}.w"] = self.ahat_w[l]
            out[f"ahat.{l}.b"] = self.ahat_b[l]
            if l >= 1:
                out[f"a.{l}.w"] = self.a_w[l]
                out[f"a.{l}.b"] = self.a_b[l]
        return out

    def manifest(self) -> dict:
        return {"kind": self.kind, "format": 1,
                "config": self.cfg.as_manifest()}


# ---------------------------------------------------------------------------
# Baseline stack

@dataclass(frozen=True)
class PredRNNConfig:
    input_channels: int = 2
    grid_hw: tuple[int, int] = (32, 32)
    num_layers: int = 4
    hidden: int = 64
    kernel: int = 5
    patch: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "grid_hw", tuple(self.grid_hw))

    def validate(self) -> None:
        h, w = self.grid_hw
        if h % self.patch or w % self.patch:
            raise ShapeError(
                f"grid {h}x{w} not divisible by patch {self.patch}")
        if self.num_layers < 2:
            raise ShapeError("baseline stack needs at least two cells")

    def as_manifest(self) -> dict:
        return asdict(self)

    @classmethod
    def from_manifest(cls, d: dict) -> "PredRNNConfig":
        d = dict(d)
        d["grid_hw"] = tuple(d["grid_hw"])
        return cls(**d)


@dataclass
class PredRNNState:
    h: list[Tensor]
    c: list[Tensor]
    m: Tensor
    z: Tensor


def _space_to_depth(x: Tensor, p: int) -> Tensor:
    c, h, w = x.shape
    x = gt.reshape(x, (c, h // p, p, w // p, p))
    x = gt.permute(x, (0, 2, 4, 1, 3))
    return gt.reshape(x, (c * p * p, h // p, w // p))


def _depth_to_space(x: Tensor, p: int) -> Tensor:
    cpp, h, w = x.shape
    c = cpp // (p * p)
    x = gt.reshape(x, (c, p, p, h, w))
    x = gt.permute(x, (0, 3, 1, 4, 2))
    return gt.reshape(x, (c, h * p, w * p))


class PredRNNPP:
    """Column of causal LSTM cells with a gradient highway after cell 0."""

    kind = "predrnnpp"

    def __init__(self, cfg: PredRNNConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        d = cfg.hidden
        emb = cfg.input_channels * cfg.patch * cfg.patch
        self.cells = []
        for k in range(cfg.num_layers):
            c_in = emb if k == 0 else d
            self.cells.append(CausalLSTMCell(c_in, d, cfg.kernel, rng,
                                             self.dtype))
        self.ghu = GHUCell(d, d, cfg.kernel, rng, self.dtype)
        self.head_w, self.head_b = _conv_pair(rng, emb, d, 1, self.dtype)

    @property
    def inner_grid(self) -> tuple[int, int]:
        return (self.cfg.grid_hw[0] // self.cfg.patch,
                self.cfg.grid_hw[1] // self.cfg.patch)

    def init_state(self) -> PredRNNState:
        grid = self.inner_grid
        shape = (self.cfg.hidden,) + grid
        zeros = lambda: Tensor(np.zeros(shape, dtype=self.dtype))
        return PredRNNState(
            h=[zeros() for _ in self.cells],
            c=[zeros() for _ in self.cells],
            m=zeros(), z=zeros())

    def step(self, frame: Tensor, state: PredRNNState):
        x = _space_to_depth(frame, self.cfg.patch)
        m = state.m  # top cell's memory from the previous step
        new_h, new_c = [], []
        z = state.z
        inp = x
        for k, cell in enumerate(self.cells):
            h_k, c_k, m = cell.step(inp, state.h[k], state.c[k], m)
            new_h.append(h_k)
            new_c.append(c_k)
            if k == 0:
                z = self.ghu.step(h_k, state.z)
                inp = z
            else:
                inp = h_k
        pred = _depth_to_space(
            gt.conv2d(new_h[-1], self.head_w, self.head_b), self.cfg.patch)
        return pred, PredRNNState(new_h, new_c, m, z)

    def rollout(self, frames, pred_len: int,
                head_mask: HeadMask | None = None) -> list[Tensor]:
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim != 4 or frames.shape[1] != self.cfg.input_channels \
                or frames.shape[2:] != self.cfg.grid_hw:
            raise ShapeError(
                f"frames must be (N, {self.cfg.input_channels}, "
                f"{self.cfg.grid_hw[0]}, {self.cfg.grid_hw[1]}), "
                f"got {frames.shape}")
        state = self.init_state()
        out = None
        for t in range(len(frames)):
            out, state = self.step(Tensor(frames[t]), state)
        preds = [out]  # forecast of the first future frame
        for _ in range(pred_len - 1):
            out, state = self.step(preds[-1], state)
            preds.append(out)
        return preds[:pred_len]

    def predict(self, frames, pred_len: int,
                head_mask: HeadMask | None = None) -> np.ndarray:
        with gt.no_grad():
            preds = self.rollout(frames, pred_len)
        return np.stack([p.data for p in preds])

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, cell in enumerate(self.cells):
            out.update(cell.named(f"cell.{k}."))
        out.update(self.ghu.named("ghu."))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def manifest(self) -> dict:
        return {"kind": self.kind, "format": 1,
                "config": self.cfg.as_manifest()}


# ---------------------------------------------------------------------------
# Config builders

def desk_stack_config(kind: str = "taa", grid_hw=(32, 32), n_heads: int = 4,
                      horizon: int = 4, **kw) -> StackConfig:
    """Three-layer {2, 16, 32} stack sized for quick runs."""
    channels = (2, 16, 32)
    kinds = {
        "convlstm": ("convlstm",) * 3,
        "taa": ("convlstm", "convlstm", "taaconvlstm"),
        "saa": ("convlstm", "saaconvlstm", "saaconvlstm"),
    }
    if kind not in kinds:
        raise GridcastError(f"unknown stack variant {kind!r}")
    return StackConfig(channels=channels, cell_kinds=kinds[kind],
                       grid_hw=grid_hw, n_heads=n_heads, horizon=horizon, **kw)


def full_stack_config(kind: str = "taa", grid_hw=(128, 128), n_heads: int = 4,
                      horizon: int = 4, **kw) -> StackConfig:
    """Four-layer {2, 48, 96, 192} stack at full grid size."""
    channels = (2, 48, 96, 192)
    kinds = {
        "convlstm": ("convlstm",) * 4,
        "taa": ("convlstm", "convlstm", "convlstm", "taaconvlstm"),
        "saa": ("convlstm", "convlstm", "saaconvlstm", "saaconvlstm"),
    }
    if kind not in kinds:
        raise GridcastError(f"unknown stack variant {kind!r}")
    return StackConfig(channels=channels, cell_kinds=kinds[kind],
                       grid_hw=grid_hw, n_heads=n_heads, horizon=horizon, **kw)


def build_variant(name: str, scale: str = "desk", seed: int = 0, **kw):
    """Construct a model by variant name.

    Names: "convlstm", "taa", "saa" (predictive-coding stacks) or
    "predrnnpp" (the baseline column). Scale "desk" or "full".
    """
    if name == "predrnnpp":
        grid = (32, 32) if scale == "desk" else (128, 128)
        grid = kw.pop("grid_hw", grid)
        return PredRNNPP(PredRNNConfig(grid_hw=grid, **kw), seed=seed)
    maker = desk_stack_config if scale == "desk" else full_stack_config
    return PredNet(maker(name, **kw), seed=seed)


def count_params(model) -> int:
    return int(sum(t.size for t in model.named().values()))


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"GCKP"


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """One file: magic, JSON manifest, then named tensor records."""
    manifest = model.manifest()
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    named = model.named()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            write_tensor(fh, t.data)


def load_checkpoint(path):
    """Rebuild the model described by a checkpoint; returns (model, manifest)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise GridcastError(f"{path}: not a checkpoint file")
        (blen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(blen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        stored: dict[str, np.ndarray] = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            stored[name] = read_tensor(fh)
    kind = manifest.get("kind")
    if kind == "prednet":
        model = PredNet(StackConfig.from_manifest(manifest["config"]), seed=0)
    elif kind == "predrnnpp":
        model = PredRNNPP(PredRNNConfig.from_manifest(manifest["config"]),
                          seed=0)
    else:
        raise GridcastError(f"unknown checkpoint kind {kind!r}")
    named = model.named()
    if set(named) != set(stored):
        missing = sorted(set(named) - set(stored))[:3]
        extra_keys = sorted(set(stored) - set(named))[:3]
        raise GridcastError(
            f"checkpoint parameter keys mismatch (missing {missing}, "
            f"unexpected {extra_keys})")
    for name, t in named.items():
        if stored[name].shape != t.shape:
            raise GridcastError(
                f"checkpoint {name}: shape {stored[name].shape} != "
                f"model {t.shape}")
        t.data[:] = stored[name].astype(t.data.dtype)
    return model, manifest
