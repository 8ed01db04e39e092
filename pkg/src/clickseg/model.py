"""Encoder-decoder fully convolutional network with soft Dice loss.

Topology: ``depth`` down blocks (each two conv3x3 + BN + ReLU, then 2x2
max-pool stride 2), a bottleneck block, and ``depth`` up blocks (2x2
transposed conv stride 2, skip concatenation, two conv3x3 + BN + ReLU),
ending in a 1x1 conv and a sigmoid. Channel widths double per down block
and halve per up block.

Math is backed by torch (CPU); checkpoints use a self-describing binary
format, not torch.save, so files stay portable and verifiable.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
import torch
import torch.nn as nn

from .grid import BinaryMask, Grid2D

Mode = Literal["train", "infer"]

CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ArchConflictError(CheckpointError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    base_width: int = 16
    depth: int = 4
    out_channels: int = 1

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.base_width < 1 or self.depth < 1 or self.out_channels < 1:
            raise ValueError(f"invalid architecture config: {self}")

    @property
    def divisor(self) -> int:
        """Input spatial dims must be divisible by this."""
        return 2**self.depth

    def check_dims(self, height: int, width: int) -> None:
        d = self.divisor
        if height % d or width % d:
            raise ValueError(
                f"input {width}x{height} not divisible by {d} (depth {self.depth})"
            )


@dataclass(frozen=True)
class InputStack:
    """Three equal-size channels: normalized image, foreground guidance,
    background guidance. Guidance values must be in [0, 1]."""

    image: Grid2D
    fg_guidance: Grid2D
    bg_guidance: Grid2D

    def __post_init__(self) -> None:
        shape = self.image.values.shape
        for name in ("fg_guidance", "bg_guidance"):
            g: Grid2D = getattr(self, name)
            if g.values.shape != shape:
                raise ValueError(f"{name} shape {g.values.shape} != image shape {shape}")
            if g.values.min() < 0.0 or g.values.max() > 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def width(self) -> int:
        return self.image.width

    @property
    def height(self) -> int:
        return self.image.height


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        return torch.relu(self.bn2(self.conv2(x)))


class _UNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        base, depth = arch.base_width, arch.depth
        self.pool = nn.MaxPool2d(2, 2)
        self.enc = nn.ModuleList()
        w = arch.in_channels
        for i in range(depth):
            self.enc.append(_Block(w, base * 2**i))
            w = base * 2**i
        self.bottleneck = _Block(w, base * 2**depth)
        w = base * 2**depth
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            o = base * 2**i
            self.up.append(nn.ConvTranspose2d(w, o, 2, stride=2))
            self.dec.append(_Block(2 * o, o))
            w = o
        self.head = nn.Conv2d(w, arch.out_channels, 1)
        self._init_weights()

    def _init_weights(self) -> None:
        # He-normal for convs (ReLU net), BN gamma=1 beta=0
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


@dataclass
class ModelState:
    """Learnable parameters, optimizer moments, BN running stats, and the
    architecture they belong to."""

    net: _UNet
    optimizer: torch.optim.Adam
    arch: ArchConfig
    rng_seed: int
    learning_rate: float
    step_count: int = 0
    epochs_done: int = 0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype


def make_state(
    arch: ArchConfig = ArchConfig(),
    seed: int = 4242,
    learning_rate: float = 1e-4,
    dtype: torch.dtype = torch.float32,
) -> ModelState:
    """Build a freshly initialized model; identical seeds give identical weights."""
    torch.manual_seed(seed)
    net = _UNet(arch).to(dtype)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return ModelState(
        net=net, optimizer=opt, arch=arch, rng_seed=seed, learning_rate=learning_rate
    )


def stack_to_tensor(stack: InputStack, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arr = np.stack(
        [
            np.asarray(stack.image.values, dtype=np.float64),
            np.asarray(stack.fg_guidance.values, dtype=np.float64),
            np.asarray(stack.bg_guidance.values, dtype=np.float64),
        ]
    )
    return torch.from_numpy(arr).to(dtype)


def forward_batch(state: ModelState, x: torch.Tensor, mode: Mode) -> torch.Tensor:
    """Run a (N, 3, H, W) batch; returns (N, 1, H, W) probabilities.

    ``infer`` uses BN running statistics under inference mode; ``train`` uses
    batch statistics, updates running stats, and keeps the autograd graph.
    """
    state.arch.check_dims(x.shape[-2], x.shape[-1])
    if mode == "infer":
        state.net.eval()
        with torch.inference_mode():
            return state.net(x).clone()
    elif mode == "train":
        state.net.train()
        return state.net(x)
    raise ValueError(f"unknown mode {mode!r}")


def forward(state: ModelState, stack: InputStack, mode: Mode = "infer") -> Grid2D:
    """Per-pixel foreground probability for one input stack, in (0, 1)."""
    x = stack_to_tensor(stack, dtype=state.dtype).unsqueeze(0)
    y = forward_batch(state, x, mode)
    probs = y.detach().squeeze(0).squeeze(0).numpy().astype(np.float32)
    return Grid2D(probs, spacing=stack.image.spacing)


def dice_score(pred: Grid2D | np.ndarray, gt: BinaryMask | np.ndarray) -> float:
    """Soft Dice 2*sum(gt*p) / (sum(gt^2) + sum(p^2)).

    Accepts soft predictions in [0,1] (loss use) or binary ones (metric use).
    Raises when both inputs are identically zero; the metrics module owns the
    both-empty convention instead.
    """
    p = np.asarray(pred.values if isinstance(pred, Grid2D) else pred, dtype=np.float64)
    g = np.asarray(gt.bits if isinstance(gt, BinaryMask) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs gt {g.shape}")
    den = (g * g).sum() + (p * p).sum()
    if den == 0.0:
        raise ValueError("dice undefined: prediction and ground truth both empty")
    return float(2.0 * (g * p).sum() / den)


def dice_loss(preds: torch.Tensor, gts: torch.Tensor) -> torch.Tensor:
    """Average Dice loss over the batch: mean of (1 - dice_j).

    ``preds``/``gts``: (N, 1, H, W). Every gt slice must be non-empty (the
    data pipeline filters empty ones); otherwise raises.
    """
    if preds.shape != gts.shape:
        raise ValueError(f"dimension mismatch: preds {tuple(preds.shape)} vs gts {tuple(gts.shape)}")
    if preds.shape[0] < 1:
        raise ValueError("empty batch")
    gt_sums = gts.sum(dim=(1, 2, 3))
    if bool((gt_sums == 0).any()):
        raise ValueError("batch contains a slice with empty ground truth; filter upstream")
    num = 2.0 * (preds * gts).sum(dim=(1, 2, 3))
    den = (gts * gts).sum(dim=(1, 2, 3)) + (preds * preds).sum(dim=(1, 2, 3))
    return (1.0 - num / den).mean()


def train_step(
    state: ModelState,
    batch: Sequence[tuple[InputStack, BinaryMask]] | tuple[torch.Tensor, torch.Tensor],
) -> float:
    """One Adam update on a batch; returns the loss. Increments step_count."""
    if isinstance(batch, tuple) and torch.is_tensor(batch[0]):
        x, g = batch
    else:
        x = torch.stack([stack_to_tensor(s, state.dtype) for s, _ in batch])
        g = torch.stack(
            [torch.from_numpy(m.bits.astype(np.float64)).to(state.dtype).unsqueeze(0) for _, m in batch]
        )
    preds = forward_batch(state, x, "train")
    loss = dice_loss(preds, g)
    loss_val = float(loss.detach())
    if not math.isfinite(loss_val):
        p = preds.detach()
        raise NonFiniteLossError(
            f"non-finite loss {loss_val} at step {state.step_count} "
            f"(pred range [{float(p.min()):.3g}, {float(p.max()):.3g}])"
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step_count += 1
    return loss_val


# --------------------------------------------------------------------------
# Checkpoint format (version 1):
#   magic "CSEGCKPT" | u32 version | u64 header_len | header JSON (utf-8)
#   | raw little-endian tensor blobs in header order | u32 CRC32 of all
#   preceding bytes.
# The header carries arch config, step/epoch counters, seed, learning rate,
# and the exact (name, dtype, shape) blob list: net.state_dict() entries
# first, then Adam moments as optim.{param_index}.{step,exp_avg,exp_avg_sq}.
# --------------------------------------------------------------------------


def _state_tensors(state: ModelState) -> list[tuple[str, torch.Tensor]]:
    out = [(name, t) for name, t in state.net.state_dict().items()]
    params = list(state.net.parameters())
    for i, p in enumerate(params):
        st = state.optimizer.state.get(p)
        if st:
            step = st["step"]
            step_t = step if torch.is_tensor(step) else torch.tensor(float(step))
            out.append((f"optim.{i}.step", step_t.to(torch.float32)))
            out.append((f"optim.{i}.exp_avg", st["exp_avg"]))
            out.append((f"optim.{i}.exp_avg_sq", st["exp_avg_sq"]))
    return out


def _dtype_name(t: torch.Tensor) -> str:
    for name, (td, _) in _DTYPES.items():
        if t.dtype == td:
            return name
    raise ValueError(f"unsupported tensor dtype {t.dtype}")


def checkpoint_save(state: ModelState, path) -> None:
    tensors = _state_tensors(state)
    header = {
        "arch": asdict(state.arch),
        "rng_seed": state.rng_seed,
        "learning_rate": state.learning_rate,
        "step_count": state.step_count,
        "epochs_done": state.epochs_done,
        "dtype": _dtype_name(next(state.net.parameters())),
        "tensors": [[name, _dtype_name(t), list(t.shape)] for name, t in tensors],
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(hj)))
    buf.write(hj)
    for _, t in tensors:
        arr = t.detach().cpu().contiguous().numpy()
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def checkpoint_load(path, expect_arch: ArchConfig | None = None) -> ModelState:
    """Load a checkpoint; the architecture always comes from the file.

    Passing ``expect_arch`` asserts the caller's configuration matches the
    file; a conflict is an error rather than a silent override.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 8 + 4:
        raise CorruptCheckpointError(f"corrupt checkpoint: truncated file {path}")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"corrupt checkpoint: bad magic in {path}")
    payload, crc_bytes = raw[:-4], raw[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CorruptCheckpointError(f"corrupt checkpoint: CRC mismatch in {path}")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (hlen,) = struct.unpack_from("<Q", payload, off)
    off += 8
    try:
        header = json.loads(payload[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"corrupt checkpoint: bad header ({e})") from e
    off += hlen

    arch = ArchConfig(**header["arch"])
    if expect_arch is not None and expect_arch != arch:
        raise ArchConflictError(
            f"checkpoint architecture {arch} conflicts with configured {expect_arch}; "
            "the checkpoint's architecture is authoritative"
        )
    tensors: dict[str, torch.Tensor] = {}
    for name, dtype_name, shape in header["tensors"]:
        if dtype_name not in _DTYPES:
            raise CorruptCheckpointError(f"corrupt checkpoint: unknown dtype {dtype_name}")
        _, np_dtype = _DTYPES[dtype_name]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        if off + nbytes > len(payload):
            raise CorruptCheckpointError(f"corrupt checkpoint: blob {name} truncated")
        arr = np.frombuffer(payload, dtype=np.dtype(np_dtype).newbyteorder("<"), count=count, offset=off)
        tensors[name] = torch.from_numpy(arr.astype(np_dtype).reshape(shape).copy())
        off += nbytes
    if off != len(payload):
        raise CorruptCheckpointError("corrupt checkpoint: trailing bytes after blobs")

    dtype = _DTYPES[header.get("dtype", "float32")][0]
    torch.manual_seed(header["rng_seed"])  # same path as make_state, weights overwritten below
    net = _UNet(arch).to(dtype)
    net_sd = net.state_dict()
    for name, ref in net_sd.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointShapeError(
                f"shape mismatch for {name}: file {tuple(tensors[name].shape)} vs arch {tuple(ref.shape)}"
            )
    net.load_state_dict({k: tensors[k] for k in net_sd})
    opt = torch.optim.Adam(
        net.parameters(), lr=header["learning_rate"], betas=(0.9, 0.999), eps=1e-8
    )
    params = list(net.parameters())
    for i, p in enumerate(params):
        key = f"optim.{i}.exp_avg"
        if key in tensors:
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise CheckpointShapeError(f"shape mismatch for {key}")
            opt.state[p] = {
                "step": torch.tensor(float(tensors[f"optim.{i}.step"])),
                "exp_avg": tensors[key].to(dtype),
                "exp_avg_sq": tensors[f"optim.{i}.exp_avg_sq"].to(dtype),
            }
    state = ModelState(
        net=net,
        optimizer=opt,
        arch=arch,
        rng_seed=header["rng_seed"],
        learning_rate=header["learning_rate"],
        step_count=header["step_count"],
        epochs_done=header.get("epochs_done", 0),
    )
    return state
