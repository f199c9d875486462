"""Recurrent cells: the Detail Context Block (DCB), the ConvLSTM gate
update, and their composition into the MoDeRNN cell.

The DCB couples the input map and the carried context map before the gate
update: a multi-kernel attention map computed from one state reweights the
other (``cross`` coupling, the default). With all attention weights at zero
and scale 2 the block is an exact identity, so the MoDeRNN cell degenerates
bitwise to the plain ConvLSTM baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat0,
    conv2d,
    hadamard,
    parameter,
    repeat_channels,
    scale,
    sigmoid,
    slice_channels,
    tanh,
)

GATE_KERNEL = 5
DCB_COUPLINGS = ("cross", "chained")


@dataclass
class DcbParams:
    """Multi-kernel attention weights for one detail-context block.

    ``w_h[k]`` reweights via the context state, ``w_x[k]`` via the input
    state; both map C channels to ``attn_channels`` (C for per-channel
    attention, 1 for a shared spatial map). Attention convs carry no bias so
    zero weights give exactly sigmoid(0) = 0.5.
    """

    w_h: dict[int, Tensor]
    w_x: dict[int, Tensor]
    kernel_set: tuple[int, ...] = (3, 5, 7)
    scale_s: float = 2.0

    def __post_init__(self):
        self.kernel_set = tuple(self.kernel_set)
        if not self.kernel_set:
            raise ValueError("kernel_set must be non-empty")
        if any(k % 2 == 0 for k in self.kernel_set):
            raise ValueError(f"kernel_set must be all odd, got {self.kernel_set}")
        if list(self.kernel_set) != sorted(set(self.kernel_set)):
            raise ValueError(f"kernel_set must be strictly increasing, got {self.kernel_set}")
        if self.scale_s <= 0:
            raise ValueError("scale_s must be positive")
        if set(self.w_h) != set(self.kernel_set) or set(self.w_x) != set(self.kernel_set):
            raise ValueError("weight maps must have exactly the kernel_set keys")
        shapes = {w.shape[:2] for w in (*self.w_h.values(), *self.w_x.values())}
        if len(shapes) != 1:
            raise ShapeError(f"attention weights disagree on (Co, C): {sorted(shapes)}")
        for k in self.kernel_set:
            for w in (self.w_h[k], self.w_x[k]):
                if w.shape[2:] != (k, k):
                    raise ShapeError(f"weight for kernel {k} has shape {tuple(w.shape)}")
        co, c = next(iter(shapes))
        if co not in (1, c):
            raise ShapeError(f"attention output channels must be 1 or {c}, got {co}")

    @property
    def channels(self) -> int:
        return next(iter(self.w_h.values())).shape[1]

    @property
    def attn_channels(self) -> int:
        return next(iter(self.w_h.values())).shape[0]

    def named(self, prefix: str):
        out = []
        for k in self.kernel_set:
            out.append((f"{prefix}.wh{k}", self.w_h[k]))
        for k in self.kernel_set:
            out.append((f"{prefix}.wx{k}", self.w_x[k]))
        return out


@dataclass
class GateParams:
    """Per-gate 5x5 conv kernels and biases of the ConvLSTM update."""

    w_xg: Tensor
    w_hg: Tensor
    w_xi: Tensor
    w_hi: Tensor
    w_xf: Tensor
    w_hf: Tensor
    w_xo: Tensor
    w_ho: Tensor
    b_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor

    def __post_init__(self):
        c = self.w_xg.shape[0]
        for name, w in self.named(""):
            want = (c,) if name.lstrip(".").startswith("b") else (c, c, GATE_KERNEL, GATE_KERNEL)
            if tuple(w.shape) != want:
                raise ShapeError(f"gate tensor {name.lstrip('.')} has shape {tuple(w.shape)}, expected {want}")

    @property
    def channels(self) -> int:
        return self.w_xg.shape[0]

    def named(self, prefix: str):
        return [
            (f"{prefix}.wxg", self.w_xg),
            (f"{prefix}.whg", self.w_hg),
            (f"{prefix}.wxi", self.w_xi),
            (f"{prefix}.whi", self.w_hi),
            (f"{prefix}.wxf", self.w_xf),
            (f"{prefix}.whf", self.w_hf),
            (f"{prefix}.wxo", self.w_xo),
            (f"{prefix}.who", self.w_ho),
            (f"{prefix}.bg", self.b_g),
            (f"{prefix}.bi", self.b_i),
            (f"{prefix}.bf", self.b_f),
            (f"{prefix}.bo", self.b_o),
        ]


@dataclass
class CellState:
    """Recurrent state pair: hidden/context map ``h`` and memory map ``c``."""

    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int) -> "CellState":
        shape = (batch, channels, height, width)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class DcbTrace:
    """Detached attention maps of one block application (for export/tests)."""

    attn_h: np.ndarray
    attn_x: np.ndarray


# ---------------------------------------------------------------------------
# initialization


def init_dcb_params(
    rng: np.random.Generator,
    channels: int,
    kernel_set=(3, 5, 7),
    scale_s: float = 2.0,
    attn_channels: int | None = None,
    bound: float = 0.01,
) -> DcbParams:
    """Near-identity start: tiny zero-centered weights keep attention ~0.5."""
    co = channels if attn_channels is None else attn_channels
    w_h = {k: parameter(rng.uniform(-bound, bound, (co, channels, k, k))) for k in kernel_set}
    w_x = {k: parameter(rng.uniform(-bound, bound, (co, channels, k, k))) for k in kernel_set}
    return DcbParams(w_h=w_h, w_x=w_x, kernel_set=tuple(kernel_set), scale_s=scale_s)


def init_gate_params(rng: np.random.Generator, channels: int) -> GateParams:
    # fan-in scaled uniform for kernels; forget bias starts at 1 to remember
    bound = 1.0 / np.sqrt(channels * GATE_KERNEL * GATE_KERNEL)
    shape = (channels, channels, GATE_KERNEL, GATE_KERNEL)
    w = lambda: parameter(rng.uniform(-bound, bound, shape))
    return GateParams(
        w_xg=w(), w_hg=w(), w_xi=w(), w_hi=w(), w_xf=w(), w_hf=w(), w_xo=w(), w_ho=w(),
        b_g=parameter(np.zeros(channels)),
        b_i=parameter(np.zeros(channels)),
        b_f=parameter(np.ones(channels)),
        b_o=parameter(np.zeros(channels)),
    )


# ---------------------------------------------------------------------------
# forward operations


def _attention(source: Tensor, weights: dict[int, Tensor], kernel_set, channels: int) -> Tensor:
    acc = None
    for k in kernel_set:
        r = conv2d(source, weights[k])
        acc = r if acc is None else add(acc, r)
    attn = sigmoid(scale(acc, 1.0 / len(kernel_set)))
    if attn.shape[1] == 1 and channels > 1:
        attn = repeat_channels(attn, channels)
    return attn


def dcb_forward(
    x: Tensor, h_prev: Tensor, p: DcbParams, coupling: str = "cross"
) -> tuple[Tensor, Tensor, DcbTrace]:
    """One detail-context block: returns (x_hat, h_hat, trace).

    cross (default): attention from the context reweights the input, then
    attention from the updated input reweights the context.
    chained: both maps derive from the context state in sequence; the raw
    input never enters (kept for comparison runs).
    """
    if x.shape != h_prev.shape:
        raise ShapeError(f"dcb: input shape {tuple(x.shape)} != context shape {tuple(h_prev.shape)}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"dcb: {x.shape[1]} channels, parameters expect {p.channels}")
    if coupling not in DCB_COUPLINGS:
        raise ValueError(f"unknown dcb coupling {coupling!r}")

    c = p.channels
    attn_h = _attention(h_prev, p.w_h, p.kernel_set, c)
    if coupling == "cross":
        x_hat = scale(hadamard(attn_h, x), p.scale_s)
        attn_x = _attention(x_hat, p.w_x, p.kernel_set, c)
        h_hat = scale(hadamard(attn_x, h_prev), p.scale_s)
    else:
        x_hat = scale(hadamard(attn_h, h_prev), p.scale_s)
        attn_x = _attention(x_hat, p.w_x, p.kernel_set, c)
        h_hat = scale(hadamard(attn_x, x_hat), p.scale_s)
    trace = DcbTrace(attn_h=attn_h.numpy(), attn_x=attn_x.numpy())
    return x_hat, h_hat, trace


def dcb_stack(
    x: Tensor, h_prev: Tensor, blocks: list[DcbParams], coupling: str = "cross"
) -> tuple[Tensor, Tensor, list[DcbTrace]]:
    """Fold ``dcb_forward`` over the blocks, feeding each block's outputs on."""
    if not blocks:
        raise ValueError("dcb_stack needs at least one block; disable via use_dcb instead")
    traces = []
    for p in blocks:
        x, h_prev, trace = dcb_forward(x, h_prev, p, coupling)
        traces.append(trace)
    return x, h_prev, traces


def convlstm_gates(x_in: Tensor, h_in: Tensor, c_prev: Tensor, p: GateParams) -> CellState:
    """Standard ConvLSTM update; the four gates run as one fused convolution."""
    if x_in.shape != h_in.shape or x_in.shape != c_prev.shape:
        raise ShapeError(
            "gates: state shapes differ: "
            f"x {tuple(x_in.shape)}, h {tuple(h_in.shape)}, c {tuple(c_prev.shape)}"
        )
    c = p.channels
    if x_in.shape[1] != c:
        raise ShapeError(f"gates: {x_in.shape[1]} channels, parameters expect {c}")

    wx = concat0([p.w_xg, p.w_xi, p.w_xf, p.w_xo])
    wh = concat0([p.w_hg, p.w_hi, p.w_hf, p.w_ho])
    b = concat0([p.b_g, p.b_i, p.b_f, p.b_o])
    z = add(conv2d(x_in, wx, b), conv2d(h_in, wh))

    g = tanh(slice_channels(z, 0, c))
    i = sigmoid(slice_channels(z, c, 2 * c))
    f = sigmoid(slice_channels(z, 2 * c, 3 * c))
    o = sigmoid(slice_channels(z, 3 * c, 4 * c))

    c_new = add(hadamard(f, c_prev), hadamard(i, g))
    h_new = hadamard(o, tanh(c_new))
    return CellState(h=h_new, c=c_new)


def modernn_cell(
    x: Tensor,
    state: CellState,
    dcb: list[DcbParams],
    gates: GateParams,
    use_dcb: bool = True,
    coupling: str = "cross",
) -> tuple[CellState, list[DcbTrace]]:
    """One MoDeRNN step; with ``use_dcb=False`` this IS the ConvLSTM baseline."""
    if use_dcb:
        x_hat, h_hat, traces = dcb_stack(x, state.h, dcb, coupling)
        return convlstm_gates(x_hat, h_hat, state.c, gates), traces
    return convlstm_gates(x, state.h, state.c, gates), []
