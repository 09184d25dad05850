"""Multi-view template parameterization and model persistence.

A multi-view model stacks ``V`` per-view templates of ``n x m`` cells with
``L`` values per cell into a single parameter vector, followed by one bias
per view.  Ordering is view-major, then row-major, then column, then channel;
biases occupy the last ``V`` slots.

Model file layout (all little-endian)::

    offset  size  field
    0       8     magic  b"MVTMODEL"
    8       4     uint32 format version (currently 1)
    12      4     uint32 views V
    16      4     uint32 rows n
    20      4     uint32 cols m
    24      4     uint32 cell_dim L
    28      1     uint8  per_view_bias flag
    29      8     float64 azimuth offset of bin 0 (degrees)
    37      4     uint32 meta length in bytes
    41      k     utf-8 meta string
    41+k    8*P   float64 parameter vector
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_MAGIC = b"MVTMODEL"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIBdI")


class ModelFormatError(ValueError):
    """Raised when a model file cannot be decoded."""


@dataclass(frozen=True)
class TemplateLayout:
    views: int
    rows: int
    cols: int
    cell_dim: int
    per_view_bias: bool = True
    azimuth_offset: float = 0.0

    def __post_init__(self):
        for name in ("views", "rows", "cols", "cell_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.azimuth_offset < 360.0 / self.views:
            raise ValueError("azimuth_offset must lie in [0, 360/views)")

    @property
    def cells_per_view(self) -> int:
        return self.rows * self.cols

    @property
    def view_size(self) -> int:
        """Number of appearance parameters in one view template."""
        return self.rows * self.cols * self.cell_dim

    @property
    def n_appearance(self) -> int:
        return self.views * self.view_size

    @property
    def n_params(self) -> int:
        return self.n_appearance + (self.views if self.per_view_bias else 0)

    @property
    def bins(self) -> np.ndarray:
        """Azimuth bin centers in degrees, strictly increasing in [0, 360)."""
        return self.azimuth_offset + np.arange(self.views) * (360.0 / self.views)

    @property
    def spacing(self) -> float:
        return 360.0 / self.views

    def n_cells(self) -> int:
        return self.views * self.cells_per_view

    def cell_index(self, cell: "CellRef") -> int:
        """Flat cell number (view-major, row-major); ``param_range`` start / L."""
        self.check_cell(cell)
        return (cell.view * self.rows + cell.row) * self.cols + cell.col

    def cell_from_index(self, j: int) -> "CellRef":
        if not 0 <= j < self.n_cells():
            raise IndexError(f"cell index {j} out of range")
        v, rest = divmod(j, self.cells_per_view)
        r, c = divmod(rest, self.cols)
        return CellRef(v, r, c)

    def check_cell(self, cell: "CellRef") -> None:
        if not (0 <= cell.view < self.views and 0 <= cell.row < self.rows
                and 0 <= cell.col < self.cols):
            raise IndexError(f"{cell} out of range for {self}")

    def bias_index(self, view: int) -> int:
        if not self.per_view_bias:
            raise ValueError("layout has no bias slots")
        if not 0 <= view < self.views:
            raise IndexError(f"view {view} out of range")
        return self.n_appearance + view

    def view_slots(self, view: int) -> slice:
        """Appearance slots of one view."""
        if not 0 <= view < self.views:
            raise IndexError(f"view {view} out of range")
        return slice(view * self.view_size, (view + 1) * self.view_size)

    def slot_views(self) -> np.ndarray:
        """View index owning each parameter slot (biases included)."""
        owner = np.repeat(np.arange(self.views), self.view_size)
        if self.per_view_bias:
            owner = np.concatenate([owner, np.arange(self.views)])
        return owner

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        mask[self.n_appearance:] = True
        return mask

    def cyclic_distance(self, i: int, j: int) -> int:
        d = abs(i - j) % self.views
        return min(d, self.views - d)


@dataclass(frozen=True, order=True)
class CellRef:
    view: int
    row: int
    col: int


def param_range(layout: TemplateLayout, cell: CellRef) -> tuple[int, int]:
    """Half-open interval ``[start, stop)`` of the cell's ``L`` values."""
    start = layout.cell_index(cell) * layout.cell_dim
    return start, start + layout.cell_dim


@dataclass(frozen=True)
class MultiViewModel:
    layout: TemplateLayout
    params: np.ndarray
    meta: str = ""
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64, copy=True).ravel()
        if params.shape[0] != self.layout.n_params:
            raise ValueError(
                f"params length {params.shape[0]} != layout size {self.layout.n_params}")
        if not np.all(np.isfinite(params)):
            raise ValueError("model parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @classmethod
    def zeros(cls, layout: TemplateLayout, meta: str = "") -> "MultiViewModel":
        return cls(layout, np.zeros(layout.n_params), meta)

    def templates(self) -> np.ndarray:
        """Appearance parameters reshaped to ``(V, n, m, L)``."""
        lay = self.layout
        return self.params[:lay.n_appearance].reshape(
            lay.views, lay.rows, lay.cols, lay.cell_dim)

    def biases(self) -> np.ndarray:
        lay = self.layout
        if not lay.per_view_bias:
            return np.zeros(lay.views)
        return self.params[lay.n_appearance:]

    def cell(self, cell: CellRef) -> np.ndarray:
        a, b = param_range(self.layout, cell)
        return self.params[a:b]


def slice_view(model: MultiViewModel, v: int) -> np.ndarray:
    """Parameters of view ``v``: its ``n*m*L`` appearance values, then its bias.

    Concatenating ``slice_view(model, v)`` over all views gives back
    ``model.params`` only for bias-free layouts; with biases the appearance
    parts come first, so use :func:`join_views` to invert.
    """
    lay = model.layout
    block = model.params[lay.view_slots(v)]
    if lay.per_view_bias:
        block = np.append(block, model.params[lay.bias_index(v)])
    return block


def join_views(layout: TemplateLayout, slices: list[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`slice_view` applied to every view."""
    if len(slices) != layout.views:
        raise ValueError("need one slice per view")
    size = layout.view_size
    appearance = [np.asarray(s)[:size] for s in slices]
    parts = list(appearance)
    if layout.per_view_bias:
        parts.append(np.array([np.asarray(s)[size] for s in slices]))
    return np.concatenate(parts)


def save_model(model: MultiViewModel, path) -> None:
    lay = model.layout
    meta = model.meta.encode("utf-8")
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, lay.views, lay.rows, lay.cols,
                          lay.cell_dim, int(lay.per_view_bias), lay.azimuth_offset,
                          len(meta))
    payload = model.params.astype("<f8").tobytes()
    Path(path).write_bytes(header + meta + payload)


def load_model(path) -> MultiViewModel:
    data = Path(path).read_bytes()
    return decode_model(data)


def decode_model(data: bytes) -> MultiViewModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated model header")
    magic, version, V, n, m, L, bias, offset, meta_len = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    try:
        layout = TemplateLayout(V, n, m, L, bool(bias), offset)
    except ValueError as exc:
        raise ModelFormatError(f"invalid layout header: {exc}") from exc
    start = _HEADER.size + meta_len
    if len(data) < start:
        raise ModelFormatError("truncated meta field")
    meta = data[_HEADER.size:start].decode("utf-8")
    expected = start + 8 * layout.n_params
    if len(data) != expected:
        raise ModelFormatError(
            f"payload holds {(len(data) - start) / 8:g} values, layout needs {layout.n_params}")
    params = np.frombuffer(data, dtype="<f8", offset=start, count=layout.n_params)
    return MultiViewModel(layout, params.astype(np.float64), meta)
