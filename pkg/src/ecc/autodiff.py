"""Reverse-mode automatic differentiation on a recording tape.

The engine is deliberately small: tensors wrap float32 numpy arrays, and
every differentiable operation appends a backward closure to the active
tape. Calling ``Tape.backward`` replays those closures in exact reverse
recording order, accumulating gradients additively into each tensor's
``grad`` buffer. When no tape is active, operations compute forward only,
which is the inference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array participating in gradient recording.

    Images use channels x height x width layout with an optional leading
    batch dimension. Storage is float32 by default; float64 is allowed so
    finite-difference checks can run the same graph at higher precision.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # Compiled kernels flat-index their inputs, so storage stays
        # contiguous (a no-op for arrays that already are).
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one backward sweep.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. A tape and its tensors belong to one thread.
    """

    def __init__(self):
        self._records: list[tuple[str, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, op_name: str, backward_fn) -> None:
        self._records.append((op_name, backward_fn))

    def op_names(self) -> list[str]:
        return [name for name, _ in self._records]

    def backward(self, loss: Tensor) -> None:
        """Seed the scalar loss with gradient 1 and replay in reverse."""
        if loss.data.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {tuple(loss.data.shape)}"
            )
        loss.grad = np.ones_like(loss.data)
        for _, fn in reversed(self._records):
            fn()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``; tensors feeding several consumers sum up.

    Callers must hand over arrays they will not mutate afterwards; views
    are copied so in-place accumulation never aliases another buffer.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if g.base is None and g.shape == t.data.shape and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(
                np.broadcast_to(g, t.data.shape), dtype=t.data.dtype
            )
    else:
        t.grad += g


def result_tensor(data: np.ndarray, *inputs: Tensor) -> Tensor:
    return Tensor(data, requires_grad=any(t.requires_grad for t in inputs))


@dataclass
class GradcheckReport:
    """Comparison of tape gradients against central finite differences."""

    name: str
    tolerance: float
    max_rel_error: float = 0.0
    per_input: dict = field(default_factory=dict)
    failing_inputs: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing_inputs

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL " + ",".join(self.failing_inputs)
        return f"{self.name}: max_rel_error={self.max_rel_error:.3e} [{status}]"


def gradient_check(
    fn,
    inputs: dict,
    tolerance: float = 1e-3,
    h: float = 1e-6,
    max_coords_per_input: int | None = None,
    seed: int = 0,
    name: str = "op",
) -> GradcheckReport:
    """Check ``fn``'s tape gradients against central finite differences.

    ``fn`` maps a dict of named Tensors to a scalar Tensor and must be a
    pure function of them (no stat updates, no randomness). All inputs are
    promoted to float64 for the check. Large inputs can be subsampled with
    ``max_coords_per_input``; coordinates are drawn from a seeded RNG.
    The default step keeps finite differences from straddling activation
    kinks (relu, clamps, bilinear cell edges) that sit near typical
    operating points; float64 makes the cancellation noise negligible.
    """
    t64 = {
        k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64),
                  requires_grad=True)
        for k, v in inputs.items()
    }

    with Tape() as tape:
        loss = fn(t64)
    if loss.data.size != 1:
        raise ValueError("gradient_check needs a scalar-valued computation")
    tape.backward(loss)

    def eval_loss():
        return float(fn(t64).data.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    report = GradcheckReport(name=name, tolerance=tolerance)
    for key, t in t64.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = np.arange(n)
        a_sel = analytic.reshape(-1)[coords]
        numeric = np.empty_like(a_sel)
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            f_plus = eval_loss()
            flat[c] = orig - h
            f_minus = eval_loss()
            flat[c] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        scale = max(np.max(np.abs(a_sel), initial=0.0),
                    np.max(np.abs(numeric), initial=0.0), 1e-6)
        rel = float(np.max(np.abs(a_sel - numeric), initial=0.0) / scale)
        report.per_input[key] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
        if rel > tolerance:
            report.failing_inputs.append(key)
    return report
