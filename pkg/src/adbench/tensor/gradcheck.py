"""Compare tape gradients against central finite differences."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, active_tape, no_grad


class NonDeterministicForward(RuntimeError):
    pass


@dataclass
class BlockReport:
    name: str
    checked: int
    max_rel_error: float
    passed: bool
    skipped: int = 0


@dataclass
class GradCheckReport:
    tolerance: float
    blocks: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self):
        return all(b.passed for b in self.blocks)

    def summary(self):
        lines = [f"{'block':40s} {'n':>5s} {'kinks':>5s} {'max rel err':>12s}"]
        for b in self.blocks:
            mark = "ok" if b.passed else "FAIL"
            lines.append(f"{b.name:40s} {b.checked:5d} {b.skipped:5d} {b.max_rel_error:12.3e} {mark}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(fn, blocks, tolerance, eps=1e-5, max_entries=None, seed=0, floor=1e-6, value_fn=None,
                            scale_floor=0.0, analytic=None, skip_kinks=False):
    """Check d fn() / d block for each named block.

    ``fn`` takes no arguments and returns a scalar Tensor; it must read the
    current contents of each block's ``data``. ``blocks`` is a mapping or
    sequence of (name, Tensor). At most ``max_entries`` randomly chosen
    entries per block are perturbed (all entries when None). ``value_fn``
    optionally evaluates the same scalar more precisely for the differences.
    The error floor of a block is ``max(floor, scale_floor * max|grad|)``;
    a nonzero ``scale_floor`` suits 32-bit checks, where entries far below the
    block's gradient scale sit at the rounding noise. ``analytic`` (name ->
    array) supplies gradients computed elsewhere instead of running ``fn``.

    With ``skip_kinks`` an entry whose one-sided slopes disagree by more than
    ``tolerance`` (relative) straddles a ReLU or max-pool kink, where the
    central difference is meaningless; it is counted as skipped and another
    entry is drawn in its place. Blocks where every entry is a kink fail.
    """
    items = list(blocks.items()) if isinstance(blocks, dict) else list(blocks)
    rng = np.random.default_rng(seed)

    if analytic is None:
        for _, t in items:
            t.grad = None
        loss = fn()
        loss.backward()
        analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in items}

    def value():
        if value_fn is not None:
            with no_grad():
                return float(value_fn())
        tape = active_tape()
        out = fn()
        tape.clear()
        if out.size != 1:
            raise ValueError(f"checked function must return a scalar, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    base = value()
    if value() != base:
        raise NonDeterministicForward("two identical forward passes differ; disable dropout before checking")

    report = GradCheckReport(tolerance=tolerance)
    for name, t in items:
        flat = t.data.reshape(-1)
        n = flat.size
        want = n if max_entries is None else min(n, max_entries)
        order = rng.permutation(n) if want < n or skip_kinks else np.arange(n)
        worst, checked, skipped = 0.0, 0, 0
        ga = analytic[name].reshape(-1)
        block_floor = max(floor, scale_floor * float(np.abs(ga).max(initial=0.0)))
        for i in order:
            if checked == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            if skip_kinks:
                up, down = (fp - base) / eps, (base - fm) / eps
                if relative_error(up, down, block_floor) > tolerance:
                    skipped += 1
                    continue
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(float(ga[i]), numeric, block_floor))
            checked += 1
        passed = worst < tolerance and (checked > 0 or n == 0)
        report.blocks.append(BlockReport(name, checked, worst, passed, skipped))
    return report


def check_module(model, loss_fn, tolerance, eps=1e-5, max_entries=None, seed=0, include_input=None, skip_kinks=False):
    """Finite-difference check of every parameter block of ``model``.

    ``loss_fn(model)`` returns a scalar Tensor. Pass ``include_input`` (a
    Tensor with requires_grad) to check the input gradient too.
    """
    blocks = list(model.named_parameters())
    if include_input is not None:
        blocks.append(("<input>", include_input))
    return finite_difference_check(lambda: loss_fn(model), blocks, tolerance, eps, max_entries, seed, skip_kinks=skip_kinks)


def check_op(op, inputs, tolerance, eps=1e-5, seed=0, floor=1e-6, scale_floor=0.0, reference_dtype=None):
    """Check an op by contracting its output with a fixed random projection.

    With ``reference_dtype`` (e.g. float64) the differences are taken on a
    copy of the inputs in that precision, so a float32 backward is judged
    against an accurate derivative at the same point.
    """
    tensors = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    probe_rng = np.random.default_rng(seed + 1)
    out = op(*tensors)
    probe = probe_rng.standard_normal(out.shape)
    (out * Tensor(probe.astype(out.dtype))).sum().backward()
    analytic = {f"input{i}": (t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape)) for i, t in enumerate(tensors)}

    dtype = reference_dtype or tensors[0].dtype
    ref = [Tensor(t.data.astype(dtype)) for t in tensors] if reference_dtype else tensors

    def value_fn():
        return np.sum(op(*ref).data.astype(np.float64) * probe)

    blocks = [(f"input{i}", t) for i, t in enumerate(ref)]
    return finite_difference_check(value_fn, blocks, tolerance, eps, seed=seed, floor=floor,
                                   value_fn=value_fn, scale_floor=scale_floor, analytic=analytic)
