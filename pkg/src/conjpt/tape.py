"""Flat instruction tapes compiled from expression trees.

A tape is a straight-line program over double slots: the first ``n_inputs``
slots hold the evaluation point, the next block holds deduplicated constants,
and every instruction appends one result slot.  Integer powers are lowered to
multiplication chains at compile time, so the opcode set stays tiny and the
compiled kernel's evaluator is a dozen lines of C.

The same tape is evaluated three ways: a pure-Python float loop (scalar
fallback), a vectorized numpy pass over a batch of points, and the Cython
kernel when built.  The numpy/scalar paths follow IEEE semantics (division by
zero gives inf/nan instead of raising) to match libm; the strict user-facing
domain checks live in :mod:`conjpt.expr`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from conjpt import _backend
from conjpt.expr import ExprNode

OP_ADD = 0
OP_SUB = 1
OP_MUL = 2
OP_DIV = 3
OP_NEG = 4
OP_SIN = 5
OP_COS = 6
OP_EXP = 7
OP_LOG = 8


@dataclass(frozen=True)
class Tape:
    n_inputs: int
    consts: np.ndarray  # (n_consts,) float64
    code: np.ndarray  # (K, 3) int32 rows (op, a, b); result slot = base + k
    outputs: np.ndarray  # (M,) int32 slot indices

    @property
    def n_slots(self) -> int:
        return self.n_inputs + len(self.consts) + len(self.code)

    def eval_floats(self, xs) -> list[float]:
        """Scalar evaluation; uses the compiled evaluator when available."""
        if _backend.HAVE_COMPILED:
            out = np.empty(len(self.outputs))
            x = np.ascontiguousarray(xs, dtype=float)
            _backend._kernels.eval_tape(
                self.code, self.consts, self.outputs, self.n_inputs, x, out
            )
            return out.tolist()
        return _eval_floats_py(self, xs)

    def eval_point(self, xs) -> np.ndarray:
        return np.asarray(self.eval_floats(xs))

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on ``X`` of shape (B, n_inputs) -> (B, M)."""
        return _eval_batch_np(self, np.asarray(X, dtype=float))


class _Compiler:
    def __init__(self, n_inputs: int):
        self.n_inputs = n_inputs
        self.consts: list[float] = []
        self.const_slot: dict[float, int] = {}
        self.code: list[tuple[int, int, int]] = []
        self.cache: dict[ExprNode, int] = {}

    def const(self, v: float) -> int:
        key = float(v)
        slot = self.const_slot.get(key)
        if slot is None:
            slot = self.n_inputs + len(self.consts)
            self.consts.append(key)
            self.const_slot[key] = slot
        return slot

    def emit(self, op: int, a: int, b: int = 0) -> int:
        self.code.append((op, a, b))
        return self.n_inputs + self._n_consts_final + len(self.code) - 1

    def compile(self, e: ExprNode) -> int:
        cached = self.cache.get(e)
        if cached is not None:
            return cached
        kind = e.kind
        if kind == "const":
            slot = self.const(e.value)
        elif kind == "var":
            if e.index >= self.n_inputs:
                raise ValueError(
                    f"expression uses variable index {e.index} but tape has "
                    f"{self.n_inputs} inputs"
                )
            slot = e.index
        elif kind in ("add", "sub", "mul", "div"):
            a = self.compile(e.children[0])
            b = self.compile(e.children[1])
            op = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV}[kind]
            slot = self.emit(op, a, b)
        elif kind == "neg":
            slot = self.emit(OP_NEG, self.compile(e.children[0]))
        elif kind in ("sin", "cos", "exp", "log"):
            op = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "log": OP_LOG}[kind]
            slot = self.emit(op, self.compile(e.children[0]))
        elif kind == "pow":
            slot = self._compile_pow(self.compile(e.children[0]), e.exponent)
        else:
            raise ValueError(f"unknown node kind {kind!r}")
        self.cache[e] = slot
        return slot

    def _compile_pow(self, base: int, k: int) -> int:
        if k == 0:
            return self.const(1.0)
        if k == 1:
            return base
        # binary exponentiation on slots
        result = base if (k & 1) else -1
        sq = base
        k >>= 1
        while k:
            sq = self.emit(OP_MUL, sq, sq)
            if k & 1:
                result = sq if result < 0 else self.emit(OP_MUL, result, sq)
            k >>= 1
        return result


def compile_tape(exprs, n_inputs: int) -> Tape:
    """Compile a list of expression trees sharing one input vector."""
    # two passes: the first collects constants so result slots can be laid
    # out after them, the second emits code with final slot numbering
    probe = _Compiler(n_inputs)
    probe._n_consts_final = 0
    for e in exprs:
        probe.compile(e)
    comp = _Compiler(n_inputs)
    comp._n_consts_final = len(probe.consts)
    outputs = [comp.compile(e) for e in exprs]
    if comp.consts != probe.consts:
        raise AssertionError("constant pool mismatch between compile passes")
    return Tape(
        n_inputs=n_inputs,
        consts=np.asarray(comp.consts, dtype=float),
        code=np.asarray(comp.code, dtype=np.int32).reshape(-1, 3),
        outputs=np.asarray(outputs, dtype=np.int32),
    )


def _eval_floats_py(tape: Tape, xs) -> list[float]:
    slots = [float(v) for v in xs]
    slots.extend(tape.consts.tolist())
    inf = math.inf
    for op, a, b in tape.code.tolist():
        va = slots[a]
        if op == OP_ADD:
            r = va + slots[b]
        elif op == OP_SUB:
            r = va - slots[b]
        elif op == OP_MUL:
            r = va * slots[b]
        elif op == OP_DIV:
            vb = slots[b]
            if vb == 0.0:
                r = math.nan if va == 0.0 else math.copysign(inf, va)
            else:
                r = va / vb
        elif op == OP_NEG:
            r = -va
        elif op == OP_SIN:
            r = math.sin(va)
        elif op == OP_COS:
            r = math.cos(va)
        elif op == OP_EXP:
            try:
                r = math.exp(va)
            except OverflowError:
                r = inf
        else:  # OP_LOG
            if va > 0.0:
                r = math.log(va)
            elif va == 0.0:
                r = -inf
            else:
                r = math.nan
        slots.append(r)
    return [slots[i] for i in tape.outputs.tolist()]


def _eval_batch_np(tape: Tape, X: np.ndarray) -> np.ndarray:
    if X.ndim != 2 or X.shape[1] != tape.n_inputs:
        raise ValueError(f"expected batch of shape (B, {tape.n_inputs})")
    B = X.shape[0]
    slots: list[np.ndarray] = [np.ascontiguousarray(X[:, j]) for j in range(tape.n_inputs)]
    for c in tape.consts:
        slots.append(np.full(B, c))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for op, a, b in tape.code.tolist():
            va = slots[a]
            if op == OP_ADD:
                r = va + slots[b]
            elif op == OP_SUB:
                r = va - slots[b]
            elif op == OP_MUL:
                r = va * slots[b]
            elif op == OP_DIV:
                r = va / slots[b]
            elif op == OP_NEG:
                r = -va
            elif op == OP_SIN:
                r = np.sin(va)
            elif op == OP_COS:
                r = np.cos(va)
            elif op == OP_EXP:
                r = np.exp(va)
            else:
                r = np.log(va)
            slots.append(r)
    return np.column_stack([slots[i] for i in tape.outputs.tolist()])
