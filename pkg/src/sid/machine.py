"""Virtual machine for the macro-instruction ISA.

Each step executes one whole macro instruction (every FSM iteration of it),
so instruction semantics are atomic and independent of the lane count; the
lane count only enters the cycle model. Arithmetic follows the Q16.16
saturating rules from `fixedpoint`, with element order fixed to plain
sequential order so results are bit-identical for every n_track.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FX_MAX, FX_MIN, FX_ONE, LutTable, default_luts
from .isa import (
    GROUP_LOOP,
    GROUP_OFFSET,
    MacroInstruction,
    Opcode,
)

IMAGE_MAGIC = b"SIDM"
IMAGE_VERSION = 1


class MachineTrap(RuntimeError):
    """Raised when execution cannot continue; records pc and reason."""

    def __init__(self, pc: int, reason: str):
        super().__init__(f"trap at pc={pc}: {reason}")
        self.pc = pc
        self.reason = reason


class LoadError(ValueError):
    pass


@dataclass(frozen=True)
class MachineConfig:
    n_track: int = 4
    n_local: int = 64  # scratchpad words (256 bytes)
    data_mem_words: int = 458_752  # 1.75 MB
    inst_mem_slots: int = 8_192  # 128 KB of 16-byte instructions
    pipeline_overhead: int = 4  # fetch/decode + EXE fill per macro instruction
    clock_hz: float = 115e6
    luts: dict = field(default_factory=default_luts)

    def __post_init__(self):
        if self.n_track < 1 or self.n_local < 1 or self.pipeline_overhead < 0:
            raise ValueError("invalid machine configuration")


@dataclass
class RunReport:
    cycles: int
    reads: int
    writes: int
    wall_time_s: float

    def to_keyvalues(self) -> str:
        return (
            f"cycles={self.cycles}\n"
            f"reads={self.reads}\n"
            f"writes={self.writes}\n"
            f"wall_time_s={self.wall_time_s:.9f}\n"
        )


class MachineState:
    """Mutable machine state; one execution context owns it at a time."""

    def __init__(self, config: MachineConfig, program, memory: np.ndarray):
        self.config = config
        self.program = list(program)
        self.memory = memory  # int32, data_mem_words long
        self.scratchpad = np.zeros(config.n_local, dtype=np.int32)
        self.pc = 0
        self.loop_begin = 0
        self.loop_end = 0
        self.loop_n = 0
        self.off_x = 0
        self.off_y = 0
        self.off_z = 0
        self.cycles = 0
        self.reads = 0
        self.writes = 0
        self.halted = False

    # -- helpers -----------------------------------------------------------

    def _operand(self, base: int, enabled: bool, offset: int, count: int) -> int:
        start = base + (offset if enabled else 0)
        if count and not (0 <= start and start + count <= len(self.memory)):
            raise MachineTrap(
                self.pc, f"address range [{start}, {start + count}) out of bounds"
            )
        return start

    def read_words(self, addr: int, count: int) -> np.ndarray:
        return self.memory[addr : addr + count].astype(np.int64)

    def write_words(self, addr: int, values) -> None:
        self.memory[addr : addr + len(values)] = np.asarray(values, dtype=np.int64).astype(
            np.int32
        )


def load(config: MachineConfig, program, image) -> MachineState:
    program = list(program)
    if len(program) > config.inst_mem_slots:
        raise LoadError(
            f"program has {len(program)} instructions, "
            f"instruction memory holds {config.inst_mem_slots}"
        )
    image = np.asarray(image, dtype=np.int32)
    if len(image) > config.data_mem_words:
        raise LoadError(
            f"image has {len(image)} words, data memory holds {config.data_mem_words}"
        )
    memory = np.zeros(config.data_mem_words, dtype=np.int32)
    memory[: len(image)] = image
    return MachineState(config, program, memory)


def instruction_cycles(inst: MacroInstruction, config: MachineConfig) -> int:
    """Closed-form cycle cost of one macro instruction."""
    op = inst.mode
    if op in (Opcode.LOOP, Opcode.REGADDI, Opcode.REGSTORE, Opcode.REGLOAD, Opcode.HALT):
        return 1
    iters = math.ceil(inst.length / config.n_track)
    if op is Opcode.MVMUL:
        return inst.width * iters + config.pipeline_overhead
    return iters + config.pipeline_overhead


def _sat(values: np.ndarray) -> np.ndarray:
    return np.clip(values, FX_MIN, FX_MAX)


def _fx_mul_vec(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _sat((a * b) >> 16)


def _saturating_running_sum(start: np.ndarray, terms: np.ndarray) -> np.ndarray:
    """Row-wise sequential saturating accumulation of `terms` onto `start`.

    Fast path: if no prefix leaves the representable range the result is the
    plain sum. Only rows that saturate somewhere fall back to the exact
    per-element loop.
    """
    if terms.shape[1] == 0:
        return start.copy()
    prefix = start[:, None] + np.cumsum(terms, axis=1, dtype=np.int64)
    ok = ((prefix <= FX_MAX) & (prefix >= FX_MIN)).all(axis=1)
    result = np.where(ok, prefix[:, -1], start)
    if not ok.all():
        for r in np.nonzero(~ok)[0]:
            acc = int(start[r])
            for t in terms[r]:
                acc = acc + int(t)
                if acc > FX_MAX:
                    acc = FX_MAX
                elif acc < FX_MIN:
                    acc = FX_MIN
            result[r] = acc
    return result


class _Executor:
    """Executes decoded instructions against a MachineState."""

    def __init__(self, state: MachineState):
        self.s = state

    def run_one(self, inst: MacroInstruction) -> None:
        handler = self._HANDLERS[inst.mode]
        handler(self, inst)

    # -- element-wise vector modes ----------------------------------------

    def _binary(self, inst, fn):
        s = self.s
        n = inst.length
        xs = s._operand(inst.addr_x, inst.off_x, s.off_x, n)
        ys = s._operand(inst.addr_y, inst.off_y, s.off_y, n)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, n)
        x = s.read_words(xs, n)
        y = s.read_words(ys, n)
        s.write_words(zs, fn(x, y))
        s.reads += 2 * n
        s.writes += n

    def _vadd(self, inst):
        self._binary(inst, lambda x, y: _sat(x + y))

    def _vsub(self, inst):
        self._binary(inst, lambda x, y: _sat(x - y))

    def _vmul(self, inst):
        self._binary(inst, _fx_mul_vec)

    def _vsgt(self, inst):
        self._binary(inst, lambda x, y: np.where(x >= y, FX_ONE, 0))

    def _vssgt(self, inst):
        s = self.s
        n = inst.length
        xs = s._operand(inst.addr_x, inst.off_x, s.off_x, n)
        ys = s._operand(inst.addr_y, inst.off_y, s.off_y, 1)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, n)
        scalar = int(s.memory[ys])
        x = s.read_words(xs, n)
        s.write_words(zs, np.where(x > scalar, FX_ONE, 0))
        s.reads += n + 1
        s.writes += n

    def _lut_mode(self, inst, table_name):
        s = self.s
        table: LutTable = s.config.luts[table_name]
        n = inst.length
        xs = s._operand(inst.addr_x, inst.off_x, s.off_x, n)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, n)
        x = s.read_words(xs, n)
        k, b = table.lookup_array(x)
        s.write_words(zs, _sat(_fx_mul_vec(k, x) + b))
        s.reads += n
        s.writes += n

    def _vsig(self, inst):
        self._lut_mode(inst, "sigmoid")

    def _vtanh(self, inst):
        self._lut_mode(inst, "tanh")

    def _vexp(self, inst):
        self._lut_mode(inst, "exp-neg")

    # -- scratchpad reductions --------------------------------------------

    def _vmaxabs(self, inst):
        s = self.s
        n = inst.length
        xs = s._operand(inst.addr_x, inst.off_x, s.off_x, n)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, 1)
        x = s.read_words(xs, n)
        best = int(min(np.abs(x).max(initial=0), FX_MAX))
        s.scratchpad[0] = best
        s.write_words(zs, [best])
        s.reads += n
        s.writes += 1

    def _vsqnorm(self, inst):
        s = self.s
        n = inst.length
        xs = s._operand(inst.addr_x, inst.off_x, s.off_x, n)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, 1)
        x = s.read_words(xs, n)
        squares = _fx_mul_vec(x, x)
        total = int(min(squares.sum(), FX_MAX))  # non-negative terms: monotone prefix
        s.scratchpad[0] = total
        s.write_words(zs, [total])
        s.reads += n
        s.writes += 1

    def _mvmul(self, inst):
        s = self.s
        rows, cols = inst.width, inst.length
        if rows > s.config.n_local:
            raise MachineTrap(s.pc, f"Mvmul width {rows} exceeds scratchpad {s.config.n_local}")
        xs = s._operand(inst.addr_x, inst.off_x, s.off_x, rows * cols)
        ys = s._operand(inst.addr_y, inst.off_y, s.off_y, cols)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, rows)
        if rows == 0:
            return
        w = s.read_words(xs, rows * cols).reshape(rows, cols)
        v = s.read_words(ys, cols)
        prior = s.read_words(zs, rows)  # partial sums start from prior Z contents
        products = _fx_mul_vec(w, v[None, :])
        result = _saturating_running_sum(prior, products)
        s.scratchpad[:rows] = result
        s.write_words(zs, result)
        s.reads += rows * cols + cols + rows
        s.writes += rows

    # -- control ------------------------------------------------------------

    def _loop(self, inst):
        s = self.s
        s.loop_begin = s.pc + 1
        s.loop_end = inst.x_field
        s.loop_n = inst.y_field

    def _regaddi(self, inst):
        s = self.s
        if inst.length == 0:
            s.off_x += inst.signed_imm
        elif inst.length == 1:
            s.off_y += inst.signed_imm
        elif inst.length == 2:
            s.off_z += inst.signed_imm
        else:
            raise MachineTrap(s.pc, f"regaddi selector {inst.length} undefined")

    def _reg_group(self, inst):
        if inst.length == GROUP_LOOP:
            return ("loop_begin", "loop_end", "loop_n")
        if inst.length == GROUP_OFFSET:
            return ("off_x", "off_y", "off_z")
        raise MachineTrap(self.s.pc, f"register group {inst.length} undefined")

    def _regstore(self, inst):
        s = self.s
        names = self._reg_group(inst)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, 3)
        raw = [(getattr(s, n) & 0xFFFFFFFF) for n in names]
        s.write_words(zs, [v - (1 << 32) if v >> 31 else v for v in raw])
        s.writes += 3

    def _regload(self, inst):
        s = self.s
        names = self._reg_group(inst)
        zs = s._operand(inst.addr_z, inst.off_z, s.off_z, 3)
        words = [int(w) & 0xFFFFFFFF for w in s.memory[zs : zs + 3]]
        for name, raw in zip(names, words):
            if name.startswith("off"):
                setattr(s, name, raw - (1 << 32) if raw >> 31 else raw)
            else:
                setattr(s, name, raw)
        s.reads += 3

    def _halt(self, inst):
        self.s.halted = True

    _HANDLERS = {
        Opcode.VADD: _vadd,
        Opcode.VSUB: _vsub,
        Opcode.VMUL: _vmul,
        Opcode.VSGT: _vsgt,
        Opcode.VSIG: _vsig,
        Opcode.VTANH: _vtanh,
        Opcode.VEXP: _vexp,
        Opcode.MVMUL: _mvmul,
        Opcode.VSSGT: _vssgt,
        Opcode.VMAXABS: _vmaxabs,
        Opcode.VSQNORM: _vsqnorm,
        Opcode.LOOP: _loop,
        Opcode.REGADDI: _regaddi,
        Opcode.REGSTORE: _regstore,
        Opcode.REGLOAD: _regload,
        Opcode.HALT: _halt,
    }


def step_instruction(state: MachineState) -> MachineState:
    """Execute one macro instruction to completion, including loop back-jumps."""
    if state.halted:
        raise MachineTrap(state.pc, "machine is halted")
    if state.pc >= len(state.program):
        state.halted = True  # running off the end is a clean stop
        return state
    inst = state.program[state.pc]
    _Executor(state).run_one(inst)
    state.cycles += instruction_cycles(inst, state.config)
    if state.halted:
        return state
    if state.pc == state.loop_end and state.loop_n != 0:
        state.loop_n -= 1
        state.pc = state.loop_begin
    else:
        state.pc += 1
    return state


def run(state: MachineState, max_cycles: int | None = None) -> RunReport:
    """Run to Halt (or past the last instruction); deterministic."""
    while not state.halted:
        step_instruction(state)
        if max_cycles is not None and state.cycles > max_cycles:
            raise MachineTrap(state.pc, f"cycle budget {max_cycles} exceeded")
    return RunReport(
        cycles=state.cycles,
        reads=state.reads,
        writes=state.writes,
        wall_time_s=state.cycles / state.config.clock_hz,
    )


# ---------------------------------------------------------------------------
# Memory image files: "SIDM", version, word count, then little-endian words.
# ---------------------------------------------------------------------------

def image_to_bytes(words) -> bytes:
    arr = np.asarray(words, dtype=np.int32)
    header = IMAGE_MAGIC + struct.pack("<II", IMAGE_VERSION, len(arr))
    return header + arr.astype("<i4").tobytes()


def image_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != IMAGE_MAGIC:
        raise LoadError("bad image magic")
    version, count = struct.unpack("<II", blob[4:12])
    if version != IMAGE_VERSION:
        raise LoadError(f"unsupported image version {version}")
    data = np.frombuffer(blob[12:], dtype="<i4")
    if len(data) != count:
        raise LoadError(f"image declares {count} words but carries {len(data)}")
    return data.astype(np.int32)


def save_image(path, words) -> None:
    with open(path, "wb") as fh:
        fh.write(image_to_bytes(words))


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return image_from_bytes(fh.read())
