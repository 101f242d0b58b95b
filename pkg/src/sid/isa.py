"""Macro-instruction encoding, decoding and textual assembly.

Instructions are 128 bits: Mode[127:124], Length[123:110], Width[109:96],
then three 32-bit operand slots whose top bit is the offset-enable flag and
whose low 31 bits are a word address (X at [95:64], Y at [63:32], Z at [31:0]).
Control instructions reuse the slots: Loop takes its end PC from the full
[95:64] field and its iteration count from [63:32]; RegAddi selects an offset
register through Length and reads a signed 32-bit immediate from [95:64];
RegStore/RegLoad select a register group through Length and address memory
through the Z slot.
"""

import enum
import struct
from dataclasses import dataclass

MODE_BITS = 4
LEN_BITS = 14
ADDR_BITS = 31
MAX_LEN = (1 << LEN_BITS) - 1
MAX_ADDR = (1 << ADDR_BITS) - 1
INSTRUCTION_BYTES = 16


class Opcode(enum.IntEnum):
    VADD = 0
    VSUB = 1
    VMUL = 2
    VSGT = 3
    VSIG = 4
    VTANH = 5
    VEXP = 6
    MVMUL = 7
    VSSGT = 8
    VMAXABS = 9
    VSQNORM = 10
    LOOP = 11
    REGADDI = 12
    REGSTORE = 13
    REGLOAD = 14
    HALT = 15


CONTROL_OPCODES = frozenset(
    {Opcode.LOOP, Opcode.REGADDI, Opcode.REGSTORE, Opcode.REGLOAD, Opcode.HALT}
)

# RegAddi target / RegStore group selectors (carried in the Length field).
REG_X, REG_Y, REG_Z = 0, 1, 2
GROUP_LOOP, GROUP_OFFSET = 0, 1

_OFFSET_REG_NAMES = {REG_X: "off_x", REG_Y: "off_y", REG_Z: "off_z"}
_GROUP_NAMES = {GROUP_LOOP: "loop", GROUP_OFFSET: "offset"}


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class MacroInstruction:
    mode: Opcode
    length: int = 0
    width: int = 0
    addr_x: int = 0
    addr_y: int = 0
    addr_z: int = 0
    off_x: bool = False
    off_y: bool = False
    off_z: bool = False

    def _check(self):
        for name, value, limit in (
            ("length", self.length, MAX_LEN),
            ("width", self.width, MAX_LEN),
            ("addr_x", self.addr_x, MAX_ADDR),
            ("addr_y", self.addr_y, MAX_ADDR),
            ("addr_z", self.addr_z, MAX_ADDR),
        ):
            if not 0 <= value <= limit:
                raise EncodingError(f"{name}={value} out of range (max {limit})")

    # Control-instruction views of the operand slots.
    @property
    def x_field(self) -> int:
        """Full 32-bit X slot (offset bit included)."""
        return (int(self.off_x) << 31) | self.addr_x

    @property
    def y_field(self) -> int:
        return (int(self.off_y) << 31) | self.addr_y

    @property
    def signed_imm(self) -> int:
        """X slot as a signed 32-bit immediate (RegAddi)."""
        v = self.x_field
        return v - (1 << 32) if v & (1 << 31) else v


def encode(inst: MacroInstruction) -> int:
    inst._check()
    word = int(inst.mode) << 124
    word |= inst.length << 110
    word |= inst.width << 96
    word |= inst.x_field << 64
    word |= inst.y_field << 32
    word |= (int(inst.off_z) << 31) | inst.addr_z
    return word


def decode(word: int) -> MacroInstruction:
    if not 0 <= word < (1 << 128):
        raise EncodingError("instruction word must fit in 128 bits")
    x = (word >> 64) & 0xFFFFFFFF
    y = (word >> 32) & 0xFFFFFFFF
    z = word & 0xFFFFFFFF
    return MacroInstruction(
        mode=Opcode((word >> 124) & 0xF),
        length=(word >> 110) & MAX_LEN,
        width=(word >> 96) & MAX_LEN,
        addr_x=x & MAX_ADDR,
        addr_y=y & MAX_ADDR,
        addr_z=z & MAX_ADDR,
        off_x=bool(x >> 31),
        off_y=bool(y >> 31),
        off_z=bool(z >> 31),
    )


def loop(end: int, n: int) -> MacroInstruction:
    """Loop over the instructions following this one up to and including `end`."""
    return MacroInstruction(
        mode=Opcode.LOOP,
        addr_x=end & MAX_ADDR,
        off_x=bool(end >> 31),
        addr_y=n & MAX_ADDR,
        off_y=bool(n >> 31),
    )


def regaddi(reg: int, imm: int) -> MacroInstruction:
    if reg not in _OFFSET_REG_NAMES:
        raise EncodingError(f"regaddi register selector must be 0..2, got {reg}")
    if not -(1 << 31) <= imm < (1 << 31):
        raise EncodingError("regaddi immediate must fit in signed 32 bits")
    v = imm & 0xFFFFFFFF
    return MacroInstruction(
        mode=Opcode.REGADDI, length=reg, addr_x=v & MAX_ADDR, off_x=bool(v >> 31)
    )


def regstore(group: int, addr: int) -> MacroInstruction:
    return MacroInstruction(mode=Opcode.REGSTORE, length=group, addr_z=addr)


def regload(group: int, addr: int) -> MacroInstruction:
    return MacroInstruction(mode=Opcode.REGLOAD, length=group, addr_z=addr)


def halt() -> MacroInstruction:
    return MacroInstruction(mode=Opcode.HALT)


# ---------------------------------------------------------------------------
# Binary program files: little-endian 128-bit words, 16 bytes per instruction.
# ---------------------------------------------------------------------------

def program_to_bytes(instructions) -> bytes:
    out = bytearray()
    for inst in instructions:
        out += encode(inst).to_bytes(INSTRUCTION_BYTES, "little")
    return bytes(out)


def program_from_bytes(blob: bytes) -> list[MacroInstruction]:
    if len(blob) % INSTRUCTION_BYTES:
        raise EncodingError("program file length is not a multiple of 16 bytes")
    return [
        decode(int.from_bytes(blob[i : i + INSTRUCTION_BYTES], "little"))
        for i in range(0, len(blob), INSTRUCTION_BYTES)
    ]


def save_program(path, instructions) -> None:
    with open(path, "wb") as fh:
        fh.write(program_to_bytes(instructions))


def load_program(path) -> list[MacroInstruction]:
    with open(path, "rb") as fh:
        return program_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Assembler / disassembler
# ---------------------------------------------------------------------------

class AsmError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


_MNEMONICS = {op.name.lower(): op for op in Opcode}
_FIELD_KEYS = {"length", "width", "x", "y", "z"}


def _parse_int(token: str, line_no: int, what: str) -> int:
    try:
        return int(token, 16) if token.lower().startswith(("0x", "-0x")) else int(token)
    except ValueError:
        raise AsmError(line_no, f"bad {what} value {token!r}") from None


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def assemble(text: str) -> list[MacroInstruction]:
    """Assemble one instruction per line; `name:` labels resolve to indices."""
    labels: dict[str, int] = {}
    rows: list[tuple[int, str]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        while line.split()[0].endswith(":"):
            label = line.split()[0][:-1]
            if not label.isidentifier():
                raise AsmError(line_no, f"bad label {label!r}")
            if label in labels:
                raise AsmError(line_no, f"duplicate label {label!r}")
            labels[label] = len(rows)
            line = line[len(label) + 1 :].strip()
            if not line:
                break
        if line:
            rows.append((line_no, line))

    instructions = []
    for line_no, line in rows:
        parts = line.split()
        mnemonic = parts[0].lower()
        op = _MNEMONICS.get(mnemonic)
        if op is None:
            raise AsmError(line_no, f"unknown opcode {parts[0]!r}")
        kv: dict[str, str] = {}
        flags: set[str] = set()
        for part in parts[1:]:
            if "=" in part:
                key, _, value = part.partition("=")
                kv[key.lower()] = value
            elif part.lower() in {"offx", "offy", "offz"}:
                flags.add(part.lower())
            else:
                raise AsmError(line_no, f"unexpected token {part!r}")

        def take(key: str, default=0, *, required=False):
            if key in kv:
                return _parse_int(kv.pop(key), line_no, key)
            if required:
                raise AsmError(line_no, f"missing field {key}=")
            return default

        if op is Opcode.LOOP and ("end" in kv or "n" in kv):
            end_tok = kv.pop("end", None)
            if end_tok is None:
                raise AsmError(line_no, "loop needs end=")
            end = labels[end_tok] if end_tok in labels else _parse_int(end_tok, line_no, "end")
            inst = loop(end, take("n", required=True))
        elif op is Opcode.REGADDI and ("reg" in kv or "imm" in kv):
            reg_tok = kv.pop("reg", None)
            if reg_tok is None:
                raise AsmError(line_no, "regaddi needs reg=")
            name_map = {v: k for k, v in _OFFSET_REG_NAMES.items()}
            reg = name_map.get(reg_tok, None)
            if reg is None:
                reg = _parse_int(reg_tok, line_no, "reg")
            inst = regaddi(reg, take("imm", required=True))
        elif op in (Opcode.REGSTORE, Opcode.REGLOAD) and ("group" in kv or "addr" in kv):
            group_tok = kv.pop("group", None)
            if group_tok is None:
                raise AsmError(line_no, f"{mnemonic} needs group=")
            name_map = {v: k for k, v in _GROUP_NAMES.items()}
            group = name_map.get(group_tok)
            if group is None:
                group = _parse_int(group_tok, line_no, "group")
            ctor = regstore if op is Opcode.REGSTORE else regload
            inst = ctor(group, take("addr", required=True))
        else:
            values = {key: take(key) for key in _FIELD_KEYS}
            try:
                inst = MacroInstruction(
                    mode=op,
                    length=values["length"],
                    width=values["width"],
                    addr_x=values["x"],
                    addr_y=values["y"],
                    addr_z=values["z"],
                    off_x="offx" in flags,
                    off_y="offy" in flags,
                    off_z="offz" in flags,
                )
                inst._check()
            except EncodingError as exc:
                raise AsmError(line_no, str(exc)) from None
        if kv:
            raise AsmError(line_no, f"unexpected fields {sorted(kv)}")
        instructions.append(inst)
    return instructions


def disassemble(instructions) -> str:
    lines = []
    for inst in instructions:
        op = inst.mode
        name = op.name.lower()
        if op is Opcode.HALT:
            lines.append("halt")
        elif op is Opcode.LOOP:
            lines.append(f"loop end={inst.x_field} n={inst.y_field}")
        elif op is Opcode.REGADDI:
            reg = _OFFSET_REG_NAMES.get(inst.length, str(inst.length))
            lines.append(f"regaddi reg={reg} imm={inst.signed_imm}")
        elif op in (Opcode.REGSTORE, Opcode.REGLOAD):
            lines.append(f"{name} length={inst.length} z={inst.addr_z:#x}")
        else:
            parts = [name, f"length={inst.length}"]
            if inst.width:
                parts.append(f"width={inst.width}")
            parts.append(f"x={inst.addr_x:#x}")
            parts.append(f"y={inst.addr_y:#x}")
            parts.append(f"z={inst.addr_z:#x}")
            if inst.off_x:
                parts.append("offx")
            if inst.off_y:
                parts.append("offy")
            if inst.off_z:
                parts.append("offz")
            lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")
