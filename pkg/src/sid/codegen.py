"""Lowering model bundles and the KS/vote pipeline to programs plus images.

Layout conventions shared by every generated program:
  * parameters are quantized to Q16.16 and placed in the memory image with a
    symbol table (name -> (word address, length));
  * matrix-vector products split into row blocks of at most n_local rows and
    accumulate into their destination, which the image zero-initializes;
  * biases are added with an explicit Vadd after the matrix blocks (the
    recurrent step programs instead copy the bias in before accumulating so a
    step can run repeatedly);
  * programs end in Halt and are one-shot per load unless noted otherwise.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .detection import KsDecisionConfig
from .fixedpoint import FX_ONE, fx_array, fx_from_real
from .isa import (
    GROUP_LOOP,
    GROUP_OFFSET,
    MacroInstruction,
    Opcode,
    halt,
    loop,
    regaddi,
    regload,
    regstore,
)
from .machine import MachineConfig, MachineState, load, run
from .models import ModelBundle

REAL_LIMIT = 32768.0 - 1.0 / FX_ONE


class CompileError(ValueError):
    pass


@dataclass
class CompiledProgram:
    name: str
    kind: str
    strategy: str
    instructions: list
    image: np.ndarray
    symbols: dict[str, tuple[int, int]]
    stages: dict[str, int] = field(default_factory=dict)
    clamped: list[str] = field(default_factory=list)

    @property
    def code_bytes(self) -> int:
        return 16 * len(self.instructions)

    def addr(self, name: str) -> int:
        return self.symbols[name][0]

    def length(self, name: str) -> int:
        return self.symbols[name][1]

    def symbol_table_text(self) -> str:
        lines = [f"{name} {addr} {length}" for name, (addr, length) in sorted(self.symbols.items())]
        return "\n".join(lines) + "\n"


class _Builder:
    def __init__(self, name: str, kind: str, strategy: str):
        self.name = name
        self.kind = kind
        self.strategy = strategy
        self.cursor = 0
        self.symbols: dict[str, tuple[int, int]] = {}
        self.chunks: list[tuple[int, np.ndarray]] = []
        self.instructions: list[MacroInstruction] = []
        self.clamped: list[str] = []

    def alloc(self, name: str, length: int, values=None) -> int:
        if name in self.symbols:
            raise CompileError(f"duplicate symbol {name!r}")
        addr = self.cursor
        self.cursor += length
        self.symbols[name] = (addr, length)
        if values is not None:
            values = np.asarray(values, dtype=np.float64).reshape(-1)
            if len(values) != length:
                raise CompileError(f"symbol {name!r}: {len(values)} values for {length} words")
            if np.any(np.abs(values) > REAL_LIMIT):
                self.clamped.append(name)
            self.chunks.append((addr, fx_array(values)))
        return addr

    def tensor(self, name: str, values) -> int:
        values = np.asarray(values, dtype=np.float64)
        return self.alloc(name, values.size, values)

    def emit(self, inst: MacroInstruction) -> int:
        self.instructions.append(inst)
        return len(self.instructions) - 1

    def op(self, mode, length, x, y, z, width=0, offx=False, offy=False, offz=False) -> int:
        return self.emit(
            MacroInstruction(
                mode=mode, length=length, width=width,
                addr_x=x, addr_y=y, addr_z=z,
                off_x=offx, off_y=offy, off_z=offz,
            )
        )

    def placeholder_loop(self, n: int) -> int:
        return self.emit(loop(0, n))

    def patch_loop(self, idx: int, end: int) -> None:
        n = self.instructions[idx].y_field
        self.instructions[idx] = loop(end, n)

    def finish(self) -> CompiledProgram:
        image = np.zeros(self.cursor, dtype=np.int32)
        for addr, values in self.chunks:
            image[addr : addr + len(values)] = values
        if self.clamped:
            warnings.warn(
                f"{self.name}: clamped out-of-range tensors: {', '.join(self.clamped)}",
                RuntimeWarning,
                stacklevel=3,
            )
        return CompiledProgram(
            name=self.name,
            kind=self.kind,
            strategy=self.strategy,
            instructions=self.instructions,
            image=image,
            symbols=self.symbols,
            clamped=self.clamped,
        )


def _row_blocks(rows: int, n_local: int):
    """(first_row, block_rows) pairs covering `rows` in blocks of <= n_local."""
    out = []
    r = 0
    while r < rows:
        blk = min(n_local, rows - r)
        out.append((r, blk))
        r += blk
    return out


def _emit_matvec(b: _Builder, config, w_addr, rows, cols, y_addr, z_addr):
    """Row-split Mvmul group accumulating W @ y into z."""
    for r0, blk in _row_blocks(rows, config.n_local):
        b.op(
            Opcode.MVMUL, cols, w_addr + r0 * cols, y_addr, z_addr + r0, width=blk
        )


# ---------------------------------------------------------------------------
# Feed-forward models
# ---------------------------------------------------------------------------

def _compile_lr(m: ModelBundle, config: MachineConfig) -> CompiledProgram:
    w = m["w"]
    b = _Builder("lr", "lr", "looped")
    waddr = b.tensor("w", w)
    baddr = b.tensor("b", [m.scalar("b")])
    x = b.alloc("input", len(w))
    z = b.alloc("score", 1)
    prob = b.alloc("prob", 1)
    half = b.tensor("half", [0.5])
    decision = b.alloc("decision", 1)
    b.op(Opcode.MVMUL, len(w), waddr, x, z, width=1)
    b.op(Opcode.VADD, 1, z, baddr, z)
    b.op(Opcode.VSIG, 1, z, 0, prob)
    b.op(Opcode.VSGT, 1, prob, half, decision)
    b.emit(halt())
    return b.finish()


def _compile_linear_svm(m: ModelBundle, config: MachineConfig) -> CompiledProgram:
    weff = np.asarray(m["coef"]) @ np.asarray(m["sv"])  # collapse to the primal form
    b = _Builder("linear_svm", "linear_svm", "looped")
    waddr = b.tensor("w", weff)
    baddr = b.tensor("b", [m.scalar("b")])
    x = b.alloc("input", len(weff))
    score = b.alloc("score", 1)
    zero = b.alloc("zero", 1)
    decision = b.alloc("decision", 1)
    b.op(Opcode.MVMUL, len(weff), waddr, x, score, width=1)
    b.op(Opcode.VADD, 1, score, baddr, score)
    b.op(Opcode.VSGT, 1, score, zero, decision)
    b.emit(halt())
    return b.finish()


def _compile_kernel_machine(m: ModelBundle, config: MachineConfig, strategy: str) -> CompiledProgram:
    """Shared kernel-sum lowering for the two-class and one-class SVMs.

    Per support vector: d = x - v_i; sq = squared norm of d; kv = exp(-gamma*sq);
    acc += coef_i * kv. The looped form walks v_i through off_y (stride D) and
    coef_i through off_x (stride 1).
    """
    is_ocsvm = m.kind == "ocsvm"
    sv = np.asarray(m["sv"], dtype=np.float64)
    coef = np.asarray(m["coef"], dtype=np.float64)
    n_sv, dim = sv.shape
    gamma = m.scalar("gamma")
    offset = -m.scalar("rho") if is_ocsvm else m.scalar("b")

    b = _Builder(m.kind, m.kind, strategy)
    zeros3 = b.alloc("zeros3", 3)
    svaddr = b.tensor("sv", sv)
    caddr = b.tensor("coef", coef)
    neg_gamma = b.tensor("neg_gamma", [-gamma])
    offs = b.tensor("offset_term", [offset])
    x = b.alloc("input", dim)
    d = b.alloc("d", dim)
    sq = b.alloc("sq", 1)
    arg = b.alloc("arg", 1)
    kv = b.alloc("kv", 1)
    term = b.alloc("term", 1)
    acc = b.alloc("acc", 1)
    score = b.alloc("score", 1)
    zero = b.alloc("zero", 1)
    decision = b.alloc("decision", 1)

    if strategy == "looped":
        b.emit(regload(GROUP_OFFSET, zeros3))
        loop_idx = b.placeholder_loop(n_sv - 1)
        b.op(Opcode.VSUB, dim, x, svaddr, d, offy=True)
        b.op(Opcode.VSQNORM, dim, d, 0, sq)
        b.op(Opcode.VMUL, 1, sq, neg_gamma, arg)
        b.op(Opcode.VEXP, 1, arg, 0, kv)
        b.op(Opcode.VMUL, 1, caddr, kv, term, offx=True)
        b.op(Opcode.VADD, 1, acc, term, acc)
        b.emit(regaddi(1, dim))  # off_y += dim: next support vector
        end = b.emit(regaddi(0, 1))  # off_x += 1: next coefficient
        b.patch_loop(loop_idx, end)
    else:
        for i in range(n_sv):
            b.op(Opcode.VSUB, dim, x, svaddr + i * dim, d)
            b.op(Opcode.VSQNORM, dim, d, 0, sq)
            b.op(Opcode.VMUL, 1, sq, neg_gamma, arg)
            b.op(Opcode.VEXP, 1, arg, 0, kv)
            b.op(Opcode.VMUL, 1, caddr + i, kv, term)
            b.op(Opcode.VADD, 1, acc, term, acc)
    b.op(Opcode.VADD, 1, acc, offs, score)
    b.op(Opcode.VSGT, 1, score, zero, decision)  # 1.0 means +1 / normal
    b.emit(halt())
    return b.finish()


def _compile_mlp(m: ModelBundle, config: MachineConfig) -> CompiledProgram:
    n_layers = int(m.scalar("n_layers"))
    b = _Builder("mlp", "mlp", "looped")
    sizes = [m["W0"].shape[1]] + [len(m[f"b{i}"]) for i in range(n_layers)]
    weights = []
    for i in range(n_layers):
        weights.append(
            (b.tensor(f"W{i}", m[f"W{i}"]), b.tensor(f"b{i}", m[f"b{i}"]))
        )
    acts = [b.alloc("input", sizes[0])]
    for i in range(1, n_layers):
        acts.append(b.alloc(f"act{i}", sizes[i]))
    logits = b.alloc("logits", sizes[-1])
    acts.append(logits)
    decision = b.alloc("decision", 1) if sizes[-1] == 2 else None

    for i in range(n_layers):
        waddr, baddr = weights[i]
        _emit_matvec(b, config, waddr, sizes[i + 1], sizes[i], acts[i], acts[i + 1])
        b.op(Opcode.VADD, sizes[i + 1], acts[i + 1], baddr, acts[i + 1])
        if i < n_layers - 1:
            b.op(Opcode.VSIG, sizes[i + 1], acts[i + 1], 0, acts[i + 1])
    if decision is not None:
        b.op(Opcode.VSGT, 1, logits + 1, logits, decision)  # impostor >= owner
    b.emit(halt())
    return b.finish()


def mlp_instruction_count(sizes, n_local=64) -> int:
    """Closed-form instruction count of the MLP lowering."""
    total = 0
    for fan_out in sizes[1:]:
        total += math.ceil(fan_out / n_local) + 1  # blocks + bias
    total += len(sizes) - 2  # hidden activations
    total += (1 if sizes[-1] == 2 else 0) + 1  # decision + halt
    return total


def kernel_instruction_count(n_sv: int, strategy: str) -> int:
    if strategy == "looped":
        return 13
    return 6 * n_sv + 3


# ---------------------------------------------------------------------------
# Recurrent step programs
# ---------------------------------------------------------------------------

def _compile_lstm_step(m: ModelBundle, config: MachineConfig, err_capacity=512) -> CompiledProgram:
    hidden = len(m["bc"])
    dim = m["Wc"].shape[1]
    b = _Builder("lstm_step", "lstm", "looped")
    gates = {}
    for g in "cfio":
        wcat = np.concatenate([np.asarray(m[f"W{g}"]), np.asarray(m[f"U{g}"])], axis=1)
        gates[g] = (b.tensor(f"Wcat_{g}", wcat), b.tensor(f"b{g}", m[f"b{g}"]))
    wout = b.tensor("Wout", m["Wout"])
    bout = b.tensor("bout", m["bout"])
    xh = b.alloc("input", dim)  # x and h are contiguous: one gate operand
    h = b.alloc("h", hidden)
    assert h == xh + dim
    c = b.alloc("c", hidden)
    gate_regions = {g: b.alloc(f"gate_{g}", hidden) for g in "cfio"}
    t1 = b.alloc("t1", hidden)
    t2 = b.alloc("t2", hidden)
    t3 = b.alloc("t3", hidden)
    pred = b.alloc("pred", dim)
    ed = b.alloc("ed", dim)
    errs = b.alloc("errors", err_capacity)
    zerovec = b.alloc("zerovec", hidden)

    # Error of the previous prediction against the newly arrived reading; the
    # write pointer lives in off_z and survives across runs of this program.
    b.op(Opcode.VSUB, dim, pred, xh, ed)
    b.op(Opcode.VSQNORM, dim, ed, 0, errs, offz=True)
    b.emit(regaddi(2, 1))
    for g in "cfio":
        waddr, baddr = gates[g]
        region = gate_regions[g]
        b.op(Opcode.VADD, hidden, baddr, zerovec, region)  # bias in, repeat-safe
        _emit_matvec(b, config, waddr, hidden, dim + hidden, xh, region)
    b.op(Opcode.VTANH, hidden, gate_regions["c"], 0, gate_regions["c"])
    b.op(Opcode.VSIG, hidden, gate_regions["f"], 0, gate_regions["f"])
    b.op(Opcode.VSIG, hidden, gate_regions["i"], 0, gate_regions["i"])
    b.op(Opcode.VSIG, hidden, gate_regions["o"], 0, gate_regions["o"])
    b.op(Opcode.VMUL, hidden, gate_regions["f"], c, t1)
    b.op(Opcode.VMUL, hidden, gate_regions["i"], gate_regions["c"], t2)
    b.op(Opcode.VADD, hidden, t1, t2, c)
    b.op(Opcode.VTANH, hidden, c, 0, t3)
    b.op(Opcode.VMUL, hidden, gate_regions["o"], t3, h)
    b.op(Opcode.VADD, dim, bout, zerovec, pred)
    _emit_matvec(b, config, wout, dim, hidden, h, pred)
    b.emit(halt())
    return b.finish()


def _compile_gru_step(m: ModelBundle, config: MachineConfig, err_capacity=512) -> CompiledProgram:
    hidden = len(m["bz"])
    dim = m["Wz"].shape[1]
    b = _Builder("gru_step", "gru", "looped")
    gates = {}
    for g in "zr":
        wcat = np.concatenate([np.asarray(m[f"W{g}"]), np.asarray(m[f"U{g}"])], axis=1)
        gates[g] = (b.tensor(f"Wcat_{g}", wcat), b.tensor(f"b{g}", m[f"b{g}"]))
    wh = b.tensor("Wh", m["Wh"])
    bh = b.tensor("bh", m["bh"])
    ur = b.tensor("Ur_cand", m["Ur"])
    wout = b.tensor("Wout", m["Wout"])
    bout = b.tensor("bout", m["bout"])
    xh = b.alloc("input", dim)
    h = b.alloc("h", hidden)
    assert h == xh + dim
    gate_z = b.alloc("gate_z", hidden)
    gate_r = b.alloc("gate_r", hidden)
    cand = b.alloc("cand", hidden)
    t1 = b.alloc("t1", hidden)
    t2 = b.alloc("t2", hidden)
    t3 = b.alloc("t3", hidden)
    pred = b.alloc("pred", dim)
    ed = b.alloc("ed", dim)
    errs = b.alloc("errors", err_capacity)
    zerovec = b.alloc("zerovec", hidden)
    ones = b.tensor("ones", np.ones(hidden))

    b.op(Opcode.VSUB, dim, pred, xh, ed)
    b.op(Opcode.VSQNORM, dim, ed, 0, errs, offz=True)
    b.emit(regaddi(2, 1))
    for g, region in (("z", gate_z), ("r", gate_r)):
        waddr, baddr = gates[g]
        b.op(Opcode.VADD, hidden, baddr, zerovec, region)
        _emit_matvec(b, config, waddr, hidden, dim + hidden, xh, region)
    b.op(Opcode.VSIG, hidden, gate_z, 0, gate_z)
    b.op(Opcode.VSIG, hidden, gate_r, 0, gate_r)
    b.op(Opcode.VMUL, hidden, gate_r, h, t1)  # r * h
    b.op(Opcode.VADD, hidden, bh, zerovec, cand)
    _emit_matvec(b, config, wh, hidden, dim, xh, cand)
    _emit_matvec(b, config, ur, hidden, hidden, t1, cand)  # candidate reuses Ur
    b.op(Opcode.VSIG, hidden, cand, 0, cand)
    b.op(Opcode.VSUB, hidden, ones, gate_z, t2)  # 1 - z
    b.op(Opcode.VMUL, hidden, t2, h, t3)
    b.op(Opcode.VMUL, hidden, gate_z, cand, t2)
    b.op(Opcode.VADD, hidden, t3, t2, h)
    b.op(Opcode.VADD, dim, bout, zerovec, pred)
    _emit_matvec(b, config, wout, dim, hidden, h, pred)
    b.emit(halt())
    return b.finish()


def lstm_instruction_count(hidden, dim, n_local=64) -> int:
    blocks = math.ceil(hidden / n_local)
    out_blocks = math.ceil(dim / n_local)
    return 3 + 4 * (1 + blocks) + 4 + 3 + 2 + 1 + out_blocks + 1


def gru_instruction_count(hidden, dim, n_local=64) -> int:
    blocks = math.ceil(hidden / n_local)
    out_blocks = math.ceil(dim / n_local)
    return 3 + 2 * (1 + blocks) + 2 + 1 + 1 + 2 * blocks + 1 + 4 + 1 + out_blocks + 1


# ---------------------------------------------------------------------------
# KS + vote stage
# ---------------------------------------------------------------------------

def compile_ks_stage(
    references,
    cfg: KsDecisionConfig,
    strategy: str = "looped",
    include_vote: bool = True,
    include_ks: bool = True,
) -> CompiledProgram:
    """Compile the reference comparison and (optionally) the vote.

    The image stores, per reference, the bin boundaries shifted up one ulp
    (so the strict vector-scalar compare counts errors <= boundary exactly)
    and the cumulative histogram in count units. The observed window lives at
    the `errors` symbol, one Q16.16 word per error; the unrolled variant also
    materializes them from (prediction, actual) pairs since without offset
    registers the step program cannot append to the error window itself.
    """
    refs = list(references)
    n_ref = len(refs)
    n_err = cfg.window_errors
    bins = refs[0].bins if refs else cfg.bins
    for ref in refs:
        if ref.bins != bins:
            raise CompileError("all references must share one bin count")
        if ref.n != n_err:
            raise CompileError(
                f"equal-size contract: reference has {ref.n} samples, window has {n_err}"
            )
    if not include_ks and not include_vote:
        raise CompileError("nothing to compile")
    if include_ks and n_ref < 1:
        raise CompileError("the comparison stage needs at least one reference")

    name = {(True, True): "ks_vote", (True, False): "ks", (False, True): "vote"}[
        (include_ks, include_vote)
    ]
    b = _Builder(name, "ks", strategy)
    zeros3 = b.alloc("zeros3", 3)
    save_l = b.alloc("save_loop", 3)
    save_o = b.alloc("save_offset", 3)
    bnd_rows = []
    cnt_rows = []
    for ref in refs:
        # One ulp up: the strict > compare then counts errors <= boundary.
        bnd_rows.append([min(fx_from_real(v) + 1, 0x7FFFFFFF) for v in ref.boundaries])
        cnt_rows.append([int(c) for c in ref.counts])
    bnds = b.alloc("boundaries", n_ref * bins)
    counts = b.alloc("ref_counts", n_ref * bins)
    if refs:
        b.chunks.append((bnds, np.asarray(bnd_rows, dtype=np.int64).reshape(-1).astype(np.int32)))
        b.chunks.append(
            (counts, (np.asarray(cnt_rows, dtype=np.int64).reshape(-1) * FX_ONE).astype(np.int32))
        )
    preds = b.alloc("predictions", n_err * 6)
    acts = b.alloc("actuals", n_err * 6)
    errs = b.alloc("errors", n_err)
    tmp = b.alloc("tmp", bins)
    acc = b.alloc("observed_hist", bins)
    diff = b.alloc("diff", bins)
    dcell = b.alloc("d_value", 1)
    dvec = b.alloc("d_values", max(n_ref, 1))
    rejects = b.alloc("rejects", max(n_ref, 1))
    votes = b.alloc("votes", 1)
    decision = b.alloc("decision", 1)
    zerocell = b.alloc("zerocell", 1)
    ks_thresh = b.tensor("ks_threshold", [cfg.critical * math.sqrt(2 * n_err)])
    vote_cutoff = n_ref / 2 if cfg.vote_threshold is None else cfg.vote_threshold
    vote_thresh = b.tensor("vote_threshold", [vote_cutoff])
    ed = b.alloc("ed", 6)

    stages = {}
    if include_ks:
        start = len(b.instructions)
        if strategy == "looped":
            b.emit(regload(GROUP_OFFSET, zeros3))  # entry hygiene: offsets <- 0
            outer = b.placeholder_loop(n_ref - 1)
            b.emit(regstore(GROUP_LOOP, save_l))
            b.emit(regstore(GROUP_OFFSET, save_o))
            b.op(Opcode.VSUB, bins, acc, acc, acc)  # zero the observed histogram
            inner = b.placeholder_loop(n_err - 1)
            b.op(Opcode.VSSGT, bins, bnds, errs, tmp, offx=True, offy=True)
            b.op(Opcode.VADD, bins, acc, tmp, acc)
            inner_end = b.emit(regaddi(1, 1))  # next error
            b.patch_loop(inner, inner_end)
            b.emit(regload(GROUP_LOOP, save_l))
            b.emit(regload(GROUP_OFFSET, save_o))
            b.op(Opcode.VSUB, bins, counts, acc, diff, offx=True)
            b.op(Opcode.VMAXABS, bins, diff, 0, dcell)
            b.op(Opcode.VADD, 1, dcell, zerocell, dvec, offz=True)
            b.op(Opcode.VSSGT, 1, dcell, ks_thresh, rejects, offz=True)
            b.emit(regaddi(0, bins))  # next reference row
            outer_end = b.emit(regaddi(2, 1))  # next D/reject slot
            b.patch_loop(outer, outer_end)
        else:
            for i in range(n_err):
                b.op(Opcode.VSUB, 6, preds + 6 * i, acts + 6 * i, ed)
                b.op(Opcode.VSQNORM, 6, ed, 0, errs + i)
            for r in range(n_ref):
                b.op(Opcode.VSUB, bins, acc, acc, acc)
                for i in range(n_err):
                    b.op(Opcode.VSSGT, bins, bnds + r * bins, errs + i, tmp)
                    b.op(Opcode.VADD, bins, acc, tmp, acc)
                b.op(Opcode.VSUB, bins, counts + r * bins, acc, diff)
                b.op(Opcode.VMAXABS, bins, diff, 0, dcell)
                b.op(Opcode.VADD, 1, dcell, zerocell, dvec + r)
                b.op(Opcode.VSSGT, 1, dcell, ks_thresh, rejects + r)
        stages["ks"] = len(b.instructions) - start
    if include_vote:
        start = len(b.instructions)
        b.op(Opcode.VSQNORM, n_ref, rejects, 0, votes)  # reject bits are 0/1
        b.op(Opcode.VSGT, 1, votes, vote_thresh, decision)  # half is inclusive
        stages["vote"] = len(b.instructions) - start
    b.emit(halt())
    prog = b.finish()
    prog.stages = stages
    return prog


def ks_instruction_count(n_ref: int, n_err: int, strategy: str, include_vote=True) -> int:
    if strategy == "looped":
        base = 18  # prologue + nested loop machinery + per-reference tail + halt
    else:
        base = 2 * n_err + n_ref * (2 * n_err + 5) + 1
    return base + (2 if include_vote else 0)


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def compile_model(m: ModelBundle, config: MachineConfig, strategy: str = "looped") -> CompiledProgram:
    if strategy not in ("looped", "unrolled"):
        raise CompileError(f"unknown strategy {strategy!r}")
    if m.kind == "krr":
        raise CompileError(
            "krr is not compilable: its feature extraction needs vector min/max/"
            "sqrt/FFT operations the hardware leaves unimplemented"
        )
    if m.kind == "lr":
        return _compile_lr(m, config)
    if m.kind == "linear_svm":
        return _compile_linear_svm(m, config)
    if m.kind in ("kernel_svm", "ocsvm"):
        return _compile_kernel_machine(m, config, strategy)
    if m.kind == "mlp":
        return _compile_mlp(m, config)
    if m.kind == "lstm":
        return _compile_lstm_step(m, config)
    if m.kind == "gru":
        return _compile_gru_step(m, config)
    raise CompileError(f"unsupported model kind {m.kind!r}")


def code_size_report(programs) -> str:
    """Plain-text size table with looped/unrolled reduction factors."""
    by_name: dict[str, dict[str, CompiledProgram]] = {}
    order = []
    for prog in programs:
        if prog.name not in by_name:
            order.append(prog.name)
        by_name.setdefault(prog.name, {})[prog.strategy] = prog
    lines = [f"{'program':<16} {'looped_B':>9} {'unrolled_B':>11} {'reduction':>10}"]
    for name in order:
        variants = by_name[name]
        looped = variants.get("looped")
        unrolled = variants.get("unrolled")
        lb = looped.code_bytes if looped else None
        ub = unrolled.code_bytes if unrolled else None
        if lb and ub:
            reduction = f"{ub / lb:.1f}X"
        else:
            reduction = "1.0X" if lb else "-"
        lines.append(
            f"{name:<16} {lb if lb is not None else '-':>9} "
            f"{ub if ub is not None else '-':>11} {reduction:>10}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Running compiled programs
# ---------------------------------------------------------------------------

def fresh_state(prog: CompiledProgram, config: MachineConfig) -> MachineState:
    return load(config, prog.instructions, prog.image)


def write_symbol(state: MachineState, prog: CompiledProgram, name: str, values) -> None:
    addr, length = prog.symbols[name]
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) > length:
        raise CompileError(f"symbol {name!r} holds {length} words, got {len(values)}")
    state.memory[addr : addr + len(values)] = fx_array(values)


def read_symbol(state: MachineState, prog: CompiledProgram, name: str, count=None) -> np.ndarray:
    addr, length = prog.symbols[name]
    count = length if count is None else count
    return state.memory[addr : addr + count].astype(np.float64) / FX_ONE


def run_feedforward(prog: CompiledProgram, config: MachineConfig, x, outputs=("decision",)):
    """Load a fresh state, write the input vector, run, read named outputs."""
    state = fresh_state(prog, config)
    write_symbol(state, prog, "input", x)
    run(state)
    return {name: read_symbol(state, prog, name) for name in outputs}, state


class StepRunner:
    """Drives a recurrent step program over a sequence of readings.

    The program keeps h/c/pred in memory and appends one squared error per
    step; the first error (no prior prediction exists) is discarded.
    """

    def __init__(self, prog: CompiledProgram, config: MachineConfig):
        self.prog = prog
        self.state = fresh_state(prog, config)
        self.steps = 0
        self.cycles_per_step: list[int] = []

    def step(self, reading) -> None:
        before = self.state.cycles
        write_symbol(self.state, self.prog, "input", reading)
        self.state.pc = 0  # a new reading re-arms the program counter
        self.state.halted = False
        run(self.state)
        self.cycles_per_step.append(self.state.cycles - before)
        self.steps += 1

    def errors(self) -> np.ndarray:
        raw = read_symbol(self.state, self.prog, "errors", count=self.steps)
        return raw[1:]  # drop the bootstrap error

    def prediction(self) -> np.ndarray:
        return read_symbol(self.state, self.prog, "pred")
