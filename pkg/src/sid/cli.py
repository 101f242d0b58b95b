"""Command-line orchestration: data -> train -> compile -> simulate -> detect.

Every subcommand reads and writes the file formats its module defines; all
randomness flows from --seed. Flags may also come from a key=value config file
(--config); explicit flags win. Exit codes: 0 success, 1 usage error, 2 domain
error (trap, shape mismatch, malformed file), with a one-line `error:` prefix.
"""

import argparse
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codegen, data, detection, energy, isa, machine, models, pipeline, training

DOMAIN_ERRORS = (
    codegen.CompileError,
    data.DataError,
    detection.DetectionError,
    detection.MetricError,
    energy.EnergyError,
    isa.AsmError,
    isa.EncodingError,
    machine.LoadError,
    machine.MachineTrap,
    models.ShapeError,
    pipeline.PipelineError,
    training.TrainingError,
    ValueError,
    OSError,
)

RNN_KINDS = ("lstm", "gru")


@dataclass(frozen=True)
class RunManifest:
    """Validated run parameters shared by the detection subcommands."""

    seed: int
    scenario: str
    model_kind: str
    pipeline: str
    strategy: str
    n_track: int

    def __post_init__(self):
        if self.scenario == "lad" and self.model_kind in pipeline.TWO_CLASS_KINDS:
            raise ManifestError(
                f"scenario lad cannot use two-class kind {self.model_kind!r}"
            )
        if self.scenario == "idaas" and self.model_kind in pipeline.ONE_CLASS_KINDS:
            raise ManifestError(
                f"scenario idaas cannot use one-class kind {self.model_kind!r}"
            )
        if self.pipeline not in pipeline.PIPELINES + ("idaas",):
            raise ManifestError(f"unknown pipeline {self.pipeline!r}")
        if self.strategy not in ("looped", "unrolled"):
            raise ManifestError(f"unknown strategy {self.strategy!r}")
        if self.n_track < 1:
            raise ManifestError("n_track must be >= 1")


class ManifestError(ValueError):
    pass


def _coerce(value: str):
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            continue
    return value


def _apply_config(parser: argparse.ArgumentParser, argv):
    """Pre-parse --config and install its key=value pairs as defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    defaults = {}
    for line_no, raw in enumerate(Path(known.config).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{known.config}: line {line_no}: expected key=value")
        key, _, value = line.partition("=")
        defaults[key.strip().replace("-", "_")] = _coerce(value.strip())
    parser.set_defaults(**defaults)
    for sub in getattr(parser, "_sid_subparsers", []):
        sub.set_defaults(**defaults)


def _out_stream(path):
    return open(path, "w") if path else sys.stdout


def _write(path, text):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    freqs = [float(f) for f in str(args.freqs).split(",")]
    if args.users != len(freqs):
        freqs = list(np.linspace(1.5, 2.3, args.users))
    sequences = data.synth_user_sessions(
        freqs, args.seqs, args.length, args.seed,
        noise_std=args.noise, session_jitter=args.jitter,
    )
    data.hapt_write(args.out, sequences)
    print(f"wrote {len(sequences)} sequences for {args.users} users to {args.out}")
    return 0


def cmd_train(args) -> int:
    sequences = data.hapt_load(args.data)
    users = sorted({s.user for s in sequences})
    user = args.user if args.user is not None else users[0]
    if args.kind in RNN_KINDS:
        own = [s for s in sequences if s.user == user]
        windows = []
        for s in own:
            windows.extend(detection.make_windows(s.readings, args.window, args.step))
        if not windows:
            raise pipeline.PipelineError(f"user {user} has no window of {args.window} readings")
        bundle = training.train(
            args.kind, np.stack(windows),
            {"hidden": args.hidden, "epochs": args.epochs, "lr": args.lr},
            seed=args.seed,
        )
    elif args.kind == "ocsvm":
        own = [s for s in sequences if s.user == user]
        windows = []
        for s in own:
            windows.extend(detection.make_windows(s.readings, args.window, args.step))
        feats = np.stack([w.reshape(-1) for w in windows])
        bundle = training.train(args.kind, feats, {}, seed=args.seed)
    else:
        wins, labels = [], []
        for s in sequences:
            for w in detection.make_windows(s.readings, args.window, args.step):
                wins.append(w)
                labels.append(int(s.user != user))
        if args.kind == "krr":
            feats = np.stack([data.krr_features(w) for w in wins])
        else:
            feats = np.stack([w.reshape(-1) for w in wins])
        hyper = {"epochs": args.epochs} if args.kind != "krr" else {}
        if args.kind == "mlp":
            hyper["sizes"] = [feats.shape[1], args.hidden, 2]
        bundle = training.train(args.kind, (feats, np.asarray(labels)), hyper, seed=args.seed)
    models.save_bundle(args.out, bundle)
    print(f"trained {args.kind} for user {user}: {args.out}")
    return 0


def cmd_compile(args) -> int:
    bundle = models.load_bundle(args.model)
    config = machine.MachineConfig(n_track=args.n_track)
    prog = codegen.compile_model(bundle, config, args.strategy)
    prefix = Path(args.out_prefix)
    isa.save_program(f"{prefix}.prog.bin", prog.instructions)
    machine.save_image(f"{prefix}.image.sidm", prog.image)
    Path(f"{prefix}.symbols.txt").write_text(prog.symbol_table_text())
    Path(f"{prefix}.asm").write_text(isa.disassemble(prog.instructions))
    print(
        f"{prog.name} [{args.strategy}]: {len(prog.instructions)} instructions, "
        f"{prog.code_bytes} bytes"
    )
    return 0


def cmd_sim(args) -> int:
    program = isa.load_program(args.program)
    image = machine.load_image(args.image)
    config = machine.MachineConfig(n_track=args.n_track)
    state = machine.load(config, program, image)
    report = machine.run(state, max_cycles=args.max_cycles)
    sys.stdout.write(report.to_keyvalues())
    digest = hashlib.sha256(state.memory.tobytes()).hexdigest()
    print(f"memory_sha256={digest}")
    return 0


def cmd_detect(args) -> int:
    manifest = RunManifest(
        seed=args.seed,
        scenario=args.scenario,
        model_kind=args.model_kind or ("lstm" if args.scenario == "lad" else "mlp"),
        pipeline=args.pipeline if args.scenario == "lad" else "idaas",
        strategy=args.strategy,
        n_track=args.n_track,
    )
    sequences = data.hapt_load(args.data)
    if manifest.scenario == "lad":
        ks = detection.KsDecisionConfig(
            alpha=args.alpha, refs=args.refs, bins=args.bins
        )
        cfg = pipeline.LadConfig(
            rnn_window=args.window or 200,
            rnn_step=args.step or 100,
            hidden=args.hidden,
            epochs=args.epochs,
            ks=ks,
        )
        bundles = None
        only_user = None
        if args.model:
            bundle = models.load_bundle(args.model)
            users = sorted({s.user for s in sequences})
            only_user = args.user if args.user is not None else users[0]
            bundles = {only_user: bundle}
            if bundle.kind != manifest.model_kind:
                manifest = RunManifest(
                    seed=manifest.seed, scenario="lad", model_kind=bundle.kind,
                    pipeline=manifest.pipeline, strategy=manifest.strategy,
                    n_track=manifest.n_track,
                )
        rows, total = pipeline.run_lad(
            sequences, manifest.model_kind, manifest.pipeline, cfg, args.seed,
            bundles=bundles, only_user=only_user,
        )
    else:
        cfg = pipeline.IdaasConfig(
            window_len=args.window or 64,
            step=args.step or 4,
            hyper={"epochs": args.epochs},
        )
        rows, total = pipeline.run_idaas(sequences, manifest.model_kind, cfg, args.seed)
    summary = {
        "scenario": manifest.scenario,
        "pipeline": manifest.pipeline,
        "model": manifest.model_kind,
        "seed": args.seed,
        **{k: f"{float(v):.6f}" for k, v in pipeline.safe_metrics(total).items()},
    }
    _write(args.out, detection.format_report(rows, summary))
    return 0


def cmd_energy(args) -> int:
    if args.profiles:
        profiles = energy.load_profiles(args.profiles)
    else:
        profiles = {"gpu": energy.GPU_PROFILE, "sid": energy.SID_PROFILE}
    name_a, _, t_a = args.platform_a.partition(":")
    name_b, _, t_b = args.platform_b.partition(":")
    platform_a = [(profiles[name_a], float(t_a or 0.0))]
    platform_b = [(profiles[name_b], float(t_b or 0.0))]
    sys.stdout.write(energy.format_energy_report(platform_a, platform_b, args.period))
    return 0


def cmd_report(args) -> int:
    rng = np.random.default_rng(args.seed)
    config = machine.MachineConfig(n_track=args.n_track)
    programs = []
    for name, sizes in (
        ("mlp_50", [384, 50, 2]),
        ("mlp_500", [384, 500, 2]),
        ("mlp_50_25", [384, 50, 25, 2]),
        ("mlp_200_100", [384, 200, 100, 2]),
    ):
        prog = codegen.compile_model(training.init_mlp(sizes, seed=args.seed), config)
        prog.name = name
        programs.append(prog)
    lstm = codegen.compile_model(training.init_lstm(200, 6, seed=args.seed), config)
    lstm.name = "lstm_200"
    programs.append(lstm)
    svm = models.ModelBundle(
        "kernel_svm",
        {"coef": rng.normal(size=400) / 400, "sv": rng.normal(size=(400, 6)),
         "b": 0.0, "gamma": 0.5},
    )
    for strategy in ("looped", "unrolled"):
        prog = codegen.compile_model(svm, config, strategy)
        prog.name = "kernel_svm_400"
        programs.append(prog)
    ocsvm = models.ModelBundle(
        "ocsvm",
        {"coef": np.abs(rng.normal(size=20)), "sv": rng.normal(size=(20, 20)),
         "rho": 0.5, "gamma": 0.5},
    )
    ocsvm_prog = codegen.compile_model(ocsvm, config)
    ocsvm_prog.name = "ocsvm_after_ks"
    programs.append(ocsvm_prog)
    cfg = detection.KsDecisionConfig()
    refs = [
        detection.build_ped(rng.exponential(size=cfg.window_errors), cfg.bins)
        for _ in range(cfg.refs)
    ]
    for strategy in ("looped", "unrolled"):
        prog = codegen.compile_ks_stage(refs, cfg, strategy, include_vote=False)
        prog.name = "ks_40_20refs"
        programs.append(prog)
    vote = codegen.compile_ks_stage(refs, cfg, include_ks=False)
    vote.name = "vote_ks"
    programs.append(vote)
    _write(args.out, codegen.code_size_report(programs))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sid", description=__doc__)
    parser.add_argument("--config", help="key=value defaults file; flags win")
    sub = parser.add_subparsers(dest="command", required=True)
    parser._sid_subparsers = []
    _add_parser = sub.add_parser

    def add_parser(*a, **kw):
        p = _add_parser(*a, **kw)
        parser._sid_subparsers.append(p)
        return p

    sub.add_parser = add_parser

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--n-track", type=int, default=4)

    p = sub.add_parser("gen-data", help="write a synthetic sensor corpus")
    common(p)
    p.add_argument("--users", type=int, default=2)
    p.add_argument("--seqs", type=int, default=4)
    p.add_argument("--length", type=int, default=1400)
    p.add_argument("--freqs", default="1.6,2.2", help="per-user step frequencies")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--jitter", type=float, default=0.07)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model bundle from a data directory")
    common(p)
    p.add_argument("--kind", required=True, choices=models.KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--user", type=int)
    p.add_argument("--window", type=int, default=200)
    p.add_argument("--step", type=int, default=100)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compile", help="lower a bundle to a program and image")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", choices=("looped", "unrolled"), default="looped")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("sim", help="run a program over a memory image")
    common(p)
    p.add_argument("--program", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--max-cycles", type=int)
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("detect", help="run a detection scenario end to end")
    common(p)
    p.add_argument("--scenario", choices=("lad", "idaas"), required=True)
    p.add_argument("--pipeline", choices=pipeline.PIPELINES, default="vote")
    p.add_argument("--model", help="pre-trained bundle (.sidb)")
    p.add_argument("--model-kind", choices=models.KINDS)
    p.add_argument("--user", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=("looped", "unrolled"), default="looped")
    p.add_argument("--window", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--refs", type=int, default=20)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("energy", help="deployment energy comparison")
    p.add_argument("--profiles", help="device profile table")
    p.add_argument("--platform-a", default="gpu:0.001", help="name:active_seconds")
    p.add_argument("--platform-b", default="sid:0.0016")
    p.add_argument("--period", type=float, default=0.02)
    p.set_defaults(fn=cmd_energy)

    p = sub.add_parser("report", help="code-size table over the standard stages")
    common(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
