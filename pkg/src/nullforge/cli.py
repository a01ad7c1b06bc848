"""Command-line front end: ``nullforge {init,analyze,verify,simulate,project}``.

Exit codes: 0 success, 1 a check (or every simulation cell) failed, 2 usage
or I/O error.  Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import adapters, forgetting, oracle, spectral
from .activations import ActivationCapture, left_basis_from_gram, load_capture, make_calibration_set
from .linalg import svd
from .nfm import NfmFormatError, read_nfm

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

SCHEME_ALIASES = {"vanilla": "vanilla_lora", "lora": "vanilla_lora", "corda": "corda_kp", "null": "lora_null"}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _scheme(name: str) -> str:
    name = SCHEME_ALIASES.get(name, name)
    if name not in adapters.SCHEMES:
        raise CliError("usage", f"unknown scheme {name!r}; expected one of {', '.join(adapters.SCHEMES)}")
    return name


def _read_matrix(path):
    try:
        return read_nfm(path)
    except NfmFormatError as exc:
        raise CliError("format", f"{path}: {exc}") from exc
    except OSError as exc:
        raise CliError("io", f"{path}: {exc.strerror or exc}") from exc


def _read_capture(path) -> ActivationCapture:
    try:
        return load_capture(path)
    except NfmFormatError as exc:
        raise CliError("format", f"{path}: {exc}") from exc
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("io", f"cannot load capture {path}: {exc}") from exc


def _guard_outputs(out: Path, names, force: bool) -> None:
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise CliError("exists", f"{out / clash[0]} exists; pass --force to overwrite")


def _lock(out: Path) -> FileLock:
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / ".nullforge.lock"), timeout=0)


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def cmd_init(args) -> int:
    scheme = _scheme(args.scheme)
    w0 = _read_matrix(args.weights)
    cap = None
    if scheme in ("corda_kp", "lora_null"):
        if args.capture:
            cap = _read_capture(args.capture)
        elif args.calibrate:
            cal = make_calibration_set(w0.shape[1], args.samples, args.latent_dim, args.noise, args.seed)
            x = cal.samples
            cap = ActivationCapture(0, x @ x.T, x.shape[1], x, cal.seed, cal.generator_spec)
        else:
            raise CliError("usage", f"scheme {scheme} needs --capture DIR or --calibrate")
    out = Path(args.out)
    try:
        with _lock(out):
            _guard_outputs(out, ["manifest.json", "A.nfm", "B.nfm", "residual.nfm", "W0.nfm"], args.force)
            try:
                bundle = adapters.init_bundle(scheme, w0, args.rank, cap, args.alpha, args.damping, args.seed)
            except ValueError as exc:
                raise CliError("parameter", str(exc)) from exc
            manifest = adapters.save_bundle(out, bundle)
    except Timeout as exc:
        raise CliError("locked", f"{out} is in use by another nullforge process") from exc
    print(f"reconstruction_error {manifest['reconstruction_error']:.17g}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = Path(args.out)
    reports = []
    for path in args.inputs:
        m = _read_matrix(path)
        label = Path(path).stem
        reports.append((label, spectral.spectral_report(m, label)))
    if args.table and len(reports) % 2:
        raise CliError("usage", "--table needs inputs in (weight, activation) pairs")
    names = [f"{label}.json" for label, _ in reports] + [f"{label}_spectrum.csv" for label, _ in reports]
    summary = []
    try:
        with _lock(out):
            _guard_outputs(out, names + (["table.txt"] if args.table else []), args.force)
            for label, rep in reports:
                entry = {"label": label, "effective_rank": rep.effective_rank, "exact_rank": rep.exact_rank}
                summary.append(entry)
                (out / f"{label}.json").write_text(json.dumps(entry, indent=2) + "\n")
                (out / f"{label}_spectrum.csv").write_text(spectral.spectrum_csv(rep))
            if args.table:
                pairs = []
                for (wl, w), (_, x) in zip(reports[::2], reports[1::2]):
                    pairs.append((w, dataclasses.replace(x, label=wl)))
                table = spectral.render_report_table(pairs)
                (out / "table.txt").write_text(table)
                sys.stdout.write(table)
    except Timeout as exc:
        raise CliError("locked", f"{out} is in use by another nullforge process") from exc
    _print_json(summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    cap = _read_capture(args.capture) if args.capture else None
    results = []
    try:
        if args.bundle:
            try:
                bundle = adapters.load_bundle(args.bundle, verify=False)
            except NfmFormatError as exc:
                raise CliError("format", f"{args.bundle}: {exc}") from exc
            except (OSError, KeyError, json.JSONDecodeError) as exc:
                raise CliError("io", f"cannot load bundle {args.bundle}: {exc}") from exc
            except adapters.BundleIntegrityError as exc:
                raise CliError("integrity", str(exc), EXIT_CHECK) from exc
            results = oracle.verify_bundle(bundle, cap, args.candidates, args.seed)
        else:
            if not (args.weights and cap is not None and args.rank):
                raise CliError("usage", "verify needs --bundle DIR, or --weights, --capture and --rank")
            w0 = _read_matrix(args.weights)
            results.append(oracle.check_theorem1(w0, args.rank, args.candidates, args.seed))
            results.append(oracle.check_theorem2(w0, cap, args.rank, args.candidates, args.seed, args.damping))
            results.append(oracle.check_theorem3(w0, cap, args.rank, args.damping, args.seed))
    except ValueError as exc:
        raise CliError("parameter", str(exc)) from exc
    payload = [r.to_json() for r in results]
    if args.out:
        out = Path(args.out)
        _guard_outputs(out.parent, [out.name], args.force)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2) + "\n")
    _print_json(payload)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_simulate(args) -> int:
    schemes = [_scheme(s) for s in args.schemes.split(",") if s]
    if args.seeds < 1:
        raise CliError("usage", "--seeds must be at least 1")
    base = forgetting.BenchmarkConfig()
    cfg = dataclasses.replace(
        base,
        rank=args.rank,
        alpha=args.alpha,
        damping=args.damping,
        overlap_angle=args.overlap_angle,
        finetune=dataclasses.replace(base.finetune, steps=args.steps, learning_rate=args.lr),
    )
    seeds = list(range(args.seed, args.seed + args.seeds))
    out = Path(args.out)
    try:
        with _lock(out):
            _guard_outputs(out, ["summary.csv", "medians.csv"], args.force)
            try:
                reports = forgetting.run_comparison(schemes, seeds, cfg)
            except ValueError as exc:
                raise CliError("parameter", str(exc)) from exc
            forgetting.write_reports(out, reports)
    except Timeout as exc:
        raise CliError("locked", f"{out} is in use by another nullforge process") from exc
    failed = [r for r in reports if r.error is not None]
    for r in failed:
        sys.stderr.write(json.dumps({"cell_error": r.error, "scheme": r.scheme, "seed": r.seed}) + "\n")
    sys.stdout.write((out / "medians.csv").read_text())
    return EXIT_CHECK if len(failed) == len(reports) else EXIT_OK


def cmd_project(args) -> int:
    cap = _read_capture(args.capture)
    try:
        bundle = adapters.load_bundle(args.bundle)
    except NfmFormatError as exc:
        raise CliError("format", f"{args.bundle}: {exc}") from exc
    except adapters.BundleIntegrityError as exc:
        raise CliError("integrity", str(exc)) from exc
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("io", f"cannot load bundle {args.bundle}: {exc}") from exc
    if cap.d_in != bundle.d_in:
        raise CliError("shape", f"capture has d_in={cap.d_in}, bundle has d_in={bundle.d_in}")
    if cap.x_pre is not None:
        u = svd(cap.x_pre, want_full_u=True).u
    else:
        u, _ = left_basis_from_gram(cap)
    pa = forgetting.projection_profile(bundle.a, u)
    out = Path(args.out)
    try:
        with _lock(out):
            _guard_outputs(out, ["pa.csv"], args.force)
            (out / "pa.csv").write_text(forgetting.profile_csv(pa))
    except Timeout as exc:
        raise CliError("locked", f"{out} is in use by another nullforge process") from exc
    total = float(pa.sum())
    trailing = float(pa[bundle.d_in - bundle.r :].sum())
    _print_json({
        "scheme": bundle.scheme,
        "trailing_mass_fraction": trailing / total if total > 0 else math.nan,
        "leading_mass_fraction": (total - trailing) / total if total > 0 else math.nan,
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nullforge", allow_abbrev=False, description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    init = sub.add_parser("init", help="initialize an adapter bundle from a weight file")
    init.add_argument("--weights", required=True)
    init.add_argument("--scheme", required=True)
    init.add_argument("--rank", type=int, required=True)
    init.add_argument("--alpha", type=float, default=1.0)
    init.add_argument("--damping", type=float, default=0.0)
    init.add_argument("--seed", type=int, default=0)
    init.add_argument("--capture")
    init.add_argument("--calibrate", action="store_true", help="draw a synthetic calibration set")
    init.add_argument("--samples", type=int, default=256)
    init.add_argument("--latent-dim", type=int)
    init.add_argument("--noise", type=float, default=1e-3)
    init.add_argument("--out", required=True)
    init.add_argument("--force", action="store_true")
    init.set_defaults(func=cmd_init)

    an = sub.add_parser("analyze", help="effective-rank reports for NFM1 matrices")
    an.add_argument("inputs", nargs="+")
    an.add_argument("--out", required=True)
    an.add_argument("--table", action="store_true", help="render (weight, activation) input pairs as a table")
    an.add_argument("--force", action="store_true")
    an.set_defaults(func=cmd_analyze)

    ver = sub.add_parser("verify", help="run oracle checks")
    ver.add_argument("--bundle")
    ver.add_argument("--weights")
    ver.add_argument("--capture")
    ver.add_argument("--rank", type=int)
    ver.add_argument("--damping", type=float, default=0.0)
    ver.add_argument("--candidates", type=int, default=1000)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out")
    ver.add_argument("--force", action="store_true")
    ver.set_defaults(func=cmd_verify)

    sim = sub.add_parser("simulate", help="run the forgetting benchmark")
    sim.add_argument("--schemes", default=",".join(forgetting.DEFAULT_SCHEMES))
    sim.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    sim.add_argument("--seed", type=int, default=0, help="first seed")
    sim.add_argument("--rank", type=int, default=8)
    sim.add_argument("--alpha", type=float, default=1.0)
    sim.add_argument("--damping", type=float, default=0.0)
    sim.add_argument("--steps", type=int, default=500)
    sim.add_argument("--lr", type=float, default=1e-2)
    sim.add_argument("--overlap-angle", type=float, default=math.pi / 4)
    sim.add_argument("--out", required=True)
    sim.add_argument("--force", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    pr = sub.add_parser("project", help="projection profile of a bundle's A onto X_pre's left basis")
    pr.add_argument("--bundle", required=True)
    pr.add_argument("--capture", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--force", action="store_true")
    pr.set_defaults(func=cmd_project)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return exc.code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io", "message": str(exc)}) + "\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
