"""Command-line entry point.

Subcommands cover the whole pipeline: generate-dataset (Metropolis
reference), train, sample, estimate, verify (property suites and manifest
hash chains), and plot (CSV to SVG). Exit codes: 0 success, 1 runtime
failure, 2 usage error.

Heavy imports happen inside handlers so that the thread budget
(``--threads`` or ``TORUSFLOW_THREADS``) can be exported to the BLAS layer
before numpy first loads.

Every artifact gets a ``<artifact>.manifest.json`` sidecar recording the
resolved configuration, seeds, and sha256 hashes of inputs and outputs.
Volatile facts (timings) live only in the sidecar; the hashes and config
are also embedded in the artifact's own header, which stays deterministic.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

MANIFEST_FORMAT = "torusflow-manifest"
MANIFEST_VERSION = 1

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class CliError(RuntimeError):
    """Raised for CLI-level failures that are not usage errors."""


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _hash_inputs(paths: dict[str, str]) -> dict[str, dict]:
    out = {}
    for name, path in paths.items():
        if not os.path.exists(path):
            raise CliError(f"input {name} not found: {path}")
        out[name] = {"path": path, "sha256": _sha256(path)}
    return out


def _write_manifest(
    anchor_path: str,
    subcommand: str,
    config: dict,
    seeds: dict,
    inputs: dict[str, dict],
    output_paths: list[str],
    elapsed: float,
) -> str:
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": {
            os.path.basename(p): {"path": p, "sha256": _sha256(p)} for p in output_paths
        },
        "elapsed_seconds": round(elapsed, 3),
    }
    path = anchor_path + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _provenance(subcommand: str, inputs: dict[str, dict]) -> dict:
    """Deterministic subset of the manifest for embedding in binary headers."""
    return {
        "subcommand": subcommand,
        "inputs": {name: rec["sha256"] for name, rec in inputs.items()},
    }


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def _build_system(args):
    from .configuration import ipl_system, kob_andersen_system

    if args.system == "ipl":
        density = 0.5 if args.density is None else args.density
        temperature = 0.1 if args.temperature is None else args.temperature
        return ipl_system(args.n, density, temperature)
    density = 1.192075 if args.density is None else args.density
    temperature = 1.0 if args.temperature is None else args.temperature
    return kob_andersen_system(args.n, density, temperature)


def cmd_generate_dataset(args) -> int:
    from dataclasses import asdict

    from .mcmc import McmcConfig, energy_diagnostics, run_chains

    started = time.monotonic()
    system = _build_system(args)
    cfg = McmcConfig(
        n_chains=args.chains,
        equilibration_sweeps=args.equilibration,
        production_sweeps=args.production,
        save_interval_sweeps=args.save_interval,
        displacement_std=args.displacement_std,
        swap_probability=args.swap_probability,
        seed=args.seed,
    )
    inputs: dict[str, dict] = {}
    result = run_chains(
        system, cfg, out_path=args.out, provenance=_provenance("generate-dataset", inputs)
    )
    diags = energy_diagnostics(result.energy_traces, discard=cfg.equilibration_sweeps)
    taus = [d.tau_int for d in diags if not d.stuck]
    print(
        f"wrote {result.n_frames} frames from {cfg.n_chains} chains to {args.out}\n"
        f"displacement acceptance {result.displacement_acceptance:.3f}"
        + (
            f", swap acceptance {result.swap_acceptance:.3f}"
            if result.swap_acceptance is not None
            else ""
        )
        + (
            f"\nenergy autocorrelation time (sweeps): "
            f"min {min(taus):.1f}, max {max(taus):.1f}"
            if taus
            else ""
        )
    )
    manifest = _write_manifest(
        args.out,
        "generate-dataset",
        {**system.to_dict(), "mcmc": asdict(cfg)},
        {"seed": args.seed},
        inputs,
        [args.out],
        time.monotonic() - started,
    )
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    from dataclasses import asdict

    from .configuration import read_dataset
    from .training import TrainConfig, train
    from .velocity_net import GnnConfig, TorusGnn

    started = time.monotonic()
    inputs = _hash_inputs({"dataset": args.data})
    dataset = read_dataset(args.data)
    system = dataset.system
    net_cfg = GnnConfig(
        box_length=system.box_length,
        n_species=system.n_species,
        dim=system.dim,
        depth=args.depth,
        width=args.width,
        edge_dim=args.edge_dim,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        clip_norm=args.clip,
        val_fraction=args.val_fraction,
        seed=args.seed,
        use_ot=not args.no_ot,
        ot_cost=args.ot_cost,
        micro_batch=args.micro_batch,
    )
    model = TorusGnn(net_cfg)
    provenance = _provenance("train", inputs) | {"system": system.to_dict()}
    result = train(
        model,
        system,
        dataset.species,
        dataset.positions,
        train_cfg,
        checkpoint_path=args.out,
        history_path=args.history,
        log_every=args.log_every,
        provenance=provenance,
    )
    print(
        f"trained on {dataset.n_frames} frames; best val loss "
        f"{result.best_val_loss:.6f} at epoch {result.best_epoch}; "
        f"checkpoint: {args.out}"
    )
    outputs = [args.out] + ([args.history] if args.history else [])
    manifest = _write_manifest(
        args.out,
        "train",
        {"network": asdict(net_cfg), "training": asdict(train_cfg)},
        {"seed": args.seed},
        inputs,
        outputs,
        time.monotonic() - started,
    )
    print(f"manifest: {manifest}")
    return 0


def cmd_sample(args) -> int:
    from dataclasses import asdict

    import numpy as np

    from .configuration import system_from_dict
    from .estimators import effective_sample_size
    from .ode_flow import IntegratorConfig, sample_flow
    from .velocity_net import TorusGnn, load_checkpoint

    started = time.monotonic()
    inputs = _hash_inputs({"checkpoint": args.checkpoint})
    net_cfg, params, header = load_checkpoint(args.checkpoint)
    system_dict = header.get("provenance", {}).get("system")
    if system_dict is None:
        if args.data is None:
            raise CliError(
                "checkpoint header lacks a system record; pass --data DATASET"
            )
        from .configuration import read_dataset

        inputs.update(_hash_inputs({"dataset": args.data}))
        system = read_dataset(args.data).system
    else:
        system = system_from_dict(system_dict)
    if abs(system.box_length - net_cfg.box_length) > 1e-9:
        raise CliError(
            f"checkpoint box length {net_cfg.box_length} does not match "
            f"the system box length {system.box_length}"
        )
    ode_cfg = IntegratorConfig(
        rel_tol=args.rtol, abs_tol=args.atol, max_steps=args.max_steps
    )
    model = TorusGnn(net_cfg)

    def progress(done, total, stats):
        if args.progress:
            print(f"  {done}/{total} samples, {stats.n_steps} accepted steps", flush=True)

    # The thread budget becomes the worker-pool size here (one BLAS thread per
    # worker); integration is many independent small problems, so processes
    # beat BLAS parallelism on them.
    n_workers = args.workers
    if n_workers is None:
        n_workers = args.thread_budget if getattr(args, "thread_budget", None) else 1
    samples, stats = sample_flow(
        model,
        params,
        system,
        args.n_samples,
        args.seed,
        ode_cfg,
        chunk_size=args.chunk_size,
        out_path=args.out,
        provenance=_provenance("sample", inputs),
        progress=progress,
        n_workers=n_workers,
    )
    log_w = np.asarray([s.log_target_unnorm - s.log_model_density for s in samples])
    ess = effective_sample_size(log_w)
    print(
        f"wrote {len(samples)} samples to {args.out}\n"
        f"integrator: {stats.n_steps} accepted / {stats.n_rejected} rejected steps, "
        f"{stats.n_evals} field evaluations\n"
        f"effective sample size {ess:.1f} ({100.0 * ess / len(samples):.2f}%)"
    )
    manifest = _write_manifest(
        args.out,
        "sample",
        {
            "n_samples": args.n_samples,
            "chunk_size": args.chunk_size,
            "n_workers": n_workers,
            "integrator": asdict(ode_cfg),
        },
        {"seed": args.seed},
        inputs,
        [args.out],
        time.monotonic() - started,
    )
    print(f"manifest: {manifest}")
    return 0


def _write_csv(path: str, headers: list[str], rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for row in rows:
            writer.writerow([f"{v:.10g}" for v in row])


def cmd_estimate(args) -> int:
    import numpy as np

    from . import estimators as est
    from .configuration import read_dataset
    from .ode_flow import read_samples
    from .svg import Series, write_chart

    started = time.monotonic()
    observables = [o.strip() for o in args.observables.split(",") if o.strip()]
    known = {"u", "cv", "gr", "ess"}
    unknown = set(observables) - known
    if unknown:
        raise CliError(f"unknown observables {sorted(unknown)}; choose from {sorted(known)}")
    inputs = {"samples": {"path": args.samples, "sha256": _sha256(args.samples)}}
    system, samples, _ = read_samples(args.samples)
    reference = None
    if args.reference:
        inputs.update(_hash_inputs({"reference": args.reference}))
        reference = read_dataset(args.reference)
    outputs: list[str] = []

    def emit(name: str, headers: list[str], rows, series: list[Series], **chart_kw):
        csv_path = f"{args.out}_{name}.csv"
        svg_path = f"{args.out}_{name}.svg"
        _write_csv(csv_path, headers, rows)
        write_chart(svg_path, series, **chart_kw)
        outputs.extend([csv_path, svg_path])

    if "u" in observables:
        mean, stderr = est.mean_energy(samples)
        curve = est.mean_energy_curve(samples)
        print(f"mean energy {mean:.6f} +- {stderr:.6f}")
        ref_val = None
        if reference is not None:
            from .potentials import total_energy

            ref_energies = total_energy(
                system.potential, reference.species, reference.positions, system.box_length
            )
            ref_val = float(np.mean(ref_energies))
            print(f"reference mean energy {ref_val:.6f}")
        emit(
            "energy",
            ["n_samples", "mean_energy"],
            curve,
            [Series(curve[:, 0], curve[:, 1], "reweighted")],
            title="Running mean energy",
            x_label="samples",
            y_label="energy",
            log_x=True,
            y_reference=ref_val,
        )

    if "cv" in observables:
        res = est.specific_heat(samples, system.temperature, system.n_particles)
        curve = est.specific_heat_curve(samples, system.temperature, system.n_particles)
        flag = "  [UNRELIABLE: weight collapse]" if res.unreliable else ""
        print(f"specific heat {res.value:.6f} (ESS {res.ess:.1f}){flag}")
        emit(
            "cv",
            ["n_samples", "specific_heat"],
            curve,
            [Series(curve[:, 0], curve[:, 1], "reweighted")],
            title="Running specific heat",
            x_label="samples",
            y_label="c_V",
            log_x=True,
        )

    if "gr" in observables:
        positions = np.stack([s.positions for s in samples])
        direct = est.radial_distribution(positions, system.box_length, args.dr)
        rew = est.radial_distribution_from_samples(samples, system.box_length, args.dr)
        headers = ["r", "g_direct", "g_reweighted"]
        columns = [direct.bin_centers, direct.values, rew.values]
        series = [
            Series(direct.bin_centers, direct.values, "direct"),
            Series(rew.bin_centers, rew.values, "reweighted"),
        ]
        if reference is not None:
            ref_gr = est.radial_distribution(
                reference.positions, system.box_length, args.dr
            )
            headers.append("g_reference")
            columns.append(ref_gr.values)
            series.append(Series(ref_gr.bin_centers, ref_gr.values, "reference", dashed=True))
        emit(
            "gr",
            headers,
            np.stack(columns, axis=1),
            series,
            title="Pair correlation",
            x_label="r",
            y_label="g(r)",
            y_reference=1.0,
        )

    if "ess" in observables:
        curve = est.ess_curve(samples)
        print(f"effective sample size {curve[-1, 1]:.1f} of {len(samples)}")
        emit(
            "ess",
            ["n_samples", "ess"],
            curve,
            [Series(curve[:, 0], curve[:, 1], "ESS")],
            title="Effective sample size",
            x_label="samples",
            y_label="ESS",
            log_x=True,
        )

    manifest = _write_manifest(
        args.out,
        "estimate",
        {"observables": observables, "dr": args.dr},
        {},
        inputs,
        outputs,
        time.monotonic() - started,
    )
    print(f"manifest: {manifest}")
    return 0


def cmd_verify(args) -> int:
    if args.manifest:
        return _verify_manifest(args.manifest)
    from .verify_suite import format_table, run_all

    suites = [s.strip() for s in args.suites.split(",")] if args.suites else None
    results = run_all(quick=args.quick, suites=suites)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def _verify_manifest(path: str) -> int:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CliError(f"not a manifest file: {path}")
    failures = []
    for role in ("inputs", "outputs"):
        for name, rec in manifest.get(role, {}).items():
            file_path = rec["path"]
            if not os.path.exists(file_path):
                failures.append(f"{role[:-1]} {name}: missing file {file_path}")
                continue
            actual = _sha256(file_path)
            if actual != rec["sha256"]:
                failures.append(
                    f"{role[:-1]} {name}: hash mismatch for {file_path} "
                    f"(recorded {rec['sha256'][:12]}, actual {actual[:12]})"
                )
            else:
                print(f"[OK] {role[:-1]} {name}: {file_path}")
    if failures:
        for line in failures:
            print(f"[FAIL] {line}")
        return 1
    print("manifest hash chain verified")
    return 0


def cmd_plot(args) -> int:
    import csv

    from .svg import Series, write_chart

    with open(args.csv, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CliError(f"{args.csv}: empty CSV") from None
        if len(header) < 2:
            raise CliError(f"{args.csv}: need an x column plus at least one series")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CliError(
                    f"{args.csv}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise CliError(f"{args.csv}: row {line_no}: {exc}") from None
    if not rows:
        raise CliError(f"{args.csv}: no data rows")
    import numpy as np

    table = np.asarray(rows)
    series = [
        Series(table[:, 0], table[:, k], header[k]) for k in range(1, len(header))
    ]
    write_chart(
        args.out,
        series,
        title=args.title or "",
        x_label=args.x_label or header[0],
        y_label=args.y_label or "",
        log_x=args.log_x,
    )
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="torusflow",
        description="Equivariant flow sampling for periodic particle systems.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="BLAS/OpenMP thread budget (default: TORUSFLOW_THREADS or library default)",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("generate-dataset", help="run Metropolis chains, write a dataset")
    g.add_argument("--system", choices=("ipl", "ka"), default="ipl")
    g.add_argument("--n", type=int, default=10, help="particle count")
    g.add_argument("--density", type=float, default=None, help="default 0.5 (ipl) / 1.192075 (ka)")
    g.add_argument("--temperature", type=float, default=None, help="default 0.1 (ipl) / 1.0 (ka)")
    g.add_argument("--chains", type=int, default=8)
    g.add_argument("--equilibration", type=int, default=2000)
    g.add_argument("--production", type=int, default=2000)
    g.add_argument("--save-interval", type=int, default=10)
    g.add_argument("--displacement-std", type=float, default=0.065)
    g.add_argument("--swap-probability", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(handler=cmd_generate_dataset)

    t = sub.add_parser("train", help="fit the velocity field on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=2048)
    t.add_argument("--micro-batch", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--clip", type=float, default=2.0)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--width", type=int, default=32)
    t.add_argument("--edge-dim", type=int, default=32)
    t.add_argument("--no-ot", action="store_true", help="disable assignment coupling")
    t.add_argument("--ot-cost", choices=("squared", "plain"), default="squared")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history", default=None, help="CSV loss history path")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(handler=cmd_train)

    s = sub.add_parser("sample", help="integrate base draws through a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rtol", type=float, default=1e-5)
    s.add_argument("--atol", type=float, default=1e-5)
    s.add_argument("--max-steps", type=int, default=100_000)
    s.add_argument("--chunk-size", type=int, default=64)
    s.add_argument(
        "--workers",
        type=int,
        default=None,
        help="integration worker processes (default: the --threads budget, else 1)",
    )
    s.add_argument("--data", default=None, help="dataset fallback for the system record")
    s.add_argument("--progress", action="store_true")
    s.set_defaults(handler=cmd_sample)

    e = sub.add_parser("estimate", help="reweighted observables from a sample file")
    e.add_argument("--samples", required=True)
    e.add_argument("--observables", default="u,cv,gr,ess")
    e.add_argument("--dr", type=float, default=0.05, help="g(r) bin width")
    e.add_argument("--reference", default=None, help="dataset for reference curves")
    e.add_argument("--out", required=True, help="output prefix for CSV/SVG files")
    e.set_defaults(handler=cmd_estimate)

    v = sub.add_parser("verify", help="run property suites or check a manifest")
    v.add_argument("--quick", action="store_true", help="reduced iteration counts")
    v.add_argument(
        "--suites",
        default=None,
        help="comma list: geometry,group,equivariance,gradient,importance",
    )
    v.add_argument("--manifest", default=None, help="verify an artifact hash chain instead")
    v.set_defaults(handler=cmd_verify)

    p = sub.add_parser("plot", help="render a CSV table as an SVG line chart")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default=None)
    p.add_argument("--x-label", default=None)
    p.add_argument("--y-label", default=None)
    p.add_argument("--log-x", action="store_true")
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None:
        env = os.environ.get("TORUSFLOW_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                print(f"error: TORUSFLOW_THREADS must be an integer, got {env!r}", file=sys.stderr)
                return 2
    if threads is not None:
        if threads < 1:
            print("error: thread budget must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    args.thread_budget = threads
    try:
        return args.handler(args)
    except (CliError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # package-domain errors carry their own context
        if type(exc).__module__.startswith("torusflow"):
            print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
