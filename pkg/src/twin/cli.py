"""``twin`` command-line front-end.

Exit codes: 0 success, 2 configuration or input error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import io
from .activation import ConductionVelocities, default_roots, solve_eikonal
from .cellular import (
    DiffusiveCurrentParams,
    MsCellModel,
    TableFileError,
    build_lookup_table,
    load_lookup_table,
    save_lookup_table,
)
from .config import ConfigError, RunConfig, config_from_dict, default_config_dict, parse_config
from .ecg import EcgSignal, compute_t_biomarkers, load_ecg, normalize_ecg, pseudo_ecg, save_ecg
from .geometry import default_electrodes, generate_biventricular, generate_slab
from .inference import run_inference, save_population
from .repolarisation import (
    PARAM_NAMES,
    ApdGradientParams,
    assemble_membrane_field,
    compute_apd_map,
    compute_smoothing_weights,
    repolarisation_map,
    smooth_field,
)
from .sensitivity import run_sensitivity, save_sobol_csv
from .simulation import ForwardModel
from .therapy import DrugPipeline, resolve_doses, run_dose_response

log = logging.getLogger("twin")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
RUN_DIRS = ("mesh", "tables", "activation", "inference", "ecg", "drug")
# ST-T search start for standalone biomarker extraction, after QRS onset
DEFAULT_ST_OFFSET = 120.0


class InputError(ValueError):
    """Bad command-line input; maps to the configuration exit code."""


class StageError(RuntimeError):
    pass


def set_threads(requested: int | None) -> int:
    """Cap numba's worker count; ``TWIN_THREADS`` is the fallback for ``--threads``."""
    import numba

    if requested is None:
        env = os.environ.get("TWIN_THREADS")
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise InputError(f"TWIN_THREADS must be an integer, got {env!r}") from None
    available = numba.config.NUMBA_NUM_THREADS
    if requested is None:
        return numba.get_num_threads()
    if requested < 1:
        raise InputError("thread count must be at least 1")
    if requested > available:
        log.warning("capping %d threads at %d available", requested, available)
    n = min(requested, available)
    numba.set_num_threads(n)
    return n


# -- argument helpers ---------------------------------------------------------

def _floats(text: str, n: int | None = None, what: str = "values") -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"cannot parse {what} {text!r}") from None
    if n is not None and len(vals) != n:
        raise InputError(f"expected {n} comma-separated {what}, got {len(vals)}")
    return vals


def _existing(path: str | None, what: str) -> str | None:
    if path is not None and not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _cv(text: str) -> ConductionVelocities:
    return ConductionVelocities(*_floats(text, 3, "conduction velocities"))


def _theta(text: str) -> ApdGradientParams:
    vals = _floats(text, 6, "theta values (" + ",".join(PARAM_NAMES) + ")")
    try:
        return ApdGradientParams.from_array(vals)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load_inputs(args, need_table=True):
    mesh, fibres, coords = io.load_mesh(_existing(args.mesh, "mesh"))
    t_a = io.load_atmap(_existing(args.atmap, "activation map"), mesh.n_nodes)
    table = load_lookup_table(_existing(args.table, "lookup table")) if need_table else None
    if getattr(args, "electrodes", None):
        electrodes = io.load_electrodes(_existing(args.electrodes, "electrodes"))
    else:
        electrodes = default_electrodes(mesh)
    return mesh, fibres, coords, t_a, table, electrodes


def _forward(args, duration=None) -> ForwardModel:
    mesh, fibres, coords, t_a, table, electrodes = _load_inputs(args)
    return ForwardModel.build(mesh, fibres, coords, electrodes, t_a, table, _cv(args.cv),
                              duration=duration or args.duration)


# -- subcommands --------------------------------------------------------------

def cmd_mesh_gen(args) -> None:
    if args.kind == "slab":
        n = int(round(args.size / args.resolution)) + 1
        mesh, fibres, coords = generate_slab(n, n, n, args.resolution, args.fibre_angle)
    else:
        mesh, fibres, coords = generate_biventricular(args.resolution)
    io.save_mesh(args.out, mesh, fibres, coords)
    if args.electrodes_out:
        io.save_electrodes(args.electrodes_out, default_electrodes(mesh))
    if args.roots_out:
        io.save_roots(args.roots_out, default_roots(mesh, coords))
    log.info("mesh: %d nodes, %d tets -> %s", mesh.n_nodes, mesh.n_tets, args.out)


def _apd_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise InputError(f"--apd-range must look like 180:300, got {text!r}") from None
    if not 0 < lo < hi:
        raise InputError("--apd-range needs 0 < lo < hi")
    return lo, hi


def cmd_lookup_build(args) -> None:
    lo, hi = _apd_range(args.apd_range)
    table = build_lookup_table(MsCellModel(), DiffusiveCurrentParams(), lo, hi, beats=args.beats)
    save_lookup_table(table, args.out)
    log.info("table: %d rows, amplitude %.2f -> %s", len(table.apd_values), table.amplitude_scale, args.out)


def cmd_activate(args) -> None:
    mesh, fibres, _ = io.load_mesh(_existing(args.mesh, "mesh"))
    roots = io.load_roots(_existing(args.roots, "roots"), mesh.n_nodes)
    t_a = solve_eikonal(mesh, fibres, _cv(args.cv), roots)
    io.save_atmap(args.out, t_a)
    log.info("activation: max t_a %.1f ms -> %s", t_a.max(), args.out)


def cmd_simulate(args) -> None:
    mesh, fibres, coords = io.load_mesh(_existing(args.mesh, "mesh"))
    t_a = io.load_atmap(_existing(args.atmap, "activation map"), mesh.n_nodes)
    table = load_lookup_table(_existing(args.table, "lookup table"))
    theta = _theta(args.theta)
    theta.check_table(table)
    field = assemble_membrane_field(t_a, compute_apd_map(coords, theta), table, args.duration)
    if not args.no_smoothing:
        field = smooth_field(field, compute_smoothing_weights(mesh, fibres, _cv(args.cv)))
    io.save_field(args.out, field.values)
    if args.emit_rt:
        io.save_node_values(args.emit_rt, repolarisation_map(field), "rt_ms")


def cmd_ecg(args) -> None:
    mesh, fibres, _ = io.load_mesh(_existing(args.mesh, "mesh"))
    values = io.load_field(_existing(args.field, "field"))
    if args.electrodes:
        electrodes = io.load_electrodes(_existing(args.electrodes, "electrodes"))
    else:
        electrodes = default_electrodes(mesh)
    signal = pseudo_ecg(values, mesh, electrodes, fibres, args.diffusivity, _cv(args.cv))
    save_ecg(normalize_ecg(signal), args.out)


def _biomarker_json(signal: EcgSignal, qrs_onset: float, st_start: float) -> dict:
    out = compute_t_biomarkers(signal, qrs_onset, st_start).as_dict()
    out["qrs_onset"] = float(qrs_onset)
    out["st_start"] = float(st_start)
    return out


def cmd_biomarkers(args) -> None:
    signal = load_ecg(_existing(args.ecg, "ECG"))
    st = args.st_start if args.st_start is not None else args.qrs_onset + DEFAULT_ST_OFFSET
    io.write_json(args.out, _biomarker_json(signal, args.qrs_onset, st))


def _run_config(args) -> RunConfig:
    """Config for a single-stage command: ``--config`` file, with ``--seed`` overriding."""
    if args.config:
        cfg = parse_config(_existing(args.config, "config"))
        if args.seed is not None:
            cfg.seed = args.seed
        return cfg
    if args.seed is None:
        raise ConfigError("missing mandatory key(s): seed (pass --seed or --config)")
    return config_from_dict({"seed": args.seed})


def _target_window(fm: ForwardModel, target: EcgSignal) -> EcgSignal:
    if target.duration < fm.duration:
        raise InputError(f"target ECG has {target.duration} samples, simulation needs {fm.duration}")
    return fm.st_segment(EcgSignal(target.leads[:, : fm.duration]))


def _progress_writer(path):
    rows = []

    def callback(pop):
        rows.append((pop.iteration, pop.thresholds[-1], pop.best_history[-1], pop.uniqueness_history[-1]))

    def flush():
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,threshold,best_discrepancy,uniqueness\n")
            for it, thr, best, uniq in rows:
                fh.write(f"{it},{thr!r},{best!r},{uniq!r}\n")

    return callback, flush


def cmd_infer(args) -> None:
    cfg = _run_config(args)
    fm = _forward(args, cfg.simulation.duration)
    target = _target_window(fm, load_ecg(_existing(args.target, "target ECG")))
    callback, flush = _progress_writer(args.progress) if args.progress else (None, None)
    pop = run_inference(fm.st_ecg, target, cfg.inference_config(), callback)
    save_population(pop, args.out)
    if flush:
        flush()
    log.info("inference: %s after %d iterations, best %.4g", pop.termination, pop.iteration, pop.best().discrepancy)


def cmd_sensitivity(args) -> None:
    cfg = _run_config(args)
    fm = _forward(args, cfg.simulation.duration)
    results = run_sensitivity(lambda row: fm.biomarkers(ApdGradientParams.from_array(row)),
                              cfg.bounds_tuple(), args.base_n, cfg.seed)
    save_sobol_csv(results, args.out)


def cmd_drug(args) -> None:
    from .inference import load_population

    pop = load_population(_existing(args.population, "population"))
    fm = _forward(args, args.duration)
    doses = resolve_doses(args.doses if args.doses == "dofetilide" else _existing(args.doses, "dose table"))
    result = run_dose_response(pop, DrugPipeline(fm, duration=args.duration), doses, args.fraction, args.seed)
    result.save_csv(args.out)
    for dose, reason in result.flagged.items():
        log.warning("dose %s flagged: %s", dose, reason)


def cmd_pipeline(args) -> None:
    if args.emit_defaults:
        print(json.dumps(default_config_dict(), indent=1, sort_keys=True))
        return
    if not args.config:
        raise ConfigError("pipeline needs --config (or --emit-defaults)")
    cfg = parse_config(_existing(args.config, "config"))
    if args.out:
        cfg.output_dir = args.out
    run_pipeline(cfg, threads=args.resolved_threads)


# -- pipeline -----------------------------------------------------------------

class _Manifest:
    def __init__(self, cfg: RunConfig, root: Path, threads: int | None):
        self.root = root
        self.data = {"seed": cfg.seed, "config": cfg.to_dict(), "threads": threads,
                     "stages": [], "completed": False}

    def stage(self, name: str, fn):
        t0 = time.perf_counter()
        entry = {"name": name, "status": "running"}
        self.data["stages"].append(entry)
        try:
            outputs = fn() or []
        except Exception as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                         wall_s=time.perf_counter() - t0)
            self.write()
            raise StageError(f"stage {name} failed: {exc}") from exc
        entry.update(status="ok", wall_s=time.perf_counter() - t0,
                     outputs=[str(Path(p).relative_to(self.root)) for p in outputs])
        self.write()
        return outputs

    def write(self):
        io.write_json(self.root / "manifest.json", self.data)


def run_pipeline(cfg: RunConfig, threads: int | None = None) -> Path:
    """Geometry -> lookup table -> activation -> target ECG -> inference -> drug.

    Each stage writes its artifacts under ``cfg.output_dir``; the manifest
    records stage status, wall times, seed and the resolved config.
    """
    root = Path(cfg.output_dir)
    for d in RUN_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    man = _Manifest(cfg, root, threads)
    st = {}
    cv = ConductionVelocities(*cfg.activation.cv)

    def mesh_stage():
        if cfg.mesh.path:
            mesh, fibres, coords = io.load_mesh(cfg.mesh.path)
        elif cfg.mesh.kind == "slab":
            n = int(round(1.0 / cfg.mesh.resolution)) + 1
            mesh, fibres, coords = generate_slab(n, n, n, cfg.mesh.resolution)
        else:
            mesh, fibres, coords = generate_biventricular(cfg.mesh.resolution)
        electrodes = io.load_electrodes(cfg.electrodes.path) if cfg.electrodes.path else default_electrodes(mesh)
        st.update(mesh=mesh, fibres=fibres, coords=coords, electrodes=electrodes)
        paths = [root / "mesh" / "mesh.json", root / "mesh" / "electrodes.json"]
        io.save_mesh(paths[0], mesh, fibres, coords)
        io.save_electrodes(paths[1], electrodes)
        return paths

    def table_stage():
        if cfg.table.path:
            table = load_lookup_table(cfg.table.path)
        else:
            table = build_lookup_table(MsCellModel(), DiffusiveCurrentParams(), *cfg.table.apd_range)
        st["table"] = table
        path = root / "tables" / "table.csv"
        save_lookup_table(table, path)
        return [path]

    def activation_stage():
        mesh = st["mesh"]
        roots = io.load_roots(cfg.activation.roots, mesh.n_nodes) if cfg.activation.roots \
            else default_roots(mesh, st["coords"])
        st["t_a"] = solve_eikonal(mesh, st["fibres"], cv, roots)
        paths = [root / "activation" / "roots.json", root / "activation" / "atmap.csv"]
        io.save_roots(paths[0], roots)
        io.save_atmap(paths[1], st["t_a"])
        return paths

    def target_stage():
        sim = cfg.simulation
        fm = ForwardModel.build(st["mesh"], st["fibres"], st["coords"], st["electrodes"], st["t_a"],
                                st["table"], cv, sim.duration, sim.smoothing, sim.k_self, sim.diffusivity)
        st["forward"] = fm
        if cfg.target.path:
            target = load_ecg(cfg.target.path)
        else:
            target = fm.ecg(ApdGradientParams.from_array(cfg.target.theta))
        st["target"] = _target_window(fm, target)
        path = root / "ecg" / "target.csv"
        save_ecg(EcgSignal(target.leads[:, : fm.duration]), path)
        return [path]

    def inference_stage():
        fm = st["forward"]
        prog = root / "inference" / "progress.csv"
        callback, flush = _progress_writer(prog)
        pop = run_inference(fm.st_ecg, st["target"], cfg.inference_config(), callback)
        st["population"] = pop
        paths = [root / "inference" / "population.csv", prog,
                 root / "ecg" / "best.csv", root / "ecg" / "best_biomarkers.json"]
        save_population(pop, paths[0])
        flush()
        best = fm.ecg(pop.best().theta)
        save_ecg(best, paths[2])
        io.write_json(paths[3], _biomarker_json(best, fm.qrs_onset, fm.st_start))
        return paths

    def sensitivity_stage():
        fm = st["forward"]
        results = run_sensitivity(lambda row: fm.biomarkers(ApdGradientParams.from_array(row)),
                                  cfg.bounds_tuple(), cfg.sensitivity.base_n, cfg.seed)
        (root / "sensitivity").mkdir(exist_ok=True)
        path = root / "sensitivity" / "sobol.csv"
        save_sobol_csv(results, path)
        return [path]

    def drug_stage():
        d = cfg.drug
        pipe = DrugPipeline(st["forward"], share=d.share, duration=d.duration)
        result = run_dose_response(st["population"], pipe, resolve_doses(d.doses), d.fraction, cfg.seed)
        path = root / "drug" / "doseresponse.csv"
        result.save_csv(path)
        if result.flagged:
            raise StageError("doses flagged: " + "; ".join(f"{k}: {v}" for k, v in result.flagged.items()))
        return [path]

    stages = [("mesh", mesh_stage), ("tables", table_stage), ("activation", activation_stage),
              ("ecg", target_stage), ("inference", inference_stage)]
    if cfg.sensitivity.enabled:
        stages.append(("sensitivity", sensitivity_stage))
    if cfg.drug.enabled:
        stages.append(("drug", drug_stage))
    for name, fn in stages:
        log.info("stage %s", name)
        man.stage(name, fn)
    man.data["completed"] = True
    man.write()
    return root


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twin", description="Reaction-Eikonal cardiac digital twin.")
    p.add_argument("--threads", type=int, default=None, help="worker cap (fallback: TWIN_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    cv_default = "0.065,0.044,0.048"

    def forward_args(sp, table=True):
        sp.add_argument("--mesh", required=True)
        sp.add_argument("--atmap", required=True)
        if table:
            sp.add_argument("--table", required=True)
        sp.add_argument("--electrodes", default=None)
        sp.add_argument("--cv", default=cv_default, help="v_f,v_s,v_n in cm/ms")

    sp = sub.add_parser("mesh-gen", help="generate a slab or idealised biventricular mesh")
    sp.add_argument("--kind", choices=("slab", "biv"), default="biv")
    sp.add_argument("--resolution", type=float, default=0.25, help="cm")
    sp.add_argument("--size", type=float, default=1.0, help="slab edge length, cm")
    sp.add_argument("--fibre-angle", type=float, default=0.0, help="slab fibre angle, degrees")
    sp.add_argument("--electrodes-out", default=None)
    sp.add_argument("--roots-out", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mesh_gen)

    sp = sub.add_parser("lookup-build", help="build the APD-indexed action-potential table")
    sp.add_argument("--apd-range", default="180:300")
    sp.add_argument("--beats", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_lookup_build)

    sp = sub.add_parser("activate", help="solve the anisotropic Eikonal equation")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--roots", required=True)
    sp.add_argument("--cv", default=cv_default)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_activate)

    sp = sub.add_parser("simulate", help="assemble and smooth the membrane-potential field")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--atmap", required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--theta", required=True, help=",".join(PARAM_NAMES))
    sp.add_argument("--duration", type=int, default=600)
    sp.add_argument("--cv", default=cv_default)
    sp.add_argument("--no-smoothing", action="store_true")
    sp.add_argument("--emit-rt", default=None, help="also write repolarisation times (CSV)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ecg", help="pseudo-ECG from a field file")
    sp.add_argument("--field", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--electrodes", default=None)
    sp.add_argument("--diffusivity", choices=("identity", "orthotropic"), default="identity")
    sp.add_argument("--cv", default=cv_default)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ecg)

    sp = sub.add_parser("biomarkers", help="T-wave biomarkers of an ECG CSV")
    sp.add_argument("--ecg", required=True)
    sp.add_argument("--qrs-onset", type=float, default=0.0)
    sp.add_argument("--st-start", type=float, default=None,
                    help=f"ST-T window start, ms (default QRS onset + {DEFAULT_ST_OFFSET:g})")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_biomarkers)

    sp = sub.add_parser("infer", help="SMC-ABC inference of APD gradient parameters")
    sp.add_argument("--target", required=True)
    forward_args(sp)
    sp.add_argument("--config", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--progress", default=None, help="per-iteration CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("sensitivity", help="Sobol indices of the T-wave biomarkers")
    forward_args(sp)
    sp.add_argument("--base-n", type=int, default=64)
    sp.add_argument("--config", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("drug", help="dose-response on a sampled sub-population")
    sp.add_argument("--population", required=True)
    forward_args(sp)
    sp.add_argument("--doses", default="dofetilide", help="'dofetilide' or a concentration_nM,block CSV")
    sp.add_argument("--fraction", type=float, default=0.05)
    sp.add_argument("--duration", type=int, default=700)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_drug)

    sp = sub.add_parser("pipeline", help="run every stage from a JSON config")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", default=None, help="override output_dir")
    sp.add_argument("--emit-defaults", action="store_true", help="print a default config and exit")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.resolved_threads = set_threads(args.threads)
        if getattr(args, "duration", 1) < 1:
            raise InputError("--duration must be positive")
        args.func(args)
    except (ConfigError, InputError, io.FormatError, TableFileError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except (ValueError, RuntimeError, ArithmeticError, OSError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
