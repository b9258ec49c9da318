"""Command-line entry points.

Subcommands: synth (generate a synthetic trial), track (run the full
pipeline on a recorded trial), analyze (cycle averaging + SVG plots of a
run), compare (agreement statistics between runs), serve (HTTP API for the
labeling UI), bench (latency breakdown).

Exit codes: 0 success, 2 configuration error, 3 tracking lost,
4 solver failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import formats
from .analysis import AnalysisError, segment_cycles
from .camera import CameraError
from .ekf import EkfError
from .model import ModelError, load_bundled
from .pipeline import (PipelineConfig, compare_methods, run_pipeline,
                       run_pipeline_stream, write_comparison_csv,
                       write_outputs)
from .registration import RegistrationError
from .so import SolverError
from .synth import (ScenarioConfig, WorkspaceError, load_scenario,
                    write_dataset)
from .tracking import TrackingLostError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRACKING = 3
EXIT_SOLVER = 4

_CONFIG_ERRORS = (FileNotFoundError, NotADirectoryError, IsADirectoryError,
                  KeyError, TypeError, ValueError, json.JSONDecodeError,
                  formats.FormatError, CameraError, ModelError,
                  WorkspaceError, AnalysisError, RegistrationError)

RUN_QUANTITIES = ("q", "tau", "activations", "muscle_forces")


# -- synth ------------------------------------------------------------------

def _cmd_synth(args) -> int:
    sc = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    noise = sc.noise
    for field, flag in (("pixel_sigma", args.pixel_sigma),
                        ("depth_sigma", args.depth_sigma),
                        ("blob_drop_prob", args.blob_drop),
                        ("frame_drop_prob", args.frame_drop)):
        if flag is not None:
            noise = replace(noise, **{field: flag})
    sc = replace(sc, noise=noise)
    for field, flag in (("duration_s", args.duration),
                        ("cadence_rpm", args.cadence),
                        ("seed", args.seed)):
        if flag is not None:
            sc = replace(sc, **{field: flag})
    model = load_bundled(args.model).with_root_locked()
    paths = write_dataset(args.out, model, sc)
    print(paths["manifest"])
    return EXIT_OK


# -- track / bench ----------------------------------------------------------

def _pipeline_config(args) -> PipelineConfig:
    doc = {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    for key, flag in (("manifest", args.manifest), ("init", args.init),
                      ("output_dir", args.out), ("forces", args.forces),
                      ("emg", args.emg),
                      ("biomech_model", args.biomech_model),
                      ("moving_average_window", args.window)):
        if flag is not None:
            doc[key] = flag
    if args.mvc:
        doc["mvc"] = args.mvc
    if getattr(args, "stream", False):
        doc["stream"] = True
    for key in ("manifest", "init", "output_dir"):
        if key not in doc:
            raise ValueError(f"missing required setting {key!r} "
                             f"(config file or flag)")
    allowed = {"manifest", "init", "output_dir", "forces", "emg", "mvc",
               "biomech_model", "moving_average_window", "endpoint_marker",
               "stream"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**doc)


def _print_latency(latency):
    d = latency.to_dict()
    width = max(len(k) for k in d["stages"])
    print(f"{'stage'.ljust(width)}  mean (ms)  sd (ms)")
    for name, v in d["stages"].items():
        print(f"{name.ljust(width)}  {v['mean_ms']:9.2f}  {v['sd_ms']:7.2f}")
    print(f"{'total'.ljust(width)}  {d['total_mean_ms']:9.2f}  "
          f"{d['total_sd_ms']:7.2f}")
    print(f"filter delay        {d['filter_delay_ms']:9.2f}")
    print(f"motion-to-feedback  {d['motion_to_feedback_ms']:9.2f}")


def _cmd_track(args) -> int:
    config = _pipeline_config(args)
    if config.stream:
        result, paths = run_pipeline_stream(config)
    else:
        result = run_pipeline(config)
        paths = write_outputs(result, config.output_dir)
    _print_latency(result.latency)
    print(paths["q"])
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = _pipeline_config(args)
    result = run_pipeline(config)
    _print_latency(result.latency)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "latency.json")
    with open(path, "w") as f:
        json.dump(result.latency.to_dict(), f, indent=2)
        f.write("\n")
    print(path)
    return EXIT_OK


# -- analyze ----------------------------------------------------------------

def _read_run(rundir: str) -> dict:
    out = {}
    times = None
    for name in RUN_QUANTITIES:
        path = os.path.join(rundir, f"{name}.csv")
        if not os.path.exists(path):
            continue
        cols, t, vals = formats.read_series_csv(path)
        out[name] = vals
        out[f"{name}_columns"] = cols
        times = t
    if times is None:
        raise FileNotFoundError(f"no run outputs found in {rundir!r}")
    out["times"] = times
    return out


def _plot_cycles(path, title, cols, mean, sd):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = np.linspace(0.0, 100.0, mean.shape[0])
    fig, ax = plt.subplots(figsize=(8, 5))
    for c, name in enumerate(cols):
        line, = ax.plot(grid, mean[:, c], label=name, linewidth=1.2)
        ax.fill_between(grid, mean[:, c] - sd[:, c], mean[:, c] + sd[:, c],
                        alpha=0.15, color=line.get_color())
    ax.set_xlabel("cycle (%)")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _cmd_analyze(args) -> int:
    run = _read_run(args.run)
    if args.scenario:
        sc = load_scenario(args.scenario)
        rpm = sc.cadence_rpm
    else:
        rpm = args.cadence
    t = run["times"]
    phase = 2.0 * np.pi * (rpm / 60.0) * (t - t[0])
    os.makedirs(args.out, exist_ok=True)

    long_path = os.path.join(args.out, "cycles.csv")
    with open(long_path, "w", newline="") as f:
        f.write("outcome,channel,cyclePercent,mean,sd\n")
        for name in RUN_QUANTITIES:
            if name not in run:
                continue
            _, mean, sd = segment_cycles(run[name], phase)
            cols = run[f"{name}_columns"]
            grid = np.linspace(0.0, 100.0, mean.shape[0])
            for c, col in enumerate(cols):
                for k in range(grid.size):
                    f.write(f"{name},{col},{grid[k]!r},"
                            f"{mean[k, c]!r},{sd[k, c]!r}\n")
            svg = os.path.join(args.out, f"{name}.svg")
            _plot_cycles(svg, f"{name} mean ± SD over cycles",
                         cols, mean, sd)
            print(svg)
    print(long_path)
    return EXIT_OK


# -- compare ----------------------------------------------------------------

def _cmd_compare(args) -> int:
    run_a = _read_run(args.run_a)
    run_b = _read_run(args.run_b)
    run_ref = _read_run(args.ref)
    quantities = {k: run_ref[k] for k in RUN_QUANTITIES if k in run_ref}
    rows = compare_methods(
        {k: v for k, v in run_a.items() if k in quantities},
        {k: v for k, v in run_b.items() if k in quantities},
        quantities, labels=(args.label_a, args.label_b))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "comparison.csv")
    write_comparison_csv(csv_path, rows)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    names = sorted({r["quantity"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.35
    x = np.arange(len(names))
    for off, tag in ((-width / 2, args.label_a), (width / 2, args.label_b)):
        vals = [next(r["rmsd"] for r in rows
                     if r["quantity"] == n and r["pairing"] == tag)
                for n in names]
        ax.bar(x + off, vals, width, label=tag)
    ax.set_xticks(x, names)
    ax.set_ylabel("RMSD")
    ax.legend()
    fig.tight_layout()
    svg_path = os.path.join(args.out, "comparison.svg")
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    print(csv_path)
    print(svg_path)
    return EXIT_OK


# -- serve -------------------------------------------------------------------

def _cmd_serve(args) -> int:
    import uvicorn

    from .serve import create_app
    app = create_app(args.manifest, args.init_template, args.init_out)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthmocap")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic trial")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenario", help="scenario JSON (flags override)")
    sp.add_argument("--model", default="biomech10")
    sp.add_argument("--duration", type=float)
    sp.add_argument("--cadence", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pixel-sigma", type=float)
    sp.add_argument("--depth-sigma", type=float)
    sp.add_argument("--blob-drop", type=float)
    sp.add_argument("--frame-drop", type=float)
    sp.set_defaults(func=_cmd_synth)

    for name, func, help_ in (("track", _cmd_track, "run the pipeline"),
                              ("bench", _cmd_bench,
                               "run the pipeline and report latency")):
        tp = sub.add_parser(name, help=help_)
        tp.add_argument("--config", help="pipeline config JSON "
                                         "(flags override)")
        tp.add_argument("--manifest")
        tp.add_argument("--init")
        tp.add_argument("--out")
        tp.add_argument("--forces")
        tp.add_argument("--emg")
        tp.add_argument("--mvc", action="append")
        tp.add_argument("--biomech-model")
        tp.add_argument("--window", type=int)
        if name == "track":
            tp.add_argument("--stream", action="store_true",
                            help="append output rows as they finalize")
        tp.set_defaults(func=func)

    ap = sub.add_parser("analyze", help="cycle averages and SVG plots")
    ap.add_argument("--run", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--scenario", help="scenario JSON giving the cadence")
    ap.add_argument("--cadence", type=float, default=60.0)
    ap.set_defaults(func=_cmd_analyze)

    cp = sub.add_parser("compare", help="agreement of two runs vs reference")
    cp.add_argument("--run-a", required=True)
    cp.add_argument("--run-b", required=True)
    cp.add_argument("--ref", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--label-a", default="AvREF")
    cp.add_argument("--label-b", default="BvREF")
    cp.set_defaults(func=_cmd_compare)

    vp = sub.add_parser("serve", help="labeling UI HTTP API")
    vp.add_argument("--manifest", required=True)
    vp.add_argument("--init-template", required=True,
                    help="init file providing areas and starting parameters")
    vp.add_argument("--init-out", required=True,
                    help="path the committed init file is written to")
    vp.add_argument("--host", default="127.0.0.1")
    vp.add_argument("--port", type=int, default=8765)
    vp.set_defaults(func=_cmd_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrackingLostError as e:
        print(f"tracking lost: {e}", file=sys.stderr)
        return EXIT_TRACKING
    except (SolverError, EkfError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except _CONFIG_ERRORS as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
